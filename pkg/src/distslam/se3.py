"""SE(3) arithmetic on rotation matrices.

Tangent vectors are 6-vectors ordered ``[omega, v]`` (rotation first, radians;
translation second, meters).  Perturbations act on the right:
``X_perturbed = X * Exp(xi)``.  Covariances live in that same right tangent
space, so composing ``A * B`` moves ``A``'s uncertainty through
``Ad(B^-1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, SingularCovariance

PI_MARGIN = 1e-6
_SMALL = 1e-8


def hat(w):
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform ``p_world = R p_body + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Pose3:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: Pose3) -> Pose3:
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            bool(np.all(np.isfinite(r)))
            and bool(np.all(np.isfinite(self.translation)))
            and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __repr__(self):
        w = so3_log(self.rotation) if rotation_angle(self.rotation) < math.pi - PI_MARGIN else None
        return f"Pose3(rotvec={w}, t={self.translation})"


def compose(a: Pose3, b: Pose3) -> Pose3:
    return Pose3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose3) -> Pose3:
    rt = a.rotation.T
    return Pose3(rt, -rt @ a.translation)


def between(a: Pose3, b: Pose3) -> Pose3:
    """``a^-1 * b``."""
    rt = a.rotation.T
    return Pose3(rt @ b.rotation, rt @ (b.translation - a.translation))


def rotation_angle(r) -> float:
    c = (np.trace(r) - 1.0) * 0.5
    return math.acos(min(1.0, max(-1.0, c)))


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th2 = float(w @ w)
    k = hat(w)
    if th2 < _SMALL:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        th = math.sqrt(th2)
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / th2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    th = rotation_angle(r)
    if th > math.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {th!r} within {PI_MARGIN} of pi")
    if th < 1e-4:
        return 0.5 * (1.0 + th * th / 6.0) * vee(r - r.T)
    if th < 2.5:
        return th / (2.0 * math.sin(th)) * vee(r - r.T)
    # sin(th) is small here; read the axis off the symmetric part instead
    s = 0.5 * (r + r.T) - math.cos(th) * np.eye(3)
    i = int(np.argmax(np.diag(s)))
    axis = s[:, i] / math.sqrt(s[i, i] * (1.0 - math.cos(th)))
    axis /= np.linalg.norm(axis)
    if axis @ vee(r - r.T) < 0:
        axis = -axis
    return th * axis


def _v_matrix(w):
    th2 = float(w @ w)
    k = hat(w)
    if th2 < _SMALL:
        b = 0.5 - th2 / 24.0
        c = 1.0 / 6.0 - th2 / 120.0
    else:
        th = math.sqrt(th2)
        b = (1.0 - math.cos(th)) / th2
        c = (th - math.sin(th)) / (th2 * th)
    return np.eye(3) + b * k + c * (k @ k)


def _v_inverse(w):
    th2 = float(w @ w)
    k = hat(w)
    if th2 < _SMALL:
        c = 1.0 / 12.0 + th2 / 720.0
    else:
        th = math.sqrt(th2)
        c = (1.0 - th * math.sin(th) / (2.0 * (1.0 - math.cos(th)))) / th2
    return np.eye(3) - 0.5 * k + c * (k @ k)


def exp_map(xi) -> Pose3:
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    return Pose3(so3_exp(w), _v_matrix(w) @ v)


def log_map(a: Pose3) -> np.ndarray:
    w = so3_log(a.rotation)
    return np.concatenate([w, _v_inverse(w) @ a.translation])


def adjoint(a: Pose3) -> np.ndarray:
    r = a.rotation
    ad = np.zeros((6, 6))
    ad[:3, :3] = r
    ad[3:, 3:] = r
    ad[3:, :3] = hat(a.translation) @ r
    return ad


def ad_twist(xi) -> np.ndarray:
    """Lie-bracket matrix ``ad(xi)`` so that ``[xi, eta] = ad(xi) @ eta``."""
    xi = np.asarray(xi, dtype=float)
    m = np.zeros((6, 6))
    wh = hat(xi[:3])
    m[:3, :3] = wh
    m[3:, 3:] = wh
    m[3:, :3] = hat(xi[3:])
    return m


def right_jacobian_inv(xi) -> np.ndarray:
    """Second-order approximation of the inverse right Jacobian of SE(3)."""
    return np.eye(6) + 0.5 * ad_twist(xi)


def propagate_covariance(pose: Pose3, cov) -> np.ndarray:
    ad = adjoint(pose)
    out = ad @ np.asarray(cov, dtype=float) @ ad.T
    return 0.5 * (out + out.T)


def mahalanobis_sq(residual, cov) -> float:
    residual = np.asarray(residual, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)) or np.linalg.eigvalsh(cov)[0] <= 1e-12:
        raise SingularCovariance("covariance smallest eigenvalue not above 1e-12")
    y = np.linalg.solve(np.linalg.cholesky(cov), residual)
    return float(y @ y)


def random_pose(rng, rot_scale=math.pi / 2, trans_scale=5.0) -> Pose3:
    w = rng.normal(size=3)
    w *= rng.uniform(0, rot_scale) / max(np.linalg.norm(w), 1e-12)
    return Pose3(so3_exp(w), rng.uniform(-trans_scale, trans_scale, size=3))


def project_to_so3(m) -> np.ndarray:
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt
