import math

import numpy as np
import pytest
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation

from distslam import se3
from distslam.errors import AngleNearPi, SingularCovariance
from distslam.se3 import Pose3


def rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def twist_matrix(xi):
    m = np.zeros((4, 4))
    m[:3, :3] = se3.hat(xi[:3])
    m[:3, 3] = xi[3:]
    return m


def test_compose_quarter_turns():
    # hand-derived: two (90 deg about z, +x) steps give (180 deg about z, (1, 1, 0))
    a = Pose3(rz(90), [1, 0, 0])
    c = se3.compose(a, a)
    assert np.allclose(c.rotation, rz(180), atol=1e-12)
    assert np.allclose(c.translation, [1, 1, 0], atol=1e-12)
    assert np.allclose(c.matrix(), a.matrix() @ a.matrix())


def test_inverse_quarter_turn():
    a = Pose3(rz(90), [1, 0, 0])
    inv = se3.inverse(a)
    assert np.allclose(inv.rotation, rz(-90), atol=1e-12)
    assert np.allclose(inv.translation, [0, 1, 0], atol=1e-12)
    assert np.allclose(inv.matrix(), np.linalg.inv(a.matrix()))


def test_group_axioms(rng):
    for _ in range(50):
        a, b, c = (se3.random_pose(rng) for _ in range(3))
        left = se3.compose(se3.compose(a, b), c).matrix()
        right = se3.compose(a, se3.compose(b, c)).matrix()
        assert np.allclose(left, right, atol=1e-12)
        assert np.allclose(se3.compose(a, se3.inverse(a)).matrix(), np.eye(4), atol=1e-12)
        assert np.allclose(se3.compose(Pose3.identity(), a).matrix(), a.matrix())
        assert np.allclose(se3.between(a, b).matrix(), np.linalg.inv(a.matrix()) @ b.matrix(), atol=1e-12)


def test_exp_matches_matrix_exponential(rng):
    for _ in range(200):
        xi = np.concatenate([rng.normal(size=3) * 0.8, rng.normal(size=3) * 3])
        assert np.allclose(se3.exp_map(xi).matrix(), expm(twist_matrix(xi)), atol=1e-10)


def test_log_matches_matrix_logarithm(rng):
    for _ in range(50):
        p = se3.random_pose(rng, rot_scale=2.5)
        ref = np.real(logm(p.matrix()))
        xi = se3.log_map(p)
        assert np.allclose(twist_matrix(xi), ref, atol=1e-8)


def test_exp_log_round_trip(rng):
    worst = 0.0
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, math.pi - 0.05) / np.linalg.norm(w)
        xi = np.concatenate([w, rng.uniform(-10, 10, 3)])
        worst = max(worst, float(np.max(np.abs(se3.log_map(se3.exp_map(xi)) - xi))))
    assert worst < 1e-9


def test_small_angle_branch():
    for eps in (0.0, 1e-12, 1e-9, 1e-6):
        xi = np.array([eps, -eps, eps / 2, 1.0, 2.0, 3.0])
        assert np.allclose(se3.exp_map(xi).matrix(), expm(twist_matrix(xi)), atol=1e-12)
        assert np.allclose(se3.log_map(se3.exp_map(xi)), xi, atol=1e-12)


def test_log_near_pi_raises():
    p = Pose3(se3.so3_exp([math.pi - 1e-9, 0, 0]), [0, 0, 0])
    with pytest.raises(AngleNearPi):
        se3.log_map(p)


def test_adjoint_moves_twists(rng):
    # X exp(xi) X^-1 == exp(Ad(X) xi)
    for _ in range(50):
        x = se3.random_pose(rng)
        xi = rng.normal(size=6) * 0.3
        lhs = x.matrix() @ expm(twist_matrix(xi)) @ np.linalg.inv(x.matrix())
        assert np.allclose(lhs, expm(twist_matrix(se3.adjoint(x) @ xi)), atol=1e-9)


def test_right_jacobian_inverse_second_order(rng):
    # log(exp(xi) exp(d)) ~ xi + Jr^-1(xi) d; the approximation error is O(|xi|^2 |d|)
    xi = rng.normal(size=6) * 0.05
    d = rng.normal(size=6) * 1e-6
    exact = se3.log_map(se3.compose(se3.exp_map(xi), se3.exp_map(d)))
    approx = xi + se3.right_jacobian_inv(xi) @ d
    assert np.max(np.abs(exact - approx)) < 1e-8


def test_mahalanobis_worked_example():
    cov = np.diag([0.01**2] * 3 + [0.1**2] * 3)
    r = np.array([0, 0, 0, 3.0, 0, 0])
    assert se3.mahalanobis_sq(r, cov) == pytest.approx(900.0, rel=1e-12)


def test_mahalanobis_frame_invariance(rng):
    a = rng.normal(size=(6, 6))
    cov = a @ a.T + 0.1 * np.eye(6)
    r = rng.normal(size=6)
    x = se3.random_pose(rng)
    ad = se3.adjoint(x)
    d_body = se3.mahalanobis_sq(r, cov)
    d_world = se3.mahalanobis_sq(ad @ r, se3.propagate_covariance(x, cov))
    assert d_world == pytest.approx(d_body, rel=1e-9)


def test_propagate_keeps_spectrum_for_pure_rotation(rng):
    cov = np.diag([1e-4] * 3 + [1e-2] * 3)
    x = Pose3(se3.random_pose(rng).rotation, np.zeros(3))
    out = se3.propagate_covariance(x, cov)
    assert np.allclose(np.sort(np.linalg.eigvalsh(out)), np.sort(np.diag(cov)), rtol=1e-10)
    assert np.allclose(out, out.T)


def test_singular_covariance_rejected():
    with pytest.raises(SingularCovariance):
        se3.mahalanobis_sq(np.ones(6), np.diag([1, 1, 1, 1, 1, 0.0]))


def test_project_to_so3(rng):
    r = se3.random_pose(rng).rotation
    noisy = r + 1e-3 * rng.normal(size=(3, 3))
    p = se3.project_to_so3(noisy)
    assert np.allclose(p.T @ p, np.eye(3), atol=1e-12)
    assert np.linalg.det(p) == pytest.approx(1.0)
    assert np.max(np.abs(p - r)) < 1e-2
