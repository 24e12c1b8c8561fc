"""Pure-Python implementations of the hot kernels.

Same signatures as the compiled ``_kernels`` extension; used when the
extension is not built or ``DISTSLAM_PURE_PYTHON=1`` is set.
"""

from __future__ import annotations

import math

import numpy as np

from . import se3
from .errors import AngleNearPi
from .se3 import Pose3


def chain_relative(poses, prefix, seg, a, b):
    """Odometric transform and covariance from offset ``a`` to ``b`` (either order).

    Returns ``None`` when a gap separates the two keyframes.
    """
    lo, hi = (a, b) if a <= b else (b, a)
    if seg[hi] > lo:
        return None
    plo = Pose3.from_matrix(poses[lo])
    phi = Pose3.from_matrix(poses[hi])
    fwd = se3.between(plo, phi)
    cov = se3.propagate_covariance(se3.inverse(phi), prefix[hi] - prefix[lo])
    if a <= b:
        return fwd, cov
    return se3.inverse(fwd), se3.propagate_covariance(fwd, cov)


def cycle_sq_distance(odo_a, cov_a, lc1, cov1, odo_b, cov_b, lc2, cov2) -> float:
    """Squared Mahalanobis norm of ``(odo_a * lc1 * odo_b) * lc2^-1``.

    Each factor carries a right-tangent covariance; they are moved to the
    right end of the cycle with adjoints and summed.
    """
    lc2_inv = se3.inverse(lc2)
    tail3 = lc2_inv
    tail2 = se3.compose(odo_b, tail3)
    tail1 = se3.compose(lc1, tail2)
    cycle = se3.compose(odo_a, tail1)
    sigma = (
        se3.propagate_covariance(se3.inverse(tail1), cov_a)
        + se3.propagate_covariance(se3.inverse(tail2), cov1)
        + se3.propagate_covariance(se3.inverse(tail3), cov_b)
        + se3.propagate_covariance(lc2, cov2)
    )
    try:
        xi = se3.log_map(cycle)
    except AngleNearPi:
        return math.inf
    return se3.mahalanobis_sq(xi, sigma)


def cycle_sq_distances(ia, kb, lc_poses, lc_covs, pa, sa, sega, pb, sb, segb):
    """All canonical-order pair distances for one robot pair.

    Entry ``[c1, c2]`` (``c1 < c2``) uses candidate ``c1`` as the first loop
    closure of the cycle; the lower triangle mirrors it.  ``nan`` marks a pair
    whose odometric segment crosses a chain gap.
    """
    n = len(ia)
    out = np.zeros((n, n))
    lcs = [Pose3.from_matrix(m) for m in lc_poses]
    for c1 in range(n):
        for c2 in range(c1 + 1, n):
            ra = chain_relative(pa, sa, sega, ia[c2], ia[c1])
            rb = chain_relative(pb, sb, segb, kb[c1], kb[c2])
            if ra is None or rb is None:
                d = math.nan
            else:
                d = cycle_sq_distance(ra[0], ra[1], lcs[c1], lc_covs[c1], rb[0], rb[1], lcs[c2], lc_covs[c2])
            out[c1, c2] = out[c2, c1] = d
    return out


# -- maximum clique -----------------------------------------------------------

def _color_bound(p, nbr):
    """Greedy sequential coloring of the vertices in ``p``.

    Returns vertices and their color numbers in non-decreasing color order.
    """
    order, colors = [], []
    uncolored = p
    color = 0
    while uncolored:
        color += 1
        q = uncolored
        while q:
            low = q & -q
            v = low.bit_length() - 1
            q &= ~low & ~nbr[v]
            uncolored &= ~low
            order.append(v)
            colors.append(color)
    return order, colors


def clique_number(nbr, n):
    best = [0]

    def expand(size, p):
        order, colors = _color_bound(p, nbr)
        for idx in range(len(order) - 1, -1, -1):
            if size + colors[idx] <= best[0]:
                return
            v = order[idx]
            newp = p & nbr[v]
            if newp:
                expand(size + 1, newp)
            elif size + 1 > best[0]:
                best[0] = size + 1
            p &= ~(1 << v)

    if n:
        expand(0, (1 << n) - 1)
    return best[0]


def _num_colors(p, nbr):
    colors = _color_bound(p, nbr)[1]
    return colors[-1] if colors else 0


def lex_first_clique(nbr, n, target):
    """Lexicographically smallest sorted clique of size ``target``.

    Cliques are enumerated as increasing index sequences, smallest first, so
    the first one reaching ``target`` wins.
    """
    found = []

    def dfs(chosen, p):
        need = target - len(chosen)
        if need == 0:
            found.extend(chosen)
            return True
        while p:
            if bin(p).count("1") < need:
                return False
            low = p & -p
            v = low.bit_length() - 1
            p ^= low
            newp = p & nbr[v]
            if need == 1 or _num_colors(newp, nbr) >= need - 1:
                if dfs(chosen + [v], newp):
                    return True
        return False

    if n and target:
        dfs([], (1 << n) - 1)
    return found


def max_clique_exact(adj):
    adj = np.asarray(adj, dtype=bool)
    n = adj.shape[0]
    nbr = [sum(1 << int(j) for j in np.flatnonzero(adj[i]) if j != i) for i in range(n)]
    omega = clique_number(nbr, n)
    return lex_first_clique(nbr, n, omega)
