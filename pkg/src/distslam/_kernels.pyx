# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: cycle-consistency distances and bitset max clique.

Mirrors ``_kernels_py`` numerically.  Singular cycle covariances come back
as ``-1.0`` entries; the Python wrapper turns them into exceptions.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, acos, sin, cos, fabs, INFINITY, NAN

cnp.import_array()

cdef extern from *:
    """
    static inline int dsl_ctz(unsigned long long x) { return __builtin_ctzll(x); }
    static inline int dsl_popcount(unsigned long long x) { return __builtin_popcountll(x); }
    """
    int dsl_ctz(unsigned long long x) nogil
    int dsl_popcount(unsigned long long x) nogil

ctypedef unsigned long long u64

cdef double PI = 3.141592653589793
cdef double PI_MARGIN = 1e-6

cdef struct Pose:
    double R[9]
    double t[3]


cdef inline void load_pose(const double[:, ::1] m, Pose* p) noexcept nogil:
    cdef int r, c
    for r in range(3):
        for c in range(3):
            p.R[3 * r + c] = m[r, c]
        p.t[r] = m[r, 3]


cdef inline void compose(const Pose* a, const Pose* b, Pose* out) noexcept nogil:
    cdef int r, c, k
    cdef double s
    cdef Pose tmp
    for r in range(3):
        for c in range(3):
            s = 0.0
            for k in range(3):
                s += a.R[3 * r + k] * b.R[3 * k + c]
            tmp.R[3 * r + c] = s
        s = a.t[r]
        for k in range(3):
            s += a.R[3 * r + k] * b.t[k]
        tmp.t[r] = s
    out[0] = tmp


cdef inline void invert(const Pose* a, Pose* out) noexcept nogil:
    cdef int r, c
    cdef Pose tmp
    for r in range(3):
        for c in range(3):
            tmp.R[3 * r + c] = a.R[3 * c + r]
    for r in range(3):
        tmp.t[r] = -(tmp.R[3 * r] * a.t[0] + tmp.R[3 * r + 1] * a.t[1] + tmp.R[3 * r + 2] * a.t[2])
    out[0] = tmp


cdef inline void adjoint(const Pose* p, double* ad) noexcept nogil:
    cdef int r, c, k
    cdef double h[9]
    cdef double s
    for r in range(36):
        ad[r] = 0.0
    h[0] = 0.0; h[1] = -p.t[2]; h[2] = p.t[1]
    h[3] = p.t[2]; h[4] = 0.0; h[5] = -p.t[0]
    h[6] = -p.t[1]; h[7] = p.t[0]; h[8] = 0.0
    for r in range(3):
        for c in range(3):
            ad[6 * r + c] = p.R[3 * r + c]
            ad[6 * (r + 3) + c + 3] = p.R[3 * r + c]
            s = 0.0
            for k in range(3):
                s += h[3 * r + k] * p.R[3 * k + c]
            ad[6 * (r + 3) + c] = s


cdef inline void congruence_add(const double* ad, const double* cov, double* out) noexcept nogil:
    """out += ad @ cov @ ad.T"""
    cdef double tmp[36]
    cdef int r, c, k
    cdef double s
    for r in range(6):
        for c in range(6):
            s = 0.0
            for k in range(6):
                s += ad[6 * r + k] * cov[6 * k + c]
            tmp[6 * r + c] = s
    for r in range(6):
        for c in range(6):
            s = 0.0
            for k in range(6):
                s += tmp[6 * r + k] * ad[6 * c + k]
            out[6 * r + c] += s


cdef inline void propagate_add(const Pose* p, const double* cov, double* out) noexcept nogil:
    cdef double ad[36]
    adjoint(p, ad)
    congruence_add(ad, cov, out)


cdef inline int so3_log(const double* R, double* w) noexcept nogil:
    """Returns 1 when the angle is within PI_MARGIN of pi."""
    cdef double c = (R[0] + R[4] + R[8] - 1.0) * 0.5
    cdef double th, f, s[9], nrm, ct
    cdef int i, best
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    th = acos(c)
    if th > PI - PI_MARGIN:
        return 1
    w[0] = 0.5 * (R[7] - R[5])
    w[1] = 0.5 * (R[2] - R[6])
    w[2] = 0.5 * (R[3] - R[1])
    if th < 1e-4:
        f = 1.0 + th * th / 6.0
        w[0] *= f; w[1] *= f; w[2] *= f
        return 0
    if th < 2.5:
        f = th / sin(th)
        w[0] *= f; w[1] *= f; w[2] *= f
        return 0
    ct = cos(th)
    for i in range(9):
        s[i] = 0.5 * (R[i] + R[3 * (i % 3) + i // 3])
    s[0] -= ct; s[4] -= ct; s[8] -= ct
    best = 0
    if s[4] > s[3 * best + best]:
        best = 1
    if s[8] > s[3 * best + best]:
        best = 2
    f = sqrt(s[3 * best + best] * (1.0 - ct))
    cdef double ax0 = s[best] / f, ax1 = s[3 + best] / f, ax2 = s[6 + best] / f
    nrm = sqrt(ax0 * ax0 + ax1 * ax1 + ax2 * ax2)
    ax0 /= nrm; ax1 /= nrm; ax2 /= nrm
    if ax0 * w[0] + ax1 * w[1] + ax2 * w[2] < 0:
        ax0 = -ax0; ax1 = -ax1; ax2 = -ax2
    w[0] = th * ax0; w[1] = th * ax1; w[2] = th * ax2
    return 0


cdef inline int se3_log(const Pose* p, double* xi) noexcept nogil:
    cdef double w[3]
    cdef double th2, th, cc, k[9], k2[9], vinv[9]
    cdef int r, c, m
    if so3_log(p.R, w):
        return 1
    th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    if th2 < 1e-8:
        cc = 1.0 / 12.0 + th2 / 720.0
    else:
        th = sqrt(th2)
        cc = (1.0 - th * sin(th) / (2.0 * (1.0 - cos(th)))) / th2
    k[0] = 0.0; k[1] = -w[2]; k[2] = w[1]
    k[3] = w[2]; k[4] = 0.0; k[5] = -w[0]
    k[6] = -w[1]; k[7] = w[0]; k[8] = 0.0
    for r in range(3):
        for c in range(3):
            k2[3 * r + c] = 0.0
            for m in range(3):
                k2[3 * r + c] += k[3 * r + m] * k[3 * m + c]
    for r in range(9):
        vinv[r] = -0.5 * k[r] + cc * k2[r]
    vinv[0] += 1.0; vinv[4] += 1.0; vinv[8] += 1.0
    for r in range(3):
        xi[r] = w[r]
        xi[3 + r] = vinv[3 * r] * p.t[0] + vinv[3 * r + 1] * p.t[1] + vinv[3 * r + 2] * p.t[2]
    return 0


cdef inline double mahalanobis_sq(const double* xi, double* cov) noexcept nogil:
    """-1 when the covariance is not positive definite."""
    cdef double L[36]
    cdef double y[6]
    cdef int i, j, k
    cdef double s
    for i in range(6):
        for j in range(i + 1):
            s = 0.5 * (cov[6 * i + j] + cov[6 * j + i])
            for k in range(j):
                s -= L[6 * i + k] * L[6 * j + k]
            if i == j:
                if s <= 1e-12:
                    return -1.0
                L[6 * i + i] = sqrt(s)
            else:
                L[6 * i + j] = s / L[6 * j + j]
    s = 0.0
    for i in range(6):
        y[i] = xi[i]
        for k in range(i):
            y[i] -= L[6 * i + k] * y[k]
        y[i] /= L[6 * i + i]
        s += y[i] * y[i]
    return s


cdef inline int chain_relative(const double[:, :, ::1] poses, const double[:, :, ::1] prefix,
                               const long long[::1] seg, long long a, long long b,
                               Pose* out, double* cov) noexcept nogil:
    cdef long long lo = a, hi = b
    cdef Pose plo, phi, inv_hi, fwd
    cdef double diff[36]
    cdef int r, c
    if a > b:
        lo = b
        hi = a
    if seg[hi] > lo:
        return 1
    load_pose(poses[lo], &plo)
    load_pose(poses[hi], &phi)
    invert(&plo, &fwd)
    compose(&fwd, &phi, &fwd)
    invert(&phi, &inv_hi)
    for r in range(6):
        for c in range(6):
            diff[6 * r + c] = prefix[hi, r, c] - prefix[lo, r, c]
    for r in range(36):
        cov[r] = 0.0
    propagate_add(&inv_hi, diff, cov)
    if a <= b:
        out[0] = fwd
        return 0
    cdef double tmp[36]
    for r in range(36):
        tmp[r] = cov[r]
        cov[r] = 0.0
    propagate_add(&fwd, tmp, cov)
    invert(&fwd, out)
    return 0


cdef inline double cycle_sq(const Pose* oa, const double* ca, const Pose* l1, const double* c1,
                            const Pose* ob, const double* cb, const Pose* l2, const double* c2) noexcept nogil:
    cdef Pose tail1, tail2, tail3, cycle, inv_t
    cdef double sigma[36]
    cdef double xi[6]
    cdef int r
    for r in range(36):
        sigma[r] = 0.0
    invert(l2, &tail3)
    compose(ob, &tail3, &tail2)
    compose(l1, &tail2, &tail1)
    compose(oa, &tail1, &cycle)
    invert(&tail1, &inv_t)
    propagate_add(&inv_t, ca, sigma)
    invert(&tail2, &inv_t)
    propagate_add(&inv_t, c1, sigma)
    propagate_add(l2, cb, sigma)   # inverse(tail3) == l2
    propagate_add(l2, c2, sigma)
    if se3_log(&cycle, xi):
        return INFINITY
    return mahalanobis_sq(xi, sigma)


def cycle_sq_distances(ia, kb, lc_poses, lc_covs, pa, sa, sega, pb, sb, segb):
    cdef const long long[::1] ia_v = np.ascontiguousarray(ia, dtype=np.int64)
    cdef const long long[::1] kb_v = np.ascontiguousarray(kb, dtype=np.int64)
    cdef const double[:, :, ::1] lcp = np.ascontiguousarray(lc_poses, dtype=np.float64)
    cdef const double[:, :, ::1] lcc = np.ascontiguousarray(lc_covs, dtype=np.float64)
    cdef const double[:, :, ::1] pa_v = np.ascontiguousarray(pa, dtype=np.float64)
    cdef const double[:, :, ::1] sa_v = np.ascontiguousarray(sa, dtype=np.float64)
    cdef const long long[::1] sega_v = np.ascontiguousarray(sega, dtype=np.int64)
    cdef const double[:, :, ::1] pb_v = np.ascontiguousarray(pb, dtype=np.float64)
    cdef const double[:, :, ::1] sb_v = np.ascontiguousarray(sb, dtype=np.float64)
    cdef const long long[::1] segb_v = np.ascontiguousarray(segb, dtype=np.int64)
    cdef Py_ssize_t n = ia_v.shape[0]
    out = np.zeros((n, n))
    cdef double[:, ::1] o = out
    cdef Pose oa, ob, l1, l2
    cdef double ca[36]
    cdef double cb[36]
    cdef double cov1[36]
    cdef double cov2[36]
    cdef Py_ssize_t i, j, r, c
    cdef double d
    with nogil:
        for i in range(n):
            load_pose(lcp[i], &l1)
            for r in range(6):
                for c in range(6):
                    cov1[6 * r + c] = lcc[i, r, c]
            for j in range(i + 1, n):
                load_pose(lcp[j], &l2)
                for r in range(6):
                    for c in range(6):
                        cov2[6 * r + c] = lcc[j, r, c]
                if (chain_relative(pa_v, sa_v, sega_v, ia_v[j], ia_v[i], &oa, ca)
                        or chain_relative(pb_v, sb_v, segb_v, kb_v[i], kb_v[j], &ob, cb)):
                    d = NAN
                else:
                    d = cycle_sq(&oa, ca, &l1, cov1, &ob, cb, &l2, cov2)
                o[i, j] = d
                o[j, i] = d
    return out


# -- maximum clique on 64-bit bitsets ------------------------------------------

cdef int color_sort(u64 p, const u64* nbr, int* order, int* colors) noexcept nogil:
    cdef int count = 0, color = 0, v
    cdef u64 uncolored = p, q, low
    while uncolored:
        color += 1
        q = uncolored
        while q:
            low = q & (~q + 1)
            v = dsl_ctz(q)
            q &= ~low & ~nbr[v]
            uncolored &= ~low
            order[count] = v
            colors[count] = color
            count += 1
    return count


cdef void expand(int size, u64 p, const u64* nbr, int* best) noexcept nogil:
    cdef int order[64]
    cdef int colors[64]
    cdef int cnt = color_sort(p, nbr, order, colors)
    cdef int idx, v
    cdef u64 newp
    for idx in range(cnt - 1, -1, -1):
        if size + colors[idx] <= best[0]:
            return
        v = order[idx]
        newp = p & nbr[v]
        if newp:
            expand(size + 1, newp, nbr, best)
        elif size + 1 > best[0]:
            best[0] = size + 1
        p &= ~((<u64>1) << v)


cdef int num_colors(u64 p, const u64* nbr) noexcept nogil:
    cdef int order[64]
    cdef int colors[64]
    cdef int cnt = color_sort(p, nbr, order, colors)
    if cnt == 0:
        return 0
    return colors[cnt - 1]


cdef int lex_dfs(int depth, int target, u64 p, const u64* nbr, int* chosen) noexcept nogil:
    cdef int need = target - depth
    cdef int v
    cdef u64 low, newp
    if need == 0:
        return 1
    while p:
        if dsl_popcount(p) < need:
            return 0
        low = p & (~p + 1)
        v = dsl_ctz(p)
        p ^= low
        newp = p & nbr[v]
        if need == 1 or num_colors(newp, nbr) >= need - 1:
            chosen[depth] = v
            if lex_dfs(depth + 1, target, newp, nbr, chosen):
                return 1
    return 0


def max_clique_exact(adj):
    """Maximum clique with lexicographic tie-break; at most 64 vertices."""
    a = np.ascontiguousarray(adj, dtype=np.uint8)
    cdef Py_ssize_t n = a.shape[0]
    if n > 64:
        raise ValueError("compiled clique kernel handles at most 64 vertices")
    cdef const unsigned char[:, ::1] av = a
    cdef u64 nbr[64]
    cdef int chosen[64]
    cdef Py_ssize_t i, j
    cdef int best = 0
    cdef u64 full
    for i in range(n):
        nbr[i] = 0
        for j in range(n):
            if j != i and av[i, j]:
                nbr[i] |= (<u64>1) << j
    if n == 0:
        return []
    full = ~(<u64>0) if n == 64 else (((<u64>1) << n) - 1)
    with nogil:
        expand(0, full, nbr, &best)
        lex_dfs(0, best, full, nbr, chosen)
    return [chosen[i] for i in range(best)]
