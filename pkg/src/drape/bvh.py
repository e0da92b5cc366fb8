"""Bounding volume hierarchy over triangle soups.

Binned-SAH construction, bottom-up refit for deforming geometry with fixed
topology, watertight ray/triangle intersection and closest-point queries.
The traversal kernels are plain ``njit`` functions so other kernels (AO
baking, collision projection) can call them directly.
"""
from __future__ import annotations

import numba as nb
import numpy as np

N_BINS = 16
LEAF_MIN = 2
LEAF_MAX = 8
# cost of visiting a node relative to one triangle test, in the SAH
TRAVERSAL_COST = 1.0
STACK = 128
# conservative far-slab padding against rounding in the box test
PAD = 1.0 + 1e-15
BIG = 1e300


@nb.njit(cache=True, error_model="numpy")
def _tri_bounds(pos, tris, prims, start, end, lo, hi):
    for k in range(3):
        lo[k] = np.inf
        hi[k] = -np.inf
    for i in range(start, end):
        t = prims[i]
        for c in range(3):
            v = tris[t, c]
            for k in range(3):
                x = pos[v, k]
                if x < lo[k]:
                    lo[k] = x
                if x > hi[k]:
                    hi[k] = x


@nb.njit(inline="always", error_model="numpy")
def _area(lo0, lo1, lo2, hi0, hi1, hi2):
    if hi0 < lo0:
        return 0.0
    dx, dy, dz = hi0 - lo0, hi1 - lo1, hi2 - lo2
    return 2.0 * (dx * dy + dy * dz + dz * dx)


@nb.njit(cache=True, error_model="numpy")
def _build(pos, tris, cent, node_lo, node_hi, node_left, node_right, node_start, node_count,
           prims):
    n_prims = tris.shape[0]
    for i in range(n_prims):
        prims[i] = i
    stack_node = np.empty(2 * n_prims + 2, np.int64)
    stack_start = np.empty(2 * n_prims + 2, np.int64)
    stack_end = np.empty(2 * n_prims + 2, np.int64)
    sp_ = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n_prims
    sp_ = 1
    n_nodes = 1
    lo = np.empty(3)
    hi = np.empty(3)
    bin_cnt = np.empty(N_BINS, np.int64)
    bin_lo = np.empty((N_BINS, 3))
    bin_hi = np.empty((N_BINS, 3))
    right_area = np.empty(N_BINS)
    right_cnt = np.empty(N_BINS, np.int64)
    while sp_ > 0:
        sp_ -= 1
        node = stack_node[sp_]
        start = stack_start[sp_]
        end = stack_end[sp_]
        _tri_bounds(pos, tris, prims, start, end, lo, hi)
        for k in range(3):
            node_lo[node, k] = lo[k]
            node_hi[node, k] = hi[k]
        count = end - start
        node_left[node] = -1
        node_right[node] = -1
        node_start[node] = start
        node_count[node] = count
        if count <= LEAF_MIN:
            continue
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(start, end):
            t = prims[i]
            for k in range(3):
                c = cent[t, k]
                if c < clo[k]:
                    clo[k] = c
                if c > chi[k]:
                    chi[k] = c
        best_cost = np.inf
        best_axis = -1
        best_split = 0
        for axis in range(3):
            ext = chi[axis] - clo[axis]
            if ext <= 1e-300:
                continue
            scale = N_BINS / ext
            for b in range(N_BINS):
                bin_cnt[b] = 0
                for k in range(3):
                    bin_lo[b, k] = np.inf
                    bin_hi[b, k] = -np.inf
            for i in range(start, end):
                t = prims[i]
                b = int((cent[t, axis] - clo[axis]) * scale)
                if b >= N_BINS:
                    b = N_BINS - 1
                bin_cnt[b] += 1
                for c in range(3):
                    v = tris[t, c]
                    for k in range(3):
                        x = pos[v, k]
                        if x < bin_lo[b, k]:
                            bin_lo[b, k] = x
                        if x > bin_hi[b, k]:
                            bin_hi[b, k] = x
            # right sweep
            r0, r1, r2 = np.inf, np.inf, np.inf
            s0, s1, s2 = -np.inf, -np.inf, -np.inf
            rc = 0
            for b in range(N_BINS - 1, 0, -1):
                rc += bin_cnt[b]
                r0 = min(r0, bin_lo[b, 0]); r1 = min(r1, bin_lo[b, 1]); r2 = min(r2, bin_lo[b, 2])
                s0 = max(s0, bin_hi[b, 0]); s1 = max(s1, bin_hi[b, 1]); s2 = max(s2, bin_hi[b, 2])
                right_area[b] = _area(r0, r1, r2, s0, s1, s2)
                right_cnt[b] = rc
            l0, l1, l2 = np.inf, np.inf, np.inf
            m0, m1, m2 = -np.inf, -np.inf, -np.inf
            lc = 0
            for b in range(N_BINS - 1):
                lc += bin_cnt[b]
                l0 = min(l0, bin_lo[b, 0]); l1 = min(l1, bin_lo[b, 1]); l2 = min(l2, bin_lo[b, 2])
                m0 = max(m0, bin_hi[b, 0]); m1 = max(m1, bin_hi[b, 1]); m2 = max(m2, bin_hi[b, 2])
                if lc == 0 or right_cnt[b + 1] == 0:
                    continue
                cost = lc * _area(l0, l1, l2, m0, m1, m2) + right_cnt[b + 1] * right_area[b + 1]
                if cost < best_cost:
                    best_cost = cost
                    best_axis = axis
                    best_split = b
        leaf_cost = count * _area(lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        split_cost = best_cost + TRAVERSAL_COST * _area(lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        if best_axis < 0 or (split_cost >= leaf_cost and count <= LEAF_MAX):
            if best_axis < 0 and count > LEAF_MAX:
                # coincident centroids: split the range in half
                mid = start + count // 2
            else:
                continue
        else:
            scale = N_BINS / (chi[best_axis] - clo[best_axis])
            i = start
            j = end - 1
            while i <= j:
                b = int((cent[prims[i], best_axis] - clo[best_axis]) * scale)
                if b >= N_BINS:
                    b = N_BINS - 1
                if b <= best_split:
                    i += 1
                else:
                    tmp = prims[i]
                    prims[i] = prims[j]
                    prims[j] = tmp
                    j -= 1
            mid = i
            if mid == start or mid == end:
                mid = start + count // 2
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_left[node] = left
        node_right[node] = right
        node_count[node] = 0
        stack_node[sp_] = right
        stack_start[sp_] = mid
        stack_end[sp_] = end
        sp_ += 1
        stack_node[sp_] = left
        stack_start[sp_] = start
        stack_end[sp_] = mid
        sp_ += 1
    return n_nodes


@nb.njit(cache=True, error_model="numpy")
def _refit(pos, tris, prims, node_lo, node_hi, node_left, node_right, node_start, node_count,
           n_nodes):
    lo = np.empty(3)
    hi = np.empty(3)
    # children always have larger indices than their parent
    for node in range(n_nodes - 1, -1, -1):
        if node_left[node] < 0:
            s = node_start[node]
            _tri_bounds(pos, tris, prims, s, s + node_count[node], lo, hi)
            for k in range(3):
                node_lo[node, k] = lo[k]
                node_hi[node, k] = hi[k]
        else:
            a = node_left[node]
            b = node_right[node]
            for k in range(3):
                node_lo[node, k] = min(node_lo[a, k], node_lo[b, k])
                node_hi[node, k] = max(node_hi[a, k], node_hi[b, k])


@nb.njit(inline="always", error_model="numpy")
def _inv_dir(dx, dy, dz):
    # finite stand-in for 1/0 keeps 0 * inv from producing NaN on slab planes
    ix = 1.0 / dx if dx != 0.0 else BIG
    iy = 1.0 / dy if dy != 0.0 else BIG
    iz = 1.0 / dz if dz != 0.0 else BIG
    return ix, iy, iz


@nb.njit(inline="always", error_model="numpy")
def _slab(node_lo, node_hi, node, ox, oy, oz, ix, iy, iz, tmin, tmax):
    t0 = (node_lo[node, 0] - ox) * ix
    t1 = (node_hi[node, 0] - ox) * ix
    if t0 > t1:
        t0, t1 = t1, t0
    lo_t = max(tmin, t0)
    hi_t = min(tmax, t1 * PAD)
    t0 = (node_lo[node, 1] - oy) * iy
    t1 = (node_hi[node, 1] - oy) * iy
    if t0 > t1:
        t0, t1 = t1, t0
    lo_t = max(lo_t, t0)
    hi_t = min(hi_t, t1 * PAD)
    t0 = (node_lo[node, 2] - oz) * iz
    t1 = (node_hi[node, 2] - oz) * iz
    if t0 > t1:
        t0, t1 = t1, t0
    lo_t = max(lo_t, t0)
    hi_t = min(hi_t, t1 * PAD)
    if lo_t > hi_t:
        return np.inf
    return lo_t


@nb.njit(inline="always", error_model="numpy")
def _sel(k, x, y, z):
    if k == 0:
        return x
    if k == 1:
        return y
    return z


@nb.njit(inline="always", error_model="numpy")
def _ray_setup(dx, dy, dz):
    # axis permutation and shear of the watertight test, shared by all triangles
    adx, ady, adz = abs(dx), abs(dy), abs(dz)
    if adx > ady and adx > adz:
        kz = 0
    elif ady > adz:
        kz = 1
    else:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    dkz = _sel(kz, dx, dy, dz)
    if dkz < 0.0:
        kx, ky = ky, kx
    sz = 1.0 / dkz
    return kx, ky, kz, _sel(kx, dx, dy, dz) * sz, _sel(ky, dx, dy, dz) * sz, sz


@nb.njit(inline="always", error_model="numpy")
def _tri_test(pos, tris, t, okx, oky, okz, kx, ky, kz, sx, sy, sz, tmin, tmax):
    a = tris[t, 0]
    b = tris[t, 1]
    c = tris[t, 2]
    az_ = pos[a, kz] - okz
    bz_ = pos[b, kz] - okz
    cz_ = pos[c, kz] - okz
    ax_ = pos[a, kx] - okx - sx * az_
    ay_ = pos[a, ky] - oky - sy * az_
    bx_ = pos[b, kx] - okx - sx * bz_
    by_ = pos[b, ky] - oky - sy * bz_
    cx_ = pos[c, kx] - okx - sx * cz_
    cy_ = pos[c, ky] - oky - sy * cz_
    u = cx_ * by_ - cy_ * bx_
    v = ax_ * cy_ - ay_ * cx_
    w = bx_ * ay_ - by_ * ax_
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return np.inf
    det = u + v + w
    if det == 0.0:
        return np.inf
    tt = (u * sz * az_ + v * sz * bz_ + w * sz * cz_) / det
    if tt > tmin and tt < tmax:
        return tt
    return np.inf


@nb.njit(cache=True, error_model="numpy")
def ray_triangle(pos, tris, t, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Watertight ray/triangle test; returns hit distance or inf."""
    kx, ky, kz, sx, sy, sz = _ray_setup(dx, dy, dz)
    return _tri_test(pos, tris, t, _sel(kx, ox, oy, oz), _sel(ky, ox, oy, oz),
                     _sel(kz, ox, oy, oz), kx, ky, kz, sx, sy, sz, tmin, tmax)


@nb.njit(cache=True, error_model="numpy")
def ray_closest_hit(pos, tris, prims, node_lo, node_hi, node_left, node_right, node_start,
                    node_count, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Nearest hit (t, triangle) with t in (tmin, tmax); (inf, -1) on miss."""
    ix, iy, iz = _inv_dir(dx, dy, dz)
    kx, ky, kz, sx, sy, sz = _ray_setup(dx, dy, dz)
    okx, oky, okz = _sel(kx, ox, oy, oz), _sel(ky, ox, oy, oz), _sel(kz, ox, oy, oz)
    stack = np.empty(STACK, np.int64)
    sp_ = 0
    best_t = tmax
    best_tri = -1
    if _slab(node_lo, node_hi, 0, ox, oy, oz, ix, iy, iz, tmin, best_t) == np.inf:
        return np.inf, -1
    stack[0] = 0
    sp_ = 1
    while sp_ > 0:
        sp_ -= 1
        node = stack[sp_]
        if node_left[node] < 0:
            s = node_start[node]
            for i in range(s, s + node_count[node]):
                tri = prims[i]
                t = _tri_test(pos, tris, tri, okx, oky, okz, kx, ky, kz, sx, sy, sz, tmin,
                              best_t)
                if t < best_t:
                    best_t = t
                    best_tri = tri
            continue
        a = node_left[node]
        b = node_right[node]
        ta = _slab(node_lo, node_hi, a, ox, oy, oz, ix, iy, iz, tmin, best_t)
        tb = _slab(node_lo, node_hi, b, ox, oy, oz, ix, iy, iz, tmin, best_t)
        if ta > tb:
            a, b = b, a
            ta, tb = tb, ta
        if tb != np.inf:
            stack[sp_] = b
            sp_ += 1
        if ta != np.inf:
            stack[sp_] = a
            sp_ += 1
    if best_tri < 0:
        return np.inf, -1
    return best_t, best_tri


@nb.njit(cache=True, error_model="numpy")
def ray_any_hit(pos, tris, prims, node_lo, node_hi, node_left, node_right, node_start,
                node_count, ox, oy, oz, dx, dy, dz, tmin, tmax):
    stack = np.empty(STACK, np.int64)
    return ray_any_hit_stack(pos, tris, prims, node_lo, node_hi, node_left, node_right,
                             node_start, node_count, ox, oy, oz, dx, dy, dz, tmin, tmax, stack)


@nb.njit(cache=True, error_model="numpy")
def ray_any_hit_stack(pos, tris, prims, node_lo, node_hi, node_left, node_right, node_start,
                      node_count, ox, oy, oz, dx, dy, dz, tmin, tmax, stack):
    """Occlusion test with a caller-owned traversal stack (no allocation per ray)."""
    ix, iy, iz = _inv_dir(dx, dy, dz)
    kx, ky, kz, sx, sy, sz = _ray_setup(dx, dy, dz)
    okx, oky, okz = _sel(kx, ox, oy, oz), _sel(ky, ox, oy, oz), _sel(kz, ox, oy, oz)
    stack[0] = 0
    sp_ = 1
    while sp_ > 0:
        sp_ -= 1
        node = stack[sp_]
        if _slab(node_lo, node_hi, node, ox, oy, oz, ix, iy, iz, tmin, tmax) == np.inf:
            continue
        if node_left[node] < 0:
            s = node_start[node]
            for i in range(s, s + node_count[node]):
                if _tri_test(pos, tris, prims[i], okx, oky, okz, kx, ky, kz, sx, sy, sz,
                             tmin, tmax) != np.inf:
                    return True
            continue
        stack[sp_] = node_right[node]
        sp_ += 1
        stack[sp_] = node_left[node]
        sp_ += 1
    return False


@nb.njit(cache=True, error_model="numpy")
def closest_point_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle abc to p (Ericson's region classification)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        den = d1 - d3
        v = d1 / den if den != 0.0 else 0.0
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        den = d2 - d6
        w = d2 / den if den != 0.0 else 0.0
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        den = (d4 - d3) + (d5 - d6)
        w = (d4 - d3) / den if den != 0.0 else 0.0
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    s = va + vb + vc
    if s == 0.0:
        return ax, ay, az
    denom = 1.0 / s
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@nb.njit(inline="always", error_model="numpy")
def _axis_gap(lo, hi, p):
    if p < lo:
        return lo - p
    if p > hi:
        return p - hi
    return 0.0


@nb.njit(inline="always", error_model="numpy")
def _box_dist2(node_lo, node_hi, node, px, py, pz):
    ex = _axis_gap(node_lo[node, 0], node_hi[node, 0], px)
    ey = _axis_gap(node_lo[node, 1], node_hi[node, 1], py)
    ez = _axis_gap(node_lo[node, 2], node_hi[node, 2], pz)
    return ex * ex + ey * ey + ez * ez


@nb.njit(cache=True, error_model="numpy")
def closest_point(pos, tris, prims, node_lo, node_hi, node_left, node_right, node_start,
                  node_count, px, py, pz, max_d2):
    """Nearest surface point within sqrt(max_d2): (d2, tri, qx, qy, qz)."""
    stack = np.empty(STACK, np.int64)
    stack[0] = 0
    sp_ = 1
    best = max_d2
    best_tri = -1
    bx_, by_, bz_ = 0.0, 0.0, 0.0
    while sp_ > 0:
        sp_ -= 1
        node = stack[sp_]
        if _box_dist2(node_lo, node_hi, node, px, py, pz) > best:
            continue
        if node_left[node] < 0:
            s = node_start[node]
            for i in range(s, s + node_count[node]):
                t = prims[i]
                a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
                qx, qy, qz = closest_point_triangle(
                    px, py, pz, pos[a, 0], pos[a, 1], pos[a, 2], pos[b, 0], pos[b, 1],
                    pos[b, 2], pos[c, 0], pos[c, 1], pos[c, 2])
                d2 = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
                if d2 < best:
                    best = d2
                    best_tri = t
                    bx_, by_, bz_ = qx, qy, qz
            continue
        a = node_left[node]
        b = node_right[node]
        da = _box_dist2(node_lo, node_hi, a, px, py, pz)
        db = _box_dist2(node_lo, node_hi, b, px, py, pz)
        if da > db:
            a, b = b, a
            da, db = db, da
        if db <= best:
            stack[sp_] = b
            sp_ += 1
        if da <= best:
            stack[sp_] = a
            sp_ += 1
    return best, best_tri, bx_, by_, bz_


@nb.njit(cache=True, error_model="numpy")
def _batch_closest_hit(pos, tris, prims, lo, hi, left, right, start, count, origins, dirs,
                       tmin, tmax, out_t, out_tri):
    for r in range(origins.shape[0]):
        t, tri = ray_closest_hit(pos, tris, prims, lo, hi, left, right, start, count,
                                 origins[r, 0], origins[r, 1], origins[r, 2],
                                 dirs[r, 0], dirs[r, 1], dirs[r, 2], tmin, tmax[r])
        out_t[r] = t
        out_tri[r] = tri


@nb.njit(cache=True, error_model="numpy")
def _batch_closest_point(pos, tris, prims, lo, hi, left, right, start, count, points, max_d2,
                         out_d2, out_tri, out_q):
    for i in range(points.shape[0]):
        d2, tri, qx, qy, qz = closest_point(pos, tris, prims, lo, hi, left, right, start, count,
                                            points[i, 0], points[i, 1], points[i, 2], max_d2)
        out_d2[i] = d2
        out_tri[i] = tri
        out_q[i, 0] = qx
        out_q[i, 1] = qy
        out_q[i, 2] = qz


class BVH:
    """BVH over an indexed triangle soup. Positions are copied on build/refit."""

    def __init__(self, positions: np.ndarray, triangles: np.ndarray):
        self.pos = np.ascontiguousarray(positions, dtype=np.float64)
        self.tris = np.ascontiguousarray(triangles, dtype=np.int64)
        m = len(self.tris)
        if m == 0:
            raise ValueError("cannot build a BVH without triangles")
        n_max = 2 * m
        self.lo = np.empty((n_max, 3))
        self.hi = np.empty((n_max, 3))
        self.left = np.empty(n_max, np.int64)
        self.right = np.empty(n_max, np.int64)
        self.start = np.empty(n_max, np.int64)
        self.count = np.empty(n_max, np.int64)
        self.prims = np.empty(m, np.int64)
        cent = self.pos[self.tris].mean(axis=1)
        self.n_nodes = int(_build(self.pos, self.tris, cent, self.lo, self.hi, self.left,
                                  self.right, self.start, self.count, self.prims))

    @property
    def arrays(self) -> tuple:
        """Argument tuple expected by the ``njit`` traversal functions."""
        return (self.pos, self.tris, self.prims, self.lo, self.hi, self.left, self.right,
                self.start, self.count)

    def refit(self, positions: np.ndarray) -> None:
        new = np.ascontiguousarray(positions, dtype=np.float64)
        if new.shape != self.pos.shape:
            raise ValueError("refit requires unchanged vertex count")
        self.pos = new
        _refit(self.pos, self.tris, self.prims, self.lo, self.hi, self.left, self.right,
               self.start, self.count, self.n_nodes)

    def check(self) -> bool:
        """Every node box encloses its children and primitives."""
        for node in range(self.n_nodes):
            lo, hi = self.lo[node], self.hi[node]
            if self.left[node] < 0:
                s, c = self.start[node], self.count[node]
                p = self.pos[self.tris[self.prims[s:s + c]]].reshape(-1, 3)
                if (p < lo - 1e-12).any() or (p > hi + 1e-12).any():
                    return False
            else:
                for ch in (self.left[node], self.right[node]):
                    if (self.lo[ch] < lo - 1e-12).any() or (self.hi[ch] > hi + 1e-12).any():
                        return False
        return True

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, t_max=np.inf, t_min: float = 0.0):
        """Nearest hits for a batch of rays; returns (t, triangle) with -1 on miss."""
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        d = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(o),)).copy()
        out_t = np.empty(len(o))
        out_tri = np.empty(len(o), np.int64)
        _batch_closest_hit(*self.arrays, o, d, float(t_min), tmax, out_t, out_tri)
        return out_t, out_tri

    def closest_points(self, points: np.ndarray, max_distance: float = np.inf):
        """Nearest surface points; returns (distance, triangle, point)."""
        p = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        d2 = np.empty(len(p))
        tri = np.empty(len(p), np.int64)
        q = np.empty((len(p), 3))
        _batch_closest_point(*self.arrays, p, float(max_distance) ** 2, d2, tri, q)
        return np.sqrt(d2), tri, q
