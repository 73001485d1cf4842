"""Numba kernels for label-setting shortest paths on stencil graphs."""

import heapq

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _interp_metric(samples, res, binv, x, out):
    # periodic multilinear interpolation; samples flattened to (prod(res), n, n)
    n = x.shape[0]
    base = np.empty(n, np.int64)
    frac = np.empty(n)
    for a in range(n):
        y = 0.0
        for b in range(n):
            y += binv[a, b] * x[b]
        y *= res[a]
        fl = np.floor(y)
        base[a] = np.int64(fl)
        frac[a] = y - fl
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0
    for corner in range(1 << n):
        w = 1.0
        flat = 0
        for a in range(n):
            bit = (corner >> a) & 1
            idx = (base[a] + bit) % res[a]
            if idx < 0:
                idx += res[a]
            flat = flat * res[a] + idx
            w *= frac[a] if bit == 1 else 1.0 - frac[a]
        if w != 0.0:
            for i in range(n):
                for j in range(n):
                    out[i, j] += w * samples[flat, i, j]


@nb.njit(cache=True)
def _quad(m, u, v):
    n = u.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(n):
            s += u[i] * m[i, j] * v[j]
    return s


@nb.njit(cache=True)
def _length(samples, res, binv, start, vec, g, work, simpson):
    # metric length of the straight segment start -> start + vec
    n = start.shape[0]
    if not simpson:
        for a in range(n):
            work[a] = start[a] + 0.5 * vec[a]
        _interp_metric(samples, res, binv, work, g)
        return np.sqrt(_quad(g, vec, vec))
    total = 0.0
    for node in range(3):
        for a in range(n):
            work[a] = start[a] + 0.5 * node * vec[a]
        _interp_metric(samples, res, binv, work, g)
        wgt = 4.0 if node == 1 else 1.0
        total += wgt * np.sqrt(_quad(g, vec, vec))
    return total / 6.0


@nb.njit(cache=True)
def label_setting(samples, res, binv, shape, lo, h, offsets, wedge_prev, wedge_next, origin, use_simplex, simpson):
    """Single-source label-setting on a box grid.

    ``offsets`` are integer stencil vectors (k, n). For 2D simplex updates the
    stencil is sorted by angle and ``wedge_prev``/``wedge_next`` give the
    angular neighbours of each offset. With ``simpson`` the segment length is
    integrated by the 3-point Simpson rule instead of the midpoint rule.
    Returns the flattened label field.
    """
    n = shape.shape[0]
    total = 1
    for a in range(n):
        total *= shape[a]
    strides = np.empty(n, np.int64)
    s = 1
    for a in range(n - 1, -1, -1):
        strides[a] = s
        s *= shape[a]
    dist = np.full(total, np.inf)
    done = np.zeros(total, np.bool_)
    k = offsets.shape[0]
    g = np.empty((n, n))
    x = np.empty(n)
    vec_a = np.empty(n)
    vec_b = np.empty(n)
    coord_u = np.empty(n, np.int64)
    coord_x = np.empty(n, np.int64)
    seg = np.empty(n)
    work = np.empty(n)
    heap = [(0.0, origin)]
    dist[origin] = 0.0
    while len(heap) > 0:
        du, u = heapq.heappop(heap)
        if done[u] or du > dist[u]:
            continue
        done[u] = True
        rem = u
        for a in range(n):
            coord_u[a] = rem // strides[a]
            rem -= coord_u[a] * strides[a]
        for j in range(k):
            # x is the node that sees u through offset j: u = x + o_j
            inside = True
            xi = 0
            for a in range(n):
                c = coord_u[a] - offsets[j, a]
                if c < 0 or c >= shape[a]:
                    inside = False
                    break
                coord_x[a] = c
                xi += c * strides[a]
            if not inside or done[xi]:
                continue
            for a in range(n):
                vec_a[a] = h * offsets[j, a]
                x[a] = lo[a] + h * coord_x[a]
            best = du + _length(samples, res, binv, x, vec_a, g, work, simpson)
            if use_simplex:
                for side in range(2):
                    jb = wedge_prev[j] if side == 0 else wedge_next[j]
                    if jb < 0:
                        continue
                    inside = True
                    ub = 0
                    for a in range(n):
                        c = coord_x[a] + offsets[jb, a]
                        if c < 0 or c >= shape[a]:
                            inside = False
                            break
                        ub += c * strides[a]
                    if not inside or not done[ub]:
                        continue
                    d_b = dist[ub]
                    for a in range(n):
                        vec_b[a] = h * (offsets[jb, a] - offsets[j, a])
                        x[a] = lo[a] + h * (coord_x[a] + 0.25 * (offsets[j, a] + offsets[jb, a]))
                    _interp_metric(samples, res, binv, x, g)
                    p = _quad(g, vec_b, vec_b)
                    qc = _quad(g, vec_a, vec_b)
                    r = _quad(g, vec_a, vec_a)
                    delta = d_b - du
                    if p <= delta * delta:
                        continue
                    disc = r * p - qc * qc
                    if disc < 0.0:
                        disc = 0.0
                    w = np.abs(delta) * np.sqrt(disc / (p - delta * delta))
                    if delta > 0:
                        w = -w
                    t = (w - qc) / p
                    if t <= 0.0 or t >= 1.0:
                        continue
                    if simpson:
                        for a in range(n):
                            seg[a] = vec_a[a] + t * vec_b[a]
                            x[a] = lo[a] + h * coord_x[a]
                        cand = du + t * delta + _length(samples, res, binv, x, seg, g, work, True)
                    else:
                        cand = du + t * delta + np.sqrt(max(r + 2.0 * qc * t + p * t * t, 0.0))
                    if cand < best:
                        best = cand
            if best < dist[xi]:
                dist[xi] = best
                heapq.heappush(heap, (best, xi))
    return dist

