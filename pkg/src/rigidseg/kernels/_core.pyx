# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Dinic min-cut and SSD block matching.

Mirrors kernels/pure.py arc-for-arc so both implementations agree.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

DEF EPS = 1e-12


def mincut(long n, edge_u, edge_v, edge_cap, src_cap, snk_cap):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] eu = np.ascontiguousarray(edge_u, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ev = np.ascontiguousarray(edge_v, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ec = np.ascontiguousarray(edge_cap, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sc = np.ascontiguousarray(src_cap, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] kc = np.ascontiguousarray(snk_cap, dtype=np.float64)

    cdef long m = eu.shape[0]
    cdef long s = n
    cdef long t = n + 1
    cdef long nv = n + 2
    cdef long max_arcs = 4 * n + 2 * m + 8

    cdef cnp.ndarray[cnp.int64_t, ndim=1] first = np.full(nv, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] to = np.zeros(max_arcs, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cap = np.zeros(max_arcs, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] nxt = np.zeros(max_arcs, dtype=np.int64)
    cdef long n_arcs = 0

    cdef long p, k, u, v, a, last
    cdef double c

    # arc construction order matches the pure implementation
    for p in range(n):
        if sc[p] > 0:
            to[n_arcs] = p; cap[n_arcs] = sc[p]; nxt[n_arcs] = first[s]; first[s] = n_arcs; n_arcs += 1
            to[n_arcs] = s; cap[n_arcs] = 0.0; nxt[n_arcs] = first[p]; first[p] = n_arcs; n_arcs += 1
        if kc[p] > 0:
            to[n_arcs] = t; cap[n_arcs] = kc[p]; nxt[n_arcs] = first[p]; first[p] = n_arcs; n_arcs += 1
            to[n_arcs] = p; cap[n_arcs] = 0.0; nxt[n_arcs] = first[t]; first[t] = n_arcs; n_arcs += 1
    for k in range(m):
        if ec[k] > 0:
            u = eu[k]; v = ev[k]; c = ec[k]
            to[n_arcs] = v; cap[n_arcs] = c; nxt[n_arcs] = first[u]; first[u] = n_arcs; n_arcs += 1
            to[n_arcs] = u; cap[n_arcs] = c; nxt[n_arcs] = first[v]; first[v] = n_arcs; n_arcs += 1

    cdef cnp.ndarray[cnp.int64_t, ndim=1] level = np.empty(nv, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] queue = np.empty(nv, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] it = np.empty(nv, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] path = np.empty(max_arcs, dtype=np.int64)
    cdef long qlen, qi, path_len, i, cut
    cdef double flow = 0.0
    cdef double aug
    cdef bint advanced

    while True:
        for i in range(nv):
            level[i] = -1
        level[s] = 0
        queue[0] = s
        qlen = 1
        qi = 0
        while qi < qlen:
            u = queue[qi]; qi += 1
            a = first[u]
            while a != -1:
                v = to[a]
                if cap[a] > EPS and level[v] < 0:
                    level[v] = level[u] + 1
                    queue[qlen] = v; qlen += 1
                a = nxt[a]
        if level[t] < 0:
            break
        for i in range(nv):
            it[i] = first[i]
        path_len = 0
        u = s
        while True:
            if u == t:
                aug = cap[path[0]]
                for i in range(1, path_len):
                    if cap[path[i]] < aug:
                        aug = cap[path[i]]
                flow += aug
                cut = -1
                for i in range(path_len):
                    a = path[i]
                    cap[a] -= aug
                    cap[a ^ 1] += aug
                    if cut < 0 and cap[a] <= EPS:
                        cut = i
                path_len = cut
                if path_len:
                    u = to[path[path_len - 1]]
                else:
                    u = s
                continue
            a = it[u]
            advanced = False
            while a != -1:
                v = to[a]
                if cap[a] > EPS and level[v] == level[u] + 1:
                    it[u] = a
                    path[path_len] = a; path_len += 1
                    u = v
                    advanced = True
                    break
                a = nxt[a]
                it[u] = a
            if not advanced:
                if u == s:
                    break
                level[u] = -1
                path_len -= 1
                last = path[path_len]
                u = to[last ^ 1]
                it[u] = nxt[last]

    cdef cnp.ndarray[cnp.uint8_t, ndim=1] side = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] seen = np.zeros(nv, dtype=np.uint8)
    seen[s] = 1
    queue[0] = s
    qlen = 1
    qi = 0
    while qi < qlen:
        u = queue[qi]; qi += 1
        a = first[u]
        while a != -1:
            v = to[a]
            if cap[a] > EPS and seen[v] == 0:
                seen[v] = 1
                queue[qlen] = v; qlen += 1
            a = nxt[a]
    for p in range(n):
        if seen[p]:
            side[p] = 1
    return flow, side


cdef inline double _parabolic(double lo, double mid, double hi) nogil:
    cdef double denom, off
    if lo == INFINITY or hi == INFINITY:
        return 0.0
    denom = lo - 2.0 * mid + hi
    if denom <= 0:
        return 0.0
    off = 0.5 * (lo - hi) / denom
    if off < -0.5:
        off = -0.5
    elif off > 0.5:
        off = 0.5
    return off


cdef extern from "math.h":
    double INFINITY
    double round(double) nogil


def match_patches(prev_img, next_img, pts, guesses, long half, long radius):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A = np.ascontiguousarray(prev_img, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] B = np.ascontiguousarray(next_img, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] P = np.ascontiguousarray(pts, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] G = np.ascontiguousarray(guesses, dtype=np.float64)
    cdef long h = A.shape[0]
    cdef long w = A.shape[1]
    cdef long n = P.shape[0]
    cdef long span = 2 * radius + 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] pos = np.zeros((n, 2), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ssd = np.full(n, np.inf, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] ok = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grid = np.empty((span, span), dtype=np.float64)

    cdef long i, cx, cy, bx, by, dy, dx, ty, tx, r, cc, gy, gx, bk
    cdef double best, acc, d, sub_x, sub_y, lo, hi

    for i in range(n):
        cx = <long> round(P[i, 0])
        cy = <long> round(P[i, 1])
        if cx - half < 0 or cy - half < 0 or cx + half >= w or cy + half >= h:
            continue
        bx = <long> round(G[i, 0])
        by = <long> round(G[i, 1])
        for dy in range(span):
            for dx in range(span):
                grid[dy, dx] = INFINITY
        for dy in range(-radius, radius + 1):
            ty = by + dy
            if ty - half < 0 or ty + half >= h:
                continue
            for dx in range(-radius, radius + 1):
                tx = bx + dx
                if tx - half < 0 or tx + half >= w:
                    continue
                acc = 0.0
                for r in range(-half, half + 1):
                    for cc in range(-half, half + 1):
                        d = B[ty + r, tx + cc] - A[cy + r, cx + cc]
                        acc += d * d
                grid[dy + radius, dx + radius] = acc
        best = INFINITY
        bk = -1
        for dy in range(span):
            for dx in range(span):
                if grid[dy, dx] < best:
                    best = grid[dy, dx]
                    bk = dy * span + dx
        if bk < 0 or best == INFINITY:
            continue
        gy = bk // span
        gx = bk - gy * span
        lo = grid[gy, gx - 1] if gx > 0 else INFINITY
        hi = grid[gy, gx + 1] if gx < span - 1 else INFINITY
        sub_x = _parabolic(lo, best, hi)
        lo = grid[gy - 1, gx] if gy > 0 else INFINITY
        hi = grid[gy + 1, gx] if gy < span - 1 else INFINITY
        sub_y = _parabolic(lo, best, hi)
        pos[i, 0] = P[i, 0] + (bx + gx - radius + sub_x - cx)
        pos[i, 1] = P[i, 1] + (by + gy - radius + sub_y - cy)
        ssd[i] = best
        ok[i] = 1
    return pos, ssd, ok
