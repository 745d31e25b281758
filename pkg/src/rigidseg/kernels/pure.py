"""Pure-Python fallbacks for the compiled kernels.

Same algorithms and traversal order as the compiled extension, so both
implementations return the same cuts and matches; the compiled versions
are just faster. Selected automatically when the extension is missing or
``RIGIDSEG_PURE=1`` is set.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-12


def mincut(n, edge_u, edge_v, edge_cap, src_cap, snk_cap):
    """Exact s-t min cut by Dinic's algorithm on float capacities.

    Nodes are 0..n-1 plus an implicit source and sink. ``edge_*`` describe
    symmetric (undirected) inner edges; ``src_cap``/``snk_cap`` are terminal
    capacities per node. Returns (flow, side) where side[p] = 1 when p sits
    on the source side of the minimum cut (the canonical minimal source
    side: nodes reachable from the source in the final residual graph).
    """
    s = n
    t = n + 1
    nv = n + 2
    first = [-1] * nv
    to = []
    cap = []
    nxt = []

    def add(u, v, c_uv, c_vu):
        to.append(v)
        cap.append(float(c_uv))
        nxt.append(first[u])
        first[u] = len(to) - 1
        to.append(u)
        cap.append(float(c_vu))
        nxt.append(first[v])
        first[v] = len(to) - 1

    for p in range(n):
        if src_cap[p] > 0:
            add(s, p, src_cap[p], 0.0)
        if snk_cap[p] > 0:
            add(p, t, snk_cap[p], 0.0)
    for k in range(len(edge_u)):
        if edge_cap[k] > 0:
            add(int(edge_u[k]), int(edge_v[k]), edge_cap[k], edge_cap[k])

    flow = 0.0
    level = [-1] * nv
    while True:
        # BFS level graph on residual arcs
        level = [-1] * nv
        level[s] = 0
        queue = [s]
        qi = 0
        while qi < len(queue):
            u = queue[qi]
            qi += 1
            a = first[u]
            while a != -1:
                v = to[a]
                if cap[a] > EPS and level[v] < 0:
                    level[v] = level[u] + 1
                    queue.append(v)
                a = nxt[a]
        if level[t] < 0:
            break
        # blocking flow with the current-arc heuristic
        it = first.copy()
        path = []
        u = s
        while True:
            if u == t:
                aug = min(cap[a] for a in path)
                flow += aug
                cut = -1
                for i, a in enumerate(path):
                    cap[a] -= aug
                    cap[a ^ 1] += aug
                    if cut < 0 and cap[a] <= EPS:
                        cut = i
                del path[cut:]
                u = to[path[-1]] if path else s
                continue
            a = it[u]
            advanced = False
            while a != -1:
                v = to[a]
                if cap[a] > EPS and level[v] == level[u] + 1:
                    it[u] = a
                    path.append(a)
                    u = v
                    advanced = True
                    break
                a = nxt[a]
                it[u] = a
            if not advanced:
                if u == s:
                    break
                level[u] = -1  # dead end for this phase
                last = path.pop()
                u = to[last ^ 1]
                it[u] = nxt[last]

    # nodes reachable from the source in the residual graph
    side = np.zeros(n, dtype=np.uint8)
    seen = [False] * nv
    seen[s] = True
    queue = [s]
    qi = 0
    while qi < len(queue):
        u = queue[qi]
        qi += 1
        a = first[u]
        while a != -1:
            v = to[a]
            if cap[a] > EPS and not seen[v]:
                seen[v] = True
                queue.append(v)
            a = nxt[a]
    for p in range(n):
        if seen[p]:
            side[p] = 1
    return flow, side


def _parabolic(lo, mid, hi):
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return 0.0
    denom = lo - 2.0 * mid + hi
    if denom <= 0:
        return 0.0
    off = 0.5 * (lo - hi) / denom
    return float(np.clip(off, -0.5, 0.5))


def match_patches(prev_img, next_img, pts, guesses, half, radius):
    """Exhaustive SSD block matching with parabolic subpixel refinement.

    ``pts`` are (x, y) feature positions in ``prev_img``; ``guesses`` the
    predicted positions in ``next_img``. Returns (pos, ssd, ok): matched
    (x, y) positions, best SSD score, and a validity flag per feature.
    """
    prev_img = np.asarray(prev_img, dtype=np.float64)
    next_img = np.asarray(next_img, dtype=np.float64)
    h, w = prev_img.shape
    n = len(pts)
    pos = np.zeros((n, 2))
    ssd = np.full(n, np.inf)
    ok = np.zeros(n, dtype=np.uint8)
    span = 2 * radius + 1
    for i in range(n):
        px, py = pts[i]
        cx = int(round(px))
        cy = int(round(py))
        if cx - half < 0 or cy - half < 0 or cx + half >= w or cy + half >= h:
            continue
        patch = prev_img[cy - half : cy + half + 1, cx - half : cx + half + 1]
        bx = int(round(guesses[i][0]))
        by = int(round(guesses[i][1]))
        grid = np.full((span, span), np.inf)
        for dy in range(-radius, radius + 1):
            ty = by + dy
            if ty - half < 0 or ty + half >= h:
                continue
            for dx in range(-radius, radius + 1):
                tx = bx + dx
                if tx - half < 0 or tx + half >= w:
                    continue
                diff = next_img[ty - half : ty + half + 1, tx - half : tx + half + 1] - patch
                grid[dy + radius, dx + radius] = float((diff * diff).sum())
        k = int(np.argmin(grid))
        best = grid.flat[k]
        if not np.isfinite(best):
            continue
        gy, gx = divmod(k, span)
        sub_x = _parabolic(
            grid[gy, gx - 1] if gx > 0 else np.inf,
            best,
            grid[gy, gx + 1] if gx < span - 1 else np.inf,
        )
        sub_y = _parabolic(
            grid[gy - 1, gx] if gy > 0 else np.inf,
            best,
            grid[gy + 1, gx] if gy < span - 1 else np.inf,
        )
        pos[i, 0] = px + (bx + gx - radius + sub_x - cx)
        pos[i, 1] = py + (by + gy - radius + sub_y - cy)
        ssd[i] = best
        ok[i] = 1
    return pos, ssd, ok
