"""Assign motion hypotheses to sparse scene points by minimizing a data +
smoothness energy with alpha-beta swap graph cuts.

The data term maps every sparse point through each hypothesis into a
sampled subset of frames and measures clamped nearest-neighbor distances
against the dense clouds, weighted by an occlusion-aware visibility and
extended with incremental one-frame drift terms. Per point, distances are
normalized so only their relative magnitudes matter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import PipelineConfig
from .errors import InputError
from .geometry import NeighborIndex, voxel_downsample_indices


@dataclass
class SparsePoints:
    """Per-frame subsampled scene points; each keeps its seed frame."""

    positions: np.ndarray  # (m, 3) in the seed frame's camera coords
    normals: np.ndarray
    pixels: np.ndarray  # (m, 2) int (row, col)
    seed: np.ndarray  # (m,) seed frame s_p
    dense_index: np.ndarray  # (m,) index into the seed frame's cloud
    num_frames: int

    def __len__(self):
        return len(self.seed)

    def frame_indices(self, f):
        return np.nonzero(self.seed == f)[0]

    @classmethod
    def from_clouds(cls, clouds, voxel):
        pos, nrm, pix, seed, didx = [], [], [], [], []
        for f, cloud in enumerate(clouds):
            idx = voxel_downsample_indices(cloud.positions, voxel)
            pos.append(cloud.positions[idx])
            nrm.append(cloud.normals[idx])
            pix.append(cloud.pixels[idx])
            seed.append(np.full(len(idx), f, dtype=np.int64))
            didx.append(idx)
        return cls(
            np.concatenate(pos),
            np.concatenate(nrm),
            np.concatenate(pix),
            np.concatenate(seed),
            np.concatenate(didx),
            len(clouds),
        )


def check_simplex(W, tol=1e-6):
    W = np.asarray(W)
    if np.any(W < -tol) or np.any(np.abs(W.sum(axis=-1) - 1.0) > max(tol, 1e-6)):
        raise InputError("weight vectors must lie on the probability simplex")


# ---------------------------------------------------------------------------
# visibility (occlusion-aware)


def visibility(points, normals, depth, cam, sigma2):
    """Likelihood in [0, 1] that mapped points are visible in a frame.

    Front-facing factor clamp((n . v) / 0.3) times an occlusion factor:
    1 when the observed surface lies behind the point, else a Cauchy-like
    falloff in the depth discrepancy. Zero outside the frustum or where
    the projection lands on missing data.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    nrm = np.atleast_2d(np.asarray(normals, dtype=float))
    rows, cols, z, valid = cam.project_to_pixels(pts)
    vis = np.zeros(len(pts))
    if not valid.any():
        return vis if pts.shape[0] > 1 else vis[0]
    r = rows[valid]
    c = cols[valid]
    z_obs = depth.values[r, c]
    has_data = z_obs > 0
    view = -pts[valid]
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    facing = np.clip(np.einsum("ni,ni->n", nrm[valid], view) / 0.3, 0.0, 1.0)
    diff = z[valid] - z_obs
    occ = np.where(diff <= 0, 1.0, sigma2 / (sigma2 + diff * diff))
    vis[valid] = np.where(has_data, facing * occ, 0.0)
    return vis if np.asarray(points).ndim > 1 else float(vis[0])


# ---------------------------------------------------------------------------
# evaluation-frame sampling


def sample_eval_frames(seed_frame, num_frames, k_adjacent, budget, rng):
    """Frames on which a point's data term is evaluated.

    The k_adjacent frames on each side are always taken; the remaining
    budget is drawn without replacement with probability proportional to
    1 / (1 + distance) — heavy-tailed, so distant frames stay represented.
    """
    if num_frames <= budget:
        return np.arange(num_frames)
    forced = [
        f
        for off in range(1, k_adjacent + 1)
        for f in (seed_frame - off, seed_frame + off)
        if 0 <= f < num_frames
    ]
    forced = sorted(set(forced))
    rest = np.array([f for f in range(num_frames) if f not in forced], dtype=np.int64)
    take = min(budget - len(forced), len(rest))
    chosen = []
    if take > 0:
        w = 1.0 / (1.0 + np.abs(rest - seed_frame))
        avail = rest.tolist()
        weights = w.tolist()
        for _ in range(take):
            total = sum(weights)
            u = rng.uniform(0, total)
            acc = 0.0
            pick = len(avail) - 1
            for idx, wi in enumerate(weights):
                acc += wi
                if u <= acc:
                    pick = idx
                    break
            chosen.append(avail.pop(pick))
            weights.pop(pick)
    return np.array(sorted(forced + chosen), dtype=np.int64)


# ---------------------------------------------------------------------------
# data term


@dataclass
class DataTermTable:
    distances: np.ndarray  # (m, N) raw distances d_h
    likelihoods: np.ndarray  # (m, N) in [floor, 1]
    costs: np.ndarray  # (m, N) = -log(likelihood)
    label_ids: list


def _map_through(hyp, seed, f, positions, normals):
    """Map seed-frame points/normals into frame f; None when unsupported."""
    if not (hyp.defined(f)):
        return None
    R, t = hyp.relative_Rt(int(seed), int(f))
    return positions @ R.T + t, normals @ R.T


def map_point(point, hypothesis, seed_frame, target_frame):
    """A single point through one hypothesis; None outside its support."""
    if not hypothesis.defined(target_frame) or not hypothesis.defined(seed_frame):
        return None
    return hypothesis.transform(seed_frame, target_frame, point)


def data_distance(
    point, normal, seed_frame, hypothesis, frames, clouds, cfg: PipelineConfig, sigma2
):
    """Occlusion-weighted clamped-distance measure for one point and label."""
    dists, _ = _point_distances(
        np.asarray(point, dtype=float)[None, :],
        np.asarray(normal, dtype=float)[None, :],
        int(seed_frame),
        hypothesis,
        frames,
        clouds,
        cfg,
        sigma2,
    )
    return float(dists[0])


def _point_distances(positions, normals, seed, hyp, frames, clouds, cfg, sigma2):
    """Vectorized core of the data distance for points sharing a seed frame."""
    tau2 = cfg.clamp_dist() ** 2
    inc_alpha = cfg.inc_alpha
    m = len(positions)
    num = np.zeros(m)
    den = np.zeros(m)
    F = len(clouds)
    for f in frames:
        mapped = _map_through(hyp, seed, f, positions, normals)
        if mapped is None:
            continue  # unsupported frame: all terms vanish
        pts_f, nrm_f = mapped
        vis = np.atleast_1d(visibility(pts_f, nrm_f, clouds[f].depth, clouds[f].cam, sigma2))
        d_raw, nn = clouds[f].index.query(pts_f, k=1)
        d2 = d_raw**2
        center = np.minimum(d2, tau2)
        over = d2 > tau2
        inc = np.zeros(m)
        nn_pts = clouds[f].positions[nn]
        for step in (-1, 1):
            g = f + step
            if not (0 <= g < F) or not hyp.defined(g):
                continue
            R, t = hyp.relative_Rt(f, g)
            moved = nn_pts @ R.T + t
            dg, _ = clouds[g].index.query(moved, k=1)
            term = np.minimum(dg**2, tau2)
            inc += np.where(over, tau2, term)
        num += vis * (center + inc_alpha * inc)
        den += vis
    dist = np.where(den > 0, num / np.maximum(den, 1e-300), tau2 * (1.0 + 2.0 * inc_alpha))
    return dist, den


def build_data_term(
    points: SparsePoints, hypotheses, clouds, cfg: PipelineConfig, sigma2, iteration=0
) -> DataTermTable:
    """Distances, likelihoods and costs for every (point, label) pair.

    Per point, distances are normalized to sum to one and min-max mapped
    to [0, 1]; the likelihood is one minus the mapped value, floored to
    keep costs finite.
    """
    ids = sorted(hypotheses)
    m = len(points)
    N = len(ids)
    dist = np.zeros((m, N))
    for f in range(points.num_frames):
        sel = points.frame_indices(f)
        if not len(sel):
            continue
        rng = np.random.default_rng((cfg.seed, 611, iteration, f))
        frames = sample_eval_frames(f, points.num_frames, cfg.k_adjacent, cfg.frame_budget, rng)
        pos = points.positions[sel]
        nrm = points.normals[sel]
        for col, h in enumerate(ids):
            dist[sel, col], _ = _point_distances(
                pos, nrm, f, hypotheses[h], frames, clouds, cfg, sigma2
            )
    return finish_data_term(dist, ids, cfg.like_floor)


def finish_data_term(dist, ids, floor) -> DataTermTable:
    m, N = dist.shape
    likelihood = np.full((m, N), 0.5)
    total = dist.sum(axis=1, keepdims=True)
    normed = np.divide(dist, total, out=np.full_like(dist, 1.0 / max(N, 1)), where=total > 0)
    lo = normed.min(axis=1, keepdims=True)
    hi = normed.max(axis=1, keepdims=True)
    spread = hi - lo
    flat = spread[:, 0] <= 1e-12
    mapped = np.divide(normed - lo, spread, out=np.full_like(dist, 0.5), where=spread > 1e-12)
    likelihood = np.clip(1.0 - mapped, floor, 1.0)
    likelihood[flat] = 0.5
    costs = -np.log(likelihood)
    return DataTermTable(dist, likelihood, costs, list(ids))


# ---------------------------------------------------------------------------
# smoothness graph


def smoothness_cost(p, q, sigma2, floor=1e-3):
    """Pairwise penalty for differing labels, decaying with distance."""
    d2 = float(np.sum((np.asarray(p, dtype=float) - np.asarray(q, dtype=float)) ** 2))
    vmax = -np.log(floor)
    if d2 <= 0:
        return vmax
    return min(-np.log(d2 / (sigma2 + d2)), vmax)


@dataclass
class NeighborhoodGraph:
    edges: np.ndarray  # (e, 2) point indices, symmetrized, u < v
    costs: np.ndarray  # (e,) smoothness values V(p, q)


def build_graph(points: SparsePoints, cfg: PipelineConfig, sigma2) -> NeighborhoodGraph:
    """k1 nearest neighbors in the seed frame plus k2 in each adjacent frame."""
    pair_set = {}
    frame_idx = [points.frame_indices(f) for f in range(points.num_frames)]
    trees = [
        NeighborIndex(points.positions[idx]) if len(idx) else None for idx in frame_idx
    ]

    def add_edges(src_idx, dst_frame, k, same_frame):
        tree = trees[dst_frame]
        if tree is None or k <= 0 or not len(src_idx):
            return
        kk = min(k + (1 if same_frame else 0), len(tree))
        _, nn = tree.query(points.positions[src_idx], k=kk)
        nn = nn.reshape(len(src_idx), kk)
        for row, p in enumerate(src_idx):
            taken = 0
            for col in range(nn.shape[1]):
                q = frame_idx[dst_frame][nn[row, col]]
                if q == p:
                    continue
                taken += 1
                if taken > k:
                    break
                key = (p, q) if p < q else (q, p)
                pair_set.setdefault(key, None)

    for f in range(points.num_frames):
        idx = frame_idx[f]
        add_edges(idx, f, cfg.graph_k1, True)
        for g in (f - 1, f + 1):
            if 0 <= g < points.num_frames:
                add_edges(idx, g, cfg.graph_k2, False)

    if not pair_set:
        return NeighborhoodGraph(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    edges = np.array(sorted(pair_set), dtype=np.int64)
    d2 = np.einsum(
        "ni,ni->n",
        points.positions[edges[:, 0]] - points.positions[edges[:, 1]],
        points.positions[edges[:, 0]] - points.positions[edges[:, 1]],
    )
    vmax = -np.log(cfg.like_floor)
    with np.errstate(divide="ignore"):
        costs = np.where(d2 > 0, -np.log(d2 / (sigma2 + d2)), vmax)
    return NeighborhoodGraph(edges, np.minimum(costs, vmax))


# ---------------------------------------------------------------------------
# alpha-beta swap


def labeling_energy(labels, costs, graph: NeighborhoodGraph, lam):
    data = float(costs[np.arange(len(labels)), labels].sum())
    if len(graph.edges):
        diff = labels[graph.edges[:, 0]] != labels[graph.edges[:, 1]]
        data += lam * float(graph.costs[diff].sum())
    return data


def alpha_beta_swap(costs, graph: NeighborhoodGraph, init_labels, lam, max_sweeps=8):
    """Sweep all label pairs with binary min-cut swap moves.

    The total energy never increases across moves (asserted); sweeps stop
    when no pair improves. Returns (labels, energy, move count).
    """
    m, N = costs.shape
    labels = np.array(init_labels, dtype=np.int64, copy=True)
    energy = labeling_energy(labels, costs, graph, lam)
    moves = 0
    if N < 2:
        return labels, energy, moves

    E = graph.edges
    EV = lam * graph.costs

    for _ in range(max_sweeps):
        improved = False
        for a in range(N):
            for b in range(a + 1, N):
                in_move = (labels == a) | (labels == b)
                nodes = np.nonzero(in_move)[0]
                if len(nodes) == 0:
                    continue
                pos = np.full(m, -1, dtype=np.int64)
                pos[nodes] = np.arange(len(nodes))
                src_cap = costs[nodes, b].astype(float).copy()  # pay b on source side
                snk_cap = costs[nodes, a].astype(float).copy()  # pay a on sink side
                eu = ev = ec = np.zeros(0)
                if len(E):
                    u_in = in_move[E[:, 0]]
                    v_in = in_move[E[:, 1]]
                    both = u_in & v_in
                    eu = pos[E[both, 0]]
                    ev = pos[E[both, 1]]
                    ec = EV[both]
                    # boundary edges to fixed-label neighbors enter the t-links
                    for inner, outer in ((u_in & ~v_in, 1), (v_in & ~u_in, 0)):
                        sel = np.nonzero(inner)[0]
                        if not len(sel):
                            continue
                        p = pos[E[sel, 1 - outer]]
                        hq = labels[E[sel, outer]]
                        np.add.at(src_cap, p, EV[sel] * (hq != b))
                        np.add.at(snk_cap, p, EV[sel] * (hq != a))
                _, side = kernels.mincut(
                    len(nodes), eu.astype(np.int64), ev.astype(np.int64),
                    np.asarray(ec, dtype=float), src_cap, snk_cap,
                )
                # a source-side node pays its sink link (= cost of a), so it
                # takes label a; a sink-side node pays the source link (= b)
                cand = labels.copy()
                cand[nodes[side == 1]] = a
                cand[nodes[side == 0]] = b
                cand_energy = labeling_energy(cand, costs, graph, lam)
                if cand_energy > energy + 1e-9 * (1.0 + abs(energy)):
                    raise AssertionError(
                        f"swap ({a},{b}) increased energy: {energy} -> {cand_energy}"
                    )
                if cand_energy < energy - 1e-12:
                    labels = cand
                    energy = cand_energy
                    moves += 1
                    improved = True
        if not improved:
            break
    return labels, energy, moves


def optimize_labels(
    points: SparsePoints, weights, hypotheses, clouds, cfg: PipelineConfig, sigma2, iteration=0
):
    """Hard-assign every sparse point to a hypothesis via swap moves.

    Seeds from the argmax of the incoming soft weights; returns indicator
    weights, the data table, and diagnostics (energy, empty labels).
    """
    ids = sorted(hypotheses)
    N = len(ids)
    m = len(points)
    if N == 1:
        out = np.ones((m, 1))
        table = build_data_term(points, hypotheses, clouds, cfg, sigma2, iteration)
        return out, table, {"energy": float(table.costs[:, 0].sum()), "moves": 0, "empty": []}
    table = build_data_term(points, hypotheses, clouds, cfg, sigma2, iteration)
    graph = build_graph(points, cfg, sigma2)
    init = np.argmax(np.asarray(weights), axis=1)
    labels, energy, moves = alpha_beta_swap(
        table.costs, graph, init, cfg.smooth_weight, cfg.swap_max_sweeps
    )
    out = np.zeros((m, N))
    out[np.arange(m), labels] = 1.0
    counts = np.bincount(labels, minlength=N)
    empty = [ids[c] for c in range(N) if counts[c] == 0]
    info = {"energy": energy, "moves": moves, "empty": empty, "counts": counts}
    return out, table, info
