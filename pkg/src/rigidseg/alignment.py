"""Per-label motion re-estimation: weighted coarse-to-fine ICP over selected
frame pairs, with loop-closure pairs to suppress drift.

Pass 1 aligns adjacent frame pairs from identity guesses; pass 2 extends
the pair set with loop closures chosen greedily to be as far as possible
from already-selected pairs, then re-runs the ICP from the pass-1 poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .errors import InputError
from .geometry import NeighborIndex, PoseTrack, voxel_downsample_indices
from .pose_lm import solve_pose_graph


class MotionHypothesis(PoseTrack):
    """A label's per-frame poses; relative motions compose exactly."""

    def __init__(self, label, num_frames, R=None, t=None, support=None, flags=None):
        super().__init__(num_frames, R, t, support, flags or set())
        self.label = label

    @classmethod
    def from_track(cls, label, track: PoseTrack):
        return cls(label, track.num_frames, track.R.copy(), track.t.copy(), track.support, set(track.flags))


@dataclass
class CorrespondenceSet:
    """Point pairs for one frame pair, weighted by label relevance."""

    frame_i: int
    frame_j: int
    src: np.ndarray  # (n, 3) points in frame i
    tgt: np.ndarray  # (n, 3) points in frame j
    tgt_normals: np.ndarray
    weights: np.ndarray  # w_max = max of the two endpoint label weights

    def __len__(self):
        return len(self.src)


@dataclass
class IcpPyramid:
    """Shared per-level, per-frame downsampled geometry for the ICP."""

    levels: list  # per level: list over frames of dict(indices, positions, normals, index)

    @classmethod
    def build(cls, clouds, cfg: PipelineConfig):
        levels = []
        for lvl in range(cfg.icp_levels):
            # densities grow ~4x per level: voxel edge shrinks by 4^(1/3)
            voxel = cfg.icp_voxel_fine * 4.0 ** ((cfg.icp_levels - 1 - lvl) / 3.0)
            frames = []
            for cloud in clouds:
                idx = voxel_downsample_indices(cloud.positions, voxel)
                frames.append(
                    {
                        "indices": idx,
                        "positions": cloud.positions[idx],
                        "normals": cloud.normals[idx],
                        "index": NeighborIndex(cloud.positions[idx], cloud.normals[idx]),
                    }
                )
            levels.append(frames)
        return cls(levels)

    def label_weights(self, dense_weights, column):
        """Per-level, per-frame weight arrays for one label column."""
        out = []
        for frames in self.levels:
            out.append([dense_weights[f][frames[f]["indices"], column] for f in range(len(frames))])
        return out


def alignment_energy(correspondences, poses: PoseTrack, alpha):
    """Weighted sum of squared point-to-plane plus point-to-point distances."""
    total = 0.0
    for c in correspondences:
        if len(c) == 0:
            continue
        x = poses.transform(c.frame_i, c.frame_j, c.src)
        e = x - c.tgt
        plane = np.einsum("ni,ni->n", e, c.tgt_normals)
        norm = np.sqrt(np.einsum("ni,ni->n", e, e))
        total += float(np.sum(c.weights * (plane * plane + alpha * norm)))
    return total


def lm_refine(correspondences, poses: PoseTrack, alpha, cfg: PipelineConfig, gauge=None, rel_tol=None):
    """Minimize the alignment energy over poses with correspondences fixed.

    One pose per connected component is gauge-fixed. Returns the refined
    track and a degeneracy flag (rank-deficient normal equations).
    """
    blocks = [c for c in correspondences if len(c)]
    if not blocks:
        return poses.copy(), False
    idx_i = np.concatenate([np.full(len(c), c.frame_i, dtype=np.int64) for c in blocks])
    idx_j = np.concatenate([np.full(len(c), c.frame_j, dtype=np.int64) for c in blocks])
    src = np.concatenate([c.src for c in blocks])
    tgt = np.concatenate([c.tgt for c in blocks])
    nrm = np.concatenate([c.tgt_normals for c in blocks])
    w = np.concatenate([c.weights for c in blocks])
    if gauge is None:
        gauge = int(min(min(c.frame_i, c.frame_j) for c in blocks))
    res = solve_pose_graph(
        poses.num_frames,
        poses.R,
        poses.t,
        idx_i,
        idx_j,
        src,
        tgt,
        nrm,
        w,
        alpha=alpha,
        gauge=gauge,
        max_iters=cfg.lm_max_iters,
        rel_tol=cfg.lm_rel_tol if rel_tol is None else rel_tol,
    )
    out = PoseTrack(poses.num_frames, res.R, res.t, poses.support, set(poses.flags))
    return out, res.degenerate


def find_correspondences(level_frames, weights, pair, poses: PoseTrack, cfg: PipelineConfig):
    """Nearest-neighbor correspondences for one frame pair at one level.

    Only source points carrying the label (weight above the floor) are
    matched, which keeps the per-label cost proportional to its region.
    """
    i, j = pair
    empty = CorrespondenceSet(i, j, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    sel = np.nonzero(weights[i] > cfg.icp_weight_floor)[0]
    if len(sel) == 0 or len(level_frames[j]["positions"]) == 0:
        return empty
    src_pts = level_frames[i]["positions"][sel]
    mapped = poses.transform(i, j, src_pts)
    dist, nn = level_frames[j]["index"].query(mapped, k=1)
    tgt_pts = level_frames[j]["positions"][nn]
    tgt_nrm = level_frames[j]["normals"][nn]
    src_nrm_mapped = poses.rotate(i, j, level_frames[i]["normals"][sel])
    cos_lim = np.cos(np.radians(cfg.icp_normal_angle_deg))
    w = np.maximum(weights[i][sel], weights[j][nn])
    keep = np.nonzero(
        (dist <= cfg.icp_reject_dist())
        & (np.einsum("ni,ni->n", src_nrm_mapped, tgt_nrm) >= cos_lim)
        & (w > cfg.icp_weight_floor)
    )[0]
    if len(keep) > cfg.icp_max_corr:  # even stride, deterministic
        keep = keep[:: int(np.ceil(len(keep) / cfg.icp_max_corr))]
    return CorrespondenceSet(i, j, src_pts[keep], tgt_pts[keep], tgt_nrm[keep], w[keep])


def icp_solve(
    label,
    pyramid: IcpPyramid,
    level_weights,
    pairs,
    num_frames,
    cfg: PipelineConfig,
    initial: PoseTrack | None = None,
    support=None,
) -> MotionHypothesis:
    """Alternate correspondence search and pose refinement, coarse to fine."""
    poses = initial.copy() if initial is not None else PoseTrack(num_frames)
    if support is not None:
        poses.support = support
    degenerate = False
    gauge = int(min(min(p) for p in pairs)) if pairs else 0
    final_level = len(pyramid.levels) - 1
    for lvl, frames in enumerate(pyramid.levels):
        weights = level_weights[lvl]
        prev_energy = None
        # coarse rounds can stop early; the finest level uses the full tolerance
        tol = cfg.lm_rel_tol if lvl == final_level else max(cfg.lm_rel_tol, 1e-7)
        for _ in range(cfg.icp_rounds_per_level):
            corr = [find_correspondences(frames, weights, p, poses, cfg) for p in pairs]
            poses, degen = lm_refine(corr, poses, cfg.resolved_align_alpha(), cfg, gauge=gauge, rel_tol=tol)
            degenerate = degenerate or degen
            energy = alignment_energy(corr, poses, cfg.resolved_align_alpha())
            if prev_energy is not None and prev_energy - energy <= 1e-6 * max(prev_energy, 1e-30):
                break
            prev_energy = energy
    hyp = MotionHypothesis(label, num_frames, poses.R, poses.t, poses.support, set(poses.flags))
    if degenerate:
        hyp.flags.add("degenerate")
    return hyp


def object_centroids(level_frames, weights, min_mass):
    """Per-frame centroid of the points that clearly carry the label."""
    cents = {}
    for f, frame in enumerate(level_frames):
        sel = weights[f] > 0.5
        if np.sum(weights[f][sel]) < min_mass:
            continue
        w = weights[f][sel]
        cents[f] = (frame["positions"][sel] * w[:, None]).sum(axis=0) / w.sum()
    return cents


def eligible_pairs(hypothesis: PoseTrack, centroids, cam, max_angle_deg=45.0, max_ratio=2.0):
    """Loop-closure candidates: both centroids visible from both frames,
    seen from similar directions, at comparable distance."""
    frames = sorted(centroids)
    out = []
    cos_lim = np.cos(np.radians(max_angle_deg))
    for a_i in range(len(frames)):
        for b_i in range(a_i + 2, len(frames)):  # skip adjacent pairs
            k, l = frames[a_i], frames[b_i]
            ck, cl = centroids[k], centroids[l]
            ck_in_l = hypothesis.transform(k, l, ck)
            cl_in_k = hypothesis.transform(l, k, cl)
            _, _, _, ok1 = cam.project_to_pixels(ck_in_l[None, :])
            _, _, _, ok2 = cam.project_to_pixels(cl_in_k[None, :])
            if not (ok1[0] and ok2[0]):
                continue
            dk = np.linalg.norm(ck)
            dl = np.linalg.norm(cl)
            if dk <= 0 or dl <= 0 or max(dk, dl) / min(dk, dl) > max_ratio:
                continue
            dir_k_in_l = hypothesis.rotate(k, l, ck / dk)
            if float(dir_k_in_l @ (cl / dl)) < cos_lim:
                continue
            out.append((k, l))
    return out


def select_frame_pairs(eligible, base_pairs, budget):
    """Greedily add eligible pairs as distant as possible from chosen ones."""
    S = list(base_pairs)
    remaining = list(eligible)
    for _ in range(budget):
        if not remaining:
            break
        best = None
        best_key = None
        for (k, l) in remaining:
            d = min(abs(k - i) + abs(j - l) for (i, j) in S) if S else 0
            key = (-d, k, l)
            if best_key is None or key < best_key:
                best_key = key
                best = (k, l)
        S.append(best)
        remaining.remove(best)
    return S


def optimize_motion(
    label, pyramid: IcpPyramid, dense_weights, column, num_frames, cam, cfg: PipelineConfig
) -> MotionHypothesis:
    """Two-pass ICP for one label: adjacent pairs from identity, then an
    extended pair set with loop closures starting from the pass-1 poses."""
    level_weights = pyramid.label_weights(dense_weights, column)
    fine = level_weights[-1]
    mass = np.array([w.sum() for w in fine])
    supported = mass >= cfg.icp_min_mass
    if not supported.any():
        raise InputError(f"label {label} has no weight mass in any frame")
    lo = int(np.argmax(supported))
    hi = int(num_frames - 1 - np.argmax(supported[::-1]))
    adjacent = [(f, f + 1) for f in range(lo, hi) if supported[f] and supported[f + 1]]

    if not adjacent:
        hyp = MotionHypothesis(label, num_frames, support=(lo, hi))
        hyp.flags.add("no-pairs")
        return hyp

    hyp = icp_solve(label, pyramid, level_weights, adjacent, num_frames, cfg, support=(lo, hi))

    budget = cfg.resolved_loop_budget(hi - lo + 1)
    if budget > 0 and hi - lo + 1 > 2:
        cents = object_centroids(pyramid.levels[-1], fine, cfg.icp_min_mass)
        loops = eligible_pairs(hyp, cents, cam, cfg.icp_normal_angle_deg * 0 + 45.0)
        extended = select_frame_pairs(loops, adjacent, budget)
        if len(extended) > len(adjacent):
            hyp = icp_solve(label, pyramid, level_weights, extended, num_frames, cfg, initial=hyp, support=(lo, hi))

    hyp.fill_from_nearest(supported)
    return hyp
