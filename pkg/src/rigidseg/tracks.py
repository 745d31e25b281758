"""Sparse scene-point trajectories and their soft clustering into initial
motion hypotheses.

The tracker is pyramidal block matching with a forward-backward
consistency check, lifted to 3D through the depth channel; externally
computed tracks can be imported instead (see sequence_io). Clustering
alternates a projected gradient step on the per-trajectory cluster
weights with per-cluster pose re-estimation, driving down the total
weighted point-to-plane alignment error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import kernels
from .config import PipelineConfig
from .errors import InputError
from .geometry import PoseTrack
from .pose_lm import solve_pose_graph
from .sequence_io import read_trajectory_file


@dataclass
class Trajectory:
    """One tracked scene point over consecutive frames."""

    start: int
    pixels: np.ndarray  # (L, 2) float, (x, y) per frame
    positions: np.ndarray  # (L, 3) camera-frame 3D positions, meters
    normals: np.ndarray  # (L, 3)

    def __len__(self):
        return len(self.positions)

    @property
    def last(self):
        return self.start + len(self) - 1

    @property
    def seed_offset(self):
        return (len(self) - 1) // 2

    @property
    def seed_frame(self):
        return self.start + self.seed_offset

    def frames(self):
        return np.arange(self.start, self.start + len(self))


# ---------------------------------------------------------------------------
# simplex projection


def project_simplex(v):
    """Euclidean projection of one vector onto {w >= 0, sum w = 1}."""
    return project_simplex_rows(np.asarray(v, dtype=float)[None, :])[0]


def project_simplex_rows(M):
    """Row-wise simplex projection (sort-based)."""
    M = np.asarray(M, dtype=float)
    a = -np.sort(-M, axis=1)
    cs = np.cumsum(a, axis=1) - 1.0
    k = np.arange(1, M.shape[1] + 1)
    cond = a - cs / k > 0
    rho = cond.cumsum(axis=1).argmax(axis=1)
    theta = cs[np.arange(len(M)), rho] / (rho + 1)
    return np.maximum(M - theta[:, None], 0.0)


def check_cluster_weights(W, tol=1e-9):
    W = np.asarray(W)
    if np.any(W < -tol):
        raise InputError("cluster weights must be nonnegative")
    if np.any(np.abs(W.sum(axis=1) - 1.0) > tol):
        raise InputError("cluster weight rows must sum to one")


# ---------------------------------------------------------------------------
# feature tracking


def _downsample2(img):
    h, w = img.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    c = img[:h2, :w2]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def _pyramid(img, levels):
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        nxt = _downsample2(pyr[-1])
        if min(nxt.shape) < 8:
            break
        pyr.append(nxt)
    return pyr


def detect_corners(img, max_n, min_sep, margin):
    """Min-eigenvalue corner response with greedy separation, strongest first."""
    gy, gx = np.gradient(np.asarray(img, dtype=np.float64))
    sxx = uniform_filter(gx * gx, 3)
    syy = uniform_filter(gy * gy, 3)
    sxy = uniform_filter(gx * gy, 3)
    tr = sxx + syy
    resp = 0.5 * (tr - np.sqrt((sxx - syy) ** 2 + 4 * sxy * sxy))
    resp[:margin, :] = 0
    resp[-margin:, :] = 0
    resp[:, :margin] = 0
    resp[:, -margin:] = 0
    h, w = resp.shape
    flat = resp.ravel()
    order = np.argsort(-flat, kind="stable")
    floor = 1e-6 * max(flat.max(), 1e-12)
    picked = []
    taken = np.zeros((h, w), dtype=bool)
    rad = max(int(np.ceil(min_sep)), 1)
    for k in order:
        if len(picked) >= max_n or flat[k] <= floor:
            break
        r, c = divmod(int(k), w)
        if taken[r, c]:
            continue
        picked.append((float(c), float(r)))
        taken[max(0, r - rad) : r + rad + 1, max(0, c - rad) : c + rad + 1] = True
    return np.array(picked, dtype=float).reshape(-1, 2)


def _pyramid_track(pyr_a, pyr_b, pts, cfg: PipelineConfig):
    """Coarse-to-fine block matching of pts from image a into image b."""
    levels = min(len(pyr_a), len(pyr_b))
    half = cfg.track_patch // 2
    top = levels - 1
    guess = pts / (2.0**top)
    ok = np.ones(len(pts), dtype=bool)
    for lvl in range(top, -1, -1):
        p_l = pts / (2.0**lvl)
        radius = cfg.track_search_radius if lvl == top else 1
        guess, _, ok_l = kernels.match_patches(pyr_a[lvl], pyr_b[lvl], p_l, guess, half, radius)
        ok &= ok_l.astype(bool)
        if lvl > 0:
            guess = guess * 2.0
    return guess, ok


def _lift(x, y, cloud, cam):
    """3D position and normal at a subpixel location; None over missing depth."""
    c = int(round(x))
    r = int(round(y))
    if not (0 <= r < cam.height and 0 <= c < cam.width):
        return None
    idx = cloud.index_map[r, c]
    if idx < 0:
        return None
    z = cloud.depth.values[r, c]
    pos = cam.backproject_pixels(np.array([y]), np.array([x]), np.array([z]))[0]
    return pos, cloud.normals[idx].copy()


def track_features(seq, clouds, cfg: PipelineConfig):
    """Trajectories for a sequence; imported from file when configured."""
    if cfg.track_import:
        return import_trajectories(cfg.track_import, seq, clouds)
    if not seq.has_intensity():
        raise InputError("sequence has no tracking channel (intensity/ or rgb/)")
    F = seq.num_frames
    pyrs = [_pyramid(seq.intensities[f], cfg.track_pyramid_levels) for f in range(F)]
    margin = cfg.track_patch // 2 + cfg.track_search_radius + 1

    done = []
    active = []  # dicts: start, pixels, positions, normals

    def finalize(tr):
        if len(tr["positions"]) >= cfg.track_min_length:
            done.append(
                Trajectory(
                    tr["start"],
                    np.array(tr["pixels"]),
                    np.array(tr["positions"]),
                    np.array(tr["normals"]),
                )
            )

    for f in range(F - 1):
        # replenish features in frame f
        capacity = cfg.track_max_features - len(active)
        if capacity > 0:
            corners = detect_corners(
                seq.intensities[f], cfg.track_max_features * 2, cfg.track_min_separation, margin
            )
            occupied = np.array([tr["pixels"][-1] for tr in active]).reshape(-1, 2)
            for x, y in corners:
                if capacity <= 0:
                    break
                if len(occupied) and np.min(np.hypot(occupied[:, 0] - x, occupied[:, 1] - y)) < cfg.track_min_separation:
                    continue
                lifted = _lift(x, y, clouds[f], seq.cam)
                if lifted is None:
                    continue
                active.append(
                    {
                        "start": f,
                        "pixels": [(x, y)],
                        "positions": [lifted[0]],
                        "normals": [lifted[1]],
                    }
                )
                occupied = np.vstack([occupied, [[x, y]]]) if len(occupied) else np.array([[x, y]])
                capacity -= 1

        if not active:
            continue
        pts = np.array([tr["pixels"][-1] for tr in active], dtype=float)
        fwd, ok_f = _pyramid_track(pyrs[f], pyrs[f + 1], pts, cfg)
        bwd, ok_b = _pyramid_track(pyrs[f + 1], pyrs[f], fwd, cfg)
        consistent = np.hypot(bwd[:, 0] - pts[:, 0], bwd[:, 1] - pts[:, 1]) <= cfg.track_fb_threshold
        ok = ok_f & ok_b & consistent

        survivors = []
        for i, tr in enumerate(active):
            lifted = _lift(fwd[i, 0], fwd[i, 1], clouds[f + 1], seq.cam) if ok[i] else None
            if lifted is not None:
                # a large depth step means the patch hopped across an
                # occlusion boundary; cut the track there
                if abs(lifted[0][2] - tr["positions"][-1][2]) > cfg.track_depth_jump:
                    lifted = None
            if lifted is None:
                finalize(tr)
                continue
            tr["pixels"].append((fwd[i, 0], fwd[i, 1]))
            tr["positions"].append(lifted[0])
            tr["normals"].append(lifted[1])
            if cfg.track_max_length and len(tr["positions"]) >= cfg.track_max_length:
                finalize(tr)
            else:
                survivors.append(tr)
        active = survivors

    for tr in active:
        finalize(tr)
    done.sort(key=lambda t: (t.start, t.pixels[0, 0], t.pixels[0, 1]))
    return done


def import_trajectories(path, seq, clouds):
    """Build trajectories from an import file of 3D tracks."""
    out = []
    for start, positions in read_trajectory_file(path):
        L = len(positions)
        if start < 0 or start + L > seq.num_frames:
            raise InputError(f"{path}: track [{start}, {start + L}) outside the sequence")
        u, v, _ = seq.cam.project(positions)
        pixels = np.stack([u, v], axis=1)
        normals = np.zeros_like(positions)
        for k in range(L):
            _, idx = clouds[start + k].index.query(positions[k][None, :], k=1)
            normals[k] = clouds[start + k].normals[int(np.atleast_1d(idx)[0])]
        out.append(Trajectory(start, pixels, positions, normals))
    return out


# ---------------------------------------------------------------------------
# soft clustering of trajectories


@dataclass
class ClusterMotions:
    tracks: list  # PoseTrack per cluster
    unreliable: set = field(default_factory=set)

    def __len__(self):
        return len(self.tracks)


def _flatten_residuals(trajectories):
    """Stack all (seed -> frame) alignment residual definitions."""
    traj_id = []
    idx_i = []
    idx_j = []
    src = []
    tgt = []
    nrm = []
    for ti, tr in enumerate(trajectories):
        s = tr.seed_offset
        p_seed = tr.positions[s]
        for k in range(len(tr)):
            if k == s:
                continue
            traj_id.append(ti)
            idx_i.append(tr.seed_frame)
            idx_j.append(tr.start + k)
            src.append(p_seed)
            tgt.append(tr.positions[k])
            nrm.append(tr.normals[k])
    return (
        np.array(traj_id, dtype=np.int64),
        np.array(idx_i, dtype=np.int64),
        np.array(idx_j, dtype=np.int64),
        np.array(src, dtype=float).reshape(-1, 3),
        np.array(tgt, dtype=float).reshape(-1, 3),
        np.array(nrm, dtype=float).reshape(-1, 3),
    )


def point_plane_costs(motions: ClusterMotions, trajectories):
    """(T, N) matrix of per-trajectory, per-cluster alignment errors.

    Entry (t, h) is the sum over the trajectory's frames of the squared
    point-to-plane distance after mapping the seed point with cluster h's
    motion. Frames where a cluster has no pose contribute zero.
    """
    T = len(trajectories)
    N = len(motions.tracks)
    costs = np.zeros((T, N))
    if T == 0:
        return costs
    traj_id, idx_i, idx_j, src, tgt, nrm = _flatten_residuals(trajectories)
    for h, track in enumerate(motions.tracks):
        lo, hi = track.support
        mask = (idx_i >= lo) & (idx_i <= hi) & (idx_j >= lo) & (idx_j <= hi)
        if not np.any(mask):
            continue
        Ri = track.R[idx_i[mask]]
        Rj = track.R[idx_j[mask]]
        R_rel = Rj @ np.transpose(Ri, (0, 2, 1))
        t_rel = track.t[idx_j[mask]] - np.einsum("nab,nb->na", R_rel, track.t[idx_i[mask]])
        x = np.einsum("nab,nb->na", R_rel, src[mask]) + t_rel
        r = np.einsum("ni,ni->n", x - tgt[mask], nrm[mask])
        np.add.at(costs[:, h], traj_id[mask], r * r)
    return costs


def init_energy(weights, motions: ClusterMotions, trajectories):
    """Total weighted alignment error of the soft clustering."""
    return float(np.sum(np.asarray(weights) * point_plane_costs(motions, trajectories)))


def descent_step(weights, motions: ClusterMotions, trajectories, step_norm):
    """One projected gradient step on the weights, motions held fixed.

    The gradient w.r.t. each weight is that trajectory/cluster alignment
    error; the step is rescaled to ``step_norm`` and every row re-projected
    onto the probability simplex.
    """
    g = point_plane_costs(motions, trajectories)
    norm = np.linalg.norm(g)
    if norm == 0:
        return np.array(weights, dtype=float, copy=True)
    delta = -g * (step_norm / norm)
    return project_simplex_rows(np.asarray(weights, dtype=float) + delta)


def solve_cluster_motions(
    weights, trajectories, num_frames, cfg: PipelineConfig, initial: ClusterMotions | None = None
) -> ClusterMotions:
    """Per-cluster pose sequences minimizing the weighted alignment error.

    Degenerate clusters (a frame supported by fewer than 3 effective,
    non-collinear points) are flagged and keep their previous poses there.
    """
    weights = np.asarray(weights, dtype=float)
    N = weights.shape[1]
    traj_id, idx_i, idx_j, src, tgt, nrm = _flatten_residuals(trajectories)
    starts = np.array([tr.start for tr in trajectories])
    lasts = np.array([tr.last for tr in trajectories])
    lo, hi = int(starts.min()), int(lasts.max())

    tracks = []
    unreliable = set()
    for h in range(N):
        w_res = weights[traj_id, h]
        prev = initial.tracks[h] if initial is not None else None
        if weights[:, h].sum() <= 0:
            track = prev.copy() if prev is not None else PoseTrack(num_frames)
            track.support = (lo, hi)
            unreliable.add(h)
            tracks.append(track)
            continue

        # gauge at the cluster's weighted median supported frame
        frame_mass = np.zeros(num_frames)
        for ti, tr in enumerate(trajectories):
            if weights[ti, h] > 0:
                frame_mass[tr.start : tr.last + 1] += weights[ti, h]
        cum = np.cumsum(frame_mass)
        gauge = int(np.searchsorted(cum, cum[-1] / 2.0))

        degenerate_frames = []
        for f in range(lo, hi + 1):
            cover = (starts <= f) & (lasts >= f) & (weights[:, h] > 0)
            neff = weights[cover, h].sum()
            if neff < 3.0:
                pts = np.array([trajectories[ti].positions[f - trajectories[ti].start] for ti in np.nonzero(cover)[0]])
                if len(pts) < 3:
                    degenerate_frames.append(f)
                    continue
                wc = weights[cover, h]
                mu = (pts * wc[:, None]).sum(axis=0) / wc.sum()
                cov = np.einsum("ni,nj->ij", (pts - mu) * wc[:, None], pts - mu) / wc.sum()
                if np.linalg.eigvalsh(cov)[1] < 1e-10:
                    degenerate_frames.append(f)

        R0 = prev.R if prev is not None else np.tile(np.eye(3), (num_frames, 1, 1))
        t0 = prev.t if prev is not None else np.zeros((num_frames, 3))
        res = solve_pose_graph(
            num_frames,
            R0,
            t0,
            idx_i,
            idx_j,
            src,
            tgt,
            nrm,
            w_res,
            alpha=0.0,
            gauge=gauge,
            max_iters=50,
            rel_tol=1e-6,
        )
        track = PoseTrack(num_frames, res.R, res.t, (lo, hi))
        if degenerate_frames:
            unreliable.add(h)
            for f in degenerate_frames:
                if prev is not None:
                    track.R[f] = prev.R[f]
                    track.t[f] = prev.t[f]
                track.flags.add(f"degenerate:{f}")
        tracks.append(track)
    return ClusterMotions(tracks, unreliable)


def _velocity_descriptors(trajectories, num_frames, windows=2):
    """Per-trajectory motion summaries: mean velocity over the whole track
    (weighted up; it averages out most depth noise) plus means over a few
    windows of the sequence timeline to keep time structure."""
    T = len(trajectories)
    bounds = np.linspace(0, num_frames - 1, windows + 1).astype(int)
    desc = np.zeros((T, 3 * (windows + 1)))
    for ti, tr in enumerate(trajectories):
        vel = np.diff(tr.positions, axis=0)
        if len(vel) == 0:
            continue
        mean_v = vel.mean(axis=0)
        desc[ti, :3] = 2.0 * mean_v
        vel_frames = np.arange(tr.start, tr.start + len(vel))
        for wi in range(windows):
            sel = (vel_frames >= bounds[wi]) & (vel_frames < bounds[wi + 1])
            desc[ti, 3 * (wi + 1) : 3 * (wi + 2)] = vel[sel].mean(axis=0) if sel.any() else mean_v
    std = desc.std(axis=0)
    std[std == 0] = 1.0
    return desc / std


def _initial_weights(trajectories, num_frames, N, strength, rng):
    """Uniform weights plus a deterministic per-trajectory perturbation.

    Pure noise perturbations decay into symmetric compromise minima where
    every cluster fits a blend of motions, so the perturbation is instead
    a coarse velocity grouping (seeded k-means); the alignment-error
    descent then does the actual sorting.
    """
    from scipy.cluster.vq import kmeans2

    T = len(trajectories)
    desc = _velocity_descriptors(trajectories, num_frames)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, assign = kmeans2(desc, N, minit="++", seed=int(rng.integers(2**31)), iter=20)
    w = np.full((T, N), (1.0 - strength) / N)
    w[np.arange(T), assign] += strength
    return project_simplex_rows(w)


def cluster_trajectories(trajectories, num_frames, cfg: PipelineConfig, rng=None):
    """Alternate weight descent and motion re-estimation until converged.

    Returns (weights, motions, info); info records the energy after every
    full iteration (non-increasing up to solver tolerance).
    """
    N = cfg.init_clusters
    if len(trajectories) < N:
        raise InputError(f"need at least {N} trajectories for {N} clusters, got {len(trajectories)}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    T = len(trajectories)
    weights = _initial_weights(trajectories, num_frames, N, cfg.init_jitter, rng)

    motions = solve_cluster_motions(weights, trajectories, num_frames, cfg, initial=None)
    energy = init_energy(weights, motions, trajectories)
    energies = [energy]
    for _ in range(cfg.init_max_iters):
        weights = descent_step(weights, motions, trajectories, cfg.init_step_norm)
        motions = solve_cluster_motions(weights, trajectories, num_frames, cfg, initial=motions)
        new_energy = init_energy(weights, motions, trajectories)
        energies.append(new_energy)
        drop = energy - new_energy
        energy = new_energy
        if drop < cfg.init_rel_tol * max(abs(energy), 1e-12):
            break
    info = {"energies": energies, "iterations": len(energies) - 1, "unreliable": motions.unreliable}
    return weights, motions, info
