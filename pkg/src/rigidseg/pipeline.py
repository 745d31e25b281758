"""Batch driver: initialization, the iterative motion/label coordinate
descent with lifecycle events, post-processing and exports."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import densify, lifecycle, postprocess
from .alignment import IcpPyramid, MotionHypothesis, optimize_motion
from .config import PipelineConfig
from .errors import InputError, PipelineError
from .geometry import backproject
from .labeling import SparsePoints, finish_data_term, optimize_labels
from .sequence_io import export_cloud, export_labels, export_poses, label_color, write_label_png
from .tracks import cluster_trajectories, track_features


@dataclass
class PipelineResult:
    points: SparsePoints
    weights: np.ndarray
    label_ids: list
    hypotheses: dict
    dense_maps: list  # per frame (h, w) int label-id maps, -1 = no data
    report: list
    events: list
    runtime: float


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with stage context
                raise PipelineError(name, str(exc)) from exc

        return run

    return wrap


def _dense_label_maps(clouds, dense_weights, label_ids):
    maps = []
    for cloud, w in zip(clouds, dense_weights):
        out = np.full((cloud.cam.height, cloud.cam.width), -1, dtype=np.int64)
        if len(cloud):
            arg = np.argmax(w, axis=1)
            out[cloud.pixels[:, 0], cloud.pixels[:, 1]] = np.array(label_ids)[arg]
        maps.append(out)
    return maps


def run_pipeline(seq, config: PipelineConfig, out_dir=None, log=print) -> PipelineResult:
    t_start = time.time()
    cfg = PipelineConfig(**{k: v for k, v in vars(config).items() if k != "explicit"})
    cfg.explicit = set(config.explicit)
    cfg.sigma2 = seq.sigma2
    cfg.validate()
    F = seq.num_frames
    report = []
    all_events = []

    def note(line):
        report.append(line)
        if log:
            log(line)

    clouds = _stage("backproject")(
        lambda: [backproject(d, seq.cam, cfg.normal_neighbors) for d in seq.depths]
    )()

    trajectories = _stage("tracks")(track_features)(seq, clouds, cfg)
    if not trajectories:
        raise PipelineError("tracks", "no trackable texture: the tracker produced no trajectories")
    note(f"tracks: {len(trajectories)} trajectories")

    n_clusters = min(cfg.init_clusters, len(trajectories))
    if n_clusters < cfg.init_clusters:
        note(f"init: reducing clusters {cfg.init_clusters} -> {n_clusters} (few trajectories)")
        cfg.init_clusters = n_clusters
    traj_weights, cluster_motions, init_info = _stage("init")(cluster_trajectories)(
        trajectories, F, cfg, np.random.default_rng((cfg.seed, 17))
    )
    note(
        f"init: {n_clusters} clusters, {init_info['iterations']} iterations, "
        f"energy {init_info['energies'][0]:.6g} -> {init_info['energies'][-1]:.6g}"
    )

    label_ids = list(range(n_clusters))
    next_id = n_clusters
    hypotheses = {
        h: MotionHypothesis.from_track(h, cluster_motions.tracks[h]) for h in label_ids
    }

    # initial dense labels interpolated from the labeled trajectories; the
    # clustering weights are sharpened to indicators so each cluster's first
    # motion estimate sees only its own spatial region
    hard_traj = np.zeros_like(traj_weights)
    hard_traj[np.arange(len(trajectories)), traj_weights.argmax(axis=1)] = 1.0
    sample_pos = [[] for _ in range(F)]
    sample_w = [[] for _ in range(F)]
    for ti, tr in enumerate(trajectories):
        for k in range(len(tr)):
            sample_pos[tr.start + k].append(tr.positions[k])
            sample_w[tr.start + k].append(hard_traj[ti])
    sample_pos = [np.array(p).reshape(-1, 3) for p in sample_pos]
    sample_w = [np.array(w).reshape(-1, n_clusters) for w in sample_w]
    dense_weights, fallbacks = _stage("densify")(densify.interpolate_labels)(
        sample_pos, sample_w, clouds, cfg
    )
    if fallbacks:
        note(f"densify: {fallbacks} points beyond interpolation range (uniform fallback)")

    pyramid = _stage("motion")(IcpPyramid.build)(clouds, cfg)
    points = _stage("labels")(SparsePoints.from_clouds)(clouds, cfg.sparse_voxel)
    note(f"sparse set: {len(points)} points over {F} frames")

    weights = None
    table = None

    for it in range(1, cfg.iterations + 1):
        # motion update per label from the dense weights
        def solve_one(col_h):
            col, h = col_h
            return h, optimize_motion(h, pyramid, dense_weights, col, F, seq.cam, cfg)

        jobs = list(enumerate(label_ids))
        solver = _stage("motion")(solve_one)
        new_hyps = {}
        dropped = []
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(solver, jobs))
        else:
            results = [solver(j) for j in jobs]
        for h, hyp in results:
            if "no-pairs" in hyp.flags:
                dropped.append(h)
            else:
                new_hyps[h] = hyp
        if dropped:
            note(f"iter {it}: dropping motionless labels {dropped}")
            keep_cols = [c for c, h in enumerate(label_ids) if h not in dropped]
            label_ids = [h for h in label_ids if h not in dropped]
            dense_weights = [w[:, keep_cols] for w in dense_weights]
            s = np.array([w.sum(axis=1) for w in dense_weights], dtype=object)
            dense_weights = [
                w / np.maximum(w.sum(axis=1, keepdims=True), 1e-300) for w in dense_weights
            ]
        hypotheses = new_hyps
        if not hypotheses:
            raise PipelineError("motion", "all labels lost their support")

        # sparse weights pulled from the dense labeling at the seed points
        weights = np.zeros((len(points), len(label_ids)))
        for f in range(F):
            idx = points.frame_indices(f)
            if len(idx):
                weights[idx] = dense_weights[f][points.dense_index[idx]]

        # the eval-frame sampling is seeded per point (not per iteration) so
        # data costs stay comparable across iterations and labels settle
        weights, table, lab_info = _stage("labels")(optimize_labels)(
            points, weights, hypotheses, clouds, cfg, cfg.sigma2, iteration=0
        )
        note(
            f"iter {it}: labels={len(label_ids)} energy={lab_info['energy']:.6g} "
            f"moves={lab_info['moves']} empty={lab_info['empty']}"
        )

        if cfg.snapshots and out_dir:
            snap_dir = os.path.join(out_dir, f"labels_iter{it:02d}")
            os.makedirs(snap_dir, exist_ok=True)
            snap_dense, _ = densify.interpolate_labels(
                [points.positions[points.frame_indices(f)] for f in range(F)],
                [weights[points.frame_indices(f)] for f in range(F)],
                clouds,
                cfg,
            )
            for f, lm in enumerate(_dense_label_maps(clouds, snap_dense, label_ids)):
                write_label_png(os.path.join(snap_dir, f"{f:06d}.png"), lm)

        # lifecycle: events + spawns (not on the last iteration), then pruning
        if cfg.lifecycle and it < cfg.iterations:
            events = _stage("events")(
                lambda: lifecycle.detect_events(
                    lifecycle.transfer_stack(points, weights, hypotheses, label_ids, cfg),
                    lifecycle.usage_fractions(points, weights, len(label_ids)),
                    label_ids,
                    cfg,
                )
            )()
            for ev in events:
                all_events.append((it, ev))
                note(f"iter {it}: event {ev}")
            for ev in events:
                if ev.kind != "switch":
                    continue
                spawned = lifecycle.spawn_recombined_label(points, weights, ev, label_ids, next_id)
                if spawned is None:
                    note(f"iter {it}: spawn rejected at boundary frame {ev.frame}")
                    continue
                weights, label_ids = spawned
                note(f"iter {it}: spawned label {next_id} from switch {ev.source}->{ev.target}")
                next_id += 1

        if cfg.lifecycle:
            weights, kept_ids, removed = _stage("prune")(lifecycle.prune_labels)(
                points, weights, label_ids, cfg
            )
            if removed:
                note(f"iter {it}: pruned labels {removed}")
            label_ids = kept_ids
            hypotheses = {h: hyp for h, hyp in hypotheses.items() if h in label_ids}

        # upsample the (possibly soft again) sparse labels for the next pass
        dense_weights, _ = _stage("densify")(densify.interpolate_labels)(
            [points.positions[points.frame_indices(f)] for f in range(F)],
            [weights[points.frame_indices(f)] for f in range(F)],
            clouds,
            cfg,
        )

    # post-processing: label fusion on the final table, restricted to kept ids
    cols = [table.label_ids.index(h) for h in label_ids if h in table.label_ids]
    kept_ids = [h for h in label_ids if h in table.label_ids]
    sub = finish_data_term(table.distances[:, cols], kept_ids, cfg.like_floor)
    hard = np.argmax(weights[:, [label_ids.index(h) for h in kept_ids]], axis=1)
    fused_labels, merges = _stage("fuse")(postprocess.fuse_labels)(hard, sub, cfg)
    for src, dst in merges:
        note(f"fuse: label {src} -> {dst}")
    label_ids = sorted(set(kept_ids[c] for c in fused_labels))
    hypotheses = {h: hypotheses[h] for h in label_ids}
    weights = np.zeros((len(points), len(label_ids)))
    weights[np.arange(len(points)), [label_ids.index(kept_ids[c]) for c in fused_labels]] = 1.0

    dense_weights, _ = _stage("densify")(densify.interpolate_labels)(
        [points.positions[points.frame_indices(f)] for f in range(F)],
        [weights[points.frame_indices(f)] for f in range(F)],
        clouds,
        cfg,
    )
    dense_maps = _dense_label_maps(clouds, dense_weights, label_ids)
    note(f"final: {len(label_ids)} labels {label_ids}")

    if out_dir:
        _stage("export")(_export_all)(
            out_dir, seq, clouds, points, weights, label_ids, hypotheses, dense_maps,
            dense_weights, cfg, report, all_events,
        )

    return PipelineResult(
        points, weights, label_ids, hypotheses, dense_maps, report, all_events,
        time.time() - t_start,
    )


def _export_all(
    out_dir, seq, clouds, points, weights, label_ids, hypotheses, dense_maps,
    dense_weights, cfg, report, events,
):
    os.makedirs(out_dir, exist_ok=True)
    export_labels(dense_maps, points, weights, label_ids, os.path.join(out_dir, "labels"))
    export_poses(hypotheses, os.path.join(out_dir, "poses.txt"))

    colors = []
    for f, cloud in enumerate(clouds):
        if seq.intensities[f] is not None:
            g = seq.intensities[f][cloud.pixels[:, 0], cloud.pixels[:, 1]]
            colors.append(np.clip(np.stack([g, g, g], axis=1), 0, 255).astype(np.uint8))
        else:
            colors.append(None)

    target = cfg.accumulate_target if cfg.accumulate_target >= 0 else seq.num_frames // 2
    dense_cols = []
    for f in range(seq.num_frames):
        arg = np.argmax(dense_weights[f], axis=1) if len(clouds[f]) else np.zeros(0, dtype=int)
        dense_cols.append(arg)
    pos, nrm, col, lab = postprocess.accumulate_cloud(
        clouds, dense_cols, hypotheses, label_ids, target, colors
    )
    if len(pos):
        export_cloud(pos, nrm, col, lab, os.path.join(out_dir, "accumulated.ply"))
        for h in label_ids:
            sel = lab == h
            if sel.any():
                tint = np.tile(label_color(h), (int(sel.sum()), 1))
                export_cloud(
                    pos[sel], nrm[sel], tint, lab[sel], os.path.join(out_dir, f"object_{h:03d}.ply")
                )

    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(report) + "\n")
    with open(os.path.join(out_dir, "events.log"), "w", encoding="utf-8") as fh:
        for it, ev in events:
            tgt = "-" if ev.target is None else ev.target
            fh.write(f"{it} {ev.kind} {ev.frame} {ev.source} {tgt} {ev.score:.9g}\n")
    with open(os.path.join(out_dir, "run_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
