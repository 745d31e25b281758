"""Post-processing: fuse redundant labels whose data cost barely changes
under another label's motion, and accumulate labeled points into a common
target frame."""

from __future__ import annotations

import numpy as np

from .config import PipelineConfig


def fuse_labels(labels, table, cfg: PipelineConfig):
    """Greedily merge label i into j when moving i's points onto j's motion
    barely increases the data cost over the two labels' points.

    ``labels`` are per-point column indices into the data table; costs are
    the raw per-(point, label) clamped distances, independent of the
    likelihood normalization and of unrelated labels. The increase is
    measured against the maximal (fully clamped) cost of the affected
    points, since the current costs of well-fit labels sit at the noise
    floor where relative growth is meaningless. The test is directional
    (i into j is not j into i); accepted fusions apply in ascending
    cost-increase order, re-evaluating after each merge. Returns
    (labels, merges) with merges as (source id, target id) pairs.
    """
    dist = table.distances
    ceiling = max(float(dist.max()), 1e-300)
    ids = table.label_ids
    labels = np.array(labels, dtype=np.int64, copy=True)
    merges = []
    while True:
        present = sorted(set(labels.tolist()))
        if len(present) < 2:
            break
        best = None
        for ci in present:
            sel_i = labels == ci
            n_i = int(sel_i.sum())
            if n_i == 0:
                continue
            for cj in present:
                if cj == ci:
                    continue
                # target terms are common to both sides, so the increase is
                # the source points' mean cost change, measured against the
                # fully-clamped ceiling
                delta = float((dist[sel_i, cj] - dist[sel_i, ci]).sum())
                if delta <= cfg.fuse_max_increase * n_i * ceiling + 1e-15:
                    if best is None or delta < best[0]:
                        best = (delta, ci, cj)
        if best is None:
            break
        _, ci, cj = best
        labels[labels == ci] = cj
        merges.append((ids[ci], ids[cj]))
    return labels, merges


def accumulate_cloud(clouds, dense_labels, hypotheses, label_ids, target, colors=None):
    """Map every labeled dense point into the target frame.

    Points whose label has no pose at the source or target frame are
    skipped. Returns (positions, normals, colors, labels).
    """
    pos_out, nrm_out, col_out, lab_out = [], [], [], []
    for f, cloud in enumerate(clouds):
        if len(cloud) == 0:
            continue
        lab = np.asarray(dense_labels[f])
        for c, h in enumerate(label_ids):
            hyp = hypotheses[h]
            sel = lab == c
            if not sel.any() or not (hyp.defined(f) and hyp.defined(target)):
                continue
            R, t = hyp.relative_Rt(f, target)
            pos_out.append(cloud.positions[sel] @ R.T + t)
            nrm_out.append(cloud.normals[sel] @ R.T)
            if colors is not None and colors[f] is not None:
                col_out.append(colors[f][sel])
            else:
                col_out.append(np.full((int(sel.sum()), 3), 200, dtype=np.uint8))
            lab_out.append(np.full(int(sel.sum()), h, dtype=np.int64))
    if not pos_out:
        return (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), np.zeros(0, dtype=np.int64))
    return (
        np.concatenate(pos_out),
        np.concatenate(nrm_out),
        np.concatenate(col_out),
        np.concatenate(lab_out),
    )
