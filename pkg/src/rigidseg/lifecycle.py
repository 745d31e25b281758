"""Label lifecycle: mass-transfer statistics between consecutive frames,
detection of label birth/death/switch events, spawning of recombined
labels, and pruning of spurious ones.

Mass transfer between frames f and f+1 is accumulated per sparse point by
comparing its weight vector with the weights interpolated at its mapped
position among the next frame's points; switches show up as temporal
local maxima of the per-entry transfer series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .config import PipelineConfig
from .errors import InputError
from .geometry import NeighborIndex


@dataclass
class LabelEvent:
    kind: str  # birth | death | switch
    frame: int
    source: int  # label id
    target: int | None
    score: float

    def __str__(self):
        tgt = "-" if self.target is None else str(self.target)
        return f"{self.kind} f0={self.frame} src={self.source} tgt={tgt} score={self.score:.6g}"


def pixel_transfer(w, w_next):
    """Per-point mass transfer matrix between consecutive weight vectors.

    Losses are distributed proportionally over the gains; the zero-change
    case yields the zero matrix. Mass is conserved: sum M = sum of losses.
    """
    w = np.asarray(w, dtype=float)
    w_next = np.asarray(w_next, dtype=float)
    delta = w_next - w
    loss = np.maximum(-delta, 0.0)
    gain = np.maximum(delta, 0.0)
    total_gain = gain.sum()
    if total_gain <= 0:
        return np.zeros((len(w), len(w)))
    return np.outer(loss, gain) / total_gain


def transfer_stack(points, weights, hypotheses, label_ids, cfg: PipelineConfig):
    """(F-1, N, N) per-frame sums of pixel transfer matrices.

    Each frame-f point is mapped into frame f+1 by its argmax label's
    motion; its next-frame weights are interpolated from the k nearest
    mapped neighbors with inverse-distance weights.
    """
    weights = np.asarray(weights, dtype=float)
    F = points.num_frames
    N = weights.shape[1]
    stack = np.zeros((max(F - 1, 0), N, N))
    for f in range(F - 1):
        src = points.frame_indices(f)
        dst = points.frame_indices(f + 1)
        if not len(src) or not len(dst):
            continue
        index = NeighborIndex(points.positions[dst])
        kk = min(cfg.transfer_neighbors, len(dst))
        arg = weights[src].argmax(axis=1)
        mapped = np.full((len(src), 3), np.nan)
        for col, h in enumerate(label_ids):
            sel = arg == col
            hyp = hypotheses[h]
            if sel.any() and hyp.defined(f) and hyp.defined(f + 1):
                mapped[sel] = hyp.transform(f, f + 1, points.positions[src[sel]])
        good = np.isfinite(mapped[:, 0])
        if not good.any():
            continue
        dist, nn = index.query(mapped[good], k=kk)
        dist = dist.reshape(-1, kk)
        nn = nn.reshape(-1, kk)
        inv = 1.0 / np.maximum(dist, 1e-9)
        w_next = np.einsum("pk,pkn->pn", inv, weights[dst[nn]]) / inv.sum(axis=1, keepdims=True)
        w_cur = weights[src[good]]
        delta = w_next - w_cur
        loss = np.maximum(-delta, 0.0)
        gain = np.maximum(delta, 0.0)
        total_gain = gain.sum(axis=1)
        nz = total_gain > 0
        if nz.any():
            stack[f] = np.einsum(
                "p,pi,pj->ij", 1.0 / total_gain[nz], loss[nz], gain[nz]
            )
    return stack


def usage_fractions(points, weights, num_labels):
    """(F, N) fraction of each frame's label mass carried by each label."""
    F = points.num_frames
    out = np.zeros((F, num_labels))
    for f in range(F):
        idx = points.frame_indices(f)
        if len(idx):
            out[f] = np.asarray(weights)[idx].sum(axis=0) / len(idx)
    return out


def detect_events(stack, usage, label_ids, cfg: PipelineConfig):
    """Death/birth from per-frame usage crossings of the threshold; switches
    as the top-K local maxima of box-filtered transfer series."""
    events = []
    thr = cfg.usage_threshold
    F, N = usage.shape
    for c, h in enumerate(label_ids):
        series = usage[:, c]
        for f in range(1, F):
            if series[f - 1] >= thr > series[f]:
                events.append(LabelEvent("death", f, h, None, float(series[f - 1] - series[f])))
            if series[f - 1] < thr <= series[f]:
                events.append(LabelEvent("birth", f, h, None, float(series[f] - series[f - 1])))

    switches = []
    if len(stack) and cfg.event_top_k > 0:
        smooth = uniform_filter1d(stack, cfg.event_box_width, axis=0, mode="nearest")
        T = len(stack)
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                s = smooth[:, i, j]
                for f in range(T):
                    v = s[f]
                    if v <= 0:
                        continue
                    left = s[f - 1] if f > 0 else -np.inf
                    right = s[f + 1] if f < T - 1 else -np.inf
                    if v > left and v > right:
                        switches.append(LabelEvent("switch", f, label_ids[i], label_ids[j], float(v)))
        switches.sort(key=lambda e: (-e.score, e.frame, e.source))
        switches = switches[: cfg.event_top_k]
    events.extend(switches)
    events.sort(key=lambda e: (-e.score, e.frame, e.kind))
    return events


def spawn_recombined_label(points, weights, event: LabelEvent, label_ids, new_id):
    """Split off a recombined label around a switch event.

    Before the event frame the new label takes half of the source label's
    weight per point; from the event frame on, half of the target's.
    Returns (weights with a new column, new label id list) or None when the
    event sits on the sequence boundary (degenerate spawn).
    """
    if event.kind != "switch" or event.target is None:
        raise InputError("only switch events spawn labels")
    F = points.num_frames
    if event.frame <= 0 or event.frame >= F - 1:
        return None
    W = np.asarray(weights, dtype=float)
    cols = {h: c for c, h in enumerate(label_ids)}
    ci, cj = cols[event.source], cols[event.target]
    out = np.concatenate([W, np.zeros((len(W), 1))], axis=1)
    before = points.seed < event.frame
    out[before, -1] = 0.5 * out[before, ci]
    out[before, ci] *= 0.5
    after = ~before
    out[after, -1] = 0.5 * out[after, cj]
    out[after, cj] *= 0.5
    return out, list(label_ids) + [new_id]


def prune_labels(points, weights, label_ids, cfg: PipelineConfig):
    """Drop labels holding under the usage threshold of all points over all
    frames; their mass is redistributed proportionally per point."""
    W = np.asarray(weights, dtype=float)
    m = len(W)
    if m == 0:
        return W, list(label_ids), []
    usage = W.sum(axis=0) / m
    keep = usage >= cfg.usage_threshold
    if not keep.any():
        keep[int(np.argmax(usage))] = True  # never remove every label
    removed = [h for h, k in zip(label_ids, keep) if not k]
    if not removed:
        return W.copy(), list(label_ids), []
    kept = W[:, keep]
    sums = kept.sum(axis=1, keepdims=True)
    n_keep = int(keep.sum())
    uniform = np.full_like(kept, 1.0 / n_keep)
    out = np.where(sums > 1e-12, kept / np.maximum(sums, 1e-300), uniform)
    return out, [h for h, k in zip(label_ids, keep) if k], removed
