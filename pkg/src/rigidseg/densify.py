"""Upsample sparse per-point label weights onto the dense scene points by
local weighted averaging in 3D, per frame."""

from __future__ import annotations

import numpy as np

from .geometry import NeighborIndex


def interpolate_frame(sample_positions, sample_weights, targets, k, bandwidth):
    """Gaussian-kernel average of the k nearest samples per target point.

    Targets with no sample within 10x the bandwidth fall back to a uniform
    vector; returns (weights, fallback_mask).
    """
    targets = np.asarray(targets, dtype=float)
    N = sample_weights.shape[1]
    out = np.full((len(targets), N), 1.0 / N)
    fallback = np.ones(len(targets), dtype=bool)
    if len(sample_positions) == 0 or len(targets) == 0:
        return out, fallback
    index = NeighborIndex(sample_positions)
    kk = min(k, len(sample_positions))
    dist, nn = index.query(targets, k=kk)
    dist = dist.reshape(len(targets), kk)
    nn = nn.reshape(len(targets), kk)
    near = dist[:, 0] <= 10.0 * bandwidth
    kernel = np.exp(-((dist / bandwidth) ** 2))
    kernel_sum = kernel.sum(axis=1, keepdims=True)
    # exact sample hits dominate: as d -> 0 the kernel ratio -> 1
    w = np.einsum("tk,tkn->tn", kernel, sample_weights[nn]) / np.maximum(kernel_sum, 1e-300)
    out[near] = w[near]
    fallback = ~near
    return out, fallback


def interpolate_labels(sample_positions_per_frame, sample_weights_per_frame, clouds, cfg):
    """Per-frame interpolation of labeled samples onto the dense clouds.

    Returns (dense weight arrays per frame, number of fallback points).
    """
    bandwidth = cfg.interp_bandwidth()
    dense = []
    fallbacks = 0
    for f, cloud in enumerate(clouds):
        w, fb = interpolate_frame(
            sample_positions_per_frame[f],
            sample_weights_per_frame[f],
            cloud.positions,
            cfg.interp_neighbors,
            bandwidth,
        )
        dense.append(w)
        fallbacks += int(fb.sum())
    return dense, fallbacks
