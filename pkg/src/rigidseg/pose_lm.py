"""Levenberg-Marquardt solver for per-frame poses under point-to-plane and
point-to-point residuals.

Residuals are given as flat arrays: residual k maps source point ``src[k]``
from frame ``idx_i[k]`` into frame ``idx_j[k]`` with the current relative
motion and compares against target ``tgt[k]``:

    e_k = (T_j T_i^-1) src_k - tgt_k
    cost_k = w_k * ( <e_k, n_k>^2 + alpha * sqrt(|e_k|^2 + eps^2) )

The non-squared point-to-point norm is handled by majorize-minimize: each
LM iteration replaces it with the tight quadratic upper bound at the
current error, so accepted steps always decrease the true cost.

Pose updates are left-multiplied increments ``T_f <- (R_delta, v) o T_f``
with the rotation vector/translation stacked as ``(omega, v)`` per frame;
one gauge frame stays fixed to pin the free reference coordinate system.
Residuals are sorted by frame pair once so the normal equations assemble
with a handful of batched reductions per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import rotvec_to_matrix, skew


@dataclass
class PoseLMResult:
    R: np.ndarray  # (F, 3, 3)
    t: np.ndarray  # (F, 3)
    energy: float
    iterations: int
    converged: bool
    degenerate: bool
    energies: list


def solve_pose_graph(
    num_frames,
    R0,
    t0,
    idx_i,
    idx_j,
    src,
    tgt,
    normals,
    weights,
    *,
    alpha=0.0,
    gauge=0,
    max_iters=50,
    rel_tol=1e-8,
    point_eps=1e-6,
    damping0=1e-4,
) -> PoseLMResult:
    idx_i = np.asarray(idx_i, dtype=np.int64)
    idx_j = np.asarray(idx_j, dtype=np.int64)
    src = np.asarray(src, dtype=float)
    tgt = np.asarray(tgt, dtype=float)
    normals = np.asarray(normals, dtype=float)
    w = np.asarray(weights, dtype=float)
    keep = w > 0
    if not np.all(keep):  # zero-weight residuals have no influence; drop them
        idx_i, idx_j, src, tgt, normals, w = (
            idx_i[keep], idx_j[keep], src[keep], tgt[keep], normals[keep], w[keep],
        )
    R = np.array(R0, dtype=float, copy=True)
    t = np.array(t0, dtype=float, copy=True)
    F = num_frames

    touched = np.zeros(F, dtype=bool)
    touched[idx_i] = True
    touched[idx_j] = True
    free = touched.copy()
    if 0 <= gauge < F:
        free[gauge] = False
    free_idx = np.nonzero(free)[0]
    col_of = np.full(F, -1, dtype=np.int64)
    col_of[free_idx] = np.arange(len(free_idx))
    n_free = len(free_idx)

    if len(w) == 0 or n_free == 0:
        return PoseLMResult(R, t, 0.0, 0, True, len(w) == 0, [0.0])

    # sort residuals by frame pair; per-pair sums become reduceat segments
    key = idx_i * F + idx_j
    order = np.argsort(key, kind="stable")
    key = key[order]
    idx_i, idx_j = idx_i[order], idx_j[order]
    src, tgt, normals, w = src[order], tgt[order], normals[order], w[order]
    starts = np.nonzero(np.r_[True, key[1:] != key[:-1]])[0]
    pair_i = idx_i[starts]
    pair_j = idx_j[starts]
    rid = np.cumsum(np.r_[0, (key[1:] != key[:-1]).astype(np.int64)])

    eps2 = point_eps**2

    def relatives(R_, t_):
        Rp = R_[pair_j] @ np.transpose(R_[pair_i], (0, 2, 1))
        tp = t_[pair_j] - np.einsum("nab,nb->na", Rp, t_[pair_i])
        return Rp[rid], tp[rid]

    def energy_of(R_, t_):
        R_rel, t_rel = relatives(R_, t_)
        e = np.einsum("nab,nb->na", R_rel, src) + t_rel - tgt
        plane = np.einsum("ni,ni->n", e, normals)
        total = float(np.sum(w * plane * plane))
        if alpha > 0:
            total += float(alpha * np.sum(w * np.sqrt(np.einsum("ni,ni->n", e, e) + eps2)))
        return total

    energy = energy_of(R, t)
    energies = [energy]

    lam = damping0
    degenerate = False
    converged = False
    iters = 0
    checked_rank = False
    dim = 6 * n_free
    ci = col_of[pair_i]
    cj = col_of[pair_j]

    for iters in range(1, max_iters + 1):
        R_rel, t_rel = relatives(R, t)
        x = np.einsum("nab,nb->na", R_rel, src) + t_rel
        e = x - tgt
        plane = np.einsum("ni,ni->n", e, normals)
        m = np.einsum("nba,nb->na", R_rel, normals)
        Jj = np.concatenate([np.cross(x, normals), normals], axis=1)  # (n, 6)
        Ji = np.concatenate([-np.cross(src, m), -m], axis=1)
        if alpha > 0:
            s0 = np.sqrt(np.einsum("ni,ni->n", e, e) + eps2)
            u = alpha * w / (2.0 * s0)
            Jpj = np.concatenate([-skew(x), np.tile(np.eye(3), (len(x), 1, 1))], axis=2)
            Jpi = np.concatenate([R_rel @ skew(src), -R_rel], axis=2)

        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        ends = np.r_[starts[1:], len(w)]
        for p in range(len(starts)):
            sl = slice(starts[p], ends[p])
            a, b = ci[p], cj[p]
            ww = w[sl]
            wp = ww * plane[sl]
            sides = []
            if a >= 0:
                sides.append((a, Ji[sl], Jpi[sl] if alpha > 0 else None))
            if b >= 0:
                sides.append((b, Jj[sl], Jpj[sl] if alpha > 0 else None))
            for ca, Ja, Jpa in sides:
                g[6 * ca : 6 * ca + 6] += np.einsum("n,na->a", wp, Ja)
                if alpha > 0:
                    g[6 * ca : 6 * ca + 6] += np.einsum("n,nk,nka->a", u[sl], e[sl], Jpa)
                for cb, Jb, Jpb in sides:
                    blk = np.einsum("n,na,nb->ab", ww, Ja, Jb)
                    if alpha > 0:
                        blk = blk + np.einsum("n,nka,nkb->ab", u[sl], Jpa, Jpb)
                    H[6 * ca : 6 * ca + 6, 6 * cb : 6 * cb + 6] += blk

        if not checked_rank:
            checked_rank = True
            eigs = np.linalg.eigvalsh(H)
            if eigs[-1] <= 0 or eigs[0] < 1e-9 * eigs[-1]:
                degenerate = True

        diag = np.diag(H).copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            R_new = R.copy()
            t_new = t.copy()
            d = delta.reshape(n_free, 6)
            Rd = rotvec_to_matrix(d[:, :3])
            R_new[free_idx] = Rd @ R[free_idx]
            t_new[free_idx] = np.einsum("nab,nb->na", Rd, t[free_idx]) + d[:, 3:]
            e_new = energy_of(R_new, t_new)
            if e_new < energy:
                R, t = R_new, t_new
                prev = energy
                energy = e_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        energies.append(energy)
        if not accepted:
            converged = True
            break
        if prev - energy <= rel_tol * max(prev, 1e-300):
            converged = True
            break

    return PoseLMResult(R, t, energy, iters, converged, degenerate, energies)
