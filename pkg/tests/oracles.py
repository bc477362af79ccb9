"""Independent 64-bit oracles the production code is checked against.

Everything here is written from the loss/metric definitions directly,
with literal loops where that keeps the implementation obviously distinct
from the vectorized production path.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def l1_mean(a, b) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def mse_mean(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def reconstruction_oracle(recon1, in1, recon2, in2, feats_r1, feats_i1, feats_r2, feats_i2,
                          lambda_r, lambda_p) -> float:
    """lambda_r (L1 both branches) + lambda_p (mean-over-stages MSE of features)."""
    total = lambda_r * (l1_mean(recon1, in1) + l1_mean(recon2, in2))
    if lambda_p:
        p1 = np.mean([mse_mean(a, b) for a, b in zip(feats_r1, feats_i1)])
        p2 = np.mean([mse_mean(a, b) for a, b in zip(feats_r2, feats_i2)])
        total += lambda_p * (p1 + p2)
    return float(total)


def adversarial_oracle(d1_real, d1_fake, d2_real, d2_fake) -> tuple[float, float]:
    d1_real = np.asarray(d1_real, dtype=np.float64)
    d1_fake = np.asarray(d1_fake, dtype=np.float64)
    d2_real = np.asarray(d2_real, dtype=np.float64)
    d2_fake = np.asarray(d2_fake, dtype=np.float64)
    loss_d = (np.mean((d1_real - 1.0) ** 2) + np.mean(d1_fake**2)
              + np.mean((d2_real - 1.0) ** 2) + np.mean(d2_fake**2))
    loss_g = np.mean((d1_fake - 1.0) ** 2) + np.mean((d2_fake - 1.0) ** 2)
    return float(loss_d), float(loss_g)


def cycle_oracle(back1, in1, back2, in2) -> float:
    return l1_mean(back1, in1) + l1_mean(back2, in2)


def ce_dice_oracle(logits, target, n_classes, eps=1e-6) -> float:
    """Mean cross-entropy plus (1 - mean soft Dice over foreground classes)."""
    logits = np.asarray(logits, dtype=np.float64)  # (B, C, H, W)
    target = np.asarray(target)
    shifted = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(shifted)
    prob /= prob.sum(axis=1, keepdims=True)

    ce_terms = []
    for b in range(logits.shape[0]):
        for i in range(logits.shape[2]):
            for j in range(logits.shape[3]):
                ce_terms.append(-math.log(prob[b, target[b, i, j], i, j]))
    ce = float(np.mean(ce_terms))

    dices = []
    for c in range(1, n_classes):
        p_c = prob[:, c]
        t_c = (target == c).astype(np.float64)
        inter = float((p_c * t_c).sum())
        denom = float(p_c.sum() + t_c.sum())
        dices.append((2.0 * inter + eps) / (denom + eps))
    return ce + 1.0 - float(np.mean(dices))


def self_contrastive_oracle(z1, z2, tau) -> float:
    """Literal double-loop evaluation of the self-supervised loss.

    z1/z2 rows must already be unit-normalized.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n = z1.shape[0]
    total = 0.0
    for i in range(n):
        num = math.exp(float(z1[i] @ z2[i]) / tau)
        den_row = sum(math.exp(float(z1[i] @ z2[j]) / tau) for j in range(n))
        den_col = sum(math.exp(float(z1[j] @ z2[i]) / tau) for j in range(n))
        total -= math.log((num / den_row) * (num / den_col))
    return total


def sup_contrastive_oracle(z1, z2, grades, tau) -> float:
    """Literal triple-loop evaluation of the supervised loss, P(i) incl. i."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    grades = np.asarray(grades)
    n = z1.shape[0]
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if grades[p] == grades[i]]
        inner = 0.0
        for p in positives:
            t_row = math.exp(float(z1[i] @ z2[p]) / tau) / sum(
                math.exp(float(z1[i] @ z2[j]) / tau) for j in range(n))
            t_col = math.exp(float(z1[p] @ z2[i]) / tau) / sum(
                math.exp(float(z1[j] @ z2[i]) / tau) for j in range(n))
            inner += math.log(t_row * t_col)
        total -= inner / len(positives)
    return total


def normalize_rows(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def histogram_specification_oracle(moving, reference) -> np.ndarray:
    """Exact sort-based specification: each voxel's mid-rank in the moving
    volume mapped through the reference's empirical quantile function."""
    mov = np.asarray(moving, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    sorted_mov = np.sort(mov)
    lo = np.searchsorted(sorted_mov, mov, side="left")
    hi = np.searchsorted(sorted_mov, mov, side="right")
    ranks = (lo + hi) / (2.0 * mov.size)
    return np.quantile(ref, ranks).reshape(np.asarray(moving).shape)


def boundary_voxels_oracle(mask) -> list[tuple[int, int, int]]:
    """Foreground voxels with a face-adjacent background (array edge counts
    as background), found by a literal neighborhood scan."""
    mask = np.asarray(mask).astype(bool)
    ns, nr, nc = mask.shape
    out = []
    for z in range(ns):
        for y in range(nr):
            for x in range(nc):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if not (0 <= zz < ns and 0 <= yy < nr and 0 <= xx < nc) or not mask[zz, yy, xx]:
                        out.append((z, y, x))
                        break
    return out


def assd_oracle(pred, truth, spacing) -> float:
    """All-pairs boundary distances, directed means averaged."""
    sp = np.asarray(spacing, dtype=np.float64)
    pts_p = np.asarray(boundary_voxels_oracle(pred), dtype=np.float64) * sp
    pts_t = np.asarray(boundary_voxels_oracle(truth), dtype=np.float64) * sp

    def directed(src, dst):
        dists = []
        for a in src:
            best = math.inf
            for b in dst:
                d = math.sqrt(float(((a - b) ** 2).sum()))
                best = min(best, d)
            dists.append(best)
        return float(np.mean(dists))

    return (directed(pts_p, pts_t) + directed(pts_t, pts_p)) / 2.0


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def fd_gradients(loss_fn, params, h=1e-5):
    """Central finite differences of loss_fn w.r.t. each tensor in params."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.detach().reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + h
            f_plus = float(loss_fn().detach())
            with torch.no_grad():
                flat[k] = orig - h
            f_minus = float(loss_fn().detach())
            with torch.no_grad():
                flat[k] = orig
            gflat[k] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def gradient_relative_error(loss_fn, params, h=1e-5) -> float:
    """Vector-norm relative error between autograd and central differences."""
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    numeric = fd_gradients(loss_fn, params, h)
    av = torch.cat([g.reshape(-1) for g in analytic]).double()
    nv = torch.cat([g.reshape(-1) for g in numeric]).double()
    denom = max(av.norm().item(), nv.norm().item(), 1e-12)
    return (av - nv).norm().item() / denom
