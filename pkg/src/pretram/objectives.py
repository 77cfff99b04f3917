"""Contrastive pre-training losses, masked trajectory modeling, and the prediction loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError


@dataclass
class ContrastiveBatch:
    traj_embeds: Tensor  # [N_traj, d_e]
    map_embeds: Tensor  # [N_traj, d_e]
    mcl_embeds_a: Tensor  # [N_map, d_e]
    mcl_embeds_b: Tensor  # [N_map, d_e]
    logit_scale_traj: Tensor  # log(1 / tau_traj)
    logit_scale_map: Tensor  # log(1 / tau_map)


def similarity_logits(a: Tensor, b: Tensor, logit_scale: Tensor) -> Tensor:
    """Cosine-similarity matrix a @ b.T of unit rows, divided by the temperature."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding batches must be [N, d] with equal d, got {a.shape} and {b.shape}")
    return dc.mul(dc.matmul(a, dc.transpose(b)), dc.exp(logit_scale))


def tmcl_loss(traj_embeds: Tensor, map_embeds: Tensor, logit_scale: Tensor) -> Tensor:
    """Symmetric InfoNCE over trajectory/map pairs aligned by row index."""
    if traj_embeds.shape != map_embeds.shape:
        raise ShapeError(f"paired embeddings differ in shape: {traj_embeds.shape} vs {map_embeds.shape}")
    logits = similarity_logits(traj_embeds, map_embeds, logit_scale)
    labels = np.arange(logits.shape[0])
    loss_traj = dc.cross_entropy_rows(logits, labels)
    loss_map = dc.cross_entropy_rows(dc.transpose(logits), labels)
    return dc.scale(dc.add(loss_traj, loss_map), 0.5)


def mcl_loss(embeds_a: Tensor, embeds_b: Tensor, logit_scale: Tensor) -> Tensor:
    """One-directional InfoNCE: row i of the first pass must pick row i of the second."""
    if embeds_a.shape != embeds_b.shape:
        raise ShapeError(f"dropout passes differ in shape: {embeds_a.shape} vs {embeds_b.shape}")
    if embeds_a.shape[0] < 2:
        raise ValueError("map contrastive loss needs at least 2 patches")
    logits = similarity_logits(embeds_a, embeds_b, logit_scale)
    return dc.cross_entropy_rows(logits, np.arange(logits.shape[0]))


def pretram_loss(batch: ContrastiveBatch, lam: float = 1.0) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    t = tmcl_loss(batch.traj_embeds, batch.map_embeds, batch.logit_scale_traj)
    if lam == 0:
        return t
    m = mcl_loss(batch.mcl_embeds_a, batch.mcl_embeds_b, batch.logit_scale_map)
    return dc.add(t, dc.scale(m, lam))


# ------------------------------------------------------------------------- MTM

MTM_COLUMNS = (0, 1, 4)  # x, y, speed of a normalized history row


def make_mtm_mask(n: int, steps: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Per-trajectory Bernoulli step mask with at least one masked and one visible step."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    mask = rng.random((n, steps)) < mask_ratio
    for i in range(n):
        if not mask[i].any():
            mask[i, rng.integers(steps)] = True
        elif mask[i].all():
            mask[i, rng.integers(steps)] = False
    return mask


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked steps only; pred and target are [N, T, F], mask is [N, T]."""
    target = np.asarray(target)
    if pred.shape != target.shape or mask.shape != target.shape[:2]:
        raise ShapeError(f"masked_mse: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    weight = np.broadcast_to(mask[..., None], target.shape).astype(pred.dtype)
    count = weight.sum()
    if count == 0:
        raise ValueError("masked_mse needs at least one masked entry")
    diff = dc.sub(pred, Tensor(target, dtype=pred.dtype))
    return dc.scale(dc.sum(dc.mul(dc.mul(diff, diff), weight)), 1.0 / count)


def mtm_loss(model, rows: np.ndarray, mask_ratio: float, seed: int) -> Tensor:
    """Hide (x, y, speed) of random history steps and regress them from the pooled trajectory feature."""
    rows = np.asarray(rows, dtype=np.float64)
    mask = make_mtm_mask(rows.shape[0], rows.shape[1], mask_ratio, np.random.default_rng(seed))
    feat = model.encode_trajectory(rows, mtm_mask=mask)
    pred = model.mtm_head(feat)
    target = rows[..., list(MTM_COLUMNS)] / model.cfg.coord_scale
    return masked_mse(pred, target, mask)


# ------------------------------------------------------------------ prediction

MODE_CE_WEIGHT = 0.5


def mode_errors(traj: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean pointwise L2 error of every mode, [N, K]."""
    return np.linalg.norm(np.asarray(traj) - np.asarray(gt)[:, None], axis=-1).mean(axis=-1)


def prediction_loss(traj: Tensor, logits: Tensor, gt_future: np.ndarray) -> Tensor:
    """Variety loss: mean L2 error of the best mode plus weighted cross-entropy toward that mode."""
    n, k, t, _ = traj.shape
    if k < 1:
        raise ValueError("need at least one mode")
    gt = np.asarray(gt_future)
    if gt.shape != (n, t, 2) or logits.shape != (n, k):
        raise ShapeError(f"prediction_loss: traj {traj.shape}, logits {logits.shape}, gt {gt.shape}")
    best = np.argmin(mode_errors(traj.data, gt), axis=1)
    onehot = np.zeros((n, k, 1), dtype=traj.dtype)
    onehot[np.arange(n), best] = 1.0
    diff = dc.sub(traj, Tensor(gt[:, None], dtype=traj.dtype))
    dist = dc.sqrt(dc.sum(dc.mul(diff, diff), axis=3))  # [N, K, T]
    reg = dc.scale(dc.sum(dc.mul(dist, onehot)), 1.0 / (n * t))
    ce = dc.cross_entropy_rows(logits, best)
    return dc.add(reg, dc.scale(ce, MODE_CE_WEIGHT))
