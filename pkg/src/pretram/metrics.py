"""Trajectory forecasting metrics over multi-modal predictions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .scenegen import VEHICLE, SemanticMap

KDE_BANDWIDTH_FLOOR = 0.01
KDE_LOG_DENSITY_FLOOR = -20.0
REPORT_KEYS = (
    "schema",
    "ade_5",
    "fde_5",
    "ade_10",
    "fde_10",
    "mean_fde",
    "kde_nll",
    "boundary_violation_rate",
    "tmcl_retrieval",
    "n_samples",
    "config_echo",
)


@dataclass
class EvalSample:
    gt_future: np.ndarray  # [T, 2] world meters
    predicted: np.ndarray  # [K, T, 2] world meters
    mode_probs: np.ndarray  # [K]
    agent_type: str = VEHICLE
    map_id: int | None = None

    def __post_init__(self):
        self.gt_future = np.asarray(self.gt_future, dtype=np.float64)
        self.predicted = np.asarray(self.predicted, dtype=np.float64)
        self.mode_probs = np.asarray(self.mode_probs, dtype=np.float64)
        if self.predicted.ndim != 3 or self.predicted.shape[1:] != self.gt_future.shape:
            raise ValueError(f"predicted {self.predicted.shape} does not match gt {self.gt_future.shape}")
        if self.mode_probs.shape != self.predicted.shape[:1]:
            raise ValueError("one probability per mode required")
        if abs(self.mode_probs.sum() - 1.0) > 1e-6:
            raise ValueError(f"mode probabilities sum to {self.mode_probs.sum()}, not 1")


def top_modes(sample: EvalSample, k: int) -> np.ndarray:
    """Indices of the k most probable modes; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(sample.mode_probs):
        raise ValueError(f"k={k} exceeds the {len(sample.mode_probs)} available modes")
    return np.argsort(-sample.mode_probs, kind="stable")[:k]


def ade_k(sample: EvalSample, k: int) -> float:
    sel = sample.predicted[top_modes(sample, k)]
    return float(np.linalg.norm(sel - sample.gt_future, axis=-1).mean(axis=-1).min())


def fde_k(sample: EvalSample, k: int) -> float:
    sel = sample.predicted[top_modes(sample, k)]
    return float(np.linalg.norm(sel[:, -1] - sample.gt_future[-1], axis=-1).min())


def mean_fde(sample: EvalSample) -> float:
    best = int(np.argmax(sample.mode_probs))  # first maximum wins ties
    return float(np.linalg.norm(sample.predicted[best, -1] - sample.gt_future[-1]))


def kde_bandwidth(points: np.ndarray) -> np.ndarray:
    """Per-axis Scott's-rule bandwidth for 2-D points, floored."""
    n = points.shape[0]
    sd = points.std(axis=0, ddof=1) if n > 1 else np.zeros(points.shape[1])
    return np.maximum(sd * n ** (-1.0 / (points.shape[1] + 4)), KDE_BANDWIDTH_FLOOR)


def kde_log_density(points: np.ndarray, query: np.ndarray) -> float:
    """log of the equal-weight product-Gaussian KDE over points, evaluated at query."""
    bw = kde_bandwidth(points)
    z = (query - points) / bw
    log_kernel = -0.5 * (z**2).sum(axis=1) - np.log(2 * np.pi) - np.log(bw).sum()
    return float(logsumexp(log_kernel) - np.log(points.shape[0]))


def kde_nll(sample: EvalSample) -> float:
    """Mean over timesteps of the floored negative log-density of the ground truth."""
    t_len = sample.gt_future.shape[0]
    logs = [
        max(kde_log_density(sample.predicted[:, t], sample.gt_future[t]), KDE_LOG_DENSITY_FLOOR) for t in range(t_len)
    ]
    return float(-np.mean(logs))


def mode_violations(sample: EvalSample, smap: SemanticMap) -> np.ndarray:
    """Per-mode flag: any predicted point off the road surface (or off the map)."""
    return ~smap.on_road(sample.predicted).all(axis=1)


def boundary_violation_rate(samples: Sequence[EvalSample], maps: dict[int, SemanticMap]) -> float:
    """Violating vehicle modes over all vehicle modes; pedestrians are exempt."""
    bad = total = 0
    for s in samples:
        if s.agent_type != VEHICLE:
            continue
        flags = mode_violations(s, maps[s.map_id])
        bad += int(flags.sum())
        total += flags.size
    return bad / total if total else 0.0


def tmcl_retrieval_accuracy(traj_embeds: np.ndarray, map_embeds: np.ndarray) -> float:
    """Fraction of rows whose similarity argmax is the paired (diagonal) column; ties are misses."""
    sim = np.asarray(traj_embeds) @ np.asarray(map_embeds).T
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)]
    off = sim.copy()
    off[np.arange(n), np.arange(n)] = -np.inf
    return float(np.mean(diag > off.max(axis=1))) if n > 1 else 1.0


def evaluate_samples(samples: Sequence[EvalSample], maps: dict[int, SemanticMap]) -> dict:
    if not samples:
        raise ValueError("no samples to evaluate")
    k_max = len(samples[0].mode_probs)
    out = {}
    for k in (5, 10):
        kk = min(k, k_max)
        out[f"ade_{k}"] = float(np.mean([ade_k(s, kk) for s in samples]))
        out[f"fde_{k}"] = float(np.mean([fde_k(s, kk) for s in samples]))
    out["mean_fde"] = float(np.mean([mean_fde(s) for s in samples]))
    out["kde_nll"] = float(np.mean([kde_nll(s) for s in samples]))
    out["boundary_violation_rate"] = boundary_violation_rate(samples, maps)
    out["n_samples"] = len(samples)
    return out
