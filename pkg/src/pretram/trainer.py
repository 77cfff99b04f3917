"""Batch assembly, pre-training, fine-tuning, and the experiment sweep."""
from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import adam_step, zero_grads
from .errors import NumericalError
from .metrics import EvalSample, evaluate_samples, tmcl_retrieval_accuracy
from .model import LOAD_MODES, ModelConfig, PreTraMModel
from .objectives import mcl_loss, mtm_loss, prediction_loss, tmcl_loss
from .patchlib import (
    AUG_MODES,
    AgentTrack,
    crop_patches,
    future_in_agent_frame,
    joint_rotate,
    make_mcl_positive,
    MapPatch,
    normalize_history,
    sample_patch_centers,
)
from .scenegen import Dataset, Scene, SemanticMap

log = logging.getLogger(__name__)

OBJECTIVES = ("pretram", "tmcl_only", "mcl_only", "mtm_plus_mcl")
ARMS = ("baseline", "pretram", "tmcl_only", "mcl_only", "mtm_plus_mcl", "te_only", "me_only")
METRIC_KEYS = ("ade_5", "fde_5", "ade_10", "fde_10", "mean_fde", "kde_nll", "boundary_violation_rate", "tmcl_retrieval")


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_scenes: int = 8
    decoupled_per_instance: int = 16
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    lam: float = 1.0
    seed: int = 0
    mcl_aug_mode: str = "dropout"
    objective: str = "pretram"
    mtm_mask_ratio: float = 0.3
    data_fraction: float = 1.0

    def validate(self) -> None:
        if min(self.epochs, self.batch_scenes, self.decoupled_per_instance) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_scenes, decoupled_per_instance and lr must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.mcl_aug_mode not in AUG_MODES:
            raise ValueError(f"mcl_aug_mode must be one of {AUG_MODES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")


@dataclass
class FinetuneConfig:
    epochs: int = 40  # baseline validation ADE-5 stops improving much beyond this on default data
    batch_scenes: int = 8
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    load_mode: str = "none"
    load_heads: bool = False
    data_fraction: float = 1.0
    num_modes: int = 10
    seed: int = 0

    def validate(self) -> None:
        if min(self.epochs, self.batch_scenes, self.num_modes) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_scenes, num_modes and lr must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.load_mode not in LOAD_MODES:
            raise ValueError(f"load_mode must be one of {LOAD_MODES}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the model as of the last good step."""

    def __init__(self, message: str, model: PreTraMModel, records: list[dict]):
        super().__init__(message)
        self.model = model
        self.records = records


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & (2**63 - 1) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def lr_at(iteration: int, total_iterations: int, lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 to lr, then linear decay to 0."""
    warmup = int(warmup_ratio * total_iterations)
    if iteration < warmup:
        return lr * iteration / warmup
    return lr * max(0.0, (total_iterations - iteration) / max(1, total_iterations - warmup))


def subsample_scenes(scenes: Sequence[Scene], fraction: float, seed: int) -> list[Scene]:
    """Deterministic subset of ceil(fraction * N) scenes, kept in original order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = math.ceil(round(fraction * len(scenes), 9))
    if n >= len(scenes):
        return list(scenes)
    keep = np.sort(np.random.default_rng(derive_seed(seed, 0x5EB5)).permutation(len(scenes))[:n])
    return [scenes[i] for i in keep]


# --------------------------------------------------------------- batch assembly

@dataclass
class PairBatch:
    """Aligned (history, agent-centric patch) pairs; row i of each array belongs to pair i."""

    histories: np.ndarray  # [N, T_hist + 1, 6]
    patches: np.ndarray  # [N, C, C, 3]
    centers: np.ndarray  # [N, 2] world position the patch is centered on
    map_ids: np.ndarray  # [N]

    def __len__(self) -> int:
        return self.histories.shape[0]

    def __iter__(self):
        return iter(zip(self.histories, self.patches))


def _history_only(track: AgentTrack, hist_len: int) -> AgentTrack:
    return AgentTrack(track.agent_type, track.states[: hist_len + 1].copy())


def assemble_tmcl_batch(
    scenes: Sequence[Scene], maps: dict[int, SemanticMap], seed: int, context_px: int = 64, rotate: bool = True
) -> PairBatch:
    """One pair per agent; the joint random rotation is applied to each pair before cropping."""
    if not scenes:
        raise ValueError("no scenes to assemble")
    rng = np.random.default_rng(seed)
    hists, centers, headings, mids = [], [], [], []
    for scene in scenes:
        for track in scene.agents:
            past = _history_only(track, scene.hist_len)
            angle = rng.uniform(0, 2 * np.pi) if rotate else 0.0
            rotated, offset = joint_rotate(past, 0.0, angle, scene.hist_len)
            hist = normalize_history(rotated, scene.hist_len)
            hists.append(hist.rows)
            centers.append(hist.origin)
            headings.append(hist.heading + offset)
            mids.append(scene.map_id)
    centers_a = np.array(centers)
    headings_a = np.array(headings)
    mids_a = np.array(mids)
    patches = np.empty((len(hists), context_px, context_px, 3), dtype=np.uint8)
    for mid in np.unique(mids_a):
        sel = mids_a == mid
        patches[sel] = crop_patches(maps[int(mid)], centers_a[sel], headings_a[sel], context_px)
    return PairBatch(np.array(hists), patches, centers_a, mids_a)


def sample_mcl_patches(maps: dict[int, SemanticMap], instances: int, per_instance: int, rng, context_px: int) -> np.ndarray:
    """Trajectory-decoupled patches: per instance, a random map and per_instance random on-road crops."""
    ids = sorted(maps)
    out = []
    for _ in range(instances):
        smap = maps[ids[rng.integers(len(ids))]]
        centers, orient = sample_patch_centers(smap, per_instance, rng)
        out.append(crop_patches(smap, centers, orient, context_px))
    return np.concatenate(out)


def _augment_view(patches: np.ndarray, mode: str, seed: int) -> np.ndarray:
    if mode == "dropout":
        return patches
    return np.stack(
        [make_mcl_positive(MapPatch(p, np.zeros(2), 0.0), mode, derive_seed(seed, i)).pixels for i, p in enumerate(patches)]
    )


# ------------------------------------------------------------------ pre-training

@dataclass
class PretrainResult:
    model: PreTraMModel
    records: list[dict] = field(default_factory=list)


LOSS_FIELDS = ("iteration", "epoch", "lr", "tmcl", "mcl", "mtm", "total", "tau_traj", "tau_map")


def pretrain(
    dataset: Dataset,
    cfg: PretrainConfig,
    model_cfg: ModelConfig | None = None,
    progress: Callable[[dict], None] | None = None,
) -> PretrainResult:
    cfg.validate()
    model_cfg = model_cfg or ModelConfig()
    model = PreTraMModel(model_cfg, seed=cfg.seed)
    scenes = subsample_scenes(dataset.train, cfg.data_fraction, cfg.seed)
    params = model.parameters()
    per_epoch = math.ceil(len(scenes) / cfg.batch_scenes)
    total = cfg.epochs * per_epoch
    use_tmcl = cfg.objective in ("pretram", "tmcl_only")
    use_mcl = cfg.objective in ("pretram", "mcl_only", "mtm_plus_mcl")
    use_mtm = cfg.objective == "mtm_plus_mcl"
    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, 1, epoch)).permutation(len(scenes))
        for b in range(per_epoch):
            chunk = [scenes[i] for i in order[b * cfg.batch_scenes : (b + 1) * cfg.batch_scenes]]
            rng = np.random.default_rng(derive_seed(cfg.seed, 2, step))
            zero_grads(params)
            rec = {"iteration": step, "epoch": epoch, "lr": lr_at(step, total, cfg.lr, cfg.warmup_ratio)}
            terms = []
            if use_tmcl or use_mtm:
                pairs = assemble_tmcl_batch(chunk, dataset.maps, derive_seed(cfg.seed, 3, step), model_cfg.context_px)
            if use_tmcl:
                t_emb = model.project(model.encode_trajectory(pairs.histories), "traj")
                m_emb = model.project(model.encode_map(pairs.patches, derive_seed(cfg.seed, 4, step), training=True), "map")
                loss_t = tmcl_loss(t_emb, m_emb, model.heads.logit_scale_traj)
                terms.append(loss_t)
                rec["tmcl"] = loss_t.item()
            if use_mtm:
                loss_r = mtm_loss(model, pairs.histories, cfg.mtm_mask_ratio, derive_seed(cfg.seed, 5, step))
                terms.append(loss_r)
                rec["mtm"] = loss_r.item()
            if use_mcl:
                patches = sample_mcl_patches(dataset.maps, len(chunk), cfg.decoupled_per_instance, rng, model_cfg.context_px)
                view_b = _augment_view(patches, cfg.mcl_aug_mode, derive_seed(cfg.seed, 6, step))
                h_a = model.encode_map(patches, derive_seed(cfg.seed, 7, step), training=True)
                h_b = model.encode_map(view_b, derive_seed(cfg.seed, 8, step), training=True)
                loss_m = mcl_loss(model.project(h_a, "mcl"), model.project(h_b, "mcl"), model.heads.logit_scale_map)
                lam = 1.0 if cfg.objective == "mcl_only" else cfg.lam
                terms.append(dc.scale(loss_m, lam))
                rec["mcl"] = loss_m.item()
            total_loss = terms[0]
            for t in terms[1:]:
                total_loss = dc.add(total_loss, t)
            rec["total"] = total_loss.item()
            if not math.isfinite(rec["total"]):
                raise TrainingAborted(f"non-finite loss at iteration {step}", model, records)
            total_loss.backward()
            try:
                adam_step(params, [p.grad for p in params], rec["lr"], step + 1)
            except NumericalError as exc:
                raise TrainingAborted(f"iteration {step}: {exc}", model, records) from exc
            model.clamp_temperatures()
            rec["tau_traj"] = model.heads.tau_traj
            rec["tau_map"] = model.heads.tau_map
            records.append(rec)
            if progress is not None:
                progress(rec)
            step += 1
    return PretrainResult(model, records)


def retrieval_accuracy(model: PreTraMModel, dataset: Dataset, scenes: Sequence[Scene], batch_scenes: int, seed: int = 0) -> float:
    """Mean held-out TMCL retrieval accuracy over consecutive scene batches (eval mode)."""
    accs, weights = [], []
    for b in range(0, len(scenes), batch_scenes):
        chunk = scenes[b : b + batch_scenes]
        pairs = assemble_tmcl_batch(chunk, dataset.maps, derive_seed(seed, 9, b), model.cfg.context_px)
        if len(pairs) < 2:
            continue
        t = model.project(model.encode_trajectory(pairs.histories), "traj").data
        m = model.project(model.encode_map(pairs.patches), "map").data
        accs.append(tmcl_retrieval_accuracy(t, m))
        weights.append(len(pairs))
    return float(np.average(accs, weights=weights))


# ------------------------------------------------------------------- fine-tuning

@dataclass
class AgentSamples:
    histories: np.ndarray  # [N, T_hist + 1, 6]
    patches: np.ndarray  # [N, C, C, 3]
    futures: np.ndarray  # [N, T_fut, 2] agent frame
    gt_world: np.ndarray  # [N, T_fut, 2]
    origins: np.ndarray  # [N, 2]
    headings: np.ndarray  # [N]
    agent_types: list[str]
    map_ids: np.ndarray  # [N]
    scene_index: np.ndarray  # [N]

    def take(self, idx) -> AgentSamples:
        idx = np.asarray(idx)
        return AgentSamples(
            self.histories[idx], self.patches[idx], self.futures[idx], self.gt_world[idx], self.origins[idx],
            self.headings[idx], [self.agent_types[i] for i in idx], self.map_ids[idx], self.scene_index[idx],
        )


def build_samples(scenes: Sequence[Scene], maps: dict[int, SemanticMap], context_px: int) -> AgentSamples:
    hists, futs, gts, origins, heads, types, mids, sidx = [], [], [], [], [], [], [], []
    for i, scene in enumerate(scenes):
        for track in scene.agents:
            h = normalize_history(track, scene.hist_len)
            hists.append(h.rows)
            futs.append(future_in_agent_frame(track, scene.hist_len))
            gts.append(track.states[scene.hist_len + 1 :, :2])
            origins.append(h.origin)
            heads.append(h.heading)
            types.append(track.agent_type)
            mids.append(scene.map_id)
            sidx.append(i)
    origins_a, heads_a, mids_a = np.array(origins), np.array(heads), np.array(mids)
    patches = np.empty((len(hists), context_px, context_px, 3), dtype=np.uint8)
    for mid in np.unique(mids_a):
        sel = mids_a == mid
        patches[sel] = crop_patches(maps[int(mid)], origins_a[sel], heads_a[sel], context_px)
    return AgentSamples(np.array(hists), patches, np.array(futs), np.array(gts), origins_a, heads_a, types, mids_a, np.array(sidx))


def predict_world(model: PreTraMModel, samples: AgentSamples, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Mode trajectories in world coordinates [N, K, T, 2] and mode probabilities [N, K]."""
    trajs, probs = [], []
    for b in range(0, len(samples.map_ids), chunk):
        part = samples.take(np.arange(b, min(b + chunk, len(samples.map_ids))))
        pred = model.predict(part.histories, part.patches)
        c, s = np.cos(part.headings), np.sin(part.headings)
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # [n, 2, 2]
        world = np.einsum("nij,nktj->nkti", rot, pred.trajectories) + part.origins[:, None, None]
        trajs.append(world)
        probs.append(pred.probs)
    return np.concatenate(trajs), np.concatenate(probs)


def evaluate_model(model: PreTraMModel, dataset: Dataset, split: str = "test", batch_scenes: int = 8, seed: int = 0) -> dict:
    scenes = dataset.scenes[split]
    samples = build_samples(scenes, dataset.maps, model.cfg.context_px)
    trajs, probs = predict_world(model, samples)
    evals = [
        EvalSample(samples.gt_world[i], trajs[i], probs[i], samples.agent_types[i], int(samples.map_ids[i]))
        for i in range(len(probs))
    ]
    report = evaluate_samples(evals, dataset.maps)
    report["tmcl_retrieval"] = retrieval_accuracy(model, dataset, scenes, batch_scenes, seed)
    return report


@dataclass
class FinetuneResult:
    model: PreTraMModel
    report: dict
    history: list[dict] = field(default_factory=list)  # per-epoch train loss and test metrics


def finetune(
    dataset: Dataset,
    cfg: FinetuneConfig,
    model_cfg: ModelConfig | None = None,
    checkpoint: dict[str, np.ndarray] | None = None,
    eval_every_epoch: bool = True,
) -> FinetuneResult:
    cfg.validate()
    model_cfg = replace(model_cfg or ModelConfig(), num_modes=cfg.num_modes)
    if cfg.load_mode != "none" and checkpoint is None:
        raise ValueError(f"load_mode {cfg.load_mode!r} needs a checkpoint")
    model = PreTraMModel(model_cfg, seed=cfg.seed)
    if cfg.load_mode != "none":
        model.load_state_dict(checkpoint, mode=cfg.load_mode, include_heads=cfg.load_heads)
    scenes = subsample_scenes(dataset.train, cfg.data_fraction, cfg.seed)
    samples = build_samples(scenes, dataset.maps, model_cfg.context_px)
    params = model.parameters("map_encoder", "traj_encoder", "pred_head")
    per_epoch = math.ceil(len(scenes) / cfg.batch_scenes)
    total = cfg.epochs * per_epoch
    history = []
    step = 0
    report: dict = {}
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, 11, epoch)).permutation(len(scenes))
        losses = []
        for b in range(per_epoch):
            chosen = order[b * cfg.batch_scenes : (b + 1) * cfg.batch_scenes]
            part = samples.take(np.flatnonzero(np.isin(samples.scene_index, chosen)))
            zero_grads(params)
            traj, logits = model.forward_prediction(part.histories, part.patches, derive_seed(cfg.seed, 12, step), training=True)
            loss = prediction_loss(traj, logits, part.futures)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite fine-tuning loss at iteration {step}", model, history)
            loss.backward()
            try:
                adam_step(params, [p.grad for p in params], lr_at(step, total, cfg.lr, cfg.warmup_ratio), step + 1)
            except NumericalError as exc:
                raise TrainingAborted(f"iteration {step}: {exc}", model, history) from exc
            losses.append(value)
            step += 1
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if eval_every_epoch or epoch == cfg.epochs - 1:
            report = evaluate_model(model, dataset, "test", cfg.batch_scenes, cfg.seed)
            entry.update({k: report[k] for k in METRIC_KEYS})
        history.append(entry)
    return FinetuneResult(model, report, history)


# ------------------------------------------------------------------------ sweep

@dataclass
class SweepSpec:
    fractions: tuple[float, ...] = (1.0, 0.1)
    seeds: tuple[int, ...] = (0, 1, 2)
    arms: tuple[str, ...] = ("baseline", "pretram")

    def validate(self) -> None:
        for arm in self.arms:
            if arm not in ARMS and not (arm.startswith("aug:") and arm[4:] in AUG_MODES):
                raise ValueError(f"unknown sweep arm {arm!r}")
        if not self.fractions or not self.seeds or not self.arms:
            raise ValueError("sweep needs at least one fraction, seed, and arm")


def _arm_plan(arm: str) -> tuple[str | None, str, str]:
    """(pretraining objective or None, MCL augmentation mode, fine-tune load mode)."""
    if arm == "baseline":
        return None, "dropout", "none"
    if arm in ("te_only", "me_only"):
        return "pretram", "dropout", arm
    if arm.startswith("aug:"):
        return "pretram", arm[4:], "all"
    return arm, "dropout", "all"


SWEEP_FIELDS = ("arm", "fraction", "seed", "status") + METRIC_KEYS + ("final_train_loss", "error")


def run_sweep(
    dataset: Dataset,
    spec: SweepSpec,
    pretrain_cfg: PretrainConfig,
    finetune_cfg: FinetuneConfig,
    model_cfg: ModelConfig | None = None,
    cache: dict | None = None,
) -> list[dict]:
    """Full pipeline for every (fraction, seed, arm); failures are recorded and the sweep continues.

    Pre-trained weights are shared between arms through cache, keyed by
    (objective, augmentation, fraction, seed); pass a dict to reuse them across sweeps
    that keep pretrain_cfg and model_cfg fixed.
    """
    spec.validate()
    model_cfg = model_cfg or ModelConfig()
    cache = {} if cache is None else cache
    rows = []
    for fraction in spec.fractions:
        for seed in spec.seeds:
            for arm in spec.arms:
                row = {"arm": arm, "fraction": fraction, "seed": seed}
                try:
                    objective, aug, load_mode = _arm_plan(arm)
                    ckpt = None
                    if objective is not None:
                        key = (objective, aug, fraction, seed)
                        if key not in cache:
                            pcfg = replace(pretrain_cfg, objective=objective, mcl_aug_mode=aug, seed=seed, data_fraction=fraction)
                            cache[key] = pretrain(dataset, pcfg, model_cfg).model.state_dict()
                        ckpt = cache[key]
                    fcfg = replace(finetune_cfg, load_mode=load_mode, seed=seed, data_fraction=fraction)
                    res = finetune(dataset, fcfg, model_cfg, ckpt, eval_every_epoch=False)
                    row.update({k: res.report[k] for k in METRIC_KEYS})
                    row["final_train_loss"] = res.history[-1]["train_loss"]
                    row["status"] = "ok"
                except Exception as exc:  # noqa: BLE001 - one failed run must not end the sweep
                    log.exception("sweep run %s failed", row)
                    row["status"] = "failed"
                    row["error"] = f"{type(exc).__name__}: {exc}"
                log.info("sweep %s", row)
                rows.append(row)
    return rows


def summarize_sweep(rows: Sequence[dict]) -> dict:
    """Per arm and fraction: mean, sample sd, median, and count of every metric over successful seeds."""
    out: dict = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        out.setdefault(row["arm"], {}).setdefault(f"{row['fraction']:g}", []).append(row)
    summary: dict = {}
    for arm, by_frac in out.items():
        summary[arm] = {}
        for frac, runs in by_frac.items():
            stats = {}
            for k in METRIC_KEYS:
                vals = [float(r[k]) for r in runs]
                stats[k] = {
                    "mean": statistics.fmean(vals),
                    "sd": statistics.stdev(vals) if len(vals) > 1 else 0.0,
                    "median": statistics.median(vals),
                    "n": len(vals),
                }
            summary[arm][frac] = stats
    return summary
