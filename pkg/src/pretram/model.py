"""Encoders, projection heads, prediction head, and checkpoint I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import DropoutMask, Parameter, Tensor
from .errors import CheckpointMismatchError, ShapeError

TRAJ_FEATURES = 7  # x, y, cos, sin, speed, type flag, mtm mask flag
LOAD_MODES = ("none", "all", "te_only", "me_only")


@dataclass
class ModelConfig:
    context_px: int = 64
    channels: tuple[int, ...] = (16, 32, 32, 64)
    kernel: int = 3
    stride: int = 2
    dropout_p: float = 0.1
    d_m: int = 128
    traj_width: int = 64
    d_t: int = 128
    d_e: int = 64
    attention: bool = False
    num_modes: int = 10
    hist_len: int = 4
    fut_len: int = 12
    pred_hidden: int = 128
    mtm_hidden: int = 64
    coord_scale: float = 10.0
    tau_init: float = 0.07
    dtype: str = "float32"

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.dropout_p


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng, dtype, std=None, bias=True):
        std = math.sqrt(2.0 / fan_in) if std is None else std
        self.weight = Parameter(f"{name}.weight", _normal(rng, (fan_in, fan_out), std, dtype), dtype=dtype)
        self.bias = Parameter(f"{name}.bias", np.zeros(fan_out, dtype=dtype), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = dc.matmul(x, self.weight)
        return dc.add(y, self.bias) if self.bias is not None else y

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class MapEncoder:
    """Strided conv stack with ReLU then dropout after every convolution, then a linear layer."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        self.convs: list[tuple[Parameter, Parameter]] = []
        c_in, size = 3, cfg.context_px
        pad = cfg.kernel // 2
        for i, c_out in enumerate(cfg.channels):
            std = math.sqrt(2.0 / (c_in * cfg.kernel**2))
            w = Parameter(f"map_encoder.conv{i}.weight", _normal(rng, (c_out, c_in, cfg.kernel, cfg.kernel), std, dtype), dtype)
            b = Parameter(f"map_encoder.conv{i}.bias", np.zeros(c_out, dtype=dtype), dtype)
            self.convs.append((w, b))
            c_in = c_out
            size = _conv_out(size, cfg.kernel, cfg.stride, pad)
            if size < 1:
                raise ShapeError(f"context {cfg.context_px} px too small for {len(cfg.channels)} stride-{cfg.stride} stages")
        self.fc = Linear("map_encoder.fc", c_in * size * size, cfg.d_m, rng, dtype, std=math.sqrt(1.0 / (c_in * size * size)))

    def __call__(self, patches: np.ndarray, mask: DropoutMask | None = None, training: bool = False) -> Tensor:
        patches = np.asarray(patches)
        c = self.cfg.context_px
        if patches.ndim != 4 or patches.shape[1:] != (c, c, 3):
            raise ShapeError(f"expected patches [N, {c}, {c}, 3], got {patches.shape}")
        dtype = self.fc.weight.dtype
        x = Tensor(np.ascontiguousarray(patches.transpose(0, 3, 1, 2)).astype(dtype) / dtype.type(255.0))
        if training and mask is None:
            raise ValueError("training-mode map encoding needs a dropout mask")
        for i, (w, b) in enumerate(self.convs):
            x = dc.relu(dc.conv2d(x, w, b, stride=self.cfg.stride, padding=self.cfg.kernel // 2))
            if training:
                x = dc.dropout(x, mask.child(i), training=True)
        return self.fc(dc.flatten(x))

    def parameters(self) -> list[Parameter]:
        return [p for wb in self.convs for p in wb] + self.fc.parameters()


def trajectory_features(rows: np.ndarray, cfg: ModelConfig, mtm_mask: np.ndarray | None = None) -> np.ndarray:
    """Scale normalized-history rows [N, T, 6] and append the masked-step flag column."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 2:
        rows = rows[None]
    if rows.shape[1:] != (cfg.hist_len + 1, 6):
        raise ShapeError(f"expected history rows [N, {cfg.hist_len + 1}, 6], got {rows.shape}")
    feats = np.concatenate([rows, np.zeros(rows.shape[:2] + (1,))], axis=-1)
    feats[..., [0, 1, 4]] /= cfg.coord_scale
    if mtm_mask is not None:
        feats[..., [0, 1, 4]] *= ~mtm_mask[..., None]
        feats[..., 6] = mtm_mask
    return feats


class TrajectoryEncoder:
    """Per-timestep two-layer perceptron, optional self-attention, mean pool over time, two-layer head."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        w = cfg.traj_width
        self.step0 = Linear("traj_encoder.step0", TRAJ_FEATURES, w, rng, dtype)
        self.step1 = Linear("traj_encoder.step1", w, w, rng, dtype)
        self.attn = None
        if cfg.attention:
            self.attn = [Linear(f"traj_encoder.attn_{k}", w, w, rng, dtype, std=math.sqrt(1.0 / w), bias=False) for k in "qkv"]
        self.out0 = Linear("traj_encoder.out0", w, w, rng, dtype)
        self.out1 = Linear("traj_encoder.out1", w, cfg.d_t, rng, dtype, std=math.sqrt(1.0 / w))

    def __call__(self, feats: np.ndarray | Tensor) -> Tensor:
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats), dtype=self.out1.weight.dtype)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.hist_len + 1, TRAJ_FEATURES):
            raise ShapeError(f"expected features [N, {self.cfg.hist_len + 1}, {TRAJ_FEATURES}], got {x.shape}")
        h = dc.relu(self.step1(dc.relu(self.step0(x))))
        if self.attn is not None:
            q, k, v = (lin(h) for lin in self.attn)
            scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(h.shape[-1]))
            h = dc.add(h, dc.matmul(dc.softmax(scores, axis=-1), v))
        pooled = dc.mean_over_axis(h, axis=1)
        return self.out1(dc.relu(self.out0(pooled)))

    def parameters(self) -> list[Parameter]:
        ps = self.step0.parameters() + self.step1.parameters()
        if self.attn is not None:
            ps += [p for lin in self.attn for p in lin.parameters()]
        return ps + self.out0.parameters() + self.out1.parameters()


MAX_LOGIT_SCALE = math.log(100.0)


class ProjectionHeads:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.w_traj = Parameter("heads.w_traj", _normal(rng, (cfg.d_t, cfg.d_e), 1 / math.sqrt(cfg.d_t), dtype), dtype)
        self.w_map = Parameter("heads.w_map", _normal(rng, (cfg.d_m, cfg.d_e), 1 / math.sqrt(cfg.d_m), dtype), dtype)
        self.w_mcl = Parameter("heads.w_mcl", _normal(rng, (cfg.d_m, cfg.d_e), 1 / math.sqrt(cfg.d_m), dtype), dtype)
        init = math.log(1.0 / cfg.tau_init)
        self.logit_scale_traj = Parameter("heads.logit_scale_traj", np.array(init), dtype)
        self.logit_scale_map = Parameter("heads.logit_scale_map", np.array(init), dtype)
        self._by_head = {"traj": self.w_traj, "map": self.w_map, "mcl": self.w_mcl}

    def project(self, features: Tensor, head: str) -> Tensor:
        if head not in self._by_head:
            raise ValueError(f"unknown projection head {head!r}")
        w = self._by_head[head]
        if features.shape[-1] != w.shape[0]:
            raise ShapeError(f"head {head!r} expects features of width {w.shape[0]}, got {features.shape[-1]}")
        return dc.l2_normalize(dc.matmul(features, w))

    def clamp_temperatures(self) -> None:
        for p in (self.logit_scale_traj, self.logit_scale_map):
            np.clip(p.data, 0.0, MAX_LOGIT_SCALE, out=p.data)

    @property
    def tau_traj(self) -> float:
        return float(np.exp(-self.logit_scale_traj.data))

    @property
    def tau_map(self) -> float:
        return float(np.exp(-self.logit_scale_map.data))

    def parameters(self) -> list[Parameter]:
        return [self.w_traj, self.w_map, self.w_mcl, self.logit_scale_traj, self.logit_scale_map]


class PredictionHead:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        k, t = cfg.num_modes, cfg.fut_len
        self.fc0 = Linear("pred_head.fc0", cfg.d_t + cfg.d_m, cfg.pred_hidden, rng, dtype)
        self.fc1 = Linear("pred_head.fc1", cfg.pred_hidden, k * t * 2 + k, rng, dtype, std=0.01)

    def __call__(self, traj_feat: Tensor, map_feat: Tensor) -> tuple[Tensor, Tensor]:
        """Mode trajectories [N, K, T, 2] in the agent frame (meters) and mode logits [N, K]."""
        k, t = self.cfg.num_modes, self.cfg.fut_len
        out = self.fc1(dc.relu(self.fc0(dc.concat([traj_feat, map_feat], axis=-1))))
        disp = dc.reshape(dc.narrow(out, 1, 0, k * t * 2), (out.shape[0], k, t, 2))
        logits = dc.narrow(out, 1, k * t * 2, k)
        traj = dc.scale(dc.cumsum(disp, axis=2), self.cfg.coord_scale)
        return traj, logits

    def parameters(self) -> list[Parameter]:
        return self.fc0.parameters() + self.fc1.parameters()


class MtmHead:
    """Reconstructs (x, y, speed) of every history step from the pooled trajectory feature."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        self.fc0 = Linear("mtm_head.fc0", cfg.d_t, cfg.mtm_hidden, rng, dtype)
        self.fc1 = Linear("mtm_head.fc1", cfg.mtm_hidden, (cfg.hist_len + 1) * 3, rng, dtype, std=math.sqrt(1.0 / cfg.mtm_hidden))

    def __call__(self, traj_feat: Tensor) -> Tensor:
        out = self.fc1(dc.relu(self.fc0(traj_feat)))
        return dc.reshape(out, (out.shape[0], self.cfg.hist_len + 1, 3))

    def parameters(self) -> list[Parameter]:
        return self.fc0.parameters() + self.fc1.parameters()


@dataclass
class Prediction:
    trajectories: np.ndarray  # [N, K, T_fut, 2], agent frame
    probs: np.ndarray  # [N, K]


class PreTraMModel:
    """All parameter-bearing parts; encoders are shared between pre-training and fine-tuning."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        dtype = np.dtype(self.cfg.dtype).type
        rngs = [np.random.default_rng([seed, k]) for k in range(5)]
        self.map_encoder = MapEncoder(self.cfg, rngs[0], dtype)
        self.traj_encoder = TrajectoryEncoder(self.cfg, rngs[1], dtype)
        self.heads = ProjectionHeads(self.cfg, rngs[2], dtype)
        self.pred_head = PredictionHead(self.cfg, rngs[3], dtype)
        self.mtm_head = MtmHead(self.cfg, rngs[4], dtype)
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    # -- forward passes
    def encode_map(self, patches: np.ndarray, mask_seed: int | None = None, training: bool = False) -> Tensor:
        mask = DropoutMask(int(mask_seed), self.cfg.keep_prob) if mask_seed is not None else None
        return self.map_encoder(patches, mask, training)

    def encode_trajectory(self, rows: np.ndarray, mtm_mask: np.ndarray | None = None) -> Tensor:
        return self.traj_encoder(trajectory_features(rows, self.cfg, mtm_mask))

    def project(self, features: Tensor, head: str) -> Tensor:
        return self.heads.project(features, head)

    def forward_prediction(self, rows, patches, mask_seed=None, training=False) -> tuple[Tensor, Tensor]:
        return self.pred_head(self.encode_trajectory(rows), self.encode_map(patches, mask_seed, training))

    def predict(self, rows: np.ndarray, patches: np.ndarray) -> Prediction:
        traj, logits = self.forward_prediction(rows, patches)
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return Prediction(traj.data.astype(np.float64), p / p.sum(axis=1, keepdims=True))

    # -- parameters
    def groups(self) -> dict[str, list[Parameter]]:
        return {
            "map_encoder": self.map_encoder.parameters(),
            "traj_encoder": self.traj_encoder.parameters(),
            "heads": self.heads.parameters(),
            "pred_head": self.pred_head.parameters(),
            "mtm_head": self.mtm_head.parameters(),
        }

    def parameters(self, *groups: str) -> list[Parameter]:
        g = self.groups()
        return [p for name in (groups or tuple(g)) for p in g[name]]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def clamp_temperatures(self) -> None:
        self.heads.clamp_temperatures()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], mode: str = "full", include_heads: bool = False) -> list[str]:
        """Copy tensors selected by mode into the model and return the loaded names.

        mode: full (every tensor), all (both encoder bodies), te_only, me_only, none.
        """
        groups = {
            "full": tuple(self.groups()),
            "all": ("traj_encoder", "map_encoder"),
            "te_only": ("traj_encoder",),
            "me_only": ("map_encoder",),
            "none": (),
        }
        if mode not in groups:
            raise ValueError(f"unknown load mode {mode!r}")
        chosen = groups[mode] + (("heads",) if include_heads and mode != "full" else ())
        targets = self.parameters(*chosen) if chosen else []
        missing = [p.name for p in targets if p.name not in state]
        mismatched = [
            f"{p.name}: model {p.shape} vs checkpoint {tuple(state[p.name].shape)}"
            for p in targets
            if p.name in state and tuple(state[p.name].shape) != p.shape
        ]
        known = {p.name for p in self.parameters()}
        unexpected = sorted(k for k in state if k not in known)
        if missing or mismatched or (mode == "full" and unexpected):
            lines = [f"missing: {n}" for n in missing] + [f"shape: {s}" for s in mismatched]
            lines += [f"unexpected: {n}" for n in unexpected] if mode == "full" else []
            raise CheckpointMismatchError("checkpoint does not match model\n  " + "\n  ".join(lines), missing, unexpected, mismatched)
        for p in targets:
            p.data[...] = state[p.name].astype(p.dtype)
            p.m[...] = 0
            p.v[...] = 0
        return [p.name for p in targets]


# ------------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"PTMCKPT1"


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """magic, u32 count, then per tensor: u32 name length, name, u32 rank, u32 dims, f32 LE values."""
    chunks = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointMismatchError(f"{path}: bad magic {raw[:8]!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointMismatchError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 4 * n > len(raw):
            raise CheckpointMismatchError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise CheckpointMismatchError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def save_model(model: PreTraMModel, path) -> None:
    save_checkpoint(path, model.state_dict())


def load_model(path, cfg: ModelConfig | None = None) -> PreTraMModel:
    model = PreTraMModel(cfg)
    model.load_state_dict(load_checkpoint(path), mode="full")
    return model
