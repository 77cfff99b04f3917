"""Map patch extraction and agent-frame trajectory normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenegen import PEDESTRIAN, VEHICLE, AgentTrack, Palette, SemanticMap, road_pixels

AUG_MODES = ("dropout", "rotation", "flip", "color_jitter", "gaussian_noise")


@dataclass
class MapPatch:
    pixels: np.ndarray  # [C, C, 3]; uint8 for crops, float64 after pixel augmentation
    center_world: np.ndarray
    orientation: float

    @property
    def context_px(self) -> int:
        return self.pixels.shape[0]


@dataclass
class NormalizedHistory:
    rows: np.ndarray  # [T_hist + 1, 6] of (x, y, cos, sin, speed, type_flag)
    origin: np.ndarray  # world position of the current state
    heading: float  # world heading of the current state

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return agent_to_world(points, self.origin, self.heading)


def _check_context(c: int) -> None:
    if c < 8:
        raise ValueError(f"patch context must be >= 8 px, got {c}")


def patch_offsets(c: int, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Patch-frame (forward, left) coordinates of pixel centers; rows index left, cols index forward."""
    ax = (np.arange(c) - c / 2 + 0.5) * resolution
    return np.meshgrid(ax, ax, indexing="xy")


def crop_patches(smap: SemanticMap, centers: np.ndarray, headings: np.ndarray, c: int) -> np.ndarray:
    """Batched nearest-neighbor crops, [n, C, C, 3] uint8; off-map pixels take the background color."""
    _check_context(c)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    headings = np.asarray(headings, dtype=np.float64).reshape(-1)
    u, v = patch_offsets(c, smap.resolution)
    cos = np.cos(headings)[:, None, None]
    sin = np.sin(headings)[:, None, None]
    wx = centers[:, 0, None, None] + u * cos - v * sin
    wy = centers[:, 1, None, None] + u * sin + v * cos
    col = np.floor(wx / smap.resolution).astype(np.int64)
    row = np.floor(wy / smap.resolution).astype(np.int64)
    ok = (row >= 0) & (row < smap.height_px) & (col >= 0) & (col < smap.width_px)
    out = np.empty(row.shape + (3,), dtype=np.uint8)
    out[...] = Palette.BACKGROUND
    out[ok] = smap.pixels[row[ok], col[ok]]
    return out


def crop_agent_patch(smap: SemanticMap, position, heading: float, c: int = 64) -> MapPatch:
    """Patch centered on position with the agent heading along the patch +x (column) axis."""
    pos = np.asarray(position, dtype=np.float64)
    pixels = crop_patches(smap, pos[None], np.array([heading]), c)[0]
    return MapPatch(pixels, pos, float(heading))


def sample_patch_centers(smap: SemanticMap, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n <= 0:
        raise ValueError("number of patches must be positive")
    rows, cols = np.nonzero(road_pixels(smap.pixels))
    if rows.size == 0:
        raise ValueError(f"map {smap.map_id} has no drivable pixels")
    pick = rng.integers(rows.size, size=n)
    centers = np.column_stack([cols[pick] + 0.5, rows[pick] + 0.5]) * smap.resolution
    orient = rng.uniform(0.0, 2 * np.pi, size=n)
    return centers, orient


def sample_decoupled_patches(smap: SemanticMap, n: int, seed: int, c: int = 64) -> list[MapPatch]:
    centers, orient = sample_patch_centers(smap, n, np.random.default_rng(seed))
    pixels = crop_patches(smap, centers, orient, c)
    return [MapPatch(p, ctr, float(o)) for p, ctr, o in zip(pixels, centers, orient)]


# ----------------------------------------------------------------- trajectories

def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def agent_to_world(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    return np.asarray(points) @ _rot(heading).T + origin


def world_to_agent(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    return (np.asarray(points) - origin) @ _rot(heading)


def type_flag(agent_type: str) -> float:
    if agent_type not in (VEHICLE, PEDESTRIAN):
        raise ValueError(f"unknown agent type {agent_type!r}")
    return 1.0 if agent_type == VEHICLE else 0.0


def normalize_history(track: AgentTrack, hist_len: int = 4) -> NormalizedHistory:
    """Rigidly move the history into the agent frame (current position at origin, heading along +x)."""
    if track.states.shape[0] < hist_len + 1:
        raise ValueError(f"track has {track.states.shape[0]} states, need at least {hist_len + 1}")
    hist = track.states[: hist_len + 1]
    cur = hist[-1]
    heading = float(np.arctan2(cur[3], cur[2]))
    origin = cur[:2].copy()
    pos = world_to_agent(hist[:, :2], origin, heading)
    head = hist[:, 2:4] @ _rot(heading)
    rows = np.column_stack([pos, head, hist[:, 4], np.full(len(hist), type_flag(track.agent_type))])
    return NormalizedHistory(rows, origin, heading)


def denormalize_history(hist: NormalizedHistory) -> np.ndarray:
    """Inverse of normalize_history: world-frame (x, y, cos, sin, speed) rows."""
    pos = hist.to_world(hist.rows[:, :2])
    head = hist.rows[:, 2:4] @ _rot(hist.heading).T
    return np.column_stack([pos, head, hist.rows[:, 4]])


def future_in_agent_frame(track: AgentTrack, hist_len: int = 4) -> np.ndarray:
    cur = track.states[hist_len]
    heading = float(np.arctan2(cur[3], cur[2]))
    return world_to_agent(track.states[hist_len + 1 :, :2], cur[:2], heading)


def joint_rotate(track: AgentTrack, patch_heading_offset: float, angle: float, hist_len: int = 4):
    """Rotate a track and its map about the agent's current position.

    The raster itself is never resampled: the returned offset is what must be
    added to the rotated track's heading so that cropping the original raster
    shows the rotated map, i.e. crop(heading' + offset') == crop(heading + offset).
    """
    pivot = track.states[hist_len, :2]
    rot = _rot(angle)
    states = track.states.copy()
    states[:, :2] = (track.states[:, :2] - pivot) @ rot.T + pivot
    states[:, 2:4] = track.states[:, 2:4] @ rot.T
    return AgentTrack(track.agent_type, states), patch_heading_offset - angle


# --------------------------------------------------------------- augmentations

def make_mcl_positive(patch: MapPatch, mode: str, seed: int) -> MapPatch:
    """Positive view for map contrastive learning.

    ``dropout`` returns the patch untouched; the two views differ only through
    the encoder's dropout masks. The pixel-space modes exist to compare against.
    """
    if mode not in AUG_MODES:
        raise ValueError(f"unknown augmentation mode {mode!r}; expected one of {AUG_MODES}")
    if mode == "dropout":
        return patch
    rng = np.random.default_rng(seed)
    px = patch.pixels
    if mode == "flip":
        out = px[::-1].copy()
    elif mode == "rotation":
        out = _rotate_pixels(px, rng.uniform(0, 2 * np.pi))
    elif mode == "color_jitter":
        gain = rng.uniform(0.6, 1.4, size=3)
        bias = rng.uniform(-40, 40, size=3)
        out = np.clip(px.astype(np.float64) * gain + bias, 0, 255)
    else:
        out = np.clip(px.astype(np.float64) + rng.normal(0, 25.0, size=px.shape), 0, 255)
    return MapPatch(out, patch.center_world, patch.orientation)


def _rotate_pixels(px: np.ndarray, theta: float) -> np.ndarray:
    c = px.shape[0]
    u, v = patch_offsets(c, 1.0)
    cos, sin = np.cos(theta), np.sin(theta)
    su = u * cos - v * sin
    sv = u * sin + v * cos
    col = np.floor(su + c / 2).astype(np.int64)
    row = np.floor(sv + c / 2).astype(np.int64)
    ok = (row >= 0) & (row < c) & (col >= 0) & (col < c)
    out = np.empty_like(px)
    out[...] = np.array(Palette.BACKGROUND, dtype=px.dtype)
    out[ok] = px[row[ok], col[ok]]
    return out
