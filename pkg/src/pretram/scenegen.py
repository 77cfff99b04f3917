"""Procedural semantic maps, map-consistent agent tracks, and the dataset format.

Maps are an axis-aligned road lattice. Every lattice line is a full-length road
with its own class (minor or major); major roads are wider and carry faster
traffic. Vehicles follow centerlines, slow down near intersections and may
turn there; pedestrians walk the sidewalk ring around a block.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError

FORMAT_VERSION = "1"


class Palette:
    BACKGROUND = (255, 255, 255)
    DRIVABLE = (100, 100, 100)
    SIDEWALK = (0, 180, 0)
    CROSSING = (230, 200, 0)
    ALL = (BACKGROUND, DRIVABLE, SIDEWALK, CROSSING)


def _packed(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.uint32)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


_PALETTE_CODES = _packed(np.array(Palette.ALL))
_ROAD_CODES = _packed(np.array([Palette.DRIVABLE, Palette.CROSSING]))
_SIDEWALK_CODE = int(_packed(np.array(Palette.SIDEWALK)))


def road_pixels(pixels: np.ndarray) -> np.ndarray:
    """Boolean mask of road surface (drivable lanes and the crossings painted on them)."""
    return np.isin(_packed(pixels), _ROAD_CODES)


def sidewalk_pixels(pixels: np.ndarray) -> np.ndarray:
    return _packed(pixels) == _SIDEWALK_CODE


@dataclass
class MapConfig:
    size_px: int = 240
    resolution: float = 0.5
    lattice_spacing: float = 34.0
    road_halfwidth: float = 3.0
    sidewalk_width: float = 2.0
    spacing_jitter: float = 0.15
    major_road_prob: float = 0.35
    major_width_scale: float = 1.5

    def validate(self) -> None:
        if self.size_px < 16 or self.resolution <= 0:
            raise ConfigError("map size_px must be >= 16 and resolution > 0")
        if not 0 <= self.spacing_jitter < 0.5:
            raise ConfigError("spacing_jitter must lie in [0, 0.5)")
        widest = 2 * (self.road_halfwidth * max(1.0, self.major_width_scale) + self.sidewalk_width)
        if self.lattice_spacing * (1 - self.spacing_jitter) <= widest + 2 * self.resolution:
            raise ConfigError(
                f"lattice_spacing {self.lattice_spacing} too small for road width {widest:.2f} m plus sidewalks"
            )
        if self.size_px * self.resolution < 2.5 * self.lattice_spacing:
            raise ConfigError("map too small to hold two roads per axis")


@dataclass
class Road:
    """A full-length lattice road; axis 'v' runs along y at x=coord, 'h' runs along x at y=coord."""

    axis: str
    coord: float
    halfwidth: float
    major: bool


@dataclass
class SemanticMap:
    map_id: int
    resolution: float
    pixels: np.ndarray  # [H, W, 3] uint8, row = floor(y / res), col = floor(x / res)
    roads: list[Road]
    sidewalk_width: float

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width_px * self.resolution, self.height_px * self.resolution

    def vertical(self) -> list[Road]:
        return sorted((r for r in self.roads if r.axis == "v"), key=lambda r: r.coord)

    def horizontal(self) -> list[Road]:
        return sorted((r for r in self.roads if r.axis == "h"), key=lambda r: r.coord)

    @property
    def road_graph(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        """Centerline segments between consecutive intersections (and the map border)."""
        w, h = self.extent
        lo = 0.5 * self.resolution
        segs = []
        for road in self.roads:
            cuts = [r.coord for r in (self.horizontal() if road.axis == "v" else self.vertical())]
            span = h if road.axis == "v" else w
            stops = [lo] + cuts + [span - lo]
            for a, b in zip(stops[:-1], stops[1:]):
                if road.axis == "v":
                    segs.append(((road.coord, a), (road.coord, b)))
                else:
                    segs.append(((a, road.coord), (b, road.coord)))
        return segs

    def world_to_pixel(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64)
        col = np.floor(xy[..., 0] / self.resolution).astype(np.int64)
        row = np.floor(xy[..., 1] / self.resolution).astype(np.int64)
        return row, col

    def inside(self, xy: np.ndarray) -> np.ndarray:
        row, col = self.world_to_pixel(xy)
        return (row >= 0) & (row < self.height_px) & (col >= 0) & (col < self.width_px)

    def lookup(self, xy: np.ndarray, fill=Palette.BACKGROUND) -> np.ndarray:
        """Pixel colors at world points; points off the map get the fill color."""
        row, col = self.world_to_pixel(xy)
        ok = (row >= 0) & (row < self.height_px) & (col >= 0) & (col < self.width_px)
        out = np.empty(row.shape + (3,), dtype=np.uint8)
        out[...] = fill
        out[ok] = self.pixels[row[ok], col[ok]]
        return out

    def on_road(self, xy: np.ndarray) -> np.ndarray:
        return self.inside(xy) & road_pixels(self.lookup(xy))

    def on_sidewalk(self, xy: np.ndarray) -> np.ndarray:
        return self.inside(xy) & sidewalk_pixels(self.lookup(xy))


def _lattice(rng: np.random.Generator, extent: float, cfg: MapConfig, axis: str) -> list[Road]:
    roads = []
    pos = cfg.lattice_spacing * rng.uniform(0.4, 0.6)
    while True:
        major = bool(rng.random() < cfg.major_road_prob)
        hw = cfg.road_halfwidth * (cfg.major_width_scale if major else 1.0)
        if pos + hw + cfg.sidewalk_width > extent - cfg.resolution:
            break
        roads.append(Road(axis, float(round(pos, 6)), float(hw), major))
        pos += cfg.lattice_spacing * (1.0 + rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter))
    return roads


def _rasterize(w_px: int, h_px: int, res: float, roads: list[Road], sidewalk: float) -> np.ndarray:
    xs = (np.arange(w_px) + 0.5) * res
    ys = (np.arange(h_px) + 0.5) * res

    def bands(coords, axis_roads):
        on = np.zeros(coords.shape, dtype=bool)
        side = np.zeros(coords.shape, dtype=bool)
        for r in axis_roads:
            d = np.abs(coords - r.coord)
            on |= d <= r.halfwidth
            side |= (d > r.halfwidth) & (d <= r.halfwidth + sidewalk)
        return on, side

    on_v, side_v = bands(xs, [r for r in roads if r.axis == "v"])
    on_h, side_h = bands(ys, [r for r in roads if r.axis == "h"])
    stripe_x = np.floor(xs).astype(np.int64) % 2 == 0
    stripe_y = np.floor(ys).astype(np.int64) % 2 == 0

    road = on_v[None, :] | on_h[:, None]
    side = (side_v[None, :] | side_h[:, None]) & ~road
    # zebra crossings continue a sidewalk band across the perpendicular road
    cross = (on_v[None, :] & ~on_h[:, None] & side_h[:, None] & stripe_x[None, :]) | (
        on_h[:, None] & ~on_v[None, :] & side_v[None, :] & stripe_y[:, None]
    )

    img = np.empty((h_px, w_px, 3), dtype=np.uint8)
    img[...] = Palette.BACKGROUND
    img[side] = Palette.SIDEWALK
    img[road] = Palette.DRIVABLE
    img[cross] = Palette.CROSSING
    return img


def generate_map(seed: int, config: MapConfig | None = None, map_id: int = 0) -> SemanticMap:
    cfg = config or MapConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    extent = cfg.size_px * cfg.resolution
    roads = _lattice(rng, extent, cfg, "v") + _lattice(rng, extent, cfg, "h")
    if sum(r.axis == "v" for r in roads) < 2 or sum(r.axis == "h" for r in roads) < 2:
        raise ConfigError("map too small to hold two roads per axis")
    pixels = _rasterize(cfg.size_px, cfg.size_px, cfg.resolution, roads, cfg.sidewalk_width)
    return SemanticMap(map_id, cfg.resolution, pixels, roads, cfg.sidewalk_width)


# ----------------------------------------------------------------------- agents

@dataclass
class SceneConfig:
    num_agents: int = 5
    v_vehicle: float = 5.0
    v_ped: float = 1.4
    noise_sd: float = 0.15
    turn_prob: float = 0.5
    ped_fraction: float = 0.3
    major_speed_scale: float = 1.6
    speed_jitter: float = 0.1
    slowdown: float = 0.5
    slowdown_range: float = 12.0
    hist_len: int = 4
    fut_len: int = 12
    dt: float = 0.5
    max_spawn_tries: int = 200

    def validate(self) -> None:
        if self.num_agents < 1:
            raise ConfigError("num_agents must be >= 1")
        if self.v_vehicle <= 0 or self.v_ped <= 0 or self.dt <= 0:
            raise ConfigError("speeds and dt must be positive")
        if not (0 <= self.turn_prob <= 1 and 0 <= self.ped_fraction <= 1):
            raise ConfigError("turn_prob and ped_fraction must lie in [0, 1]")
        if self.noise_sd < 0 or not 0 < self.slowdown <= 1:
            raise ConfigError("noise_sd must be >= 0 and slowdown in (0, 1]")

    @property
    def num_states(self) -> int:
        return self.hist_len + 1 + self.fut_len

    @property
    def noise_clip(self) -> float:
        return 2.5 * self.noise_sd

    @property
    def max_speed(self) -> float:
        """Bound on per-step displacement / dt, lateral noise included."""
        cruise = self.v_vehicle * max(1.0, self.major_speed_scale) * (1 + self.speed_jitter)
        return cruise + 2 * self.noise_clip / self.dt


VEHICLE, PEDESTRIAN = "vehicle", "pedestrian"


@dataclass
class AgentTrack:
    agent_type: str
    states: np.ndarray  # [T_hist + 1 + T_fut, 5] rows of (x, y, cos, sin, speed)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]


@dataclass
class Scene:
    map_id: int
    agents: list[AgentTrack]
    hist_len: int = 4
    fut_len: int = 12
    dt: float = 0.5

    @property
    def current_index(self) -> int:
        return self.hist_len


class _Route:
    """Axis-aligned polyline parameterized by arclength."""

    def __init__(self, start, direction):
        self.vertices = [np.asarray(start, dtype=np.float64)]
        self.dirs: list[np.ndarray] = []
        self.lengths: list[float] = []
        self.events: list[float] = []  # arclengths of intersections crossed
        self._dir = np.asarray(direction, dtype=np.float64)

    @property
    def length(self) -> float:
        return float(np.sum(self.lengths))

    def extend(self, dist: float, turn_dir=None):
        self.dirs.append(self._dir.copy())
        self.lengths.append(dist)
        self.vertices.append(self.vertices[-1] + self._dir * dist)
        if turn_dir is not None:
            self._dir = np.asarray(turn_dir, dtype=np.float64)

    def at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        acc = 0.0
        for v0, d, length in zip(self.vertices, self.dirs, self.lengths):
            if s <= acc + length:
                return v0 + d * (s - acc), d
            acc += length
        return self.vertices[-1] + self.dirs[-1] * (s - self.length), self.dirs[-1]


def _rotate_left(d):
    return np.array([-d[1], d[0]])


def _vehicle_route(smap: SemanticMap, road: Road, along: float, sign: int, need: float, turn_prob, rng) -> _Route:
    if road.axis == "v":
        start, direction = (road.coord, along), (0.0, float(sign))
    else:
        start, direction = (along, road.coord), (float(sign), 0.0)
    route = _Route(start, direction)
    v_coords = [r.coord for r in smap.vertical()]
    h_coords = [r.coord for r in smap.horizontal()]
    pos = np.array(start, dtype=np.float64)
    d = np.array(direction)
    budget = need + 1.0
    while route.length < budget:
        # perpendicular roads strictly ahead of the current point
        axis = 0 if d[0] != 0 else 1
        cuts = v_coords if axis == 0 else h_coords
        ahead = sorted((c - pos[axis]) * d[axis] for c in cuts if (c - pos[axis]) * d[axis] > 1e-9)
        if not ahead:
            route.extend(budget - route.length + 1.0)
            break
        step = ahead[0]
        new_dir = None
        if rng.random() < turn_prob:
            new_dir = _rotate_left(d) if rng.random() < 0.5 else -_rotate_left(d)
        route.extend(step, new_dir)
        route.events.append(route.length)
        pos = route.vertices[-1]
        if new_dir is not None:
            d = np.asarray(new_dir, dtype=np.float64)
    return route


def _sample_states(route: _Route, speed_at, n: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    s = 0.0
    pts, heads, speeds = [], [], []
    for _ in range(n):
        p, d = route.at(s)
        v = speed_at(s)
        pts.append(p)
        heads.append(d)
        speeds.append(v)
        s += v * dt
    return np.array(pts), np.column_stack([np.array(heads), np.array(speeds)])


def _spawn_vehicle(smap: SemanticMap, cfg: SceneConfig, rng) -> AgentTrack | None:
    w, h = smap.extent
    road = smap.roads[rng.integers(len(smap.roads))]
    span = h if road.axis == "v" else w
    along = rng.uniform(2.0, span - 2.0)
    sign = 1 if rng.random() < 0.5 else -1
    cruise = cfg.v_vehicle * (cfg.major_speed_scale if road.major else 1.0)
    cruise *= 1.0 + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter)
    need = cruise * cfg.dt * (cfg.num_states - 1)
    route = _vehicle_route(smap, road, along, sign, need, cfg.turn_prob, rng)
    events = np.array(route.events) if route.events else np.array([np.inf])

    def speed_at(s):
        gap = float(np.min(np.abs(events - s)))
        frac = min(1.0, gap / cfg.slowdown_range) if cfg.slowdown_range > 0 else 1.0
        return cruise * (cfg.slowdown + (1.0 - cfg.slowdown) * frac)

    pts, hv = _sample_states(route, speed_at, cfg.num_states, cfg.dt)
    if cfg.noise_sd > 0:
        lat = np.clip(rng.normal(0.0, cfg.noise_sd, size=len(pts)), -cfg.noise_clip, cfg.noise_clip)
        normals = np.column_stack([-hv[:, 1], hv[:, 0]])
        pts = pts + lat[:, None] * normals
    states = np.column_stack([pts, hv])
    if not np.all(smap.inside(pts)):
        return None
    return AgentTrack(VEHICLE, states)


def _spawn_pedestrian(smap: SemanticMap, cfg: SceneConfig, rng) -> AgentTrack | None:
    vs, hs = smap.vertical(), smap.horizontal()
    i = rng.integers(len(vs) - 1)
    j = rng.integers(len(hs) - 1)
    off = smap.sidewalk_width / 2
    x0, x1 = vs[i].coord + vs[i].halfwidth + off, vs[i + 1].coord - vs[i + 1].halfwidth - off
    y0, y1 = hs[j].coord + hs[j].halfwidth + off, hs[j + 1].coord - hs[j + 1].halfwidth - off
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    if rng.random() < 0.5:
        corners = corners[::-1]
    edges = np.roll(corners, -1, axis=0) - corners
    lengths = np.linalg.norm(edges, axis=1)
    perimeter = lengths.sum()
    speed = cfg.v_ped * (1.0 + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter))
    s0 = rng.uniform(0, perimeter)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    rows = []
    for t in range(cfg.num_states):
        s = (s0 + speed * cfg.dt * t) % perimeter
        k = min(int(np.searchsorted(cum, s, side="right") - 1), 3)
        d = edges[k] / lengths[k]
        p = corners[k] + d * (s - cum[k])
        rows.append([p[0], p[1], d[0], d[1], speed])
    states = np.array(rows)
    sd = cfg.noise_sd * 0.25
    if sd > 0:
        lat = np.clip(rng.normal(0.0, sd, size=len(states)), -2.5 * sd, 2.5 * sd)
        states[:, 0] += -states[:, 3] * lat
        states[:, 1] += states[:, 2] * lat
    return AgentTrack(PEDESTRIAN, states)


def generate_scene(smap: SemanticMap, seed: int, config: SceneConfig | None = None) -> Scene:
    cfg = config or SceneConfig()
    cfg.validate()
    if not smap.roads:
        raise ValueError("map has an empty road graph")
    rng = np.random.default_rng(seed)
    agents = []
    for _ in range(cfg.num_agents):
        is_ped = rng.random() < cfg.ped_fraction
        spawn = _spawn_pedestrian if is_ped else _spawn_vehicle
        for _ in range(cfg.max_spawn_tries):
            track = spawn(smap, cfg, rng)
            if track is not None:
                break
        else:
            raise ValueError(f"no feasible spawn location on map {smap.map_id} after {cfg.max_spawn_tries} tries")
        agents.append(track)
    return Scene(smap.map_id, agents, cfg.hist_len, cfg.fut_len, cfg.dt)


# ---------------------------------------------------------------------- dataset

@dataclass
class DataConfig:
    seed: int = 0
    num_maps: int = 12
    train_scenes: int = 200
    val_scenes: int = 50
    test_scenes: int = 50
    map: MapConfig = field(default_factory=MapConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class Dataset:
    maps: dict[int, SemanticMap]
    scenes: dict[str, list[Scene]]

    @property
    def train(self) -> list[Scene]:
        return self.scenes["train"]

    @property
    def val(self) -> list[Scene]:
        return self.scenes["val"]

    @property
    def test(self) -> list[Scene]:
        return self.scenes["test"]


SPLITS = ("train", "val", "test")


def generate_dataset(cfg: DataConfig) -> Dataset:
    seeds = np.random.SeedSequence(cfg.seed)
    map_seq, scene_seq = seeds.spawn(2)
    map_seeds = map_seq.generate_state(cfg.num_maps, dtype=np.uint64)
    maps = {i: generate_map(int(s), cfg.map, map_id=i) for i, s in enumerate(map_seeds)}
    counts = {"train": cfg.train_scenes, "val": cfg.val_scenes, "test": cfg.test_scenes}
    scenes: dict[str, list[Scene]] = {}
    for split, sseq in zip(SPLITS, scene_seq.spawn(len(SPLITS))):
        n = counts[split]
        st = sseq.generate_state(2 * n, dtype=np.uint64).reshape(n, 2)
        scenes[split] = [generate_scene(maps[int(a % cfg.num_maps)], int(b), cfg.scene) for a, b in st]
    return Dataset(maps, scenes)


def write_ppm(path: Path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated PPM header at byte {pos}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise DatasetFormatError(f"{path}: expected magic P6 at byte 0, found {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: non-integer PPM header field") from exc
    if maxval != 255:
        raise DatasetFormatError(f"{path}: maxval must be 255, got {maxval}")
    body = raw[pos:]
    if len(body) != w * h * 3:
        raise DatasetFormatError(f"{path}: expected {w * h * 3} pixel bytes after offset {pos}, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
    bad = ~np.isin(_packed(pixels), _PALETTE_CODES)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        offset = pos + 3 * (r * w + c)
        raise DatasetFormatError(
            f"{path}: non-palette pixel {tuple(int(v) for v in pixels[r, c])} at row {r}, col {c} (byte offset {offset})"
        )
    return pixels


def _scene_record(scene: Scene) -> dict:
    return {
        "map_id": scene.map_id,
        "hist_len": scene.hist_len,
        "fut_len": scene.fut_len,
        "dt": scene.dt,
        "agents": [{"type": a.agent_type, "states": [[float(v) for v in row] for row in a.states]} for a in scene.agents],
    }


def _parse_scene(rec, where: str, maps) -> Scene:
    try:
        hist, fut, dt = int(rec["hist_len"]), int(rec["fut_len"]), float(rec["dt"])
        map_id = int(rec["map_id"])
        agents = rec["agents"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{where}: missing or invalid field ({exc})") from exc
    if map_id not in maps:
        raise DatasetFormatError(f"{where}: unknown map_id {map_id}")
    tracks = []
    for k, a in enumerate(agents):
        if a.get("type") not in (VEHICLE, PEDESTRIAN):
            raise DatasetFormatError(f"{where}: agent {k} has unknown type {a.get('type')!r}")
        states = np.asarray(a.get("states"), dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 5:
            raise DatasetFormatError(f"{where}: agent {k} states must be rows of 5 values")
        if states.shape[0] != hist + 1 + fut:
            raise DatasetFormatError(
                f"{where}: agent {k} has {states.shape[0]} states, expected hist_len+1+fut_len = {hist + 1 + fut}"
            )
        tracks.append(AgentTrack(a["type"], states))
    if not tracks:
        raise DatasetFormatError(f"{where}: scene has no agents")
    return Scene(map_id, tracks, hist, fut, dt)


def save_dataset(dataset: Dataset, out_dir, config_echo: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    map_meta = {}
    for mid in sorted(dataset.maps):
        m = dataset.maps[mid]
        write_ppm(out / "maps" / f"map_{mid}.ppm", m.pixels)
        map_meta[str(mid)] = {
            "resolution": m.resolution,
            "sidewalk_width": m.sidewalk_width,
            "roads": [asdict(r) for r in m.roads],
        }
    for split in SPLITS:
        with open(out / f"scenes_{split}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for scene in dataset.scenes.get(split, []):
                fh.write(json.dumps(_scene_record(scene), separators=(",", ":")) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "counts": {"maps": len(dataset.maps), **{s: len(dataset.scenes.get(s, [])) for s in SPLITS}},
        "config": config_echo or {},
        "maps": map_meta,
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{mpath}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{mpath}: unsupported format_version {manifest.get('format_version')!r}")
    maps = {}
    for key, meta in manifest["maps"].items():
        mid = int(key)
        pixels = read_ppm(root / "maps" / f"map_{mid}.ppm")
        roads = [Road(**r) for r in meta["roads"]]
        maps[mid] = SemanticMap(mid, float(meta["resolution"]), pixels, roads, float(meta["sidewalk_width"]))
    scenes = {}
    for split in SPLITS:
        path = root / f"scenes_{split}.jsonl"
        items = []
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    where = f"{path}:{lineno}"
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise DatasetFormatError(f"{where}: column {exc.colno}: {exc.msg}") from exc
                    items.append(_parse_scene(rec, where, maps))
        scenes[split] = items
    return Dataset(maps, scenes)


def heading_unit_error(states: np.ndarray) -> float:
    return float(np.max(np.abs(np.hypot(states[:, 2], states[:, 3]) - 1.0)))
