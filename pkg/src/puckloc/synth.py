"""Synthetic broadcast-style hockey clips with exact puck labels.

A pinhole camera sits behind the near boards and pans horizontally to follow
the puck with some lag. Each frame shows the ice with its markings, a dark
puck disc and a handful of players drawn as ellipses that can hide the puck.
Everything is driven by one ``numpy`` generator so a (seed, clip index) pair
fixes every output byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .data import EventRecord, EventType, write_events
from .rink import RINK_LENGTH, RINK_WIDTH, RinkPoint

ICE = np.array([0.90, 0.93, 0.96])
BOARDS = np.array([0.48, 0.45, 0.42])
RED = np.array([0.80, 0.12, 0.12])
BLUE = np.array([0.12, 0.22, 0.70])
PUCK = np.array([0.05, 0.05, 0.05])
TEAM_COLORS = (np.array([0.15, 0.20, 0.55]), np.array([0.75, 0.15, 0.15]))

FACEOFF_RADIUS = 15.0
FACEOFF_SPOTS = ((100.0, 42.5), (31.0, 20.5), (31.0, 64.5), (169.0, 20.5), (169.0, 64.5))
MAX_PUCK_SPEED = 120.0
EVENT_CYCLE = (EventType.SHOT, EventType.DUMP, EventType.FACEOFF)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    rng_seed: int = 0
    clip_len: int = 60
    fps: float = 60.0
    frame_size: int = 256
    # puck
    puck_start: Optional[tuple[float, float]] = None
    puck_velocity: Optional[tuple[float, float]] = None
    puck_speed_range: tuple[float, float] = (0.0, 60.0)
    impulse_prob: float = 0.3
    puck_diameter_px: float = 4.0
    # players
    n_occluders: int = 6
    occluder_size_ft: tuple[float, float] = (2.5, 6.0)
    occluder_max_speed: float = 25.0
    occlusion_allowance: float = 0.2
    # camera
    static_camera: bool = False
    pan_start: Optional[float] = None
    pan_lag_s: float = 0.3
    pan_limits: tuple[float, float] = (35.0, 165.0)
    zoom_range: tuple[float, float] = (0.85, 1.2)
    jitter_std_ft: float = 0.3
    cam_distance_ft: float = 25.0
    cam_height_ft: float = 55.0
    view_width_ft: float = 100.0
    blur_subsamples: int = 3
    max_attempts: int = 50

    def __post_init__(self):
        problems = []
        if self.clip_len < 1:
            problems.append("clip_len must be >= 1")
        if self.fps <= 0:
            problems.append("fps must be positive")
        if self.frame_size < 8:
            problems.append("frame_size must be >= 8")
        lo, hi = self.puck_speed_range
        if not 0 <= lo <= hi <= MAX_PUCK_SPEED:
            problems.append(f"puck_speed_range must satisfy 0 <= lo <= hi <= {MAX_PUCK_SPEED}")
        if self.puck_velocity is not None and np.hypot(*self.puck_velocity) > MAX_PUCK_SPEED:
            problems.append(f"puck_velocity exceeds {MAX_PUCK_SPEED} ft/s")
        if self.puck_start is not None:
            x, y = self.puck_start
            if not (0 <= x <= RINK_LENGTH and 0 <= y <= RINK_WIDTH):
                problems.append("puck_start is off the ice")
        if not 0 <= self.impulse_prob <= 1:
            problems.append("impulse_prob must be in [0, 1]")
        if not 2 <= self.puck_diameter_px <= 5:
            problems.append("puck_diameter_px must be in [2, 5]")
        if self.n_occluders < 0:
            problems.append("n_occluders must be >= 0")
        if min(self.occluder_size_ft) <= 0 or self.occluder_max_speed < 0:
            problems.append("occluder sizes must be positive and speed non-negative")
        if not 0 <= self.occlusion_allowance <= 1:
            problems.append("occlusion_allowance must be in [0, 1]")
        if self.pan_lag_s < 0 or self.jitter_std_ft < 0:
            problems.append("pan_lag_s and jitter_std_ft must be non-negative")
        if not 0 <= self.pan_limits[0] <= self.pan_limits[1] <= RINK_LENGTH:
            problems.append("pan_limits must be an ordered range inside the rink")
        if not 0 < self.zoom_range[0] <= self.zoom_range[1]:
            problems.append("zoom_range must be positive and ordered")
        if min(self.cam_distance_ft, self.cam_height_ft, self.view_width_ft) <= 0:
            problems.append("camera geometry must be positive")
        if self.blur_subsamples < 1 or self.max_attempts < 1:
            problems.append("blur_subsamples and max_attempts must be >= 1")
        if problems:
            raise ScenarioError("; ".join(problems))

    @property
    def mid_frame(self) -> int:
        return self.clip_len // 2

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


# -- camera ------------------------------------------------------------------


class Projection(NamedTuple):
    u: float
    v: float
    in_view: bool


@dataclass(frozen=True)
class CameraState:
    """Camera for one frame.

    ``homography`` maps homogeneous rink coordinates (x, y, 1) to image
    coordinates; pixel (row i, col j) covers [j, j+1) x [i, i+1).
    ``projection`` is the full 3x4 matrix when the camera is a real pinhole,
    used to place players' heads above the ice.
    """

    pan_x: float
    zoom: float
    homography: np.ndarray
    frame_size: int
    projection: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        h = np.asarray(self.homography, dtype=np.float64)
        if h.shape != (3, 3) or not np.all(np.isfinite(h)):
            raise ScenarioError("homography must be a finite 3x3 matrix")
        if abs(np.linalg.det(h)) < 1e-12 * max(1.0, np.abs(h).max() ** 3):
            raise ScenarioError("degenerate (singular) homography")
        object.__setattr__(self, "homography", h)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.homography)


def project_point(cam: CameraState, p: RinkPoint | Sequence[float]) -> Projection:
    """Map a rink point into the image; points behind the camera come back as NaN."""
    x, y = (p.x, p.y) if isinstance(p, RinkPoint) else p
    u, v, w = cam.homography @ np.array([x, y, 1.0])
    if w <= 0:
        return Projection(float("nan"), float("nan"), False)
    u, v = u / w, v / w
    s = cam.frame_size
    return Projection(float(u), float(v), bool(0 <= u <= s and 0 <= v <= s))


def pinhole_camera(pan_x: float, zoom: float, cfg: ScenarioConfig) -> CameraState:
    """Broadcast camera behind the y=0 boards aimed at (pan_x, centre ice)."""
    s = cfg.frame_size
    centre = np.array([pan_x, RINK_WIDTH / 2.0, 0.0])
    eye = np.array([pan_x, -cfg.cam_distance_ft, cfg.cam_height_ft])
    fwd = centre - eye
    dist = np.linalg.norm(fwd)
    fwd /= dist
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    focal = zoom * s * dist / cfg.view_width_ft
    k = np.array([[focal, 0.0, s / 2.0], [0.0, focal, s / 2.0], [0.0, 0.0, 1.0]])
    proj = k @ np.hstack([rot, (-rot @ eye)[:, None]])
    hom = proj[:, [0, 1, 3]]
    return CameraState(float(pan_x), float(zoom), hom, s, proj)


# -- kinematics --------------------------------------------------------------


def _fold(q: np.ndarray, length: float) -> np.ndarray:
    """Reflect an unconstrained coordinate back into [0, length] (elastic boards)."""
    q = np.mod(q, 2.0 * length)
    return np.where(q > length, 2.0 * length - q, q)


@dataclass
class Trajectory:
    """Piecewise constant-velocity motion with elastic reflection off the boards."""

    start: np.ndarray
    velocity: np.ndarray
    impulse_time: Optional[float] = None
    impulse_velocity: Optional[np.ndarray] = None

    def at(self, t: np.ndarray | float) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        start = np.broadcast_to(self.start, (len(t), 2)).copy()
        vel = np.broadcast_to(self.velocity, (len(t), 2)).copy()
        dt = t.copy()
        if self.impulse_time is not None:
            kick = self._fold(self.start + self.impulse_time * self.velocity)[0]
            after = t > self.impulse_time
            start[after] = kick
            vel[after] = self.impulse_velocity
            dt[after] -= self.impulse_time
        return self._fold(start + dt[:, None] * vel)

    @staticmethod
    def _fold(raw: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(raw)
        return np.stack([_fold(raw[:, 0], RINK_LENGTH), _fold(raw[:, 1], RINK_WIDTH)], axis=1)


def _random_velocity(rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    speed = rng.uniform(lo, hi)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    return speed * np.array([np.cos(ang), np.sin(ang)])


@dataclass
class Scenario:
    """Everything about a clip except its pixels."""

    config: ScenarioConfig
    puck: Trajectory
    players: list[Trajectory]
    teams: list[int]
    cameras: list[CameraState]
    truth: RinkPoint
    hidden: np.ndarray  # per-frame: puck out of view or covered

    def frame_times(self) -> np.ndarray:
        return np.arange(self.config.clip_len) / self.config.fps

    def subsample_times(self, frame: int) -> np.ndarray:
        n = self.config.blur_subsamples
        offsets = (np.arange(n) + 0.5) / n - 0.5
        return (frame + offsets) / self.config.fps


def _sample_puck(cfg: ScenarioConfig, rng: np.random.Generator) -> Trajectory:
    if cfg.puck_start is not None:
        start = np.array(cfg.puck_start, dtype=np.float64)
    else:
        start = np.array([rng.uniform(0.0, RINK_LENGTH), rng.uniform(0.0, RINK_WIDTH)])
    if cfg.puck_velocity is not None:
        vel = np.array(cfg.puck_velocity, dtype=np.float64)
    else:
        vel = _random_velocity(rng, *cfg.puck_speed_range)
    traj = Trajectory(start, vel)
    if cfg.puck_velocity is None and rng.uniform() < cfg.impulse_prob:
        duration = cfg.clip_len / cfg.fps
        traj.impulse_time = float(rng.uniform(0.0, duration))
        traj.impulse_velocity = _random_velocity(rng, *cfg.puck_speed_range)
    return traj


def _camera_track(cfg: ScenarioConfig, puck: Trajectory, rng: np.random.Generator) -> list[CameraState]:
    times = np.arange(cfg.clip_len) / cfg.fps
    lo, hi = cfg.pan_limits
    if cfg.static_camera:
        pan0 = cfg.pan_start if cfg.pan_start is not None else RINK_LENGTH / 2.0
        cam = pinhole_camera(pan0, 1.0, cfg)
        return [cam] * cfg.clip_len
    zoom = float(rng.uniform(*cfg.zoom_range))
    px = puck.at(times)[:, 0]
    if cfg.pan_start is not None:
        pan = float(cfg.pan_start)
    else:
        pan = float(np.clip(px[0] + rng.normal(0.0, 5.0), lo, hi))
    alpha = 1.0 if cfg.pan_lag_s == 0 else 1.0 - np.exp(-1.0 / (cfg.fps * cfg.pan_lag_s))
    jitter = rng.normal(0.0, cfg.jitter_std_ft, size=cfg.clip_len) if cfg.jitter_std_ft > 0 else np.zeros(cfg.clip_len)
    cams = []
    for i in range(cfg.clip_len):
        if i:
            pan = pan + alpha * (px[i] - pan)
        cams.append(pinhole_camera(float(np.clip(pan + jitter[i], lo, hi)), zoom, cfg))
    return cams


def _player_ellipse(cam: CameraState, xy: np.ndarray, size: tuple[float, float]):
    """Image-space ellipse (cu, cv, ru, rv) for a player standing at ``xy``, or None."""
    width, height = size
    proj = cam.projection
    foot = proj @ np.array([xy[0], xy[1], 0.0, 1.0])
    head = proj @ np.array([xy[0], xy[1], height, 1.0])
    if foot[2] <= 0 or head[2] <= 0:
        return None
    fu, fv = foot[:2] / foot[2]
    hu, hv = head[:2] / head[2]
    side = proj @ np.array([xy[0] + width, xy[1], 0.0, 1.0])
    su = side[0] / side[2]
    return (0.5 * (fu + hu), 0.5 * (fv + hv), max(abs(su - fu) / 2.0, 0.5), max(abs(fv - hv) / 2.0, 0.5))


def _inside_ellipse(u, v, e) -> bool:
    cu, cv, ru, rv = e
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0


def simulate_clip(config: ScenarioConfig, clip_index: Optional[int] = None) -> Scenario:
    """Sample puck, player and camera motion for one clip without rendering it."""
    seed = [config.rng_seed] if clip_index is None else [config.rng_seed, clip_index]
    rng = np.random.default_rng(seed)
    times = np.arange(config.clip_len) / config.fps
    for _ in range(config.max_attempts):
        # everything is redrawn on a retry: a puck that leaves the view cannot be fixed by moving players
        puck = _sample_puck(config, rng)
        cams = _camera_track(config, puck, rng)
        puck_xy = puck.at(times)
        truth_xy = puck.at(config.mid_frame / config.fps)[0]
        out_of_view = np.array([not project_point(c, p).in_view for c, p in zip(cams, puck_xy)])
        players, teams = [], []
        for k in range(config.n_occluders):
            start = np.array([rng.uniform(0.0, RINK_LENGTH), rng.uniform(0.0, RINK_WIDTH)])
            players.append(Trajectory(start, _random_velocity(rng, 0.0, config.occluder_max_speed)))
            teams.append(k % 2)
        covered = np.zeros(config.clip_len, dtype=bool)
        for pl in players:
            pxy = pl.at(times)
            for i, cam in enumerate(cams):
                if covered[i] or out_of_view[i]:
                    continue
                e = _player_ellipse(cam, pxy[i], config.occluder_size_ft)
                if e is None:
                    continue
                pu, pv, _ = project_point(cam, puck_xy[i])
                covered[i] = _inside_ellipse(pu, pv, e)
        hidden = out_of_view | covered
        if hidden.mean() <= config.occlusion_allowance + 1e-12:
            truth = RinkPoint(float(truth_xy[0]), float(truth_xy[1]))
            return Scenario(config, puck, players, teams, cams, truth, hidden)
    raise ScenarioError(
        f"puck hidden in {hidden.mean():.0%} of frames after {config.max_attempts} attempts "
        f"(allowance {config.occlusion_allowance:.0%}); widen the view or relax the allowance"
    )


# -- rendering ---------------------------------------------------------------


def _pixel_centres(size: int) -> np.ndarray:
    j, i = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    return np.stack([j.ravel(), i.ravel(), np.ones(size * size)])


def render_background(cam: CameraState) -> np.ndarray:
    """Ice, boards and line markings as an (S, S, 3) float image."""
    s = cam.frame_size
    ray = cam.inverse @ _pixel_centres(s)
    w = ray[2]
    above_horizon = w <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        x = ray[0] / w
        y = ray[1] / w
    img = np.empty((s * s, 3))
    img[:] = BOARDS
    on_ice = (~above_horizon) & (x >= 0) & (x <= RINK_LENGTH) & (y >= 0) & (y <= RINK_WIDTH)
    img[on_ice] = ICE

    def paint(mask, color):
        img[on_ice & mask] = color

    paint(np.abs(x - 11.0) < 0.25, RED)
    paint(np.abs(x - (RINK_LENGTH - 11.0)) < 0.25, RED)
    for bx, by in FACEOFF_SPOTS:
        r = np.hypot(x - bx, y - by)
        colour = BLUE if bx == RINK_LENGTH / 2 else RED
        paint(np.abs(r - FACEOFF_RADIUS) < 0.3, colour)
        paint(r < 1.0, colour)
    paint(np.abs(x - 75.0) < 0.5, BLUE)
    paint(np.abs(x - 125.0) < 0.5, BLUE)
    paint(np.abs(x - 100.0) < 0.5, RED)
    return img.reshape(s, s, 3)


def _stamp_disc(img: np.ndarray, u: float, v: float, radius: float, color: np.ndarray, weight: float) -> None:
    """Antialiased disc blended into ``img`` with overall opacity ``weight``."""
    s = img.shape[0]
    if not (np.isfinite(u) and np.isfinite(v)):
        return
    j0, j1 = max(int(np.floor(u - radius - 1)), 0), min(int(np.ceil(u + radius + 1)), s)
    i0, i1 = max(int(np.floor(v - radius - 1)), 0), min(int(np.ceil(v + radius + 1)), s)
    if j0 >= j1 or i0 >= i1:
        return
    jj, ii = np.meshgrid(np.arange(j0, j1) + 0.5, np.arange(i0, i1) + 0.5)
    cover = np.clip(radius + 0.5 - np.hypot(jj - u, ii - v), 0.0, 1.0)[..., None] * weight
    patch = img[i0:i1, j0:j1]
    patch *= 1.0 - cover
    patch += cover * color


def _stamp_ellipse(img: np.ndarray, e, color: np.ndarray, weight: float) -> None:
    s = img.shape[0]
    cu, cv, ru, rv = e
    j0, j1 = max(int(np.floor(cu - ru - 1)), 0), min(int(np.ceil(cu + ru + 1)), s)
    i0, i1 = max(int(np.floor(cv - rv - 1)), 0), min(int(np.ceil(cv + rv + 1)), s)
    if j0 >= j1 or i0 >= i1:
        return
    jj, ii = np.meshgrid(np.arange(j0, j1) + 0.5, np.arange(i0, i1) + 0.5)
    inside = (((jj - cu) / ru) ** 2 + ((ii - cv) / rv) ** 2 <= 1.0)[..., None] * weight
    patch = img[i0:i1, j0:j1]
    patch *= 1.0 - inside
    patch += inside * color


def render_clip(scenario: Scenario) -> np.ndarray:
    """Render all frames as a (clip_len, 3, S, S) float32 array in [0, 1]."""
    cfg = scenario.config
    s = cfg.frame_size
    out = np.empty((cfg.clip_len, 3, s, s), dtype=np.float32)
    radius = cfg.puck_diameter_px / 2.0
    weight = 1.0 / cfg.blur_subsamples
    bg_cache: dict[int, np.ndarray] = {}
    for i, cam in enumerate(scenario.cameras):
        key = id(cam)
        if key not in bg_cache:
            bg_cache = {key: render_background(cam)}
        bg = bg_cache[key]
        times = scenario.subsample_times(i)
        puck_xy = scenario.puck.at(times)
        players_xy = [pl.at(times) for pl in scenario.players]
        frame = np.zeros((s, s, 3))
        for k in range(cfg.blur_subsamples):
            layer = bg.copy()
            pu, pv, _ = project_point(cam, puck_xy[k])
            _stamp_disc(layer, pu, pv, radius, PUCK, 1.0)
            # far players first so nearer ones overlap them
            order = sorted(range(len(players_xy)), key=lambda n: -players_xy[n][k][1])
            for n in order:
                e = _player_ellipse(cam, players_xy[n][k], cfg.occluder_size_ft)
                if e is not None:
                    _stamp_ellipse(layer, e, TEAM_COLORS[scenario.teams[n]], 1.0)
            frame += layer * weight
        out[i] = np.clip(frame, 0.0, 1.0).transpose(2, 0, 1)
    return out


class Clip(NamedTuple):
    frames: np.ndarray
    truth: RinkPoint
    cameras: list[CameraState]


def generate_clip(config: ScenarioConfig, clip_index: Optional[int] = None) -> Clip:
    """Simulate and render one clip.

    The label is the puck's rink position at the middle frame
    (``clip_len // 2``), i.e. the event timestamp sits at the clip midpoint.
    """
    scenario = simulate_clip(config, clip_index)
    return Clip(render_clip(scenario), scenario.truth, scenario.cameras)


def to_uint8_hwc(frames: np.ndarray) -> np.ndarray:
    """(N, 3, S, S) floats in [0, 1] -> (N, S, S, 3) uint8."""
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)


# -- datasets on disk --------------------------------------------------------


@dataclass
class Manifest:
    root: Path
    records: list[EventRecord]
    clip_dirs: dict[str, Path]

    @property
    def events_path(self) -> Path:
        return self.root / "events.csv"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.csv"

    def checksum(self) -> str:
        return dataset_checksum(self.root)


def clip_id_for(index: int) -> str:
    return f"clip_{index:05d}"


def _write_one(args) -> tuple[int, float, float]:
    config, index, clip_dir = args
    clip = generate_clip(config, index)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for f, img in enumerate(to_uint8_hwc(clip.frames)):
        Image.fromarray(img, mode="RGB").save(clip_dir / f"frame_{f:04d}.png")
    return index, clip.truth.x, clip.truth.y


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def generate_dataset(n: int, config: ScenarioConfig, out: str | Path, workers: int = 1) -> Manifest:
    """Write ``n`` clips as frame directories plus events, manifest and config echo.

    The events CSV and manifest are written last and atomically, so an
    interrupted run never leaves a manifest pointing at missing clips.
    """
    if n < 1:
        raise ScenarioError("n must be at least 1")
    root = Path(out)
    try:
        (root / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    jobs = [(config, i, root / "clips" / clip_id_for(i)) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_write_one, jobs))
    else:
        results = [_write_one(j) for j in jobs]
    records = [
        EventRecord(clip_id_for(i), i, EVENT_CYCLE[i % len(EVENT_CYCLE)], RinkPoint(x, y))
        for i, x, y in sorted(results)
    ]
    (root / "scenario.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    tmp_events = root / ".events.csv.tmp"
    write_events(records, tmp_events)
    os.replace(tmp_events, root / "events.csv")
    lines = ["clip_id,path"] + [f"{r.clip_id},clips/{r.clip_id}" for r in records]
    _atomic_write_text(root / "manifest.csv", "\n".join(lines) + "\n")
    return Manifest(root, records, {r.clip_id: root / "clips" / r.clip_id for r in records})


def dataset_checksum(root: str | Path) -> str:
    """SHA-256 over every file under ``root`` (relative path and contents, sorted)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def load_scenario_echo(path: str | Path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text()))


def default_config(**overrides) -> ScenarioConfig:
    return replace(ScenarioConfig(), **overrides)
