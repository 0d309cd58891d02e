"""Event annotations, clip storage, frame sampling and preprocessing."""

from __future__ import annotations

import csv
import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .rink import DomainError, RinkPoint

log = logging.getLogger(__name__)

EVENTS_HEADER = ("clip_id", "game_clock_s", "event_type", "x_ft", "y_ft")
MANIFEST_HEADER = ("clip_id", "path")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(ValueError):
    pass


class EventsFormatError(DataError):
    def __init__(self, row: int, field_name: str, message: str):
        super().__init__(f"row {row}, field {field_name!r}: {message}")
        self.row = row
        self.field = field_name


class InsufficientFramesError(DataError):
    pass


class FrameDecodeError(DataError):
    def __init__(self, index: int, message: str):
        super().__init__(f"frame {index}: {message}")
        self.index = index


class EventType(str, enum.Enum):
    SHOT = "shot"
    DUMP = "dump"
    FACEOFF = "faceoff"
    TURNOVER = "turnover"
    HIT = "hit"
    OTHER = "other"


@dataclass(frozen=True)
class EventRecord:
    clip_id: str
    game_clock: int
    event_type: EventType
    location: RinkPoint


def load_events(path: str | Path) -> list[EventRecord]:
    """Read and validate an events CSV.

    Malformed rows raise :class:`EventsFormatError`; rows whose location is
    off the ice are skipped with a warning. Row numbers count the header as
    row 1, matching what a spreadsheet shows.
    """
    path = Path(path)
    records: list[EventRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EVENTS_HEADER:
            raise EventsFormatError(1, "header", f"expected {','.join(EVENTS_HEADER)}, got {header}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(EVENTS_HEADER):
                raise EventsFormatError(rowno, "row", f"expected {len(EVENTS_HEADER)} fields, got {len(row)}")
            clip_id, clock, etype, xs, ys = (c.strip() for c in row)
            if not clip_id:
                raise EventsFormatError(rowno, "clip_id", "empty")
            try:
                game_clock = int(clock)
            except ValueError:
                raise EventsFormatError(rowno, "game_clock_s", f"not an integer: {clock!r}") from None
            try:
                event_type = EventType(etype.lower())
            except ValueError:
                raise EventsFormatError(rowno, "event_type", f"unknown event type {etype!r}") from None
            coords = []
            for name, text in (("x_ft", xs), ("y_ft", ys)):
                try:
                    value = float(text)
                except ValueError:
                    raise EventsFormatError(rowno, name, f"not a number: {text!r}") from None
                if not math.isfinite(value):
                    raise EventsFormatError(rowno, name, f"not finite: {text!r}")
                coords.append(value)
            try:
                location = RinkPoint(*coords)
            except DomainError as exc:
                log.warning("%s row %d rejected: %s", path, rowno, exc)
                continue
            records.append(EventRecord(clip_id, game_clock, event_type, location))
    hist = Counter(r.event_type.value for r in records)
    log.info("loaded %d events from %s (%s)", len(records), path, dict(sorted(hist.items())))
    return records


def write_events(records: Iterable[EventRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for r in records:
            w.writerow([r.clip_id, r.game_clock, r.event_type.value, repr(r.location.x), repr(r.location.y)])


# -- sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class SamplingPolicy:
    mode: str = "random_uniform"
    count: int = 16
    interval: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random_uniform", "constant_interval"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.count < 1 or self.interval < 1:
            raise ValueError("count and interval must be at least 1")


def sample_frame_indices(
    policy: SamplingPolicy, clip_len: int, rng: np.random.Generator | None = None
) -> list[int]:
    """Pick ``policy.count`` ascending frame indices from a clip.

    ``rng`` overrides the policy seed so a training loop can draw fresh
    frames every epoch; constant-interval sampling ignores it.
    """
    if clip_len < policy.count:
        raise InsufficientFramesError(f"clip has {clip_len} frames, need at least {policy.count}")
    if policy.mode == "constant_interval":
        return [min(i * policy.interval, clip_len - 1) for i in range(policy.count)]
    if rng is None:
        rng = np.random.default_rng(policy.rng_seed)
    picked = rng.choice(clip_len, size=policy.count, replace=False)
    return sorted(int(i) for i in picked)


# -- preprocessing -----------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization needs three channel means and stds")
        if any(s <= 0 for s in self.std):
            raise ValueError("standard deviations must be positive")


# Per-channel RGB statistics of the Kinetics-400 training set.
KINETICS = Normalization(mean=(0.43216, 0.394666, 0.37645), std=(0.22803, 0.22145, 0.216989))


@dataclass
class ClipTensor:
    frames: np.ndarray  # (T, 3, S, S) float32, standardized
    normalization: Normalization = KINETICS
    indices: list[int] = field(default_factory=list)

    def denormalize(self) -> np.ndarray:
        mean = np.asarray(self.normalization.mean, dtype=np.float64)[None, :, None, None]
        std = np.asarray(self.normalization.std, dtype=np.float64)[None, :, None, None]
        return self.frames.astype(np.float64) * std + mean


def _as_unit_float(frame, index: int) -> np.ndarray:
    if frame is None:
        raise FrameDecodeError(index, "no image data")
    try:
        arr = np.asarray(frame)
    except Exception as exc:  # pragma: no cover - exotic array-likes
        raise FrameDecodeError(index, str(exc)) from exc
    if arr.ndim != 3:
        raise FrameDecodeError(index, f"expected HxWxC, got shape {arr.shape}")
    if arr.shape[2] != 3:
        raise FrameDecodeError(index, f"expected 3 colour channels, got {arr.shape[2]}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if not np.issubdtype(arr.dtype, np.floating):
        raise FrameDecodeError(index, f"unsupported pixel dtype {arr.dtype}")
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise FrameDecodeError(index, "float pixels must lie in [0, 1]")
    return arr


def resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (antialiased) resize of a (T, 3, H, W) stack to (T, 3, size, size)."""
    if frames.shape[-2:] == (size, size):
        return frames
    out = F.interpolate(torch.from_numpy(frames), size=(size, size), mode="bilinear",
                        align_corners=False, antialias=True)
    return out.clamp_(0.0, 1.0).numpy()


def preprocess_clip(
    raw: Sequence | np.ndarray,
    policy: SamplingPolicy | None = None,
    normalization: Normalization = KINETICS,
    size: int = 256,
    rng: np.random.Generator | None = None,
    indices: Sequence[int] | None = None,
) -> ClipTensor:
    """Sample, resize, scale to [0, 1] and standardize a clip.

    ``raw`` is a sequence of HxWx3 frames (uint8, or floats already in
    [0, 1]). Pass ``indices`` to skip sampling, e.g. when a provider has
    already read only the selected frames.
    """
    if indices is None:
        policy = policy or SamplingPolicy()
        indices = sample_frame_indices(policy, len(raw), rng)
    picked = np.stack([_as_unit_float(raw[i], i) for i in indices])
    picked = np.ascontiguousarray(picked.transpose(0, 3, 1, 2))
    picked = resize_frames(picked, size)
    mean = np.asarray(normalization.mean)[None, :, None, None]
    std = np.asarray(normalization.std)[None, :, None, None]
    frames = ((picked - mean) / std).astype(np.float32)
    return ClipTensor(frames, normalization, list(indices))


# -- clip storage ------------------------------------------------------------


class FrameProvider(Protocol):
    def num_frames(self, clip_id: str) -> int: ...

    def read(self, clip_id: str, indices: Sequence[int]) -> list[np.ndarray]: ...


class InMemoryProvider:
    """Clips held as uint8 (N, H, W, 3) arrays, keyed by clip id."""

    def __init__(self, clips: dict[str, np.ndarray]):
        self.clips = clips

    def num_frames(self, clip_id: str) -> int:
        return len(self.clips[clip_id])

    def read(self, clip_id: str, indices: Sequence[int]) -> list[np.ndarray]:
        clip = self.clips[clip_id]
        return [clip[i] for i in indices]


def _frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_image(path: Path, index: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise FrameDecodeError(index, f"{path.name} has mode {im.mode}, expected RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except FrameDecodeError:
        raise
    except Exception as exc:
        raise FrameDecodeError(index, f"cannot decode {path}: {exc}") from exc


def _read_video(path: Path) -> list[np.ndarray]:
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - depends on optional extra
        raise DataError("reading video files requires opencv-python") from exc
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise FrameDecodeError(0, f"cannot open video {path}")
    frames = []
    while True:
        ok, bgr = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise FrameDecodeError(0, f"no decodable frames in {path}")
    return frames


class PathClip:
    """One clip on disk: a directory of frame images or a video file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if self.path.is_dir():
            self._files = _frame_files(self.path)
            self._video = None
        elif self.path.is_file():
            self._files = None
            self._video = _read_video(self.path)
        else:
            raise DataError(f"clip path does not exist: {self.path}")

    def __len__(self) -> int:
        return len(self._files) if self._files is not None else len(self._video)

    def read(self, indices: Sequence[int]) -> list[np.ndarray]:
        if self._files is not None:
            return [_read_image(self._files[i], i) for i in indices]
        return [self._video[i] for i in indices]


class ClipStore:
    """Clips resolved through a ``clip_id,path`` manifest.

    Relative paths resolve against the manifest's directory. Decoded frames
    are cached when ``cache`` is set, which pays off for small datasets that
    are revisited every epoch.
    """

    def __init__(self, manifest: str | Path, cache: bool = True):
        self.manifest = Path(manifest)
        self.paths = load_manifest(self.manifest)
        self.cache = cache
        self._clips: dict[str, PathClip] = {}
        self._frames: dict[tuple[str, int], np.ndarray] = {}

    def _clip(self, clip_id: str) -> PathClip:
        clip = self._clips.get(clip_id)
        if clip is None:
            if clip_id not in self.paths:
                raise DataError(f"clip {clip_id!r} is not in manifest {self.manifest}")
            clip = PathClip(self.paths[clip_id])
            self._clips[clip_id] = clip
        return clip

    def num_frames(self, clip_id: str) -> int:
        return len(self._clip(clip_id))

    def read(self, clip_id: str, indices: Sequence[int]) -> list[np.ndarray]:
        if not self.cache:
            return self._clip(clip_id).read(indices)
        missing = [i for i in dict.fromkeys(indices) if (clip_id, i) not in self._frames]
        if missing:
            for i, frame in zip(missing, self._clip(clip_id).read(missing)):
                self._frames[(clip_id, i)] = frame
        return [self._frames[(clip_id, i)] for i in indices]


def load_manifest(path: str | Path) -> dict[str, Path]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    out: dict[str, Path] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:2]) != MANIFEST_HEADER:
            raise DataError(f"{path}: manifest header must start with {','.join(MANIFEST_HEADER)}")
        for row in reader:
            p = Path(row["path"])
            out[row["clip_id"]] = p if p.is_absolute() else path.parent / p
    return out


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def subset(self, name: str) -> tuple[str, ...]:
        if name == "all":
            return self.train + self.val + self.test
        return getattr(self, name)


def make_split(
    records: Sequence[EventRecord],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle clips and cut them into train/val/test.

    Validation and test sizes are floored; the remainder goes to training.
    Splitting is by clip id so no clip contributes to two partitions.
    """
    if not records:
        raise DataError("cannot split an empty record list")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    ids = list(dict.fromkeys(r.clip_id for r in records))
    n = len(ids)
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
        fractions=tuple(fractions),
        seed=seed,
    )
