"""Run configuration: one YAML file covering data, model, training, generator and zones.

Schema (every section optional, unknown keys rejected)::

    seed: 0                      # fanned out to split, sampling, training and generator
    out: runs/example            # run directory for `train`
    pretrained: null             # optional extractor weights (.safetensors or torch state dict)
    data:
      events: data/events.csv    # paths are relative to this file
      manifest: null             # default: manifest.csv next to the events file
      split: [0.8, 0.1, 0.1]
      normalization: {mean: [...], std: [...]}
      cache: true
    model: {scale: toy, ...}     # ModelConfig fields; `scale` picks the base preset
    train: {lr: 1.0e-4, batch_size: 10, sigma: 25, sampling: {mode: random_uniform, count: 16}, ...}
    scenario: {clip_len: 60, frame_size: 256, ...}
    zones:
      "3": {cuts: [75, 125], labels: [defensive, neutral, offensive]}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import KINETICS, Normalization, SamplingPolicy
from .evaluation import DEFAULT_PARTITIONS
from .model import ModelConfig
from .rink import ZonePartition
from .synth import ScenarioConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    events: Optional[str] = None
    manifest: Optional[str] = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    normalization: Normalization = KINETICS
    cache: bool = True

    def __post_init__(self):
        s = tuple(self.split)
        if len(s) != 3 or min(s) < 0 or abs(sum(s) - 1.0) > 1e-9:
            raise ConfigError(f"data.split must be three non-negative fractions summing to 1, got {list(s)}")

    @property
    def manifest_path(self) -> Optional[Path]:
        if self.manifest is not None:
            return Path(self.manifest)
        if self.events is not None:
            return Path(self.events).parent / "manifest.csv"
        return None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    pretrained: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig.full)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    zones: dict[str, ZonePartition] = field(default_factory=lambda: dict(DEFAULT_PARTITIONS))

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to every random stream."""
        return replace(
            self,
            seed=seed,
            train=replace(self.train, seed=seed, sampling=replace(self.train.sampling, rng_seed=seed)),
            scenario=replace(self.scenario, rng_seed=seed),
        )

    def to_dict(self) -> dict[str, Any]:
        model = self.model.to_dict()
        train = self.train.to_dict()
        train.pop("seed")
        train["sampling"].pop("rng_seed")
        scenario = asdict(self.scenario)
        scenario.pop("rng_seed")
        data = asdict(self.data)
        data["split"] = list(self.data.split)
        return _plain({
            "seed": self.seed,
            "out": self.out,
            "pretrained": self.pretrained,
            "data": data,
            "model": model,
            "train": train,
            "scenario": scenario,
            "zones": {k: {"cuts": list(z.cut_xs), "labels": list(z.labels)} for k, z in self.zones.items()},
        })

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_keys(section: str, d: Any, allowed) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(map(str, unknown)))}")
    return dict(d)


def _names(cls, exclude=()) -> list[str]:
    return [f.name for f in fields(cls) if f.name not in exclude]


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _resolve(base: Path, p: Optional[str]) -> Optional[str]:
    if p is None:
        return None
    q = Path(p).expanduser()
    return str(q if q.is_absolute() else (base / q).resolve())


def parse_run_config(raw: Any, base_dir: str | Path = ".") -> RunConfig:
    base = Path(base_dir)
    top = _check_keys("<top level>", raw, ("seed", "out", "pretrained", "data", "model", "train", "scenario", "zones"))
    try:
        seed = int(top.get("seed", 0))

        d = _check_keys("data", top.get("data"), _names(DataConfig))
        if "normalization" in d:
            norm = _check_keys("data.normalization", d["normalization"], ("mean", "std"))
            d["normalization"] = Normalization(tuple(norm["mean"]), tuple(norm["std"]))
        if "split" in d:
            d["split"] = tuple(float(x) for x in d["split"])
        d["events"] = _resolve(base, d.get("events"))
        d["manifest"] = _resolve(base, d.get("manifest"))
        data = DataConfig(**d)

        m = _check_keys("model", top.get("model"), _names(ModelConfig))
        scale = m.pop("scale", "full")
        model = ModelConfig.toy(**m) if scale == "toy" else ModelConfig.full(scale=scale, **m)
        model = ModelConfig.from_dict(model.to_dict())

        t = _check_keys("train", top.get("train"), _names(TrainConfig, ("seed",)))
        if "sampling" in t:
            t["sampling"] = SamplingPolicy(**_check_keys("train.sampling", t["sampling"],
                                                         _names(SamplingPolicy, ("rng_seed",))))
        train = TrainConfig(**_tuplify(t))

        s = _check_keys("scenario", top.get("scenario"), _names(ScenarioConfig, ("rng_seed",)))
        scenario = ScenarioConfig(**_tuplify(s))

        zones = dict(DEFAULT_PARTITIONS)
        if top.get("zones") is not None:
            zones = {}
            for name, z in _check_keys("zones", top["zones"], top["zones"] or {}).items():
                z = _check_keys(f"zones.{name}", z, ("cuts", "labels"))
                zones[str(name)] = ZonePartition(tuple(z["cuts"]), tuple(z["labels"]))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    cfg = RunConfig(
        seed=seed,
        out=_resolve(base, top.get("out", "runs/default")),
        pretrained=_resolve(base, top.get("pretrained")),
        data=data,
        model=model,
        train=train,
        scenario=scenario,
        zones=zones,
    )
    return cfg.with_seed(seed)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_run_config(raw or {}, path.parent)
