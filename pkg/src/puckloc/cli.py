"""``puckloc`` command line: synth-gen, train, eval, predict, plot and grid.

Exit codes: 0 on success, 1 for user errors (bad flags, config, missing or
malformed data), 2 for internal failures such as training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .data import (
    KINETICS,
    ClipStore,
    DataError,
    EventRecord,
    Normalization,
    PathClip,
    load_events,
    make_split,
    preprocess_clip,
    sample_frame_indices,
)
from .evaluation import emit_report
from .heatmap import decode_to_rink, save_heatmap_png
from .model import ModelBuildError, PretrainedLoadError, build_model, load_pretrained
from .rink import DomainError, ScalingTransform, zone_indices, zone_of, zone_partition
from .synth import ScenarioError, generate_dataset
from .train import (
    EVAL_STREAM,
    ClipDataset,
    GridRow,
    TrainConfig,
    TrainingDiverged,
    predict,
    run_experiment_grid,
    train,
    write_grid,
)

log = logging.getLogger("puckloc")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, DataError, CheckpointError, ScenarioError, DomainError, ModelBuildError,
               PretrainedLoadError, FileNotFoundError, NotADirectoryError, PermissionError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _zones_arg(text: str) -> str:
    if text not in ("3", "5"):
        raise argparse.ArgumentTypeError("zones must be 3 or 5")
    return text


# -- shared helpers ------------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=str(Path(args.out).resolve()))
    return cfg


def _resolve_data(path: Path) -> tuple[Path, Path]:
    """Accept a dataset directory or an events CSV; return (events, manifest)."""
    if path.is_dir():
        return path / "events.csv", path / "manifest.csv"
    return path, path.parent / "manifest.csv"


def _dataset(events: Path, manifest: Path, size: int, norm: Normalization, cache: bool = True) -> ClipDataset:
    if not events.is_file():
        raise UsageError(f"events CSV not found: {events}")
    records = load_events(events)
    if not records:
        raise UsageError(f"no usable events in {events}")
    return ClipDataset(records, ClipStore(manifest, cache=cache), size, norm)


def _splits(ds: ClipDataset, fractions, seed: int) -> dict[str, ClipDataset]:
    split = make_split(ds.records, tuple(fractions), seed)
    out = {}
    for name in ("train", "val", "test", "all"):
        ids = split.subset(name)
        out[name] = ds.subset(ids) if ids else None
    return out


def _zone_histogram(records: Sequence[EventRecord], n_zones: int = 3) -> dict[str, int]:
    zp = zone_partition(n_zones)
    counts = Counter(zone_indices([r.location.x for r in records], zp).tolist())
    return {label: counts.get(k, 0) for k, label in enumerate(zp.labels)}


# -- commands ----------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path(cfg.out)
    manifest = generate_dataset(args.n, cfg.scenario, out, workers=args.workers)
    hist = _zone_histogram(manifest.records, int(args.zones))
    print(f"wrote {len(manifest.records)} clips to {out}")
    print("zones: " + ", ".join(f"{k}={v}" for k, v in hist.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.data.events is None:
        raise UsageError("config has no data.events path")
    run_dir = Path(cfg.out)
    events = Path(cfg.data.events)
    ds = _dataset(events, cfg.data.manifest_path, cfg.model.size, cfg.data.normalization, cfg.data.cache)
    parts = _splits(ds, cfg.data.split, cfg.seed)
    if parts["train"] is None:
        raise UsageError("training split is empty; enlarge the dataset or the train fraction")
    val = parts["val"]
    if val is None:
        log.warning("validation split is empty; validating on the training set")
        val = parts["train"]

    resume = None
    if args.resume:
        last = run_dir / "last.safetensors"
        if not last.is_file():
            raise UsageError(f"--resume given but {last} does not exist")
        resume = load_checkpoint(last)

    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model)
    if cfg.pretrained and resume is None:
        report = load_pretrained(model, cfg.pretrained)
        log.info("pretrained: %d tensors loaded, %d unmatched", len(report.matched), len(report.unmatched))

    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    meta = {"seed": cfg.seed, "split": list(cfg.data.split)}
    result = train(model, parts["train"], val, cfg.train, run_dir, resume=resume, meta=meta)

    model.load_state_dict(result.best_state)
    test_name = "test" if parts["test"] is not None else "train"
    pairs = predict(model, parts[test_name], cfg.train.sampling, cfg.train.seed, cfg.train.eval_batch_size)
    report = emit_report(pairs, cfg.zones, run_dir / "report")
    _write_auc_table(run_dir / "report" / "auc_table.csv", cfg.train, report.auc)
    print(f"best epoch {result.best_epoch}: val AUC {result.best_val_auc:.2f}")
    print(f"{test_name} AUC overall {report.auc['overall']:.2f} (x {report.auc['x']:.2f}, y {report.auc['y']:.2f})")
    return EXIT_OK


def _write_auc_table(path: Path, tcfg: TrainConfig, aucs: dict[str, float]) -> None:
    write_grid([GridRow(tcfg.sampling.mode, tcfg.sigma, aucs["overall"], aucs["x"], aucs["y"])], path)


def _checkpoint_settings(ck) -> tuple[TrainConfig, Normalization, int, tuple]:
    meta = ck.meta
    if "train_config" not in meta:
        raise CheckpointError(f"{ck.path} carries no training configuration")
    tcfg = TrainConfig.from_dict(meta["train_config"])
    n = meta.get("normalization")
    norm = Normalization(tuple(n["mean"]), tuple(n["std"])) if n else KINETICS
    return tcfg, norm, int(meta.get("seed", tcfg.seed)), tuple(meta.get("split", (0.8, 0.1, 0.1)))


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    tcfg, norm, seed, split = _checkpoint_settings(ck)
    zones = None
    if args.config:
        cfg = _load_config(args)
        if cfg.model != ck.model_config:
            raise UsageError(f"model config in {args.config} does not match checkpoint {args.checkpoint}")
        zones = cfg.zones
    model = ck.build_model()
    events, manifest = _resolve_data(Path(args.data))
    ds = _dataset(events, manifest, ck.model_config.size, norm)
    subset = _splits(ds, split, seed)[args.split] if args.split != "all" else ds
    if subset is None or len(subset) == 0:
        raise UsageError(f"the {args.split} split is empty; nothing to evaluate")
    if args.zones:
        zones = {args.zones: zone_partition(int(args.zones))}
    elif zones is None:
        zones = {"3": zone_partition(3), "5": zone_partition(5)}
    pairs = predict(model, subset, tcfg.sampling, tcfg.seed, tcfg.eval_batch_size)
    out = Path(args.out)
    report = emit_report(pairs, zones, out)
    _write_auc_table(out / "auc_table.csv", tcfg, report.auc)
    print(f"n={report.n} AUC overall {report.auc['overall']:.2f} x {report.auc['x']:.2f} "
          f"y {report.auc['y']:.2f} mean error {report.mean_error_ft:.2f} ft")
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    tcfg, norm, _, _ = _checkpoint_settings(ck)
    model = ck.build_model().eval()
    clip = PathClip(args.clip)
    # same frame draw that evaluation uses for the first clip of a dataset
    idx = sample_frame_indices(tcfg.sampling, len(clip), np.random.default_rng([tcfg.seed, EVAL_STREAM, 0]))
    x = preprocess_clip(clip.read(idx), normalization=norm, size=ck.model_config.size,
                        indices=range(len(idx))).frames
    with torch.no_grad():
        h = model(torch.from_numpy(x)[None]).double().numpy()[0]
    cfg = ck.model_config
    p = decode_to_rink(h, ScalingTransform(cfg.heatmap, cfg.heatmap))
    print("x_ft,y_ft,zone")
    print(f"{p.x:.4f},{p.y:.4f},{zone_of(p, zone_partition(int(args.zones)))}")
    if args.heatmap:
        save_heatmap_png(h, args.heatmap)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_report

    written = plot_report(args.report, args.out)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    if cfg.data.events is None:
        raise UsageError("config has no data.events path")
    ds = _dataset(Path(cfg.data.events), cfg.data.manifest_path, cfg.model.size, cfg.data.normalization,
                  cfg.data.cache)
    parts = _splits(ds, cfg.data.split, cfg.seed)
    if parts["train"] is None:
        raise UsageError("training split is empty")
    val = parts["val"] or parts["train"]
    test = parts["test"] or val
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    rows = run_experiment_grid(cfg.model, cfg.train, parts["train"], val, test, args.sigmas, args.modes,
                               out / "grid.csv", cfg.pretrained)
    for r in rows:
        print(f"{r.sampling},{r.sigma:g},{r.auc_overall:.2f},{r.auc_x:.2f},{r.auc_y:.2f}")
    return EXIT_OK if all(r.error is None for r in rows) else EXIT_INTERNAL


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="puckloc", description="Puck localisation from broadcast clips via heatmap regression.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="write a synthetic dataset")
    s.add_argument("--config", help="run config YAML (its scenario section is used)")
    s.add_argument("--n", type=int, required=True, help="number of clips")
    s.add_argument("--out", help="dataset directory (default: config 'out')")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--zones", type=_zones_arg, default="3", help="partition for the printed histogram")
    s.set_defaults(func=cmd_synth_gen)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (overrides config 'out')")
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.safetensors")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory or events CSV")
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--config", help="optional run config; its model must match the checkpoint")
    e.add_argument("--zones", type=_zones_arg, help="only this partition (default: 3 and 5)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="localise the puck in one clip")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--clip", required=True, help="frame directory or video file")
    r.add_argument("--heatmap", help="write the raw heatmap as an 8-bit PNG")
    r.add_argument("--zones", type=_zones_arg, default="3")
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("plot", help="render curves and zone diagrams from a report directory")
    g.add_argument("--report", required=True)
    g.add_argument("--out", help="image directory (default: the report directory)")
    g.set_defaults(func=cmd_plot)

    x = sub.add_parser("grid", help="sigma x sampling-mode sweep")
    x.add_argument("--config", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.add_argument("--sigmas", type=float, nargs="+", default=[10, 15, 20, 25, 30])
    x.add_argument("--modes", nargs="+", choices=("random_uniform", "constant_interval"),
                   default=["random_uniform", "constant_interval"])
    x.set_defaults(func=cmd_grid)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (UsageError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # anything else is a bug
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
