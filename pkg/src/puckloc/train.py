"""MSE heatmap training, validation, resumable checkpoints and the sigma/sampling grid."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    KINETICS,
    EventRecord,
    FrameProvider,
    Normalization,
    SamplingPolicy,
    preprocess_clip,
    sample_frame_indices,
)
from .evaluation import PredictionPair, auc
from .heatmap import TargetSpec, decode_batch, render_rink_target
from .model import PuckNet, build_model, freeze_prefix, load_pretrained
from .rink import RinkPoint, ScalingTransform

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "val_auc_overall", "val_auc_x", "val_auc_y")
GRID_HEADER = ("sampling", "sigma", "auc_overall", "auc_x", "auc_y")
# stream tag separating evaluation frame draws from training draws
EVAL_STREAM = 7_919


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, dump: Optional[Path]):
        where = f" (batch saved to {dump})" if dump else ""
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}{where}")
        self.epoch = epoch
        self.batch = batch
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 10
    max_epochs: int = 100
    patience: int = 10
    sigma: float = 25.0
    sigma_unit: str = "cells"
    normalize_target: bool = False
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    frozen_prefix: Optional[int] = None  # None keeps the model config's value
    freeze_bn: bool = False
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_batch_size: int = 10

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if isinstance(self.sampling, dict):
            object.__setattr__(self, "sampling", SamplingPolicy(**self.sampling))
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def mse_heatmap_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over batch, rows and columns of squared differences."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


class ClipDataset:
    """Event records backed by a frame provider, yielding network-ready clips."""

    def __init__(
        self,
        records: Sequence[EventRecord],
        provider: FrameProvider,
        size: int,
        normalization: Normalization = KINETICS,
    ):
        if not records:
            raise ValueError("dataset has no records")
        self.records = list(records)
        self.provider = provider
        self.size = size
        self.normalization = normalization

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, clip_ids: Iterable[str]) -> "ClipDataset":
        wanted = set(clip_ids)
        return ClipDataset([r for r in self.records if r.clip_id in wanted], self.provider, self.size,
                           self.normalization)

    def truth(self, i: int) -> RinkPoint:
        return self.records[i].location

    def clip(self, i: int, policy: SamplingPolicy, rng: Optional[np.random.Generator]) -> np.ndarray:
        clip_id = self.records[i].clip_id
        idx = sample_frame_indices(policy, self.provider.num_frames(clip_id), rng)
        raw = self.provider.read(clip_id, idx)
        return preprocess_clip(raw, normalization=self.normalization, size=self.size,
                               indices=range(len(raw))).frames

    def eval_rng(self, i: int, seed: int) -> np.random.Generator:
        return np.random.default_rng([seed, EVAL_STREAM, i])


def _set_bn_eval(model: torch.nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.eval()


@torch.no_grad()
def predict_heatmaps(model: PuckNet, ds: ClipDataset, policy: SamplingPolicy, seed: int,
                     batch_size: int = 10) -> np.ndarray:
    """Evaluation-mode heatmaps for every clip; frame draws depend only on (seed, clip index)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for start in range(0, len(ds), batch_size):
            idx = range(start, min(start + batch_size, len(ds)))
            x = np.stack([ds.clip(i, policy, ds.eval_rng(i, seed)) for i in idx])
            out.append(model(torch.from_numpy(x).to(dtype)).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def predict(model: PuckNet, ds: ClipDataset, policy: SamplingPolicy, seed: int,
            batch_size: int = 10) -> list[PredictionPair]:
    hm = predict_heatmaps(model, ds, policy, seed, batch_size)
    t = ScalingTransform(model.cfg.heatmap, model.cfg.heatmap)
    xy, _ = decode_batch(hm, t)
    return [PredictionPair(RinkPoint(float(x), float(y)), ds.truth(i), ds.records[i].clip_id)
            for i, (x, y) in enumerate(xy)]


def auc_triplet(pairs: Sequence[PredictionPair]) -> tuple[float, float, float]:
    return auc(pairs, axis="both"), auc(pairs, axis="x"), auc(pairs, axis="y")


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_auc: float
    best_state: dict[str, torch.Tensor]
    stopped_early: bool
    run_dir: Optional[Path] = None


def make_optimizer(model: PuckNet, cfg: TrainConfig) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def write_history(history: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[k]:.10g}" for k in HISTORY_HEADER[1:]])


def _targets(ds: ClipDataset, idx: Sequence[int], spec: TargetSpec) -> np.ndarray:
    return np.stack([render_rink_target(spec, ds.truth(i)) for i in idx]).astype(np.float32)


def train(
    model: PuckNet,
    train_ds: ClipDataset,
    val_ds: ClipDataset,
    cfg: TrainConfig,
    run_dir: Optional[str | Path] = None,
    resume: Optional[Checkpoint] = None,
    meta: Optional[dict] = None,
) -> TrainResult:
    """Adam on the MSE between predicted and Gaussian target heatmaps.

    Each epoch draws its shuffle and frame samples from a generator seeded
    by (seed, epoch), so resuming from an end-of-epoch checkpoint replays
    the remaining epochs exactly. With ``run_dir`` set, ``last.safetensors``
    is rewritten every epoch, ``best.safetensors`` whenever validation AUC
    improves, and ``history.csv`` tracks progress.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if cfg.sampling.count != model.cfg.frames:
        raise ValueError(f"sampling draws {cfg.sampling.count} frames but the model expects {model.cfg.frames}")
    if cfg.frozen_prefix is not None:
        freeze_prefix(model, cfg.frozen_prefix)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    spec = TargetSpec(cfg.sigma, model.cfg.heatmap, model.cfg.heatmap, cfg.sigma_unit, cfg.normalize_target)
    optimizer = make_optimizer(model, cfg)
    dtype = next(model.parameters()).dtype
    meta = dict(meta or {})
    meta["train_config"] = cfg.to_dict()
    meta["normalization"] = asdict(train_ds.normalization)

    history: list[dict] = []
    start_epoch, step, best_auc, best_epoch, bad_epochs = 1, 0, -math.inf, 0, 0
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if resume is not None:
        resume.restore_model(model)
        resume.restore_optimizer(model, optimizer)
        st = resume.meta["train_state"]
        start_epoch, step = st["epoch"] + 1, resume.step
        best_auc, best_epoch, bad_epochs = st["best_val_auc"], st["best_epoch"], st["bad_epochs"]
        history = list(st["history"])
        best_path = run_dir / "best.safetensors" if run_dir is not None else None
        if best_path is not None and best_path.exists():
            best_state = load_checkpoint(best_path).model_state()
        else:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.info("resuming at epoch %d (step %d)", start_epoch, step)

    stopped_early = False
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        if bad_epochs >= cfg.patience:
            stopped_early = True
            break
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_ds))
        model.train()
        if cfg.freeze_bn:
            _set_bn_eval(model)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = torch.from_numpy(np.stack([train_ds.clip(i, cfg.sampling, rng) for i in idx])).to(dtype)
            y = torch.from_numpy(_targets(train_ds, idx, spec)).to(dtype)
            optimizer.zero_grad(set_to_none=True)
            loss = mse_heatmap_loss(model(x), y)
            if not torch.isfinite(loss):
                dump = None
                if run_dir is not None:
                    dump = run_dir / "diverged_batch.npz"
                    np.savez(dump, clips=x.numpy(), targets=y.numpy(), indices=np.asarray(idx))
                raise TrainingDiverged(epoch, b, dump)
            loss.backward()
            optimizer.step()
            step += 1
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        pairs = predict(model, val_ds, cfg.sampling, cfg.seed, cfg.eval_batch_size)
        a, ax, ay = auc_triplet(pairs)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_auc_overall": a,
                        "val_auc_x": ax, "val_auc_y": ay})
        log.info("epoch %d: loss %.6g, val AUC %.2f (x %.2f, y %.2f)", epoch, train_loss, a, ax, ay)
        if a > best_auc:
            best_auc, best_epoch, bad_epochs = a, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if run_dir is not None:
                save_checkpoint(run_dir / "best.safetensors", model, None, step, epoch=epoch, **meta)
        else:
            bad_epochs += 1
        if run_dir is not None:
            train_state = {"epoch": epoch, "best_val_auc": best_auc, "best_epoch": best_epoch,
                           "bad_epochs": bad_epochs, "history": history}
            save_checkpoint(run_dir / "last.safetensors", model, optimizer, step, epoch=epoch,
                            train_state=train_state, **meta)
            write_history(history, run_dir / "history.csv")
    else:
        stopped_early = bad_epochs >= cfg.patience and len(history) < cfg.max_epochs
    return TrainResult(history, best_epoch, best_auc, best_state, stopped_early, run_dir)


@dataclass
class GridRow:
    sampling: str
    sigma: float
    auc_overall: float
    auc_x: float
    auc_y: float
    error: Optional[str] = None


def write_grid(rows: Sequence[GridRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for r in rows:
            w.writerow([r.sampling, f"{r.sigma:g}", f"{r.auc_overall:.4f}", f"{r.auc_x:.4f}", f"{r.auc_y:.4f}"])


def run_experiment_grid(
    model_cfg,
    base_cfg: TrainConfig,
    train_ds: ClipDataset,
    val_ds: ClipDataset,
    test_ds: ClipDataset,
    sigmas: Sequence[float] = (10, 15, 20, 25, 30),
    modes: Sequence[str] = ("random_uniform", "constant_interval"),
    out_csv: Optional[str | Path] = None,
    pretrained: Optional[str | Path] = None,
) -> list[GridRow]:
    """Train and test one model per (sampling mode, sigma); failed runs become NaN rows."""
    rows = []
    for mode in modes:
        for sigma in sigmas:
            try:
                cfg = replace(base_cfg, sigma=float(sigma), sampling=replace(base_cfg.sampling, mode=mode))
                torch.manual_seed(cfg.seed)
                model = build_model(model_cfg)
                if pretrained is not None:
                    load_pretrained(model, pretrained)
                result = train(model, train_ds, val_ds, cfg)
                model.load_state_dict(result.best_state)
                pairs = predict(model, test_ds, cfg.sampling, cfg.seed, cfg.eval_batch_size)
                rows.append(GridRow(mode, float(sigma), *auc_triplet(pairs)))
            except Exception as exc:  # one bad cell must not sink the grid
                log.error("grid run sampling=%s sigma=%s failed: %s", mode, sigma, exc)
                rows.append(GridRow(mode, float(sigma), math.nan, math.nan, math.nan, str(exc)))
    if out_csv is not None:
        write_grid(rows, out_csv)
    return rows
