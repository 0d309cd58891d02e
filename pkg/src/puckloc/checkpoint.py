"""Checkpoint archives: named tensors plus a JSON header.

The archive is a single safetensors file. Model state lives under
``model.<name>`` and Adam moments under ``optim.<param>.<key>``. All other
state (configs, step counters, history) is one JSON string stored under the
``puckloc`` metadata key; safetensors serialises a single-key metadata map
deterministically, so identical state always gives identical bytes.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from .model import ModelConfig, PuckNet, build_model

FORMAT = "puckloc-checkpoint/1"
META_KEY = "puckloc"


class CheckpointError(RuntimeError):
    pass


def _optimizer_tensors(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        for key, value in optimizer.state.get(p, {}).items():
            if isinstance(value, torch.Tensor):
                out[f"optim.{name}.{key}"] = value
            else:
                out[f"optim.{name}.{key}"] = torch.tensor(value, dtype=torch.float64)
    return out


def save_checkpoint(
    path: str | Path,
    model: PuckNet,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    **meta: Any,
) -> Path:
    path = Path(path)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(_optimizer_tensors(model, optimizer))
        meta["optimizer"] = {"lr": optimizer.param_groups[0]["lr"],
                             "betas": list(optimizer.param_groups[0]["betas"]),
                             "eps": optimizer.param_groups[0]["eps"]}
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    header = {"format": FORMAT, "model_config": model.cfg.to_dict(), "step": int(step), **meta}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        save_file(tensors, tmp, metadata={META_KEY: json.dumps(header, sort_keys=True)})
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


@dataclass
class Checkpoint:
    path: Path
    meta: dict[str, Any]
    tensors: dict[str, torch.Tensor]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["model_config"])

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def build_model(self) -> PuckNet:
        cfg = self.model_config
        model = build_model(cfg)
        self.restore_model(model)
        return model

    def restore_model(self, model: PuckNet) -> None:
        if model.cfg != self.model_config:
            raise CheckpointError(f"{self.path}: model config does not match the checkpoint")
        missing, unexpected = model.load_state_dict(self.model_state(), strict=False)
        if missing or unexpected:
            raise CheckpointError(f"{self.path}: missing {missing}, unexpected {unexpected}")

    def restore_optimizer(self, model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> None:
        params = dict(model.named_parameters())
        for key, value in self.tensors.items():
            if not key.startswith("optim."):
                continue
            name, slot = key[len("optim."):].rsplit(".", 1)
            if name not in params:
                raise CheckpointError(f"{self.path}: optimizer state for unknown parameter {name}")
            optimizer.state[params[name]][slot] = value.clone()


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            raw = (fh.metadata() or {}).get(META_KEY)
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw is None:
        raise CheckpointError(f"{path} has no {META_KEY} header; not a puckloc checkpoint")
    meta = json.loads(raw)
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return Checkpoint(path, meta, tensors)
