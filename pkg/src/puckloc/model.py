"""Truncated R(2+1)D feature extractor with temporal regression blocks.

Layer names follow torchvision's ``r2plus1d_18`` (``stem``, ``layer1``,
``layer2``) so Kinetics-pretrained weights load by name. ``layer1`` and
``layer2`` correspond to the conv2_x and conv3_x stages.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

log = logging.getLogger(__name__)


class ModelBuildError(ValueError):
    pass


class PretrainedLoadError(RuntimeError):
    pass


def factorized_width(n_in: int, n_out: int, spatial: int = 3, temporal: int = 3) -> int:
    """Intermediate channel count that keeps a (2+1)D pair near the 3D kernel's parameter count."""
    d2 = spatial * spatial
    return max(1, (temporal * d2 * n_in * n_out) // (d2 * n_in + temporal * n_out))


@dataclass(frozen=True)
class RegBlockSpec:
    in_channels: int
    out_channels: int
    t_kernel: int
    t_stride: int

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.t_kernel, self.t_stride) < 1:
            raise ModelBuildError(f"regression block fields must be positive: {self}")


@dataclass(frozen=True)
class ModelConfig:
    scale: str = "full"
    frames: int = 16
    size: int = 256
    heatmap: int = 64
    stem_width: int = 64
    stage2_width: int = 64
    stage3_width: int = 128
    # torchvision hard-codes 45 for the stem; None applies the width rule with d=7
    stem_mid: Optional[int] = 45
    # "block": both convs of a block share the width computed from (in, out),
    # as in torchvision. "conv": each conv gets its own width.
    mid_rule: str = "block"
    frozen_prefix: int = 5
    reg_a: RegBlockSpec = field(default_factory=lambda: RegBlockSpec(128, 32, 4, 4))
    reg_b: RegBlockSpec = field(default_factory=lambda: RegBlockSpec(32, 1, 2, 2))

    def __post_init__(self):
        if self.scale not in ("full", "toy"):
            raise ModelBuildError(f"unknown scale {self.scale!r}")
        if self.mid_rule not in ("block", "conv"):
            raise ModelBuildError(f"unknown mid_rule {self.mid_rule!r}")
        if min(self.frames, self.size, self.heatmap, self.stem_width, self.stage2_width, self.stage3_width) < 1:
            raise ModelBuildError("model dimensions must be positive")
        if not 0 <= self.frozen_prefix <= N_CONV_LAYERS:
            raise ModelBuildError(f"frozen_prefix must be in [0, {N_CONV_LAYERS}]")
        for name in ("reg_a", "reg_b"):
            spec = getattr(self, name)
            if isinstance(spec, dict):
                object.__setattr__(self, name, RegBlockSpec(**spec))

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(
            scale="toy", frames=8, size=64, heatmap=16,
            stem_width=8, stage2_width=8, stage3_width=16,
            stem_mid=None, frozen_prefix=0,
            reg_a=RegBlockSpec(16, 8, 2, 2), reg_b=RegBlockSpec(8, 1, 2, 2),
        )
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for name in ("reg_a", "reg_b"):
            if isinstance(d.get(name), dict):
                d[name] = RegBlockSpec(**d[name])
        return cls(**d)


N_CONV_LAYERS = 9

FULL_SHAPE_CHAIN = [
    ("input", (16, 3, 256, 256)),
    ("stem", (16, 64, 128, 128)),
    ("layer1", (16, 64, 128, 128)),
    ("layer2", (8, 128, 64, 64)),
    ("reg_a", (2, 32, 64, 64)),
    ("reg_b", (1, 1, 64, 64)),
    ("output", (64, 64)),
]


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def shape_chain(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample (T, C, H, W) shapes after each stage, computed from the config alone."""
    t, s = cfg.frames, cfg.size
    chain = [("input", (t, 3, s, s))]
    s = _conv_out(s, 7, 2, 3)
    chain.append(("stem", (t, cfg.stem_width, s, s)))
    chain.append(("layer1", (t, cfg.stage2_width, s, s)))
    t, s = _conv_out(t, 3, 2, 1), _conv_out(s, 3, 2, 1)
    chain.append(("layer2", (t, cfg.stage3_width, s, s)))
    for name in ("reg_a", "reg_b"):
        spec: RegBlockSpec = getattr(cfg, name)
        c_in = chain[-1][1][1]
        if spec.in_channels != c_in:
            raise ModelBuildError(f"{name}: expects {spec.in_channels} input channels, previous layer gives {c_in}")
        if t < spec.t_kernel:
            raise ModelBuildError(f"{name}: temporal kernel {spec.t_kernel} exceeds the {t} remaining timesteps")
        t = _conv_out(t, spec.t_kernel, spec.t_stride, 0)
        chain.append((name, (t, spec.out_channels, s, s)))
    _, c, _, _ = chain[-1][1]
    if t != 1 or c != 1:
        raise ModelBuildError(f"reg_b: must reduce to a single map, got {t} timesteps x {c} channels")
    if s != cfg.heatmap:
        raise ModelBuildError(f"reg_b: produces {s}x{s} maps but the config asks for {cfg.heatmap}x{cfg.heatmap}")
    chain.append(("output", (s, s)))
    return chain


class Conv2Plus1D(nn.Sequential):
    """Spatial 1xdxd convolution, BN, ReLU, then temporal tx1x1 convolution."""

    def __init__(self, in_planes: int, out_planes: int, mid_planes: int, stride: int = 1):
        super().__init__(
            nn.Conv3d(in_planes, mid_planes, (1, 3, 3), (1, stride, stride), (0, 1, 1), bias=False),
            nn.BatchNorm3d(mid_planes),
            nn.ReLU(inplace=True),
            nn.Conv3d(mid_planes, out_planes, (3, 1, 1), (stride, 1, 1), (1, 0, 0), bias=False),
        )


class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1, mid_rule: str = "block"):
        super().__init__()
        mid1 = factorized_width(in_planes, planes)
        mid2 = mid1 if mid_rule == "block" else factorized_width(planes, planes)
        self.conv1 = nn.Sequential(Conv2Plus1D(in_planes, planes, mid1, stride), nn.BatchNorm3d(planes),
                                   nn.ReLU(inplace=True))
        self.conv2 = nn.Sequential(Conv2Plus1D(planes, planes, mid2), nn.BatchNorm3d(planes))
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_planes != planes:
            self.downsample = nn.Sequential(nn.Conv3d(in_planes, planes, 1, stride=stride, bias=False),
                                            nn.BatchNorm3d(planes))

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = self.conv2(self.conv1(x))
        return self.relu(out + residual)


def _stem(width: int, mid: Optional[int]) -> nn.Sequential:
    if mid is None:
        mid = factorized_width(3, width, spatial=7)
    return nn.Sequential(
        nn.Conv3d(3, mid, (1, 7, 7), (1, 2, 2), (0, 3, 3), bias=False),
        nn.BatchNorm3d(mid),
        nn.ReLU(inplace=True),
        nn.Conv3d(mid, width, (3, 1, 1), (1, 1, 1), (1, 0, 0), bias=False),
        nn.BatchNorm3d(width),
        nn.ReLU(inplace=True),
    )


def _reg_block(spec: RegBlockSpec) -> nn.Sequential:
    k = (spec.t_kernel, 1, 1)
    s = (spec.t_stride, 1, 1)
    return nn.Sequential(
        nn.Conv3d(spec.in_channels, spec.out_channels, k, s, 0, bias=False),
        nn.BatchNorm3d(spec.out_channels),
        nn.ReLU(inplace=True),
    )


EXTRACTOR_PREFIXES = ("stem.", "layer1.", "layer2.")


class PuckNet(nn.Module):
    """Clip batch (B, T, 3, S, S) -> non-negative heatmaps (B, H, W)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.chain = shape_chain(cfg)
        if cfg.scale == "full" and self.chain != FULL_SHAPE_CHAIN:
            raise ModelBuildError(f"full-scale shape chain mismatch: {self.chain}")
        w1, w2, w3 = cfg.stem_width, cfg.stage2_width, cfg.stage3_width
        self.stem = _stem(w1, cfg.stem_mid)
        self.layer1 = nn.Sequential(BasicBlock(w1, w2, 1, cfg.mid_rule), BasicBlock(w2, w2, 1, cfg.mid_rule))
        self.layer2 = nn.Sequential(BasicBlock(w2, w3, 2, cfg.mid_rule), BasicBlock(w3, w3, 1, cfg.mid_rule))
        self.reg_a = _reg_block(cfg.reg_a)
        self.reg_b = _reg_block(cfg.reg_b)
        self.frozen: set[int] = set()
        # Eval-mode batches are run this many clips at a time. BN then uses stored
        # statistics, so clips are independent and the result does not change; it
        # keeps a full-scale batch of 10 within a few GB. None runs the batch whole.
        self.inference_chunk: Optional[int] = 2 if cfg.scale == "full" else None
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def conv_layers(self) -> list[nn.Module]:
        """The nine extractor conv layers in depth order.

        A block's shortcut projection travels with that block's first conv.
        """
        units: list[nn.Module] = [self.stem]
        for stage in (self.layer1, self.layer2):
            for block in stage:
                first = block.conv1 if block.downsample is None else nn.ModuleList([block.conv1, block.downsample])
                units.extend([first, block.conv2])
        return units

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen layers always normalize with their stored statistics
        layers = self.conv_layers()
        for i in self.frozen:
            layers[i].eval()
        return self

    def check_input(self, x: torch.Tensor) -> None:
        want = self.chain[0][1]
        if x.dim() != 5 or tuple(x.shape[1:]) != want:
            raise ValueError(f"expected input (B, {', '.join(map(str, want))}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, return_intermediates: bool = False):
        self.check_input(x)
        n = self.inference_chunk
        if n and not self.training and x.shape[0] > n:
            outs = [self._forward(x[i:i + n]) for i in range(0, x.shape[0], n)]
            out = torch.cat([o for o, _ in outs])
            return (out, outs[0][1]) if return_intermediates else out
        out, shapes = self._forward(x)
        return (out, shapes) if return_intermediates else out

    def _forward(self, x: torch.Tensor):
        shapes = [("input", tuple(x.shape[1:]))]
        x = x.transpose(1, 2)  # (B, C, T, H, W)

        def record(name, t):
            shapes.append((name, (t.shape[2], t.shape[1], t.shape[3], t.shape[4])))
            return t

        x = record("stem", self.stem(x))
        x = record("layer1", self.layer1(x))
        x = record("layer2", self.layer2(x))
        x = record("reg_a", self.reg_a(x))
        x = record("reg_b", self.reg_b(x))
        out = x[:, 0, 0]
        shapes.append(("output", tuple(out.shape[1:])))
        return out, shapes


def build_model(cfg: ModelConfig) -> PuckNet:
    model = PuckNet(cfg)
    if cfg.frozen_prefix:
        freeze_prefix(model, cfg.frozen_prefix)
    return model


def freeze_prefix(model: PuckNet, n_layers: int) -> None:
    """Exclude the first ``n_layers`` extractor convs (and their BNs) from training."""
    layers = model.conv_layers()
    if not 0 <= n_layers <= len(layers):
        raise ValueError(f"n_layers must be in [0, {len(layers)}], got {n_layers}")
    model.frozen = set(range(n_layers))
    for i, layer in enumerate(layers):
        for p in layer.parameters():
            p.requires_grad_(i >= n_layers)
    model.train(model.training)


def frozen_parameter_names(model: PuckNet) -> list[str]:
    return [name for name, p in model.named_parameters() if not p.requires_grad]


@dataclass
class LoadReport:
    matched: list[str]
    unmatched: list[str]
    ignored: list[str]


def _read_archive(path: Path) -> dict[str, torch.Tensor]:
    try:
        if path.suffix == ".safetensors":
            from safetensors.torch import load_file

            tensors = load_file(str(path))
        else:
            tensors = torch.load(path, map_location="cpu", weights_only=True)
            if isinstance(tensors, dict) and "state_dict" in tensors:
                tensors = tensors["state_dict"]
    except Exception as exc:
        raise PretrainedLoadError(f"cannot read weights archive {path}: {exc}") from exc
    if not isinstance(tensors, dict) or not all(isinstance(v, torch.Tensor) for v in tensors.values()):
        raise PretrainedLoadError(f"{path} does not hold a name -> tensor mapping")
    return {k.removeprefix("module."): v for k, v in tensors.items()}


def load_pretrained(model: PuckNet, path: str | Path) -> LoadReport:
    """Copy extractor weights whose name and shape match; regression blocks keep their init."""
    archive = _read_archive(Path(path))
    state = model.state_dict()
    param_names = {n for n, _ in model.named_parameters()}
    loaded = set()
    with torch.no_grad():
        for name, tensor in archive.items():
            if not name.startswith(EXTRACTOR_PREFIXES) or name not in state:
                continue
            if state[name].shape != tensor.shape:
                log.warning("shape mismatch for %s: model %s, archive %s", name, tuple(state[name].shape),
                            tuple(tensor.shape))
                continue
            state[name].copy_(tensor.to(state[name].dtype))
            loaded.add(name)
    matched = sorted(loaded & param_names)
    unmatched = sorted(param_names - loaded)
    ignored = sorted(set(archive) - loaded)
    if not matched:
        warnings.warn(f"no parameters matched in {path}; the extractor keeps its random init", stacklevel=2)
    log.info("pretrained weights: %d matched, %d unmatched, %d ignored", len(matched), len(unmatched), len(ignored))
    return LoadReport(matched, unmatched, ignored)


def parameter_checksums(model: nn.Module, names: Optional[list[str]] = None) -> dict[str, str]:
    """SHA-256 of each parameter's raw bytes."""
    params = dict(model.named_parameters())
    out = {}
    for name in names if names is not None else params:
        t = params[name].detach().cpu().contiguous()
        out[name] = hashlib.sha256(t.numpy().tobytes()).hexdigest()
    return out
