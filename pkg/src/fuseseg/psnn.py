"""Progressive multi-scale segmentation backbone, its losses, and training.

The encoder is a plain conv/BN/ReLU stack with factor-2 max-pooling between
blocks.  Each block's feature map is collapsed to a single-channel logit grid
by a 1x1x1 convolution, and the decoder is parameter-free: aggregated maps
are formed purely by trilinear upsampling and element-wise summation.

With HIGH_TO_LOW aggregation (the default) the deepest map seeds the chain,

    f[m] = f_tilde[m]
    f[l] = f_tilde[l] + up2(f[l+1])      for l < m

and the output probability is sigmoid(f[1]) at full input resolution.  The
LOW_TO_HIGH variant aggregates in the opposite order at full resolution
(every raw map upsampled, then cumulatively summed, final = the deepest
partial sum); it exists as an ablation and shares every parameter shape.

Training is deliberately explicit: a hand-written Adam step (bias-corrected,
classic additive L2 weight decay) over named tensors, deep supervision with
equal weights on every aggregated level, and seed-determined sampling and
augmentation order.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    InvalidConfig,
    IOFailure,
    ManifestMismatch,
    MissingHeader,
    NonFiniteGradient,
    ShapeError,
)
from .volio import PatchSample, rotate_xy


class DecoderDirection(str, Enum):
    HIGH_TO_LOW = "HIGH_TO_LOW"   # deepest map seeds the chain, output at f[1]
    LOW_TO_HIGH = "LOW_TO_HIGH"   # cumulative full-resolution sums, output at f[m]


@dataclass(frozen=True)
class PSNNConfig:
    in_channels: int = 2
    num_blocks: int = 4
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3)
    channels_per_block: tuple[int, ...] = (8, 16, 32, 64)
    decoder_direction: DecoderDirection = DecoderDirection.HIGH_TO_LOW

    def validate(self) -> "PSNNConfig":
        if self.in_channels < 1:
            raise InvalidConfig(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_blocks < 1:
            raise InvalidConfig(f"num_blocks must be >= 1, got {self.num_blocks}")
        if len(self.convs_per_block) != self.num_blocks:
            raise InvalidConfig("convs_per_block length must equal num_blocks")
        if len(self.channels_per_block) != self.num_blocks:
            raise InvalidConfig("channels_per_block length must equal num_blocks")
        if any(c < 1 for c in self.convs_per_block):
            raise InvalidConfig("convs_per_block entries must be >= 1")
        if any(c < 1 for c in self.channels_per_block):
            raise InvalidConfig("channels_per_block entries must be >= 1")
        return self

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.99            # the optimizer's momentum coefficient
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.005
    epochs: int = 40
    batch_size: int = 4
    patch_size: tuple[int, int, int] = (80, 80, 64)
    dice_eps: float = 1.0
    seed: int = 0
    rotation_max_deg: float = 10.0
    ct_clip_hu: float = 1000.0     # normalization half-range for CT channels

    def validate(self) -> "TrainConfig":
        positives = ("learning_rate", "epsilon", "dice_eps", "ct_clip_hu")
        for name in positives:
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise InvalidConfig("beta1/beta2 must lie in (0, 1)")
        if self.weight_decay < 0 or self.rotation_max_deg < 0:
            raise InvalidConfig("weight_decay and rotation_max_deg must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")
        if any(p < 1 for p in self.patch_size):
            raise InvalidConfig("patch_size entries must be >= 1")
        return self


BUFFER_SUFFIXES = ("running_mean", "running_var", "num_batches_tracked")


def _is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_SUFFIXES


@dataclass
class ModelWeights:
    """Named tensors (parameters and normalization buffers) plus the
    fingerprint of the architecture they instantiate."""

    config: PSNNConfig
    tensors: "OrderedDict[str, torch.Tensor]"
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = self.config.fingerprint()
        for name, t in self.tensors.items():
            if t.is_floating_point() and not torch.isfinite(t).all():
                raise ShapeError(f"tensor {name} contains non-finite values")

    def clone(self) -> "ModelWeights":
        return ModelWeights(
            self.config,
            OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()),
            self.fingerprint,
        )

    def parameter_count(self, trainable_only: bool = True) -> int:
        return sum(
            t.numel() for name, t in self.tensors.items()
            if not (trainable_only and _is_buffer(name))
        )


class _Backbone(nn.Module):
    """Encoder blocks + per-block logit collapse.  Running statistics keep
    0.9 of their previous value per batch (torch momentum 0.1)."""

    def __init__(self, cfg: PSNNConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        collapses = []
        prev = cfg.in_channels
        for level in range(cfg.num_blocks):
            ch = cfg.channels_per_block[level]
            layers = []
            for _ in range(cfg.convs_per_block[level]):
                layers += [
                    nn.Conv3d(prev, ch, kernel_size=3, padding=1),
                    nn.BatchNorm3d(ch, momentum=0.1),
                    nn.ReLU(inplace=True),
                ]
                prev = ch
            blocks.append(nn.Sequential(*layers))
            collapses.append(nn.Conv3d(ch, 1, kernel_size=1))
        self.blocks = nn.ModuleList(blocks)
        self.collapse = nn.ModuleList(collapses)
        self.pool = nn.MaxPool3d(2)

    def raw_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        for level, block in enumerate(self.blocks):
            if level > 0:
                x = self.pool(x)
            x = block(x)
            maps.append(self.collapse[level](x))
        return maps


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


def _up_to(x: torch.Tensor, spatial) -> torch.Tensor:
    if x.shape[2:] == tuple(spatial):
        return x
    return F.interpolate(x, size=tuple(spatial), mode="trilinear", align_corners=False)


@dataclass
class LogitMaps:
    """Raw (f_tilde) and aggregated (f) logit grids, shallowest first.

    With HIGH_TO_LOW aggregation f[l] lives on the level-l grid (full input
    resolution at l=1) and the final map is f[1].  With LOW_TO_HIGH all
    aggregated maps are already at full resolution and the final map is f[m].
    """

    f_tilde: list[torch.Tensor]
    f: list[torch.Tensor]
    direction: DecoderDirection

    @property
    def final_logits(self) -> torch.Tensor:
        return self.f[0] if self.direction == DecoderDirection.HIGH_TO_LOW else self.f[-1]

    def probability(self) -> torch.Tensor:
        return torch.sigmoid(self.final_logits)


def build_network(config: PSNNConfig, seed: int) -> ModelWeights:
    """Deterministically initialized weights for the configured backbone."""
    config.validate()
    torch.manual_seed(seed)
    module = _Backbone(config)
    tensors = OrderedDict(
        (k, v.detach().clone()) for k, v in module.state_dict().items()
    )
    return ModelWeights(config, tensors)


def module_from_weights(weights: ModelWeights) -> _Backbone:
    module = _Backbone(weights.config)
    module.load_state_dict(weights.tensors, strict=True)
    return module


def _as_batch(patch) -> torch.Tensor:
    if isinstance(patch, torch.Tensor):
        t = patch
    else:
        t = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32))
    if t.dim() == 4:
        t = t.unsqueeze(0)
    if t.dim() != 5:
        raise ShapeError(f"expected (C,X,Y,Z) or (N,C,X,Y,Z), got {tuple(t.shape)}")
    return t


def _check_divisible(spatial, num_blocks: int):
    f = 2 ** (num_blocks - 1)
    if any(s % f != 0 for s in spatial):
        raise ShapeError(
            f"spatial dims {tuple(spatial)} must be divisible by {f} "
            f"for {num_blocks} blocks"
        )


def aggregate_maps(raw: list[torch.Tensor], direction: DecoderDirection) -> list[torch.Tensor]:
    """Parameter-free aggregation of per-level logit maps."""
    m = len(raw)
    if direction == DecoderDirection.HIGH_TO_LOW:
        f = [None] * m
        f[m - 1] = raw[m - 1]
        for level in range(m - 2, -1, -1):
            f[level] = raw[level] + _up2(f[level + 1])
        return f
    full = raw[0].shape[2:]
    f = []
    acc = None
    for level in range(m):
        up = _up_to(raw[level], full)
        acc = up if acc is None else acc + up
        f.append(acc)
    return f


def forward(weights: ModelWeights, patch, training: bool = False) -> LogitMaps:
    """Run the backbone on one patch or batch, producing all logit maps."""
    module = module_from_weights(weights)
    return run_module(module, patch, training=training)


def run_module(module: _Backbone, patch, training: bool = False) -> LogitMaps:
    x = _as_batch(patch)
    if x.shape[1] != module.cfg.in_channels:
        raise ShapeError(
            f"expected {module.cfg.in_channels} input channels, got {x.shape[1]}"
        )
    _check_divisible(x.shape[2:], module.cfg.num_blocks)
    module.train(training)
    if training:
        raw = module.raw_maps(x)
    else:
        with torch.no_grad():
            raw = module.raw_maps(x)
    return LogitMaps(raw, aggregate_maps(raw, module.cfg.decoder_direction),
                     module.cfg.decoder_direction)


# --------------------------------------------------------------------------
# losses

def _pair_tensors(prob, target):
    p = prob if isinstance(prob, torch.Tensor) else torch.from_numpy(
        np.ascontiguousarray(prob, dtype=np.float32))
    y = target if isinstance(target, torch.Tensor) else torch.from_numpy(
        np.ascontiguousarray(target).astype(np.float32))
    y = y.to(p.dtype)
    if p.shape != y.shape:
        raise ShapeError(f"prob shape {tuple(p.shape)} != target shape {tuple(y.shape)}")
    return p, y


def dice_loss(prob, target, eps: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps).

    Tensors of dim > 3 are treated as batches over dim 0 (per-sample overlap,
    then the mean); plain 3D grids give the single-grid value.
    """
    p, y = _pair_tensors(prob, target)
    if p.dim() > 3:
        dims = tuple(range(1, p.dim()))
        inter = (p * y).sum(dim=dims)
        denom = p.sum(dim=dims) + y.sum(dim=dims)
        return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()
    inter = (p * y).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + y.sum() + eps)


def deep_supervised_loss(maps: LogitMaps, target, eps: float = 1.0) -> torch.Tensor:
    """Equal-weight mean of the overlap loss at every aggregated level,
    each upsampled to the target grid before scoring."""
    y = target if isinstance(target, torch.Tensor) else torch.from_numpy(
        np.ascontiguousarray(target).astype(np.float32))
    if y.dim() == 3:
        y = y[None, None]
    elif y.dim() == 4:
        y = y.unsqueeze(1)
    if y.dim() != 5:
        raise ShapeError(f"target must be 3D, 4D, or 5D, got {y.dim()}D")
    spatial = y.shape[2:]
    total = None
    for f in maps.f:
        prob = torch.sigmoid(_up_to(f, spatial))
        term = dice_loss(prob, y.to(prob.dtype), eps)
        total = term if total is None else total + term
    return total / len(maps.f)


# --------------------------------------------------------------------------
# optimization

def init_adam_state(weights: ModelWeights) -> dict:
    return {
        name: {
            "m": torch.zeros_like(t, dtype=torch.float32),
            "v": torch.zeros_like(t, dtype=torch.float32),
        }
        for name, t in weights.tensors.items()
        if not _is_buffer(name)
    }


def adam_step(params: dict, grads: dict, state: dict, config: TrainConfig, t: int):
    """Bias-corrected first/second-moment update with classic additive L2
    weight decay folded into the gradient.  Mutates params and state in
    place; returns them for convenience.
    """
    if t < 1:
        raise InvalidConfig(f"step index must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: grad shape {tuple(g.shape)} != {tuple(w.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        s = state[name]
        g = g + config.weight_decay * w
        s["m"].mul_(b1).add_(g, alpha=1.0 - b1)
        s["v"].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        m_hat = s["m"] / (1.0 - b1 ** t)
        v_hat = s["v"] / (1.0 - b2 ** t)
        w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon)
    return params, state


# --------------------------------------------------------------------------
# training loop

def _batch_from(samples: Sequence[PatchSample]):
    x = np.stack([np.stack(s.channels, axis=0) for s in samples]).astype(np.float32)
    y = np.stack([s.label for s in samples]).astype(np.float32)
    return torch.from_numpy(x), torch.from_numpy(y)


def _val_loss(module: _Backbone, dataset, batch_size: int, eps: float) -> float:
    losses = []
    for start in range(0, len(dataset), batch_size):
        xb, yb = _batch_from(dataset[start:start + batch_size])
        maps = run_module(module, xb, training=False)
        losses.append(float(deep_supervised_loss(maps, yb, eps)))
    return float(np.mean(losses))


def export_weights(module: _Backbone, config: PSNNConfig) -> ModelWeights:
    tensors = OrderedDict(
        (k, v.detach().clone()) for k, v in module.state_dict().items()
    )
    return ModelWeights(config, tensors)


def recalibrate_batch_stats(
    module: _Backbone, dataset: Sequence[PatchSample], batch_size: int = 4
) -> None:
    """Re-estimate the normalization buffers with frozen weights.

    During optimization the running mean/variance trail the moving weights
    as a momentum average, and with small batches they can settle far from
    the statistics the final weights actually induce — evaluation-mode
    logits then collapse toward the bias.  One pass over the training
    patches with cumulative averaging pins the buffers to the exported
    weights' activation distribution.  In place and deterministic.
    """
    if len(dataset) == 0:
        raise InvalidConfig("empty calibration dataset")
    norms = [m for m in module.modules() if isinstance(m, nn.BatchNorm3d)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative moving average
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            xb, _ = _batch_from(dataset[start:start + batch_size])
            run_module(module, xb, training=True)
    for m, mom in zip(norms, saved):
        m.momentum = mom


def recalibrated_weights(
    weights: ModelWeights, dataset: Sequence[PatchSample], batch_size: int = 4
) -> ModelWeights:
    """Return a copy of `weights` with freshly estimated normalization buffers."""
    module = module_from_weights(weights)
    recalibrate_batch_stats(module, dataset, batch_size)
    return export_weights(module, weights.config)


def train_stream(
    dataset: Sequence[PatchSample],
    net_config: PSNNConfig,
    train_config: TrainConfig,
    val_dataset: Sequence[PatchSample] | None = None,
) -> tuple[ModelWeights, dict]:
    """Train one stream's backbone on pre-sampled patches.

    Every epoch reshuffles the dataset and draws fresh in-plane rotation
    angles, both from the config seed, so a rerun reproduces the loss
    history bitwise (single-threaded).  With a validation set the weights
    with the best validation loss are returned, otherwise the final ones.
    Normalization buffers are re-estimated from the un-augmented patches
    with frozen weights before every validation pass and before the final
    export, so evaluation-mode behaviour matches the weights actually
    returned (see recalibrate_batch_stats).
    """
    net_config.validate()
    train_config.validate()
    if len(dataset) == 0:
        raise InvalidConfig("empty training dataset")
    torch.manual_seed(train_config.seed)
    module = _Backbone(net_config)
    rng = np.random.default_rng(train_config.seed)

    params = dict(module.named_parameters())
    live = {name: p.data for name, p in params.items()}
    state = init_adam_state(export_weights(module, net_config))
    history = {"train_loss": [], "val_loss": [], "best_epoch": None}
    best = (np.inf, export_weights(module, net_config))
    step = 0
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(dataset))
        angles = rng.uniform(
            -train_config.rotation_max_deg, train_config.rotation_max_deg, len(dataset)
        )
        for start in range(0, len(order), train_config.batch_size):
            chunk = order[start:start + train_config.batch_size]
            samples = [
                rotate_xy(dataset[i], float(angles[i])) for i in chunk
            ]
            xb, yb = _batch_from(samples)
            maps = run_module(module, xb, training=True)
            loss = deep_supervised_loss(maps, yb, train_config.dice_eps)
            module.zero_grad(set_to_none=True)
            loss.backward()
            grads = {
                name: p.grad for name, p in params.items() if p.grad is not None
            }
            step += 1
            with torch.no_grad():
                adam_step(live, grads, state, train_config, step)
            history["train_loss"].append(float(loss.detach()))
        if val_dataset:
            recalibrate_batch_stats(module, dataset, train_config.batch_size)
            vl = _val_loss(module, val_dataset, train_config.batch_size,
                           train_config.dice_eps)
            history["val_loss"].append(vl)
            if vl < best[0]:
                best = (vl, export_weights(module, net_config))
                history["best_epoch"] = epoch
    if val_dataset and history["best_epoch"] is not None:
        return best[1], history
    recalibrate_batch_stats(module, dataset, train_config.batch_size)
    return export_weights(module, net_config), history


# --------------------------------------------------------------------------
# model files

def save_model(weights: ModelWeights, path) -> None:
    """`<path>.weights.json` manifest + `<path>.weights.bin` tensor blob.

    All tensors are stored little-endian float32 in manifest order; integer
    bookkeeping buffers are cast on the way out and restored on load.
    """
    base = Path(str(path))
    entries = []
    offset = 0
    blobs = []
    for name, t in weights.tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "offset": offset,
            "dtype": "int64" if t.dtype == torch.int64 else "float32",
        })
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "fingerprint": weights.fingerprint,
        "config": dataclasses.asdict(weights.config),
        "tensors": entries,
    }
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(f"{base}.weights.json", "w") as fh:
            json.dump(manifest, fh, indent=1, default=str)
        with open(f"{base}.weights.bin", "wb") as fh:
            fh.write(b"".join(blobs))
    except OSError as exc:
        raise IOFailure(f"cannot write model {base}: {exc}") from exc


def load_model(path, expected_config: PSNNConfig | None = None) -> ModelWeights:
    base = Path(str(path))
    manifest_path = Path(f"{base}.weights.json")
    if not manifest_path.exists():
        raise MissingHeader(f"no model manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    raw_cfg = dict(manifest["config"])
    raw_cfg["convs_per_block"] = tuple(raw_cfg["convs_per_block"])
    raw_cfg["channels_per_block"] = tuple(raw_cfg["channels_per_block"])
    raw_cfg["decoder_direction"] = DecoderDirection(raw_cfg["decoder_direction"])
    config = PSNNConfig(**raw_cfg)
    if manifest["fingerprint"] != config.fingerprint():
        raise ManifestMismatch("manifest fingerprint does not match its own config")
    if expected_config is not None and \
            expected_config.fingerprint() != manifest["fingerprint"]:
        raise ManifestMismatch("model was built from a different configuration")
    try:
        blob = Path(f"{base}.weights.bin").read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read model blob {base}: {exc}") from exc
    tensors = OrderedDict()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype="<f4", count=n, offset=entry["offset"]
        ).reshape(shape)
        t = torch.from_numpy(arr.copy())
        if entry["dtype"] == "int64":
            t = t.to(torch.int64)
        tensors[entry["name"]] = t
    expected_bytes = sum(
        int(np.prod(e["shape"] or [1])) * 4 for e in manifest["tensors"]
    )
    if expected_bytes != len(blob):
        raise ManifestMismatch(
            f"blob holds {len(blob)} bytes, manifest expects {expected_bytes}"
        )
    weights = ModelWeights(config, tensors, manifest["fingerprint"])
    try:
        module_from_weights(weights)  # strict shape check against the architecture
    except RuntimeError as exc:
        raise ManifestMismatch(f"tensor shapes do not fit the architecture: {exc}") from exc
    return weights


class Predictor:
    """Reusable eval-mode wrapper so sliding-window inference does not pay
    module construction per window."""

    def __init__(self, weights: ModelWeights):
        self.module = module_from_weights(weights)
        self.module.eval()
        self.config = weights.config

    def probability(self, batch: np.ndarray) -> np.ndarray:
        maps = run_module(self.module, batch, training=False)
        return maps.probability().numpy()
