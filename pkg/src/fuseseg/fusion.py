"""Two-stream chained fusion pipeline.

Three segmentation streams share one backbone architecture and differ only
in their input channels: the CT stream sees the planning CT alone, the
early-fusion stream appends the registered PET, and the late-fusion network
consumes the CT together with the two upstream probability maps.  Streams
are trained in isolation; the upstream weights are frozen by construction
when the late-fusion channels are computed.  Whole volumes are processed
with overlapping sliding windows whose probabilities are averaged.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ChannelMismatch,
    InvalidConfig,
    MissingRegisteredPET,
    MissingUpstreamModel,
    ShapeMismatch,
    WindowLargerThanVolume,
)
from .psnn import (
    ModelWeights,
    Predictor,
    PSNNConfig,
    TrainConfig,
    train_stream,
)
from .volio import (
    CaseManifest,
    load_mask,
    load_volume,
    normalize_ct,
    normalize_pet,
    sample_training_patches,
)

DEFAULT_WINDOW = (80, 80, 64)
DEFAULT_STRIDE = (48, 48, 32)


class StreamKind(str, Enum):
    CT = "CT"
    EF = "EF"
    LF = "LF"


# input channel count per stream recipe
STREAM_CHANNELS = {StreamKind.CT: 1, StreamKind.EF: 2, StreamKind.LF: 3}


@dataclass
class PipelineModels:
    """The three trained stream models plus a provenance record.

    `lf_model` may be absent while the chain is still being built; a complete
    pipeline passes validate().
    """

    ct_model: ModelWeights
    ef_model: ModelWeights
    lf_model: ModelWeights | None = None
    provenance: dict = field(default_factory=dict)

    def validate(self) -> "PipelineModels":
        if self.lf_model is None:
            raise InvalidConfig("pipeline is missing the late-fusion model")
        got = (
            self.ct_model.config.in_channels,
            self.ef_model.config.in_channels,
            self.lf_model.config.in_channels,
        )
        if got != (1, 2, 3):
            raise InvalidConfig(
                f"stream models must take 1/2/3 input channels, got {got}"
            )
        return self

    def model_for(self, kind: StreamKind) -> ModelWeights:
        return {
            StreamKind.CT: self.ct_model,
            StreamKind.EF: self.ef_model,
            StreamKind.LF: self.lf_model,
        }[kind]


# --------------------------------------------------------------------------
# sliding-window planning

def _axis_origins(dim: int, window: int, stride: int) -> list[int]:
    if stride <= 0:
        raise InvalidConfig(f"stride must be positive, got {stride}")
    if window > dim:
        raise WindowLargerThanVolume(
            f"window {window} exceeds axis length {dim}"
        )
    origins = list(range(0, dim - window + 1, stride))
    if origins[-1] + window < dim:
        origins.append(dim - window)  # clamp the final window to the boundary
    return origins


def sliding_window_positions(shape, window, stride) -> list[tuple[int, int, int]]:
    """Window origins covering every voxel: {0, s, 2s, ...} per axis plus a
    final origin clamped to dim - window when the regular grid falls short."""
    per_axis = [_axis_origins(shape[a], window[a], stride[a]) for a in range(3)]
    return [
        (x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]
    ]


@dataclass(frozen=True)
class SlidingWindowPlan:
    """Window geometry for one volume shape, padding already resolved.

    Axes shorter than the window are symmetrically zero-padded up to the
    window size; `positions` index into the padded grid.
    """

    shape: tuple[int, int, int]          # original volume shape
    window: tuple[int, int, int]
    stride: tuple[int, int, int]
    positions: tuple[tuple[int, int, int], ...]
    pad_before: tuple[int, int, int] = (0, 0, 0)
    pad_after: tuple[int, int, int] = (0, 0, 0)

    @property
    def padded(self) -> bool:
        return any(self.pad_before) or any(self.pad_after)

    @property
    def padded_shape(self) -> tuple[int, int, int]:
        return tuple(
            self.shape[a] + self.pad_before[a] + self.pad_after[a] for a in range(3)
        )


def make_plan(shape, window=DEFAULT_WINDOW, stride=DEFAULT_STRIDE) -> SlidingWindowPlan:
    shape = tuple(int(s) for s in shape)
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    if any(w < 1 for w in window):
        raise InvalidConfig(f"window must be >= 1 per axis, got {window}")
    before, after = [], []
    for a in range(3):
        short = max(window[a] - shape[a], 0)
        before.append(short // 2)
        after.append(short - short // 2)
    padded = tuple(shape[a] + before[a] + after[a] for a in range(3))
    return SlidingWindowPlan(
        shape=shape,
        window=window,
        stride=stride,
        positions=tuple(sliding_window_positions(padded, window, stride)),
        pad_before=tuple(before),
        pad_after=tuple(after),
    )


# --------------------------------------------------------------------------
# window-level inference and aggregation

def predict_windows(
    window_fn: Callable[[Sequence[tuple[int, int, int]], np.ndarray], np.ndarray],
    channels: Sequence[np.ndarray],
    plan: SlidingWindowPlan,
    batch_size: int = 4,
) -> np.ndarray:
    """Mean-aggregate per-window probabilities over a sliding-window plan.

    `window_fn(origins, batch)` maps a (N, C, wx, wy, wz) stack of windows to
    (N, wx, wy, wz) probabilities.  Aggregation is an order-independent
    sum / count, so overlapping windows average.
    """
    shapes = {tuple(np.shape(c)) for c in channels}
    if len(shapes) != 1:
        raise ShapeMismatch(f"channels disagree on shape: {sorted(shapes)}")
    if shapes.pop() != plan.shape:
        raise ShapeMismatch("channel shape does not match the plan")
    stack = np.stack([np.asarray(c, dtype=np.float32) for c in channels])
    if plan.padded:
        pads = [(0, 0)] + [(plan.pad_before[a], plan.pad_after[a]) for a in range(3)]
        stack = np.pad(stack, pads)

    acc = np.zeros(plan.padded_shape, dtype=np.float32)
    cnt = np.zeros(plan.padded_shape, dtype=np.uint16)
    wx, wy, wz = plan.window
    for start in range(0, len(plan.positions), max(batch_size, 1)):
        origins = plan.positions[start:start + max(batch_size, 1)]
        batch = np.stack(
            [stack[:, x:x + wx, y:y + wy, z:z + wz] for x, y, z in origins]
        )
        probs = np.asarray(window_fn(origins, batch), dtype=np.float32)
        if probs.ndim == 5 and probs.shape[1] == 1:
            probs = probs[:, 0]
        if probs.shape != (len(origins), wx, wy, wz):
            raise ShapeMismatch(
                f"window_fn returned {probs.shape}, expected "
                f"{(len(origins), wx, wy, wz)}"
            )
        for (x, y, z), p in zip(origins, probs):
            acc[x:x + wx, y:y + wy, z:z + wz] += p
            cnt[x:x + wx, y:y + wy, z:z + wz] += 1
    if cnt.min() == 0:
        raise ShapeMismatch("plan does not cover every voxel")
    out = acc / cnt
    sl = tuple(
        slice(plan.pad_before[a], plan.pad_before[a] + plan.shape[a]) for a in range(3)
    )
    return np.clip(out[sl], 0.0, 1.0).astype(np.float32)


def predict_volume(
    model: ModelWeights,
    channels: Sequence[np.ndarray],
    plan: SlidingWindowPlan | None = None,
    window=DEFAULT_WINDOW,
    stride=DEFAULT_STRIDE,
    batch_size: int = 4,
) -> np.ndarray:
    """Whole-volume probability map by sliding-window mean aggregation."""
    if len(channels) != model.config.in_channels:
        raise ChannelMismatch(
            f"model takes {model.config.in_channels} channels, got {len(channels)}"
        )
    if plan is None:
        plan = make_plan(np.shape(channels[0]), window, stride)
    predictor = Predictor(model)

    def window_fn(origins, batch):
        return predictor.probability(batch)

    return predict_windows(window_fn, channels, plan, batch_size=batch_size)


# --------------------------------------------------------------------------
# stream channel recipes

def _load_normalized(case: CaseManifest, kind: StreamKind, clip_hu: float):
    """Load and normalize the raw inputs a stream recipe starts from."""
    ct = load_volume(case.rtct)
    xct = normalize_ct(ct.data, clip_hu)
    xpet = None
    if kind in (StreamKind.EF, StreamKind.LF):
        if not case.pet_reg:
            raise MissingRegisteredPET(
                f"case {case.case_id}: stream {kind.value} needs a registered PET"
            )
        pet = load_volume(case.pet_reg)
        if pet.data.shape != ct.data.shape:
            raise ShapeMismatch(
                f"case {case.case_id}: registered PET shape {pet.data.shape} "
                f"differs from CT {ct.data.shape}"
            )
        xpet = normalize_pet(pet.data)
    return ct, xct, xpet


def prepare_channels(
    kind: StreamKind,
    case: CaseManifest,
    models: PipelineModels | None = None,
    window=DEFAULT_WINDOW,
    stride=DEFAULT_STRIDE,
    clip_hu: float = 1000.0,
    batch_size: int = 4,
) -> list[np.ndarray]:
    """Build the full-volume input channel stack for one stream.

    CT -> [x_ct]; EF -> [x_ct, x_pet]; LF -> [x_ct, y_ct, y_ef] where the
    upstream probability maps come from frozen models via predict_volume.
    """
    kind = StreamKind(kind)
    _, xct, xpet = _load_normalized(case, kind, clip_hu)
    if kind == StreamKind.CT:
        return [xct]
    if kind == StreamKind.EF:
        return [xct, xpet]
    if models is None or models.ct_model is None or models.ef_model is None:
        raise MissingUpstreamModel(
            "late-fusion channels need trained CT and EF models"
        )
    plan = make_plan(xct.shape, window, stride)
    y_ct = predict_volume(models.ct_model, [xct], plan, batch_size=batch_size)
    y_ef = predict_volume(models.ef_model, [xct, xpet], plan, batch_size=batch_size)
    return [xct, y_ct, y_ef]


# --------------------------------------------------------------------------
# pipeline training

def _stream_config(base: PSNNConfig, kind: StreamKind) -> PSNNConfig:
    return dataclasses.replace(base, in_channels=STREAM_CHANNELS[kind])


def _case_seed(seed: int, case_index: int) -> int:
    # same patch centers for every stream of a case, distinct across cases
    return int(np.random.SeedSequence((seed, case_index)).generate_state(1)[0])


def _stream_patches(
    cases: Sequence[CaseManifest],
    kind: StreamKind,
    train_config: TrainConfig,
    models,  # None | PipelineModels | sequence of either, aligned with cases
    patches_per_case: int,
    positive_fraction: float,
    window,
    stride,
    batch_size: int,
):
    per_case = models if isinstance(models, (list, tuple)) \
        else [models] * len(cases)
    if len(per_case) != len(cases):
        raise InvalidConfig(
            f"{len(per_case)} upstream model sets for {len(cases)} cases"
        )
    patches = []
    for idx, case in enumerate(cases):
        channels = prepare_channels(
            kind, case, per_case[idx], window, stride,
            train_config.ct_clip_hu, batch_size,
        )
        label = load_mask(case.gtv_mask).data
        patches += sample_training_patches(
            case,
            patches_per_case,
            positive_fraction,
            train_config.patch_size,
            _case_seed(train_config.seed, idx),
            channels=channels,
            label=label,
        )
    return patches


def data_fingerprint(cases: Sequence[CaseManifest]) -> str:
    payload = [
        {"case_id": c.case_id, "rtct": str(c.rtct), "pet_reg": str(c.pet_reg)}
        for c in cases
    ]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def train_single_stream(
    kind: StreamKind,
    cases: Sequence[CaseManifest],
    net_config: PSNNConfig,
    train_config: TrainConfig,
    upstream: PipelineModels | Sequence[PipelineModels] | None = None,
    val_cases: Sequence[CaseManifest] | None = None,
    patches_per_case: int = 16,
    positive_fraction: float = 0.5,
    window=DEFAULT_WINDOW,
    stride=DEFAULT_STRIDE,
    batch_size: int = 4,
    val_upstream: PipelineModels | None = None,
) -> tuple[ModelWeights, dict]:
    """Train one stream in isolation on patches sampled from its channel stack.

    The LF stream needs `upstream` with trained CT and EF models; their
    probability maps are produced in eval mode and the weights are never
    touched.  `upstream` is either one model pair shared by every case or a
    sequence aligned with `cases` (one pair per case, as built by
    crossfit_upstreams); validation channels come from `val_upstream` when
    given, else from the shared `upstream`.  Reseeds the framework RNG
    internally, so results do not depend on what was trained before.
    """
    kind = StreamKind(kind)
    if len(cases) == 0:
        raise InvalidConfig("no training cases")
    patches = _stream_patches(
        cases, kind, train_config, upstream,
        patches_per_case, positive_fraction, window, stride, batch_size,
    )
    val_patches = None
    if val_cases:
        val_up = val_upstream if val_upstream is not None else upstream
        if isinstance(val_up, (list, tuple)):
            raise InvalidConfig(
                "per-case upstream models need an explicit val_upstream"
            )
        val_patches = _stream_patches(
            val_cases, kind, train_config, val_up,
            patches_per_case, positive_fraction, window, stride, batch_size,
        )
    return train_stream(
        patches, _stream_config(net_config, kind), train_config, val_patches
    )


def _crossfit_seed(seed: int, half: int) -> int:
    # decorrelate the throwaway trainings from the final streams and each other
    return int(np.random.SeedSequence((seed, 0xCF, half)).generate_state(1)[0])


def crossfit_upstreams(
    cases: Sequence[CaseManifest],
    net_config: PSNNConfig,
    train_config: TrainConfig,
    patches_per_case: int = 16,
    positive_fraction: float = 0.5,
    window=DEFAULT_WINDOW,
    stride=DEFAULT_STRIDE,
    batch_size: int = 4,
) -> list[PipelineModels]:
    """Per-case upstream model pairs that never saw their own case.

    The cases are split into two interleaved halves and a throwaway CT+EF
    pair is trained on each half with the same recipe as the final streams;
    every case is then assigned the pair fitted on the opposite half.  The
    probability maps such a pair produces carry the error statistics of a
    model applied to unseen cases — which is exactly what the late-fusion
    stream encounters at inference time.
    """
    if len(cases) < 4:
        raise InvalidConfig(
            f"cross-fitted training needs at least 4 cases, got {len(cases)}"
        )
    halves = (list(cases[0::2]), list(cases[1::2]))
    pairs = []
    for half_idx, half in enumerate(halves):
        tc = dataclasses.replace(
            train_config, seed=_crossfit_seed(train_config.seed, half_idx)
        )
        trained = {}
        for kind in (StreamKind.CT, StreamKind.EF):
            trained[kind], _ = train_single_stream(
                kind, half, net_config, tc,
                patches_per_case=patches_per_case,
                positive_fraction=positive_fraction,
                window=window, stride=stride, batch_size=batch_size,
            )
        pairs.append(
            PipelineModels(trained[StreamKind.CT], trained[StreamKind.EF])
        )
    # even-indexed cases sit in halves[0], so they get the pair from halves[1]
    return [pairs[1 - idx % 2] for idx in range(len(cases))]


def train_pipeline(
    cases: Sequence[CaseManifest],
    net_config: PSNNConfig,
    train_config: TrainConfig,
    val_cases: Sequence[CaseManifest] | None = None,
    patches_per_case: int = 16,
    positive_fraction: float = 0.5,
    window=DEFAULT_WINDOW,
    stride=DEFAULT_STRIDE,
    batch_size: int = 4,
    lf_crossfit: bool = False,
    lf_epochs: int | None = None,
) -> PipelineModels:
    """Train CT, then EF, then LF on frozen upstream probability maps.

    The three streams are independent trainings: each starts from its own
    seeded initialization, and the late-fusion channels are produced by
    eval-mode inference on the already-trained CT/EF weights, so upstream
    parameters cannot move during LF training.

    With `lf_crossfit` the probability-map channels used to *train* the
    late-fusion stream come from auxiliary models built by
    crossfit_upstreams instead of the final CT/EF weights, so LF learns
    from maps with unseen-case error statistics rather than the optimistic
    maps the final models produce on their own training cases.  The
    exported pipeline is unchanged: inference always chains the full CT and
    EF models.

    `lf_epochs` overrides the epoch count for the late-fusion stream alone:
    learning to combine two probability maps with the raw image needs more
    optimization steps than the upstream streams get, especially in short
    training budgets where an undertrained LF lands just below the quality
    of its own early-fusion input.
    """
    if len(cases) == 0:
        raise InvalidConfig("no training cases")
    for case in cases:
        if not case.pet_reg:
            raise MissingRegisteredPET(
                f"case {case.case_id} is not registered; run registration first"
            )

    if lf_epochs is not None and lf_epochs < 1:
        raise InvalidConfig(f"lf_epochs must be >= 1, got {lf_epochs}")

    histories = {}
    trained: dict[StreamKind, ModelWeights] = {}
    partial: PipelineModels | None = None
    for kind in (StreamKind.CT, StreamKind.EF, StreamKind.LF):
        upstream = None
        val_upstream = None
        stream_tc = train_config
        if kind == StreamKind.LF:
            upstream = partial
            if lf_crossfit:
                upstream = crossfit_upstreams(
                    cases, net_config, train_config,
                    patches_per_case=patches_per_case,
                    positive_fraction=positive_fraction,
                    window=window, stride=stride, batch_size=batch_size,
                )
                val_upstream = partial
            if lf_epochs is not None:
                stream_tc = dataclasses.replace(train_config, epochs=lf_epochs)
        weights, history = train_single_stream(
            kind, cases, net_config, stream_tc,
            upstream=upstream,
            val_cases=val_cases,
            patches_per_case=patches_per_case,
            positive_fraction=positive_fraction,
            window=window,
            stride=stride,
            batch_size=batch_size,
            val_upstream=val_upstream,
        )
        trained[kind] = weights
        histories[kind.value] = history
        if kind == StreamKind.EF:
            partial = PipelineModels(trained[StreamKind.CT], trained[StreamKind.EF])

    provenance = {
        "streams": {k.value: w.fingerprint for k, w in trained.items()},
        "seed": train_config.seed,
        "cases": [c.case_id for c in cases],
        "data_hash": data_fingerprint(cases),
        "patches_per_case": patches_per_case,
        "positive_fraction": positive_fraction,
        "window": list(window),
        "stride": list(stride),
        "lf_crossfit": bool(lf_crossfit),
        "lf_epochs": train_config.epochs if lf_epochs is None else lf_epochs,
        "histories": histories,
    }
    return PipelineModels(
        trained[StreamKind.CT], trained[StreamKind.EF], trained[StreamKind.LF],
        provenance,
    ).validate()


# --------------------------------------------------------------------------
# whole-case segmentation

@dataclass
class SegmentationResult:
    """Per-stream probability volumes and the thresholded final mask."""

    prob_ct: np.ndarray
    prob_ef: np.ndarray
    prob_lf: np.ndarray
    lf_mask: np.ndarray          # bool, prob_lf >= threshold
    threshold: float
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def prob_for(self, kind: StreamKind) -> np.ndarray:
        return {
            StreamKind.CT: self.prob_ct,
            StreamKind.EF: self.prob_ef,
            StreamKind.LF: self.prob_lf,
        }[StreamKind(kind)]


def segment_case(
    models: PipelineModels,
    case: CaseManifest,
    threshold: float = 0.5,
    window=DEFAULT_WINDOW,
    stride=DEFAULT_STRIDE,
    clip_hu: float = 1000.0,
    batch_size: int = 4,
) -> SegmentationResult:
    """Run all three streams on one case and binarize the late-fusion map."""
    models.validate()
    if not (0.0 <= threshold <= 1.0):
        raise InvalidConfig(f"threshold must be in [0,1], got {threshold}")
    ct, xct, xpet = _load_normalized(case, StreamKind.EF, clip_hu)
    plan = make_plan(xct.shape, window, stride)
    prob_ct = predict_volume(models.ct_model, [xct], plan, batch_size=batch_size)
    prob_ef = predict_volume(
        models.ef_model, [xct, xpet], plan, batch_size=batch_size
    )
    prob_lf = predict_volume(
        models.lf_model, [xct, prob_ct, prob_ef], plan, batch_size=batch_size
    )
    return SegmentationResult(
        prob_ct=prob_ct,
        prob_ef=prob_ef,
        prob_lf=prob_lf,
        lf_mask=prob_lf >= threshold,
        threshold=threshold,
        spacing=ct.spacing,
        origin=ct.origin,
    )
