import dataclasses
import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fuseseg.errors import (
    ChannelMismatch,
    InvalidConfig,
    MissingRegisteredPET,
    MissingUpstreamModel,
    ShapeMismatch,
    WindowLargerThanVolume,
)
from fuseseg.fusion import (
    PipelineModels,
    SlidingWindowPlan,
    StreamKind,
    crossfit_upstreams,
    make_plan,
    predict_volume,
    predict_windows,
    prepare_channels,
    segment_case,
    sliding_window_positions,
    train_pipeline,
    train_single_stream,
)
from fuseseg.phantom import PhantomSpec, generate_dataset
from fuseseg.psnn import PSNNConfig, TrainConfig, build_network, forward
from fuseseg.volio import load_manifest, load_volume, normalize_ct, save_manifest


# ------------------------------------------------------------------ helpers

def tiny_net(in_channels=1) -> PSNNConfig:
    return PSNNConfig(in_channels=in_channels, num_blocks=2,
                      convs_per_block=(2, 2), channels_per_block=(2, 4))


def constant_model(in_channels: int, prob: float):
    """Zeroed network whose deepest collapse bias carries a constant logit."""
    w = build_network(tiny_net(in_channels), seed=0)
    for t in w.tensors.values():
        if t.is_floating_point():
            t.zero_()
    if prob != 0.5:
        w.tensors["collapse.1.bias"][...] = float(np.log(prob / (1.0 - prob)))
    return w


def weights_digest(w) -> str:
    h = hashlib.sha256()
    for name, t in w.tensors.items():
        h.update(name.encode())
        h.update(t.detach().numpy().tobytes())
    return h.hexdigest()


FAST = dict(patches_per_case=4, positive_fraction=0.5,
            window=(24, 24, 24), stride=(16, 16, 16))


def fast_train(**overrides) -> TrainConfig:
    base = dict(epochs=1, batch_size=2, patch_size=(16, 16, 16),
                rotation_max_deg=0.0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Three aligned phantom cases; PET doubles as its own registered copy."""
    root = tmp_path_factory.mktemp("fusion_cases")
    spec = PhantomSpec(grid_shape=(48, 48, 48), spacing=(2.0, 2.0, 2.5),
                       misalignment_max_mm=0.0, translation_max_mm=0.0)
    manifest = generate_dataset(spec, 3, seed=11, out_dir=root)
    cases = load_manifest(manifest)
    for c in cases:
        c.pet_reg = c.pet
    save_manifest(cases, manifest)
    return load_manifest(manifest)


# ------------------------------------------------------- window positioning

def test_single_window_single_position():
    assert sliding_window_positions((80, 80, 64), (80, 80, 64), (48, 48, 32)) \
        == [(0, 0, 0)]


def test_positions_exact_cover():
    pos = sliding_window_positions((128, 80, 64), (80, 80, 64), (48, 48, 32))
    assert sorted({p[0] for p in pos}) == [0, 48]  # 48 + 80 == 128, no clamp


def test_positions_clamped_final():
    pos = sliding_window_positions((100, 80, 64), (80, 80, 64), (48, 48, 32))
    assert sorted({p[0] for p in pos}) == [0, 20]  # clamped to 100 - 80


def test_positions_reject_oversized_window():
    with pytest.raises(WindowLargerThanVolume):
        sliding_window_positions((60, 80, 64), (80, 80, 64), (48, 48, 32))


def test_positions_reject_zero_stride():
    with pytest.raises(InvalidConfig):
        sliding_window_positions((80, 80, 64), (80, 80, 64), (48, 0, 32))


def test_make_plan_pads_short_axes():
    plan = make_plan((6, 8, 8), window=(8, 8, 8), stride=(8, 8, 8))
    assert plan.padded
    assert plan.pad_before == (1, 0, 0) and plan.pad_after == (1, 0, 0)
    assert plan.padded_shape == (8, 8, 8)
    assert plan.positions == ((0, 0, 0),)


@settings(max_examples=40, deadline=None)
@given(
    dims=st.tuples(*[st.integers(4, 40)] * 3),
    frac=st.tuples(*[st.floats(0.2, 1.0)] * 3),
    sfrac=st.tuples(*[st.floats(0.2, 1.0)] * 3),
)
def test_every_voxel_covered(dims, frac, sfrac):
    window = tuple(max(1, int(dims[a] * frac[a])) for a in range(3))
    stride = tuple(max(1, int(window[a] * sfrac[a])) for a in range(3))
    plan = make_plan(dims, window, stride)
    count = np.zeros(dims, dtype=np.int32)
    for x, y, z in plan.positions:
        count[x:x + window[0], y:y + window[1], z:z + window[2]] += 1
    assert count.min() >= 1


# ----------------------------------------------------- window-level inference

def overlap_plan():
    # two windows along x sharing x in [4, 8)
    return make_plan((12, 8, 8), window=(8, 8, 8), stride=(4, 8, 8))


def test_constant_stub_unaffected_by_overlap():
    plan = overlap_plan()
    out = predict_windows(
        lambda origins, batch: np.full((len(origins), 8, 8, 8), 0.7, np.float32),
        [np.zeros((12, 8, 8), np.float32)], plan)
    assert out.shape == (12, 8, 8)
    assert np.allclose(out, 0.7, atol=1e-6)


def test_overlap_region_is_hand_mean():
    plan = overlap_plan()
    assert plan.positions == ((0, 0, 0), (4, 0, 0))

    def stub(origins, batch):
        vals = {0: 0.2, 4: 0.8}
        return np.stack(
            [np.full((8, 8, 8), vals[o[0]], np.float32) for o in origins]
        )

    out = predict_windows(stub, [np.zeros((12, 8, 8), np.float32)], plan)
    assert np.allclose(out[:4], 0.2, atol=1e-6)
    assert np.allclose(out[4:8], 0.5, atol=1e-6)   # mean of 0.2 and 0.8
    assert np.allclose(out[8:], 0.8, atol=1e-6)


def test_padded_plan_crops_back_to_volume_shape():
    plan = make_plan((6, 8, 8), window=(8, 8, 8), stride=(8, 8, 8))
    out = predict_windows(
        lambda origins, batch: np.full((len(origins), 8, 8, 8), 0.3, np.float32),
        [np.zeros((6, 8, 8), np.float32)], plan)
    assert out.shape == (6, 8, 8)
    assert np.allclose(out, 0.3, atol=1e-6)


def test_aggregate_stays_in_unit_interval():
    plan = overlap_plan()
    rng = np.random.default_rng(0)

    def stub(origins, batch):
        p = rng.uniform(size=(len(origins), 8, 8, 8)).astype(np.float32)
        p[:, 0, 0, 0] = 0.0
        p[:, 1, 0, 0] = 1.0
        return p

    out = predict_windows(stub, [np.zeros((12, 8, 8), np.float32)], plan)
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_channel_shape_disagreement_raises():
    plan = overlap_plan()
    with pytest.raises(ShapeMismatch):
        predict_windows(
            lambda o, b: np.zeros((len(o), 8, 8, 8), np.float32),
            [np.zeros((12, 8, 8), np.float32), np.zeros((12, 8, 4), np.float32)],
            plan)


def test_plan_volume_shape_mismatch_raises():
    plan = make_plan((12, 8, 8), window=(8, 8, 8), stride=(4, 8, 8))
    with pytest.raises(ShapeMismatch):
        predict_windows(
            lambda o, b: np.zeros((len(o), 8, 8, 8), np.float32),
            [np.zeros((10, 8, 8), np.float32)], plan)


# ------------------------------------------------------------ model inference

def test_constant_model_constant_probability():
    model = constant_model(1, 0.7)
    vol = np.random.default_rng(0).normal(size=(12, 8, 8)).astype(np.float32)
    out = predict_volume(model, [vol], window=(8, 8, 8), stride=(4, 8, 8))
    assert np.allclose(out, 0.7, atol=1e-6)


def test_channel_count_mismatch_rejected():
    model = constant_model(1, 0.5)
    with pytest.raises(ChannelMismatch):
        predict_volume(model, [np.zeros((8, 8, 8), np.float32)] * 2,
                       window=(8, 8, 8), stride=(8, 8, 8))


def test_single_window_equals_direct_forward():
    w = build_network(tiny_net(2), seed=3)
    rng = np.random.default_rng(1)
    chans = [rng.normal(size=(8, 8, 8)).astype(np.float32) for _ in range(2)]
    out = predict_volume(w, chans, window=(8, 8, 8), stride=(8, 8, 8))
    direct = forward(w, np.stack(chans)).probability().numpy()[0, 0]
    assert np.allclose(out, direct, atol=1e-6)


# ------------------------------------------------------------ channel recipes

def test_ct_recipe_single_unit_range_channel(dataset):
    chans = prepare_channels(StreamKind.CT, dataset[0])
    assert len(chans) == 1
    assert chans[0].min() >= -1.0 and chans[0].max() <= 1.0


def test_ef_recipe_appends_zscored_pet(dataset):
    chans = prepare_channels(StreamKind.EF, dataset[0])
    assert len(chans) == 2
    assert abs(float(chans[1].mean())) < 1e-4
    assert abs(float(chans[1].std()) - 1.0) < 1e-4


def test_ef_without_registered_pet_raises(dataset):
    case = dataclasses.replace(dataset[0], pet_reg=None)
    with pytest.raises(MissingRegisteredPET):
        prepare_channels(StreamKind.EF, case)


def test_lf_without_upstream_models_raises(dataset):
    with pytest.raises(MissingUpstreamModel):
        prepare_channels(StreamKind.LF, dataset[0], models=None)


def test_lf_constant_upstream_propagates(dataset):
    models = PipelineModels(constant_model(1, 0.5), constant_model(2, 0.5))
    chans = prepare_channels(StreamKind.LF, dataset[0], models,
                             window=(24, 24, 24), stride=(16, 16, 16))
    assert len(chans) == 3
    ct = load_volume(dataset[0].rtct)
    assert np.array_equal(chans[0], normalize_ct(ct.data))
    assert np.allclose(chans[1], 0.5, atol=1e-6)
    assert np.allclose(chans[2], 0.5, atol=1e-6)


def test_lf_channels_reproducible(dataset):
    models = PipelineModels(build_network(tiny_net(1), seed=1),
                            build_network(tiny_net(2), seed=2))
    kw = dict(window=(24, 24, 24), stride=(16, 16, 16))
    a = prepare_channels(StreamKind.LF, dataset[0], models, **kw)
    b = prepare_channels(StreamKind.LF, dataset[0], models, **kw)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca, cb)


# --------------------------------------------------------------- training

def test_train_pipeline_smoke_and_provenance(dataset):
    models = train_pipeline(dataset, tiny_net(), fast_train(), **FAST)
    models.validate()
    assert (models.ct_model.config.in_channels,
            models.ef_model.config.in_channels,
            models.lf_model.config.in_channels) == (1, 2, 3)
    prov = models.provenance
    assert set(prov["streams"]) == {"CT", "EF", "LF"}
    assert prov["cases"] == [c.case_id for c in dataset]
    assert len(prov["data_hash"]) == 64
    assert len(prov["histories"]["CT"]["train_loss"]) > 0


def test_upstream_weights_frozen_during_lf_training(dataset):
    cfg, tc = tiny_net(), fast_train()
    ct_w, _ = train_single_stream(StreamKind.CT, dataset, cfg, tc, **FAST)
    ef_w, _ = train_single_stream(StreamKind.EF, dataset, cfg, tc, **FAST)
    ct_before, ef_before = weights_digest(ct_w), weights_digest(ef_w)
    upstream = PipelineModels(ct_w, ef_w)
    train_single_stream(StreamKind.LF, dataset, cfg, tc, upstream=upstream, **FAST)
    assert weights_digest(ct_w) == ct_before
    assert weights_digest(ef_w) == ef_before


def test_stream_training_order_interchangeable(dataset):
    cfg, tc = tiny_net(), fast_train()
    ct_first, _ = train_single_stream(StreamKind.CT, dataset, cfg, tc, **FAST)
    ef_w, _ = train_single_stream(StreamKind.EF, dataset, cfg, tc, **FAST)
    ct_second, _ = train_single_stream(StreamKind.CT, dataset, cfg, tc, **FAST)
    assert weights_digest(ct_first) == weights_digest(ct_second)
    kw = dict(window=FAST["window"], stride=FAST["stride"])
    a = prepare_channels(StreamKind.LF, dataset[0], PipelineModels(ct_first, ef_w), **kw)
    b = prepare_channels(StreamKind.LF, dataset[0], PipelineModels(ct_second, ef_w), **kw)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca, cb)


@pytest.fixture(scope="module")
def dataset4(tmp_path_factory):
    """Four aligned phantom cases for cross-fitted training (two halves)."""
    root = tmp_path_factory.mktemp("fusion_cases4")
    spec = PhantomSpec(grid_shape=(48, 48, 48), spacing=(2.0, 2.0, 2.5),
                       misalignment_max_mm=0.0, translation_max_mm=0.0)
    manifest = generate_dataset(spec, 4, seed=13, out_dir=root)
    cases = load_manifest(manifest)
    for c in cases:
        c.pet_reg = c.pet
    save_manifest(cases, manifest)
    return load_manifest(manifest)


def test_crossfit_rejects_too_few_cases(dataset):
    with pytest.raises(InvalidConfig):
        crossfit_upstreams(dataset, tiny_net(), fast_train(), **FAST)
    with pytest.raises(InvalidConfig):
        train_pipeline(dataset, tiny_net(), fast_train(), lf_crossfit=True,
                       **FAST)


def test_crossfit_assigns_opposite_half_models(dataset4):
    per_case = crossfit_upstreams(dataset4, tiny_net(), fast_train(), **FAST)
    assert len(per_case) == len(dataset4)
    # even-indexed cases share one pair, odd-indexed the other
    assert per_case[0] is per_case[2]
    assert per_case[1] is per_case[3]
    assert per_case[0] is not per_case[1]
    assert weights_digest(per_case[0].ct_model) \
        != weights_digest(per_case[1].ct_model)


def test_crossfit_changes_only_the_lf_stream(dataset4):
    cfg, tc = tiny_net(), fast_train()
    plain = train_pipeline(dataset4, cfg, tc, **FAST)
    crossed = train_pipeline(dataset4, cfg, tc, lf_crossfit=True, **FAST)
    assert weights_digest(plain.ct_model) == weights_digest(crossed.ct_model)
    assert weights_digest(plain.ef_model) == weights_digest(crossed.ef_model)
    assert weights_digest(plain.lf_model) != weights_digest(crossed.lf_model)
    assert plain.provenance["lf_crossfit"] is False
    assert crossed.provenance["lf_crossfit"] is True


def test_crossfit_pipeline_deterministic(dataset4):
    cfg, tc = tiny_net(), fast_train()
    a = train_pipeline(dataset4, cfg, tc, lf_crossfit=True, **FAST)
    b = train_pipeline(dataset4, cfg, tc, lf_crossfit=True, **FAST)
    for kind in StreamKind:
        assert weights_digest(a.model_for(kind)) \
            == weights_digest(b.model_for(kind))


def test_lf_epochs_extends_only_the_lf_stream(dataset):
    models = train_pipeline(dataset, tiny_net(), fast_train(), lf_epochs=2,
                            **FAST)
    hist = models.provenance["histories"]
    assert len(hist["LF"]["train_loss"]) == 2 * len(hist["CT"]["train_loss"])
    assert len(hist["EF"]["train_loss"]) == len(hist["CT"]["train_loss"])
    assert models.provenance["lf_epochs"] == 2


def test_lf_epochs_default_matches_shared_epochs(dataset):
    models = train_pipeline(dataset, tiny_net(), fast_train(), **FAST)
    assert models.provenance["lf_epochs"] == fast_train().epochs
    with pytest.raises(InvalidConfig):
        train_pipeline(dataset, tiny_net(), fast_train(), lf_epochs=0, **FAST)


def test_unregistered_case_rejected(dataset):
    cases = [dataclasses.replace(dataset[0], pet_reg=None)]
    with pytest.raises(MissingRegisteredPET):
        train_pipeline(cases, tiny_net(), fast_train(), **FAST)


def test_empty_case_list_rejected():
    with pytest.raises(InvalidConfig):
        train_pipeline([], tiny_net(), fast_train(), **FAST)


# ------------------------------------------------------------- segmentation

def constant_pipeline(lf_prob: float) -> PipelineModels:
    return PipelineModels(constant_model(1, 0.5), constant_model(2, 0.5),
                          constant_model(3, lf_prob))


SEG_KW = dict(window=(24, 24, 24), stride=(16, 16, 16))


def test_subthreshold_probability_gives_empty_mask(dataset):
    res = segment_case(constant_pipeline(0.4), dataset[0], threshold=0.5, **SEG_KW)
    assert not res.lf_mask.any()
    assert np.allclose(res.prob_lf, 0.4, atol=1e-6)


def test_raising_threshold_never_grows_mask(dataset):
    models = PipelineModels(build_network(tiny_net(1), seed=1),
                            build_network(tiny_net(2), seed=2),
                            build_network(tiny_net(3), seed=3))
    low = segment_case(models, dataset[0], threshold=0.3, **SEG_KW)
    high = segment_case(models, dataset[0], threshold=0.6, **SEG_KW)
    assert not (high.lf_mask & ~low.lf_mask).any()


def test_segment_case_output_contract(dataset):
    res = segment_case(constant_pipeline(0.6), dataset[0], **SEG_KW)
    ct = load_volume(dataset[0].rtct)
    for prob in (res.prob_ct, res.prob_ef, res.prob_lf):
        assert prob.shape == ct.data.shape
        assert prob.min() >= 0.0 and prob.max() <= 1.0
    assert res.lf_mask.dtype == bool
    assert res.lf_mask.all()          # 0.6 >= default threshold 0.5
    assert res.spacing == ct.spacing and res.origin == ct.origin
    assert res.threshold == 0.5


def test_invalid_threshold_rejected(dataset):
    with pytest.raises(InvalidConfig):
        segment_case(constant_pipeline(0.5), dataset[0], threshold=1.5, **SEG_KW)


def test_incomplete_pipeline_rejected(dataset):
    incomplete = PipelineModels(constant_model(1, 0.5), constant_model(2, 0.5))
    with pytest.raises(InvalidConfig):
        segment_case(incomplete, dataset[0], **SEG_KW)
