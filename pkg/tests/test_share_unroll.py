import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resprobe.counting import count_desk_parameters
from resprobe.data import synthetic_clusters
from resprobe.gradcheck import shared_accumulation_error
from resprobe.nn import ArchitectureConfig, build_model, forward_collect, single_repr_config
from resprobe.probes import block_sweep
from resprobe.share_unroll import (
    SharingSpec,
    UnrollSpec,
    activation_explosion_probe,
    build_shared_model,
    shared_span,
    unroll_last_block,
    unroll_metrics,
)
from resprobe.train import OptimizerState, TrainConfig, train_epoch

CFG = ArchitectureConfig("original", [(4, 3), (4, 4)], 3, (1, 4, 4), 3, "conv1x1")


@pytest.fixture
def data():
    return synthetic_clusters(6, 3, (1, 4, 4), 2.0, seed=1)


@pytest.mark.parametrize("mode", ["naive", "unshared_stats", "ubn_full"])
def test_tying_structure(mode):
    m = build_shared_model(CFG, SharingSpec(2, mode), seed=0)
    base = build_model(CFG, seed=0)
    for s, stage in enumerate(m.stages):
        assert stage.blocks[2] is stage.blocks[3]
        assert stage.blocks[0] is not stage.blocks[1]
        assert stage.steps == ([None] * 4 if mode == "naive" else [None, None, 0, 1])
        np.testing.assert_array_equal(stage.blocks[0].conv1.weight.data, base.stages[s].blocks[0].conv1.weight.data)
    bn = m.stages[0].blocks[2].bn1
    if mode == "naive":
        assert bn.step_banks is None
    elif mode == "unshared_stats":
        assert all(b.gamma is bn.gamma for b in bn.step_banks)
        assert bn.step_banks[0].running_mean is not bn.step_banks[1].running_mean
    else:
        assert bn.step_banks[0].gamma is not bn.step_banks[1].gamma
        np.testing.assert_array_equal(bn.step_banks[1].gamma.data, 0.1)
    assert m.parameter_count() == count_desk_parameters(CFG, 2, mode) < base.parameter_count()
    assert shared_span(m, 1) == [6, 7]


@pytest.mark.parametrize("mode", ["naive", "unshared_stats", "ubn_full"])
def test_share_from_stage_length_is_unshared(mode, data):
    m = build_shared_model(CFG, SharingSpec(4, mode), seed=5)
    base = build_model(CFG, seed=5)
    assert m.parameter_count() == base.parameter_count()
    np.testing.assert_array_equal(m.logits(data.images), base.logits(data.images))


@pytest.mark.parametrize(
    "spec, match",
    [(SharingSpec(5), "beyond"), (SharingSpec(0), ">= 1"), (SharingSpec(2, "bogus"), "bn_mode"), (SharingSpec([2]), "lists")],
)
def test_sharing_validation(spec, match):
    with pytest.raises(ValueError, match=match):
        build_shared_model(CFG, spec)


@pytest.mark.parametrize("mode", ["naive", "unshared_stats", "ubn_full"])
def test_shared_gradients_accumulate_over_applications(mode, rng):
    m = build_shared_model(CFG, SharingSpec(1, mode), seed=0)
    x = rng.normal(size=(4, 1, 4, 4))
    y = rng.integers(3, size=4)
    assert shared_accumulation_error(m, x, y) < 1e-10


def test_per_step_statistics_after_training(data):
    m = build_shared_model(CFG, SharingSpec(2, "unshared_stats"), seed=0)
    train_epoch(m, data, TrainConfig(batch_size=9, seed=0), 0, OptimizerState.zeros_like(m.named_parameters()))
    banks = m.stages[0].blocks[2].bn2.step_banks
    assert not np.allclose(banks[0].running_mean, banks[1].running_mean)


def test_explosion_probe_identity_blocks_give_unit_growth(rng):
    m = build_model(CFG, seed=0)
    for stage in m.stages:
        for blk in stage.blocks:
            blk.conv2.weight.data[...] = 0
            blk.conv2.bias.data[...] = 0
    rep = activation_explosion_probe(m, rng.normal(size=(5, 1, 4, 4)))
    np.testing.assert_allclose(rep.growth, 1.0)
    assert len(rep.norms) == m.n_blocks + 1


def test_explosion_growth_matches_hand_computation(rng):
    m = build_shared_model(CFG, SharingSpec(1, "naive"), seed=0)
    x = rng.normal(size=(5, 1, 4, 4))
    rep = activation_explosion_probe(m, x)
    _, hs, fs = forward_collect(m, x, "batch")
    nrm = lambda a: np.linalg.norm(a.reshape(5, -1), axis=1).mean()  # noqa: E731
    want = (nrm(hs[3].data + fs[3].data) / nrm(hs[1].data)) ** (1 / 3)
    assert rep.growth[0] == pytest.approx(want)


def test_unroll_zero_steps_is_bit_exact(data):
    m = build_model(single_repr_config(3, 3, (1, 4, 4), 3), seed=2)
    u = unroll_last_block(m, UnrollSpec(0, 0.5))
    assert np.array_equal(u.logits(data.images), m.logits(data.images))


def test_unroll_requires_calibration(data):
    m = build_model(single_repr_config(2, 3, (1, 4, 4), 3), seed=2)
    u = unroll_last_block(m, UnrollSpec(2, 0.5))
    with pytest.raises(RuntimeError, match="calibrate"):
        u.logits(data.images)


@settings(max_examples=10, deadline=None)
@given(steps=st.integers(1, 4), seed=st.integers(0, 50))
def test_unroll_tiny_alpha_is_near_identity(steps, seed):
    data = synthetic_clusters(4, 3, (1, 4, 4), 2.0, seed=seed)
    m = build_model(single_repr_config(2, 3, (1, 4, 4), 3), seed=seed)
    u = unroll_last_block(m, UnrollSpec(steps, 1e-9), data)
    np.testing.assert_allclose(u.logits(data.images), m.logits(data.images), atol=1e-6)


def test_calibration_matches_batch_statistics(data):
    m = build_model(single_repr_config(2, 3, (1, 4, 4), 3), seed=0)
    u = unroll_last_block(m, UnrollSpec(1, 0.5), data, batch_size=len(data))
    _, hs, fs = forward_collect(m, data.images, "eval")
    z = hs[1].data + fs[1].data
    bn1 = u.banks[0][0]
    np.testing.assert_allclose(bn1.running_mean, z.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn1.running_var, z.var(axis=(0, 2, 3), ddof=1))
    # batch-weighted averaging over uneven batches gives the same means
    u2 = unroll_last_block(m, UnrollSpec(1, 0.5), data, batch_size=7)
    np.testing.assert_allclose(u2.banks[0][0].running_mean, bn1.running_mean)


def test_unroll_step0_cosine_matches_probe_and_rows(data):
    m = build_model(single_repr_config(3, 3, (1, 4, 4), 3), seed=0)
    u = unroll_last_block(m, UnrollSpec(0, 0.5))
    rows = unroll_metrics(u, data)
    all0 = [r for r in rows if r["group"] == "all"][0]
    assert all0["cosine"] == pytest.approx(block_sweep(m, data)["cosine_loss"][2].value, abs=1e-12)
    rows = unroll_metrics(unroll_last_block(m, UnrollSpec(3, 0.5), data), data)
    assert len(rows) == 3 * 4
    assert {r["group"] for r in rows} == {"borderline", "correct", "all"}


def test_unroll_spec_validation():
    with pytest.raises(ValueError):
        UnrollSpec(-1).validate()
    with pytest.raises(ValueError):
        UnrollSpec(2, 0.0).validate()
    assert not math.isnan(SharingSpec().gamma)
