import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from resprobe.autodiff import Tensor
from resprobe.data import synthetic_clusters
from resprobe.nn import build_model, single_repr_config
from resprobe.train import (
    REFERENCE_SCHEDULE,
    NonFiniteGradient,
    OptimizerState,
    TrainConfig,
    augment_batch,
    evaluate,
    log_softmax,
    lr_at,
    scaled_schedule,
    sgd_momentum_step,
    train_epoch,
)


def test_lr_schedule_lookup():
    assert lr_at(REFERENCE_SCHEDULE, 0) == 0.1
    assert lr_at(REFERENCE_SCHEDULE, 39) == 0.1
    assert lr_at(REFERENCE_SCHEDULE, 40) == 0.02
    assert lr_at(REFERENCE_SCHEDULE, 79) == 0.004
    assert lr_at(REFERENCE_SCHEDULE, 500) == 0.0008


@given(st.integers(1, 200))
def test_scaled_schedule_is_monotone_and_keeps_rates(total):
    sched = scaled_schedule(REFERENCE_SCHEDULE, total, 100)
    untils = [u for u, _ in sched]
    assert all(b > a for a, b in zip(untils, untils[1:]))
    assert math.isinf(untils[-1])
    assert {lr for _, lr in sched} <= {lr for _, lr in REFERENCE_SCHEDULE}
    assert lr_at(sched, 0) == 0.1


def test_sgd_momentum_matches_hand_recursion():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = OptimizerState.zeros_like(p)
    grads = [np.array([0.5, 1.0]), np.array([-1.0, 0.25])]
    w, v = np.array([1.0, -2.0]), np.zeros(2)
    for g in grads:
        sgd_momentum_step(p, {"w": g}, state, 0.1, 0.9)
        v = 0.9 * v + g
        w = w - 0.1 * v
    np.testing.assert_allclose(p["w"].data, w)


def test_sgd_rejects_non_finite():
    p = {"w": Tensor(np.zeros(2))}
    with pytest.raises(NonFiniteGradient, match="w"):
        sgd_momentum_step(p, {"w": np.array([np.nan, 0.0])}, OptimizerState.zeros_like(p), 0.1, 0.9)


def test_train_config_validation():
    with pytest.raises(ValueError, match="increasing"):
        TrainConfig(lr_schedule=[(10, 0.1), (5, 0.01)]).validate()
    with pytest.raises(ValueError, match="momentum"):
        TrainConfig(momentum=1.0).validate()


def test_augmentation_independent_of_batch_composition(rng):
    imgs = rng.normal(size=(6, 2, 5, 5))
    cfg = TrainConfig(flip=True, translate_pixels=2, seed=3)
    full = augment_batch(imgs, np.arange(6), cfg, epoch=1)
    part = augment_batch(imgs[[4, 1]], np.array([4, 1]), cfg, epoch=1)
    np.testing.assert_array_equal(part, full[[4, 1]])
    assert augment_batch(imgs, np.arange(6), TrainConfig(), 0) is imgs


def test_log_softmax_rows_normalised(rng):
    z = rng.normal(size=(5, 4)) * 50
    np.testing.assert_allclose(np.exp(log_softmax(z)).sum(axis=1), 1.0)


def test_training_reduces_loss_and_is_deterministic():
    data = synthetic_clusters(20, 3, (1, 4, 4), 4.0, seed=0)
    cfg = TrainConfig(epochs=3, batch_size=16, lr_schedule=[(math.inf, 0.05)], seed=0)

    def run():
        m = build_model(single_repr_config(2, 4, (1, 4, 4), 3), seed=0)
        state = OptimizerState.zeros_like(m.named_parameters())
        before = evaluate(m, data)[0]
        for e in range(cfg.epochs):
            train_epoch(m, data, cfg, e, state)
        return before, evaluate(m, data)[0], m.state_snapshot()

    b1, a1, s1 = run()
    b2, a2, s2 = run()
    assert a1 < b1
    assert a1 == a2
    for k in s1:
        np.testing.assert_array_equal(s1[k], s2[k])
