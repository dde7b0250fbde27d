import dataclasses

import numpy as np
import pytest

from resprobe.autodiff import OPS
from resprobe.gradcheck import check_first_layer_identity, check_primitives, run_gradcheck


def _corrupt(monkeypatch, kind, factor=1.01):
    op = OPS[kind]
    good = op.backward

    def bad(ctx, g, needs):
        return tuple(None if gi is None else gi * factor for gi in good(ctx, g, needs))

    monkeypatch.setitem(OPS, kind, dataclasses.replace(op, backward=bad))


@pytest.mark.parametrize("kind", ["batchnorm", "conv2d", "relu", "softmax_cross_entropy"])
def test_fault_injection_is_caught_and_named(monkeypatch, kind):
    _corrupt(monkeypatch, kind)
    failures = [r.name for r in check_primitives(0) if not r.passed]
    assert failures and all(kind in name for name in failures)


def test_batchnorm_fault_fails_whole_suite(monkeypatch):
    _corrupt(monkeypatch, "batchnorm", 0.9)
    rep = run_gradcheck(seed=0)
    assert not rep.passed
    names = [r.name for r in rep.failures]
    assert any("batchnorm" in n for n in names)
    assert "FAIL primitive:batchnorm" in rep.text()


def test_clean_suite_passes():
    rep = run_gradcheck(seed=2)
    assert rep.passed, rep.text()
    assert rep.max_error() < 1e-4
    assert np.isfinite(rep.seconds)


def test_identity_exact_for_larger_eta():
    # the stem is linear in its parameters, so exactness does not depend on the step size
    assert check_first_layer_identity(seed=1, pairs=3, eta=1e-3).passed
