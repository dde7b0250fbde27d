import pytest
from hypothesis import given, strategies as st

from resprobe.counting import (
    REFERENCE_ARCHITECTURES,
    count_desk_parameters,
    count_reference_parameters,
    resnet_depth_architecture,
)
from resprobe.nn import ArchitectureConfig
from resprobe.share_unroll import SharingSpec, build_shared_model


def _layers_oracle(depth, share_from=None, stats=True):
    """Enumerate every layer of a CIFAR ResNet-<depth> explicitly."""
    n = (depth - 2) // 6
    per_bn = 4 if stats else 2
    layers = [("conv", 3 * 3 * 3 * 16 + 16)]
    prev = 16
    for c in (16, 32, 64):
        for b in range(n):
            cin = prev if b == 0 else c
            layers += [("bn", per_bn * cin), ("bn", per_bn * c)]
            if share_from is None or b <= share_from:
                layers += [("conv", 9 * cin * c + c), ("conv", 9 * c * c + c)]
                if b == 0 and cin != c:
                    layers.append(("conv", cin * c + c))
        prev = c
    layers += [("bn", per_bn * 64), ("fc", 64 * 10 + 10)]
    return sum(p for _, p in layers)


def test_wide_family_total():
    assert count_reference_parameters("wide") == 45_732_842


def test_resnet110_ubn_in_reported_band():
    total = count_reference_parameters(resnet_depth_architecture(110), share_from=5, include_bn_statistics=False)
    assert 570_000 <= total <= 576_000


@pytest.mark.parametrize("share_from", [None, 0, 3, 5, 17])
@pytest.mark.parametrize("stats", [True, False])
def test_reference_counts_match_layer_enumeration(share_from, stats):
    arch = resnet_depth_architecture(110)
    assert count_reference_parameters(arch, include_bn_statistics=stats, share_from=share_from) == _layers_oracle(
        110, share_from, stats
    )


def test_original_family_total():
    assert count_reference_parameters("original") == 1_742_762


def test_bad_depth_rejected():
    with pytest.raises(ValueError):
        resnet_depth_architecture(100)


def test_sharing_strictly_reduces_reference_count():
    full = count_reference_parameters("original")
    assert count_reference_parameters("original", share_from=5) < full
    assert set(REFERENCE_ARCHITECTURES) == {"original", "single_repr", "avg_pool", "wide"}


@given(
    n=st.integers(2, 5),
    c=st.integers(1, 4),
    share_from=st.integers(1, 5),
    mode=st.sampled_from(["naive", "unshared_stats", "ubn_full"]),
)
def test_desk_shared_counts_match_allocation(n, c, share_from, mode):
    share_from = min(share_from, n)
    cfg = ArchitectureConfig("original", [(n, c), (n, c)], c, (1, 4, 4), 3, "conv1x1")
    m = build_shared_model(cfg, SharingSpec(share_from, mode), seed=0)
    assert m.parameter_count() == count_desk_parameters(cfg, share_from, mode)
    if share_from <= n - 2:  # at least two applications of the tied block
        assert m.parameter_count() < count_desk_parameters(cfg)
    else:
        assert m.parameter_count() == count_desk_parameters(cfg)
