"""Closed-form parameter counts, without allocating any network.

Two layouts are covered:

* desk models as built by :mod:`resprobe.nn` (shape-preserving blocks,
  separate transition layers), optionally with tied blocks;
* the reference full-size networks, where a stage change happens inside
  the first block of the new stage (its first convolution changes the
  channel count and a 1x1 projection with bias carries the skip path).

Batch-norm layers count two trainable values per channel (gamma, beta);
``include_bn_statistics`` adds the two running statistics, matching the
bookkeeping of frameworks that report non-trainable weights too.
"""
from __future__ import annotations

from dataclasses import dataclass

from .nn import ArchitectureConfig


def conv_params(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return k * k * c_in * c_out + (c_out if bias else 0)


def bn_params(c: int, include_bn_statistics: bool = False) -> int:
    return (4 if include_bn_statistics else 2) * c


def block_conv_params(c: int) -> int:
    return 2 * conv_params(c, c, 3)


def block_bn_params(c: int) -> int:
    return 2 * bn_params(c)


def count_desk_parameters(config: ArchitectureConfig, share_from: int | None = None, bn_mode: str | None = None) -> int:
    """Trainable parameters of ``build_model`` / ``build_shared_model``.

    With ``share_from`` set, blocks ``share_from..n-1`` of every stage use
    one weight set.  ``bn_mode`` selects how batch norm is handled across
    the tied applications: ``naive`` (one BN pair), ``unshared_stats``
    (one affine pair, statistics per step) or ``ubn_full`` (affine pair per
    step).
    """
    total = conv_params(config.input_shape[0], config.stem_channels, 3)
    prev = None
    for n, c in config.stages:
        if prev is not None and config.shortcut == "conv1x1":
            total += conv_params(prev, c, 1)
        prev = c
        if share_from is None or share_from >= n:
            total += n * (block_conv_params(c) + block_bn_params(c))
            continue
        tied = n - share_from
        total += (share_from + 1) * block_conv_params(c)
        total += share_from * block_bn_params(c)
        if bn_mode == "ubn_full":
            total += tied * block_bn_params(c)
        elif bn_mode in ("naive", "unshared_stats"):
            total += block_bn_params(c)
        else:
            raise ValueError(f"unknown bn_mode {bn_mode!r}")
    c_last = config.stages[-1][1]
    total += bn_params(c_last) + c_last * config.num_classes + config.num_classes
    return total


@dataclass(frozen=True)
class ReferenceArchitecture:
    stem_channels: int
    stages: tuple  # ((blocks, channels), ...)
    transition: str  # "projection" | "pool" | "none"
    in_channels: int = 3


# Block counts per stage as they must be read to reproduce the reported
# totals; for the wide network stages 2 and 3 carry an extra transition block.
REFERENCE_ARCHITECTURES = {
    "original": ReferenceArchitecture(16, ((18, 16), (18, 32), (18, 64)), "projection"),
    "single_repr": ReferenceArchitecture(100, ((10, 100),), "none"),
    "avg_pool": ReferenceArchitecture(150, ((10, 150), (10, 150), (10, 150)), "pool"),
    "wide": ReferenceArchitecture(16, ((4, 160), (5, 320), (5, 640)), "projection"),
}


def resnet_depth_architecture(depth: int) -> ReferenceArchitecture:
    """CIFAR-style Resnet-<depth> (6n+2 layers, three stages of n blocks)."""
    if (depth - 2) % 6:
        raise ValueError(f"depth {depth} is not of the form 6n+2")
    n = (depth - 2) // 6
    return ReferenceArchitecture(16, ((n, 16), (n, 32), (n, 64)), "projection")


def count_reference_parameters(
    arch: ReferenceArchitecture | str,
    num_classes: int = 10,
    include_bn_statistics: bool = True,
    share_from: int | None = None,
) -> int:
    """Parameter total of a full-size network.

    ``share_from`` ties blocks ``share_from..n-1`` of each stage while every
    application keeps its own batch-norm layers (unshared batch norm).
    """
    if isinstance(arch, str):
        arch = REFERENCE_ARCHITECTURES[arch]
    bn = lambda c: bn_params(c, include_bn_statistics)  # noqa: E731
    total = conv_params(arch.in_channels, arch.stem_channels, 3)
    prev = arch.stem_channels
    for n, c in arch.stages:
        distinct = n if share_from is None else min(n, share_from + 1)
        for b in range(n):
            c_in = prev if b == 0 else c
            total += bn(c_in) + bn(c)
            if b < distinct:
                total += conv_params(c_in, c, 3) + conv_params(c, c, 3)
                if b == 0 and c_in != c and arch.transition == "projection":
                    total += conv_params(c_in, c, 1)
        prev = c
    total += bn(prev) + prev * num_classes + num_classes
    return total
