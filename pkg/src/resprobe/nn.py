"""Residual networks built on the autodiff primitives.

A model is a stem convolution, one or more stages of shape-preserving
residual blocks (BN -> ReLU -> Conv -> BN -> ReLU -> Conv), a transition
between stages (strided 1x1 convolution or 2x2 average pooling) and a
classifier head (BN -> ReLU -> global average pool -> flatten -> dense).
Blocks are numbered globally, 0..n_blocks-1, across stages.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FAMILIES = ("original", "single_repr", "avg_pool", "wide")
SHORTCUTS = ("conv1x1", "pool", "none")
MODES = ("train", "eval", "batch")


@dataclass
class ArchitectureConfig:
    family: str = "single_repr"
    stages: list = field(default_factory=lambda: [(8, 16)])
    stem_channels: int = 16
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    shortcut: str = "none"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.shortcut not in SHORTCUTS:
            raise ValueError(f"unknown shortcut {self.shortcut!r}")
        if not self.stages:
            raise ValueError("at least one stage is required")
        for n, c in self.stages:
            if n < 1 or c < 1:
                raise ValueError(f"stage ({n}, {c}) needs positive block count and channels")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.family == "single_repr":
            if len(self.stages) != 1 or self.shortcut != "none":
                raise ValueError("single_repr has exactly one stage and no shortcut")
        elif self.family == "avg_pool":
            if self.shortcut != "pool":
                raise ValueError("avg_pool family uses 2x2 average pooling between stages")
        elif self.shortcut != "conv1x1":
            raise ValueError(f"{self.family} family uses 1x1 convolution shortcuts")
        if self.stem_channels != self.stages[0][1]:
            raise ValueError(
                f"inconsistent channel chain: stem has {self.stem_channels} channels, "
                f"first stage expects {self.stages[0][1]}"
            )
        if self.shortcut in ("pool", "none"):
            for i, (_, c) in enumerate(self.stages[1:], 1):
                if c != self.stages[i - 1][1]:
                    raise ValueError(
                        f"inconsistent channel chain: stage {i} has {c} channels but a "
                        f"{self.shortcut} transition cannot change {self.stages[i - 1][1]}"
                    )
        _, h, w = self.input_shape
        if h != w:
            raise ValueError("input must be square")
        if h % (2 ** (len(self.stages) - 1)):
            raise ValueError(f"spatial extent {h} cannot be halved {len(self.stages) - 1} times")

    @property
    def n_blocks(self) -> int:
        return sum(n for n, _ in self.stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def single_repr_config(blocks=8, channels=16, input_shape=(3, 32, 32), num_classes=10) -> ArchitectureConfig:
    return ArchitectureConfig("single_repr", [(blocks, channels)], channels, tuple(input_shape), num_classes, "none")


# ---------------------------------------------------------------------------
# layers


@dataclass
class BNBank:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


class BatchNormState:
    """Per-channel normalisation state, optionally with one bank per unroll step.

    Without banks the layer uses ``gamma``/``beta``/running statistics
    directly.  With ``step_banks`` every call must name a step; banks may
    share the affine tensors (statistics-only unsharing) or own them.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, gamma_init: float = 1.0):
        dt = ad.get_default_dtype()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.full(channels, gamma_init, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.step_banks: list[BNBank] | None = None

    def add_step_banks(self, n: int, share_affine: bool, gamma_init: float | None = None) -> None:
        dt = ad.get_default_dtype()
        banks = []
        for _ in range(n):
            if share_affine:
                g, b = self.gamma, self.beta
            else:
                gval = self.gamma.data.copy() if gamma_init is None else np.full(self.channels, gamma_init, dt)
                g = Tensor(gval, requires_grad=True)
                b = Tensor(self.beta.data.copy(), requires_grad=True)
            banks.append(BNBank(g, b, self.running_mean.copy(), self.running_var.copy()))
        self.step_banks = banks

    def bank(self, step_index: int | None) -> BNBank:
        if self.step_banks is None:
            if step_index is not None:
                raise ValueError("step_index given but this batchnorm has no step banks")
            return BNBank(self.gamma, self.beta, self.running_mean, self.running_var)
        if step_index is None:
            raise ValueError("step_index is required when step banks are present")
        if not 0 <= step_index < len(self.step_banks):
            raise ValueError(f"step_index {step_index} out of range [0, {len(self.step_banks)})")
        return self.step_banks[step_index]

    def _set_stats(self, step_index, mean, var) -> None:
        if self.step_banks is None:
            self.running_mean, self.running_var = mean, var
        else:
            bank = self.step_banks[step_index]
            bank.running_mean, bank.running_var = mean, var


def batchnorm_forward(state: BatchNormState, x: Tensor, mode: str, step_index: int | None = None) -> Tensor:
    """Normalise ``x`` per channel.

    ``train`` uses batch statistics and folds them into the selected
    bank's running statistics; ``batch`` uses batch statistics without
    touching state; ``eval`` uses the running statistics only.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[1] != state.channels:
        raise ValueError(f"batchnorm expects {state.channels} channels, got {x.shape[1]}")
    bank = state.bank(step_index)
    if mode == "eval":
        attrs = {"mode": "fixed", "mean": bank.running_mean, "var": bank.running_var, "eps": state.eps}
        return ad.forward_op("batchnorm", [x, bank.gamma, bank.beta], attrs)
    out = ad.forward_op("batchnorm", [x, bank.gamma, bank.beta], {"mode": "batch", "eps": state.eps})
    if mode == "train":
        axes = (0, 2, 3) if x.data.ndim == 4 else (0,)
        m = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes) * (m / (m - 1))
        mom = state.momentum
        state._set_stats(
            step_index,
            (1 - mom) * bank.running_mean + mom * mean,
            (1 - mom) * bank.running_var + mom * var,
        )
    return out


class Conv:
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
        fan_in = c_in * k * k
        dt = ad.get_default_dtype()
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)).astype(dt)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dt), requires_grad=True)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        dt = ad.get_default_dtype()
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)).astype(dt), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dt), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


def _relu(x: Tensor, relu_log: list | None) -> Tensor:
    if relu_log is not None:
        relu_log.append(x.data > 0)
    return ad.relu(x)


class ResidualBlock:
    """Shape-preserving residual branch F; the skip connection is added by the caller."""

    def __init__(self, channels: int, rng: np.random.Generator, momentum=0.1, eps=1e-5, gamma_init=1.0):
        self.channels = channels
        self.bn1 = BatchNormState(channels, momentum, eps, gamma_init)
        self.conv1 = Conv(channels, channels, 3, rng)
        self.bn2 = BatchNormState(channels, momentum, eps, gamma_init)
        self.conv2 = Conv(channels, channels, 3, rng)

    def __call__(self, h: Tensor, mode: str, step_index: int | None = None, relu_log: list | None = None) -> Tensor:
        return residual_branch(self, h, mode, self.bn1, self.bn2, step_index, relu_log)

    def batchnorms(self):
        return (("bn1", self.bn1), ("bn2", self.bn2))

    def convs(self):
        return (("conv1", self.conv1), ("conv2", self.conv2))


def residual_branch(
    block: ResidualBlock,
    h: Tensor,
    mode: str,
    bn1: BatchNormState,
    bn2: BatchNormState,
    step_index: int | None = None,
    relu_log: list | None = None,
    bn_log: list | None = None,
) -> Tensor:
    """F(h) with the block's convolutions and the given normalisation states.

    ``bn_log`` collects (mean, unbiased var) of each normalisation input.
    """
    if h.shape[1] != block.channels:
        raise ValueError(f"block expects {block.channels} channels, got {h.shape[1]}")

    def norm(bn, x):
        if bn_log is not None:
            m = x.data.size // x.shape[1]
            bn_log.append((x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3)) * (m / (m - 1))))
        return _relu(batchnorm_forward(bn, x, mode, step_index), relu_log)

    a = block.conv1(norm(bn1, h))
    return block.conv2(norm(bn2, a))


@dataclass
class Stage:
    blocks: list  # ResidualBlock objects, repeated when weights are tied
    steps: list  # step index into the block's BN banks, or None


class Model:
    def __init__(self, config: ArchitectureConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.sharing = None
        rng = np.random.default_rng(seed)
        mom, eps = config.bn_momentum, config.bn_eps
        c_in = config.input_shape[0]
        self.stem = Conv(c_in, config.stem_channels, 3, rng)
        self.stages: list[Stage] = []
        self.shortcuts: list[Conv | None] = []
        for s, (n, c) in enumerate(config.stages):
            if s > 0:
                prev = config.stages[s - 1][1]
                self.shortcuts.append(Conv(prev, c, 1, rng, stride=2) if config.shortcut == "conv1x1" else None)
            blocks = [ResidualBlock(c, rng, mom, eps) for _ in range(n)]
            self.stages.append(Stage(blocks, [None] * n))
        c_last = config.stages[-1][1]
        self.head_bn = BatchNormState(c_last, mom, eps)
        self.fc = Dense(c_last, config.num_classes, rng)
        self.positions = [(s, j) for s, st in enumerate(self.stages) for j in range(len(st.blocks))]

    # -- structure -------------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self.positions)

    def stage_of(self, block_index: int) -> int:
        self._check_block(block_index)
        return self.positions[block_index][0]

    def stage_blocks(self, stage: int) -> list[int]:
        return [i for i, (s, _) in enumerate(self.positions) if s == stage]

    def final_stage_blocks(self) -> list[int]:
        return self.stage_blocks(len(self.stages) - 1)

    def _check_block(self, i: int) -> None:
        if not 0 <= i < self.n_blocks:
            raise IndexError(f"block index {i} out of range [0, {self.n_blocks})")

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors under stable names; tied tensors appear once."""
        out: dict[str, Tensor] = {}
        seen: set[int] = set()

        def put(name, t):
            if id(t) not in seen:
                seen.add(id(t))
                out[name] = t

        put("stem.weight", self.stem.weight)
        put("stem.bias", self.stem.bias)
        for s, stage in enumerate(self.stages):
            if s > 0 and self.shortcuts[s - 1] is not None:
                sc = self.shortcuts[s - 1]
                put(f"shortcut{s}.weight", sc.weight)
                put(f"shortcut{s}.bias", sc.bias)
            for j, blk in enumerate(stage.blocks):
                pre = f"stage{s}.block{j}"
                for bname, bn in blk.batchnorms():
                    if not bn.step_banks or bn.step_banks[0].gamma is bn.gamma:
                        put(f"{pre}.{bname}.gamma", bn.gamma)
                        put(f"{pre}.{bname}.beta", bn.beta)
                    for k, bank in enumerate(bn.step_banks or []):
                        put(f"{pre}.{bname}.step{k}.gamma", bank.gamma)
                        put(f"{pre}.{bname}.step{k}.beta", bank.beta)
                for cname, conv in blk.convs():
                    put(f"{pre}.{cname}.weight", conv.weight)
                    put(f"{pre}.{cname}.bias", conv.bias)
        put("head.bn.gamma", self.head_bn.gamma)
        put("head.bn.beta", self.head_bn.beta)
        put("head.fc.weight", self.fc.weight)
        put("head.fc.bias", self.fc.bias)
        return out

    def batchnorm_states(self) -> dict[str, BatchNormState]:
        out: dict[str, BatchNormState] = {}
        seen: set[int] = set()
        for s, stage in enumerate(self.stages):
            for j, blk in enumerate(stage.blocks):
                for bname, bn in blk.batchnorms():
                    if id(bn) not in seen:
                        seen.add(id(bn))
                        out[f"stage{s}.block{j}.{bname}"] = bn
        out["head.bn"] = self.head_bn
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bn in self.batchnorm_states().items():
            if bn.step_banks is None:
                out[f"{name}.running_mean"] = bn.running_mean
                out[f"{name}.running_var"] = bn.running_var
            else:
                for k, bank in enumerate(bn.step_banks):
                    out[f"{name}.step{k}.running_mean"] = bank.running_mean
                    out[f"{name}.step{k}.running_var"] = bank.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        stem, _, field_name = name.rpartition(".")
        step = None
        if ".step" in stem and stem.rsplit(".", 1)[1].startswith("step"):
            stem, step_tag = stem.rsplit(".", 1)
            step = int(step_tag[4:])
        bn = self.batchnorm_states()[stem]
        if step is None:
            setattr(bn, field_name, value)
        else:
            setattr(bn.step_banks[step], field_name, value)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.named_parameters().values()))

    def state_snapshot(self) -> dict[str, np.ndarray]:
        snap = {k: v.data.copy() for k, v in self.named_parameters().items()}
        snap.update({k: v.copy() for k, v in self.named_buffers().items()})
        return snap

    # -- forward pieces ----------------------------------------------------

    def stem_output_shape(self) -> tuple:
        _, h, w = self.config.input_shape
        return (self.config.stem_channels, h, w)

    def stem_forward(self, x: Tensor) -> Tensor:
        return self.stem(x)

    def block_forward(self, i: int, h: Tensor, mode: str, relu_log: list | None = None) -> Tensor:
        s, j = self.positions[i]
        stage = self.stages[s]
        return stage.blocks[j](h, mode, stage.steps[j], relu_log)

    def transition(self, stage: int, h: Tensor) -> Tensor:
        """Map the output of ``stage`` into the input space of ``stage + 1``."""
        if self.config.shortcut == "conv1x1":
            return self.shortcuts[stage](h)
        if self.config.shortcut == "pool":
            return ad.avg_pool2d(h, 2)
        raise ValueError("model has no transitions")

    def head_forward(self, h: Tensor, mode: str, relu_log: list | None = None) -> Tensor:
        a = _relu(batchnorm_forward(self.head_bn, h, mode), relu_log)
        a = ad.avg_pool2d(a, a.shape[2])
        return self.fc(ad.flatten(a))

    def is_stage_end(self, i: int) -> bool:
        s, j = self.positions[i]
        return j == len(self.stages[s].blocks) - 1 and s < len(self.stages) - 1

    def run_from(self, i: int, h: Tensor, mode: str, relu_log: list | None = None, skip: int | None = None) -> Tensor:
        """Logits of the downstream network fed with ``h`` entering block ``i``.

        ``i == n_blocks`` feeds the head directly.
        """
        for k in range(i, self.n_blocks):
            if k != skip:
                h = ad.add(h, self.block_forward(k, h, mode, relu_log))
            if self.is_stage_end(k):
                h = self.transition(self.positions[k][0], h)
        return self.head_forward(h, mode, relu_log)

    def run_after(self, i: int, z: Tensor, mode: str, relu_log: list | None = None) -> Tensor:
        """Logits of the network downstream of block ``i``, fed with its output ``z``."""
        self._check_block(i)
        if self.is_stage_end(i):
            z = self.transition(self.positions[i][0], z)
        return self.run_from(i + 1, z, mode, relu_log)

    def logits(self, x, mode: str = "eval") -> np.ndarray:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.run_from(0, self.stem_forward(x), mode).data


def build_model(config: ArchitectureConfig, seed: int = 0) -> Model:
    """He-normal weights, zero biases, gamma=1 and beta=0; deterministic in ``seed``."""
    return Model(config, seed)


def forward_collect(model: Model, batch, mode: str, retain: bool = False):
    """Forward pass returning (logits, h, F).

    ``h[i]`` enters block i and ``F[i]`` is that block's residual output;
    ``h[n_blocks]`` is the representation fed to the head.  With
    ``retain=True`` (inside a Tape) every ``h[i]`` keeps its gradient.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if tuple(x.shape[1:]) != model.config.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match input_shape {model.config.input_shape}")
    h = model.stem_forward(x)
    hs, fs = [], []
    for i in range(model.n_blocks):
        if retain:
            h = ad.retain_grad(h)
        hs.append(h)
        f = model.block_forward(i, h, mode)
        fs.append(f)
        h = ad.add(h, f)
        if model.is_stage_end(i):
            h = model.transition(model.positions[i][0], h)
    if retain:
        h = ad.retain_grad(h)
    hs.append(h)
    return model.head_forward(h, mode), hs, fs


def iter_batches(n: int, batch_size: int) -> Iterator[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
