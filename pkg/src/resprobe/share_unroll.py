"""Weight-tied stages, per-step batch norm, and post-hoc unrolling of the last block."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .nn import (
    ArchitectureConfig,
    BatchNormState,
    Model,
    forward_collect,
    iter_batches,
    residual_branch,
)
from .probes import classify_margins, entropy, per_sample_cosine, per_sample_ratio
from .train import log_softmax

BN_MODES = ("naive", "unshared_stats", "ubn_full")


@dataclass
class SharingSpec:
    share_from_block: int | list = 3  # per-stage index, or one index for every stage
    bn_mode: str = "ubn_full"
    gamma_init_shared: float | None = None  # None: 0.1 for ubn_full, 1.0 otherwise

    def __post_init__(self):
        if isinstance(self.share_from_block, tuple):
            self.share_from_block = list(self.share_from_block)

    def per_stage(self, n_stages: int) -> list[int]:
        if isinstance(self.share_from_block, list):
            if len(self.share_from_block) != n_stages:
                raise ValueError(f"share_from_block lists {len(self.share_from_block)} stages, model has {n_stages}")
            return [int(v) for v in self.share_from_block]
        return [int(self.share_from_block)] * n_stages

    @property
    def gamma(self) -> float:
        if self.gamma_init_shared is not None:
            return float(self.gamma_init_shared)
        return 0.1 if self.bn_mode == "ubn_full" else 1.0

    def validate(self, config: ArchitectureConfig) -> None:
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}; expected one of {BN_MODES}")
        for s, (start, (n, _)) in enumerate(zip(self.per_stage(len(config.stages)), config.stages)):
            if start < 1:
                raise ValueError("share_from_block must be >= 1")
            if start > n:
                raise ValueError(f"share_from_block {start} is beyond the length {n} of stage {s}")

    def to_dict(self) -> dict:
        return asdict(self)


def build_shared_model(config: ArchitectureConfig, spec: SharingSpec, seed: int = 0) -> Model:
    """Tie blocks ``share_from_block..n-1`` of each stage to one weight set.

    Untied blocks and all other layers carry the same initial values as
    ``build_model(config, seed)``.
    """
    spec.validate(config)
    model = Model(config, seed)
    for stage, start in zip(model.stages, spec.per_stage(len(model.stages))):
        n = len(stage.blocks)
        tied = n - start
        if tied < 1:
            continue
        shared = stage.blocks[start]
        for bn in (shared.bn1, shared.bn2):
            bn.gamma.data[:] = spec.gamma
            if spec.bn_mode == "unshared_stats":
                bn.add_step_banks(tied, share_affine=True)
            elif spec.bn_mode == "ubn_full":
                bn.add_step_banks(tied, share_affine=False, gamma_init=spec.gamma)
        for j in range(start, n):
            stage.blocks[j] = shared
            stage.steps[j] = None if spec.bn_mode == "naive" else j - start
    model.sharing = spec
    return model


def shared_span(model: Model, stage: int) -> list[int]:
    """Global indices of the tied blocks of ``stage`` (empty when untied)."""
    blocks = model.stage_blocks(stage)
    if model.sharing is None:
        return []
    start = model.sharing.per_stage(len(model.stages))[stage]
    return blocks[start:]


# ---------------------------------------------------------------------------
# activation growth


@dataclass
class ExplosionReport:
    norms: list  # mean per-sample ||h|| entering each block, then the head input
    stage_outputs: list  # mean ||h|| leaving each stage before its transition
    growth: list  # per stage: geometric per-block growth across the measured span
    mode: str

    @property
    def max_growth(self) -> float:
        return float(max(self.growth))


def activation_explosion_probe(model: Model, batch, mode: str = "batch", span_start: int | None = None) -> ExplosionReport:
    """Per-depth activation norms and the geometric per-block growth factor.

    The span of stage s runs from its block ``span_start`` (default: the
    model's first tied block, else 0) to the stage output.  ``mode`` picks
    the normalisation statistics; at initialisation ``batch`` matches what a
    training step sees.
    """
    x = batch.images if isinstance(batch, Dataset) else np.asarray(batch[0] if isinstance(batch, tuple) else batch)
    _, hs, fs = forward_collect(model, x, mode)
    n = len(x)

    def norm(a):
        return float(np.linalg.norm(a.reshape(n, -1), axis=1).mean())

    norms = [norm(h.data) for h in hs]
    outs, growth = [], []
    starts = model.sharing.per_stage(len(model.stages)) if model.sharing is not None else None
    for s in range(len(model.stages)):
        blocks = model.stage_blocks(s)
        last = blocks[-1]
        out = norm(hs[last].data + fs[last].data)
        outs.append(out)
        if span_start is not None:
            k = min(span_start, len(blocks) - 1)
        elif starts is not None:
            k = min(starts[s], len(blocks) - 1)
        else:
            k = 0
        length = len(blocks) - k
        first = norms[blocks[k]]
        growth.append((out / first) ** (1.0 / length) if first > 0 else math.inf)
    return ExplosionReport(norms, outs, growth, mode)


# ---------------------------------------------------------------------------
# unrolling


@dataclass
class UnrollSpec:
    extra_steps: int = 20
    alpha: float = 0.5

    def validate(self) -> None:
        if self.extra_steps < 0:
            raise ValueError("extra_steps must be nonnegative")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _fresh_bn(src: BatchNormState, step: int | None) -> BatchNormState:
    bank = src.bank(step)
    bn = BatchNormState(src.channels, src.momentum, src.eps)
    bn.gamma = Tensor(bank.gamma.data.copy())
    bn.beta = Tensor(bank.beta.data.copy())
    return bn


@dataclass
class UnrollTrace:
    h: list  # h[0]: output of the trained network's last block; h[t]: after extra step t
    logits: list  # head applied to each h[t]


class UnrolledModel:
    """The base model followed by ``extra_steps`` further applications of its last block.

    Each extra step computes h <- h + alpha * F(h) with the last block's
    convolutions and a fresh normalisation bank whose affine parameters are
    copied from the trained block; the bank statistics come from
    :meth:`calibrate`.
    """

    def __init__(self, model: Model, spec: UnrollSpec):
        spec.validate()
        self.model = model
        self.spec = spec
        self.last = model.n_blocks - 1
        s, j = model.positions[self.last]
        self.block = model.stages[s].blocks[j]
        step = model.stages[s].steps[j]
        c = model.config.stages[s][1]
        if self.block.channels != c:
            raise ValueError("the last block is not shape-preserving")
        self.banks = [(_fresh_bn(self.block.bn1, step), _fresh_bn(self.block.bn2, step)) for _ in range(spec.extra_steps)]
        self.calibrated = spec.extra_steps == 0

    def branch(self, t: int, h: Tensor, mode: str = "eval", bn_log=None) -> Tensor:
        bn1, bn2 = self.banks[t]
        return ad.scale(residual_branch(self.block, h, mode, bn1, bn2, bn_log=bn_log), self.spec.alpha)

    def calibrate(self, dataset: Dataset, batch_size: int = 256) -> None:
        """One pass over ``dataset``: each bank takes the sample-weighted average of its batch statistics."""
        k = self.spec.extra_steps
        sums = [[None, None, None, None] for _ in range(k)]
        total = 0
        for sl in iter_batches(len(dataset), batch_size):
            x = dataset.images[sl]
            if len(x) < 2:
                continue
            w = len(x)
            _, hs, fs = forward_collect(self.model, x, "eval")
            h = ad.add(hs[self.last], fs[self.last])
            for t in range(k):
                log: list = []
                f = self.branch(t, h, "batch", bn_log=log)
                vals = [log[0][0], log[0][1], log[1][0], log[1][1]]
                sums[t] = [v * w if acc is None else acc + v * w for acc, v in zip(sums[t], vals)]
                h = ad.add(h, f)
            total += w
        if k and total == 0:
            raise ValueError("calibration needs at least one batch of two or more samples")
        for t in range(k):
            m1, v1, m2, v2 = (v / total for v in sums[t])
            bn1, bn2 = self.banks[t]
            bn1.running_mean, bn1.running_var = m1, v1
            bn2.running_mean, bn2.running_var = m2, v2
        self.calibrated = True

    def _require_calibrated(self):
        if not self.calibrated:
            raise RuntimeError("call calibrate() before evaluating the unrolled model")

    def trace(self, x: np.ndarray) -> UnrollTrace:
        self._require_calibrated()
        _, hs, fs = forward_collect(self.model, x, "eval")
        h = ad.add(hs[self.last], fs[self.last])
        out_h, out_l = [h.data], [self.model.head_forward(h, "eval").data]
        for t in range(self.spec.extra_steps):
            h = ad.add(h, self.branch(t, h))
            out_h.append(h.data)
            out_l.append(self.model.head_forward(h, "eval").data)
        return UnrollTrace(out_h, out_l)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Logits after all extra steps."""
        return self.trace(x).logits[-1]

    def step_gradients(self, x: np.ndarray, y: np.ndarray):
        """Per step t = 0..K: (update, input, dL/dinput) with L the loss after all steps.

        Step 0 is the trained last block (unscaled); step t >= 1 is the
        scaled update alpha * F_t.
        """
        self._require_calibrated()
        _, hs, _ = forward_collect(self.model, x, "eval")
        n = len(x)
        with Tape(watch_leaves=False) as tape:
            h = ad.retain_grad(Tensor(hs[self.last].data))
            inputs, updates = [h], [self.model.block_forward(self.last, h, "eval")]
            h = ad.add(h, updates[0])
            for t in range(self.spec.extra_steps):
                h = ad.retain_grad(h)
                inputs.append(h)
                f = self.branch(t, h)
                updates.append(f)
                h = ad.add(h, f)
            loss = ad.softmax_cross_entropy(self.model.head_forward(h, "eval"), y)
        tape.backward(loss)
        return [(u.data, i.data, ad.grad_wrt(i) * n) for u, i in zip(updates, inputs)]


def unroll_last_block(model: Model, spec: UnrollSpec, calibration: Dataset | None = None, batch_size: int = 256) -> UnrolledModel:
    u = UnrolledModel(model, spec)
    if calibration is not None:
        u.calibrate(calibration, batch_size)
    return u


def unroll_metrics(unrolled: UnrolledModel, dataset: Dataset, tau: float = 0.1, batch_size: int = 256) -> list[dict]:
    """Rows (step, group, loss, accuracy, entropy, cosine, l2_ratio) for steps 0..K.

    Groups come from the base model's predictions (step 0).  Empty groups
    yield None entries.
    """
    k = unrolled.spec.extra_steps
    logits = [[] for _ in range(k + 1)]
    cos = [[] for _ in range(k + 1)]
    rat = [[] for _ in range(k + 1)]
    for sl in iter_batches(len(dataset), batch_size):
        x, y = dataset.images[sl], dataset.labels[sl]
        tr = unrolled.trace(x)
        for t in range(k + 1):
            logits[t].append(tr.logits[t])
        for t, (u, h, g) in enumerate(unrolled.step_gradients(x, y)):
            c, v = per_sample_cosine(u, g)
            cos[t].append(np.where(v, c, np.nan))
            r, v = per_sample_ratio(u, h)
            rat[t].append(np.where(v, r, np.nan))
    logits = [np.concatenate(z) for z in logits]
    cos = [np.concatenate(z) for z in cos]
    rat = [np.concatenate(z) for z in rat]
    labels = dataset.labels
    base_probs = np.exp(log_softmax(logits[0]))
    groups = classify_margins(base_probs, labels, tau)
    rows = []
    for t in range(k + 1):
        logp = log_softmax(logits[t])
        probs = np.exp(logp)
        nll = -logp[np.arange(len(labels)), labels]
        hit = probs.argmax(axis=1) == labels
        ent = entropy(probs)
        for g in ("borderline", "correct", "all"):
            idx = groups[g]
            if idx.size == 0:
                rows.append({"step": t, "group": g, "loss": None, "accuracy": None, "entropy": None,
                             "cosine": None, "l2_ratio": None})
                continue
            c = cos[t][idx]
            r = rat[t][idx]
            rows.append({
                "step": t,
                "group": g,
                "loss": float(nll[idx].mean()),
                "accuracy": float(hit[idx].mean()),
                "entropy": float(ent[idx].mean()),
                "cosine": float(np.nanmean(c)) if np.isfinite(c).any() else None,
                "l2_ratio": float(np.nanmean(r)) if np.isfinite(r).any() else None,
            })
    return rows
