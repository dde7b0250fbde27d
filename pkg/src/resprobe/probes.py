"""Per-block measurements on a frozen model.

Every probe runs in eval mode unless told otherwise, builds its own tape
that watches no parameters, and leaves parameters and running statistics
untouched.  Per-sample quantities are computed batch by batch and averaged
over the full dataset; samples whose vectors have zero norm are excluded
and counted rather than folded in as zeros.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .nn import Model, forward_collect, iter_batches
from .train import log_softmax

DEFAULT_TAU = 0.1
TAYLOR_SCALES = (1.0, 0.5, 0.25, 0.125)
GROUPS = ("borderline", "correct", "all")


@dataclass
class ProbeValue:
    value: float
    n_excluded: int = 0
    n: int = 0

    def __float__(self) -> float:
        return float(self.value)


@dataclass
class ProbeRecord:
    block_index: int
    stage_index: int
    split: str
    cosine_loss: float | None = None
    l2_ratio: float | None = None
    drop_accuracy: float | None = None
    intermediate_accuracy: float | None = None
    excluded: dict = field(default_factory=dict)

    def rows(self) -> list[tuple]:
        """(probe, block, stage, value, n_excluded) for every measured probe."""
        out = []
        for name in ("cosine_loss", "l2_ratio", "drop_accuracy", "intermediate_accuracy"):
            v = getattr(self, name)
            if v is not None:
                out.append((name, self.block_index, self.stage_index, v, self.excluded.get(name, 0)))
        return out


@dataclass
class BorderlineReport:
    tau: float
    groups: dict  # name -> index array
    per_block: dict = field(default_factory=dict)  # group -> block -> (loss, acc, entropy) | None


@dataclass
class GradNormReport:
    ratio: float
    numerator: float
    denominator: float
    per_depth_activation_norms: list
    per_depth_grad_norms: list
    infinite: bool = False


@dataclass
class TaylorReport:
    scales: tuple
    residuals: np.ndarray  # samples x scales
    slopes: np.ndarray  # nan where undefined (some R == 0)
    kink_free: np.ndarray  # bool per sample
    threshold: float = 1.8
    flips: np.ndarray | None = None  # largest number of ReLU units changing sign, per sample

    @property
    def fraction_passing(self) -> float:
        s = self.slopes[self.kink_free]
        s = s[np.isfinite(s)]
        return float(np.mean(s >= self.threshold)) if s.size else float("nan")

    @property
    def n_kink_free(self) -> int:
        return int(self.kink_free.sum())


# ---------------------------------------------------------------------------
# helpers


def _as_xy(batch):
    if isinstance(batch, Dataset):
        return batch.images, batch.labels
    x, y = batch
    return np.asarray(x), np.asarray(y, dtype=np.int64)


def _row_norms(a: np.ndarray) -> np.ndarray:
    """Euclidean norms of rows, rescaled first so tiny or huge entries do not under/overflow."""
    peak = np.abs(a).max(axis=1, initial=0.0)
    safe = np.where(peak > 0, peak, 1.0)
    return np.linalg.norm(a / safe[:, None], axis=1) * peak


def per_sample_cosine(a: np.ndarray, b: np.ndarray):
    """Cosine of flattened rows; returns (cos, valid) with zero-norm rows invalid."""
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    na = _row_norms(a)
    nb = _row_norms(b)
    valid = (na > 0) & (nb > 0)
    cos = np.zeros(len(a))
    ua = a[valid] / na[valid, None]
    ub = b[valid] / nb[valid, None]
    cos[valid] = np.einsum("ij,ij->i", ua, ub)
    return np.clip(cos, -1.0, 1.0), valid


def per_sample_ratio(f: np.ndarray, h: np.ndarray):
    f = f.reshape(len(f), -1)
    h = h.reshape(len(h), -1)
    nh = _row_norms(h)
    valid = nh > 0
    r = np.zeros(len(f))
    r[valid] = _row_norms(f[valid]) / nh[valid]
    return r, valid


def _masked_mean(values: list, valids: list, what: str) -> ProbeValue:
    v = np.concatenate(values)
    ok = np.concatenate(valids)
    if not ok.any():
        raise ValueError(f"{what}: every sample has a zero-norm vector")
    return ProbeValue(float(v[ok].mean()), int((~ok).sum()), int(ok.size))


def _check_index(model: Model, block_index) -> int:
    if isinstance(block_index, (bool, np.bool_)) or not isinstance(block_index, (int, np.integer)):
        raise ValueError(f"{block_index!r} is not a residual block index")
    if not 0 <= block_index < model.n_blocks:
        raise ValueError(f"block {block_index} is not a residual block (model has {model.n_blocks})")
    return int(block_index)


def block_gradients(model: Model, x: np.ndarray, y: np.ndarray, mode: str = "eval"):
    """One forward/backward pass: (h, F, dL/dh) per block plus logits.

    The loss is the batch mean, so gradients are rescaled by the batch size
    to give per-sample loss gradients.
    """
    with Tape(watch_leaves=False) as tape:
        logits, hs, fs = forward_collect(model, x, mode, retain=True)
        loss = ad.softmax_cross_entropy(logits, y)
    tape.backward(loss)
    n = len(x)
    grads = [ad.grad_wrt(h) * n for h in hs]
    return [h.data for h in hs], [f.data for f in fs], grads, logits.data


def block_sweep(model: Model, batch, batch_size: int = 256, mode: str = "eval") -> dict:
    """Cosine loss and l2 ratio for every block in one pass per batch."""
    x, y = _as_xy(batch)
    nb = model.n_blocks
    cos, cos_ok, rat, rat_ok = ([[] for _ in range(nb)] for _ in range(4))
    for sl in iter_batches(len(x), batch_size):
        hs, fs, grads, _ = block_gradients(model, x[sl], y[sl], mode)
        for i in range(nb):
            c, v = per_sample_cosine(fs[i], grads[i])
            cos[i].append(c)
            cos_ok[i].append(v)
            r, v = per_sample_ratio(fs[i], hs[i])
            rat[i].append(r)
            rat_ok[i].append(v)
    return {
        "cosine_loss": [_masked_mean(cos[i], cos_ok[i], f"cosine loss at block {i}") for i in range(nb)],
        "l2_ratio": [_masked_mean(rat[i], rat_ok[i], f"l2 ratio at block {i}") for i in range(nb)],
    }


# ---------------------------------------------------------------------------
# single-block probes


def cosine_loss_probe(model: Model, batch, block_index: int, batch_size: int = 256) -> ProbeValue:
    """Mean over samples of cos(F_i(h_i), dL/dh_i), eval mode."""
    i = _check_index(model, block_index)
    x, y = _as_xy(batch)
    vals, oks = [], []
    for sl in iter_batches(len(x), batch_size):
        hs, fs, grads, _ = block_gradients(model, x[sl], y[sl])
        c, v = per_sample_cosine(fs[i], grads[i])
        vals.append(c)
        oks.append(v)
    return _masked_mean(vals, oks, f"cosine loss at block {i}")


def l2_ratio_probe(model: Model, batch, block_index: int, batch_size: int = 256) -> ProbeValue:
    """Mean over samples of ||F_i(h_i)|| / ||h_i||, eval mode."""
    i = _check_index(model, block_index)
    x, _ = _as_xy(batch)
    vals, oks = [], []
    for sl in iter_batches(len(x), batch_size):
        _, hs, fs = forward_collect(model, x[sl], "eval")
        r, v = per_sample_ratio(fs[i].data, hs[i].data)
        vals.append(r)
        oks.append(v)
    return _masked_mean(vals, oks, f"l2 ratio at block {i}")


def drop_block_eval(model: Model, block_index: int, dataset: Dataset, batch_size: int = 256) -> float:
    """Accuracy with block ``block_index`` skipped (h_{i+1} := h_i)."""
    i = _check_index(model, block_index)
    correct = 0
    for sl in iter_batches(len(dataset), batch_size):
        h = model.stem_forward(Tensor(dataset.images[sl]))
        logits = model.run_from(0, h, "eval", skip=i).data
        correct += int((logits.argmax(axis=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


def drop_scan(model: Model, dataset: Dataset, batch_size: int = 256) -> list[float]:
    return [drop_block_eval(model, i, dataset, batch_size) for i in range(model.n_blocks)]


def _check_final_stage(model: Model, block_index: int) -> int:
    i = _check_index(model, block_index)
    if i not in model.final_stage_blocks():
        raise ValueError(
            f"block {i} lies in stage {model.stage_of(i)}; the classifier only accepts "
            f"representations of the final stage (blocks {model.final_stage_blocks()})"
        )
    return i


def intermediate_logits(model: Model, images: np.ndarray, block_indices, batch_size: int = 256) -> dict:
    """Head applied to the output of each listed final-stage block, eval mode."""
    idx = [_check_final_stage(model, i) for i in block_indices]
    out = {i: [] for i in idx}
    for sl in iter_batches(len(images), batch_size):
        _, hs, _ = forward_collect(model, images[sl], "eval")
        for i in idx:
            out[i].append(model.head_forward(hs[i + 1], "eval").data)
    return {i: np.concatenate(v) for i, v in out.items()}


def intermediate_accuracy(model: Model, block_index: int, dataset: Dataset, batch_size: int = 256) -> float:
    logits = intermediate_logits(model, dataset.images, [block_index], batch_size)[block_index]
    return float((logits.argmax(axis=1) == dataset.labels).mean())


# ---------------------------------------------------------------------------
# borderline analysis


def signed_margin(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """p_y minus the largest competing probability."""
    n = len(labels)
    py = probs[np.arange(n), labels]
    rest = probs.copy()
    rest[np.arange(n), labels] = -np.inf
    return py - rest.max(axis=1)


def classify_margins(probs: np.ndarray, labels: np.ndarray, tau: float = DEFAULT_TAU) -> dict:
    if not 0 < tau <= 0.5:
        raise ValueError(f"tau must lie in (0, 0.5], got {tau}")
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError(f"probabilities {probs.shape} do not match {len(labels)} labels")
    m = signed_margin(probs, labels)
    return {
        "borderline": np.flatnonzero(np.abs(m) < 2 * tau),
        "correct": np.flatnonzero(m > 0),
        "all": np.arange(len(labels)),
    }


def borderline_split(model: Model, dataset: Dataset, tau: float = DEFAULT_TAU, batch_size: int = 256) -> BorderlineReport:
    from .train import predict_logits

    probs = np.exp(log_softmax(predict_logits(model, dataset.images, batch_size)))
    return BorderlineReport(tau, classify_margins(probs, dataset.labels, tau))


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return -t.sum(axis=1)


def _metrics_from_logits(logits: np.ndarray, labels: np.ndarray, groups: dict) -> dict:
    logp = log_softmax(logits)
    probs = np.exp(logp)
    nll = -logp[np.arange(len(labels)), labels]
    hit = probs.argmax(axis=1) == labels
    ent = entropy(probs)
    out = {}
    for g, idx in groups.items():
        idx = np.asarray(idx, dtype=np.int64)
        out[g] = None if idx.size == 0 else (float(nll[idx].mean()), float(hit[idx].mean()), float(ent[idx].mean()))
    return out


def group_metrics(model: Model, dataset: Dataset, groups: dict, block_range, batch_size: int = 256) -> dict:
    """group -> block -> (loss, accuracy, entropy); None for an empty group."""
    blocks = list(block_range)
    logits = intermediate_logits(model, dataset.images, blocks, batch_size)
    per_block = {g: {} for g in groups}
    for i in blocks:
        for g, m in _metrics_from_logits(logits[i], dataset.labels, groups).items():
            per_block[g][i] = m
    return per_block


# ---------------------------------------------------------------------------
# gradient norms


def grad_norm_ratio(model: Model, batch, mode: str = "eval") -> GradNormReport:
    """||dL/dh|| at the first block of the first stage over the first block of the last stage."""
    if len(model.stages) < 2:
        raise ValueError("gradient-norm ratio needs at least two stages")
    x, y = _as_xy(batch)
    hs, _, grads, _ = block_gradients(model, x, y, mode)
    n = len(x)
    gnorms = [float(np.linalg.norm(g) / n) for g in grads]  # norm of the batch-mean loss gradient
    anorms = [float(np.linalg.norm(h.reshape(n, -1), axis=1).mean()) for h in hs]
    num = gnorms[model.stage_blocks(0)[0]]
    den = gnorms[model.final_stage_blocks()[0]]
    if den == 0 or not math.isfinite(den):
        return GradNormReport(math.inf, num, den, anorms, gnorms, infinite=True)
    return GradNormReport(num / den, num, den, anorms, gnorms)


# ---------------------------------------------------------------------------
# first-layer identity


@dataclass
class StepCheck:
    delta_h: np.ndarray
    predicted: np.ndarray
    rel_error: float


def stem_dense_matrix(model: Model) -> tuple[np.ndarray, np.ndarray]:
    """The stem as h = W x + b on flattened inputs, with every entry a free parameter."""
    c, hgt, wid = model.config.input_shape
    d = c * hgt * wid
    basis = Tensor(np.eye(d).reshape(d, c, hgt, wid))
    cols = ad.conv2d(basis, model.stem.weight, None, model.stem.stride, model.stem.padding).data
    w = cols.reshape(d, -1).T
    b = np.broadcast_to(model.stem.bias.data[:, None, None], cols.shape[1:]).reshape(-1).copy()
    return w, b


def first_layer_gradient_step_check(
    model: Model, sample, eta: float, momentum: float = 0.0, parametrization: str = "dense"
) -> StepCheck:
    """Move the stem by one SGD step on a single sample and compare with -eta(|x|^2+1) dL/dh_o.

    ``parametrization="dense"`` treats the stem as an unconstrained linear map
    Wx + b (the setting in which the identity is exact).  ``"conv"`` steps
    the tied convolution weights instead; weight sharing across positions
    then mixes patches and the identity is only approximate.
    """
    if momentum != 0:
        raise ValueError("the identity holds for plain SGD only; momentum must be 0")
    x, y = _as_xy(sample)
    if x.ndim == len(model.config.input_shape):
        x, y = x[None], np.atleast_1d(y)
    if len(x) != 1:
        raise ValueError(f"the identity holds per sample; got a batch of {len(x)}")
    if parametrization not in ("dense", "conv"):
        raise ValueError(f"unknown parametrization {parametrization!r}")
    shape = (1,) + model.stem_output_shape()
    if parametrization == "dense":
        w, b = stem_dense_matrix(model)
        wt = Tensor(w.T.copy())
        bt = Tensor(b)
        xf = Tensor(x.reshape(1, -1))

        def stem(wv, bv):
            return ad.reshape(ad.add(ad.matmul(xf, wv), bv), shape)

        params = (wt, bt)
    else:
        wt = Tensor(model.stem.weight.data.copy())
        bt = Tensor(model.stem.bias.data.copy())
        xt = Tensor(x)

        def stem(wv, bv):
            return ad.conv2d(xt, wv, bv, model.stem.stride, model.stem.padding)

        params = (wt, bt)
    with Tape(watch_leaves=False) as tape:
        for p in params:
            tape.watch(p)
        h0 = ad.retain_grad(stem(*params))
        loss = ad.softmax_cross_entropy(model.run_from(0, h0, "eval"), y)
    tape.backward(loss)
    g = ad.grad_wrt(h0)
    stepped = [Tensor(p.data - eta * p.grad) for p in params]
    h1 = stem(*stepped).data
    delta = h1 - h0.data
    predicted = -eta * (float(np.sum(x * x)) + 1.0) * g
    denom = np.linalg.norm(predicted)
    diff = np.linalg.norm(delta - predicted)
    rel = 0.0 if denom == 0 and diff == 0 else float(diff / denom) if denom > 0 else math.inf
    return StepCheck(delta, predicted, rel)


# ---------------------------------------------------------------------------
# Taylor expansion of the downstream loss


def taylor_residual_check(
    model: Model,
    batch,
    block_index: int,
    scales=TAYLOR_SCALES,
    loss_fn=None,
    mode: str = "eval",
    batch_size: int = 256,
) -> TaylorReport:
    """R(s) = |L(h + sF) - L(h) - s F.dL/dh| per sample, with L the network after the block.

    ``loss_fn(z, labels) -> per-sample loss Tensor`` replaces the downstream
    network.  Samples whose downstream ReLU pattern changes at any scale are
    marked kinked and excluded from the slope statistics.
    """
    i = _check_index(model, block_index)
    x, y = _as_xy(batch)
    scales = tuple(float(s) for s in scales)
    res, kinks, flips = [], [], []
    for sl in iter_batches(len(x), batch_size):
        r, k, f = _taylor_batch(model, x[sl], y[sl], i, scales, loss_fn, mode)
        res.append(r)
        kinks.append(k)
        flips.append(f)
    res = np.concatenate(res)
    slopes = np.full(len(res), np.nan)
    pos = np.array([s > 0 for s in scales])
    if pos.sum() >= 2:
        r = res[:, pos]
        ok = (r > 0).all(axis=1)
        if ok.any():
            slopes[ok] = np.polyfit(np.log(np.array(scales)[pos]), np.log(r[ok]).T, 1)[0]
    return TaylorReport(scales, res, slopes, np.concatenate(kinks), flips=np.concatenate(flips))


def _taylor_batch(model, x, y, i, scales, loss_fn, mode):
    _, hs, fs = forward_collect(model, x, mode)
    h, f = hs[i].data, fs[i].data
    n = len(x)

    def downstream(z: Tensor, relu_log):
        if loss_fn is not None:
            return loss_fn(z, y)
        return ad.per_sample_cross_entropy(model.run_after(i, z, mode, relu_log), y)

    base_log: list = []
    with Tape(watch_leaves=False) as tape:
        z = ad.retain_grad(Tensor(h))
        per = downstream(z, base_log)
        total = ad.reduce_sum(per)
    tape.backward(total)
    g = ad.grad_wrt(z)
    l0 = per.data
    if not np.all(np.isfinite(l0)):
        raise FloatingPointError("non-finite downstream loss")
    lin = np.einsum("ij,ij->i", f.reshape(n, -1), g.reshape(n, -1))
    res = np.zeros((n, len(scales)))
    flips = np.zeros(n, dtype=np.int64)
    for k, s in enumerate(scales):
        log: list = []
        ls = downstream(Tensor(h + s * f), log).data
        if not np.all(np.isfinite(ls)):
            raise FloatingPointError(f"non-finite downstream loss at scale {s}")
        res[:, k] = np.abs(ls - l0 - s * lin)
        changed = sum((m0 != m1).reshape(n, -1).sum(axis=1) for m0, m1 in zip(base_log, log)) if log else 0
        flips = np.maximum(flips, changed)
    return res, flips == 0, flips


# ---------------------------------------------------------------------------
# full sweeps


def probe_sweep(model: Model, dataset: Dataset, probes=("cosine_loss", "l2_ratio", "drop_accuracy", "intermediate_accuracy"),
                batch_size: int = 256, log=None) -> list[ProbeRecord]:
    """One ProbeRecord per block; structurally inapplicable probes are skipped with a logged reason."""
    records = [ProbeRecord(i, model.stage_of(i), dataset.split) for i in range(model.n_blocks)]
    if "cosine_loss" in probes or "l2_ratio" in probes:
        sweep = block_sweep(model, dataset, batch_size)
        for name in ("cosine_loss", "l2_ratio"):
            if name in probes:
                for rec, pv in zip(records, sweep[name]):
                    setattr(rec, name, pv.value)
                    rec.excluded[name] = pv.n_excluded
    if "drop_accuracy" in probes:
        for rec, acc in zip(records, drop_scan(model, dataset, batch_size)):
            rec.drop_accuracy = acc
    if "intermediate_accuracy" in probes:
        final = model.final_stage_blocks()
        skipped = [i for i in range(model.n_blocks) if i not in final]
        if skipped and log is not None:
            log(f"intermediate_accuracy skipped for blocks {skipped}: not in the final stage")
        logits = intermediate_logits(model, dataset.images, final, batch_size)
        for i in final:
            records[i].intermediate_accuracy = float((logits[i].argmax(axis=1) == dataset.labels).mean())
    return records
