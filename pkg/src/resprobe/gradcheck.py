"""Finite-difference verification suite.

Every check returns a named measurement and its tolerance; the suite
passes when all measurements are within tolerance.  Backward rules are
looked up from the op registry at backward time, so a patched rule is
picked up here.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nn import ArchitectureConfig, Model, build_model, single_repr_config
from .probes import first_layer_gradient_step_check, taylor_residual_check
from .share_unroll import SharingSpec, build_shared_model

GRAD_TOL = 1e-4
IDENTITY_TOL = 1e-6
SLOPE_MIN = 1.8


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    kind: str = "max"  # "max": value must stay <= tol; "min": value must reach tol

    def line(self) -> str:
        op = "<=" if self.kind == "max" else ">="
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} ({op} {self.tol:g})"


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def max_error(self, prefix: str = "") -> float:
        vals = [r.value for r in self.results if r.kind == "max" and r.name.startswith(prefix) and r.tol == GRAD_TOL]
        return max(vals, default=0.0)

    def text(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"max gradient relative error: {self.max_error():.3e}")
        lines.append(f"{len(self.results) - len(self.failures)}/{len(self.results)} checks passed in {self.seconds:.1f}s")
        return "\n".join(lines)


def _upper(name, value, tol) -> CheckResult:
    ok = bool(np.isfinite(value) and value <= tol)
    return CheckResult(name, float(value), tol, ok, "max")


def _lower(name, value, tol) -> CheckResult:
    ok = bool(np.isfinite(value) and value >= tol)
    return CheckResult(name, float(value), tol, ok, "min")


# ---------------------------------------------------------------------------
# primitives


def _primitive_cases(rng: np.random.Generator) -> list:
    def r(*shape):
        return rng.normal(size=shape)

    def away_from_zero(*shape):
        x = r(*shape)
        return x + 0.2 * np.sign(x)

    labels = rng.integers(4, size=5)
    return [
        ("add", "add", [r(3, 4), r(4)], {}),
        ("mul", "mul", [r(3, 4), r(3, 1)], {}),
        ("scale", "scale", [r(3, 4)], {"factor": 0.7}),
        ("sum", "sum", [r(3, 4)], {}),
        ("mean", "mean", [r(3, 4)], {}),
        ("matmul", "matmul", [r(3, 4), r(4, 5)], {}),
        ("relu", "relu", [away_from_zero(3, 4)], {}),
        ("flatten", "flatten", [r(2, 3, 2, 2)], {}),
        ("reshape", "reshape", [r(2, 3, 4)], {"shape": (6, 4)}),
        ("conv2d[s1p1]", "conv2d", [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)], {"stride": 1, "padding": 1}),
        ("conv2d[s2p1]", "conv2d", [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)], {"stride": 2, "padding": 1}),
        ("conv2d[1x1s2]", "conv2d", [r(2, 3, 4, 4), r(5, 3, 1, 1), r(5)], {"stride": 2, "padding": 0}),
        ("avg_pool2d", "avg_pool2d", [r(2, 3, 4, 4)], {"kernel": 2}),
        ("batchnorm[batch,4d]", "batchnorm", [r(4, 3, 3, 3), 1 + 0.3 * r(3), r(3)], {"mode": "batch", "eps": 1e-5}),
        ("batchnorm[batch,2d]", "batchnorm", [r(6, 3), 1 + 0.3 * r(3), r(3)], {"mode": "batch", "eps": 1e-5}),
        (
            "batchnorm[fixed]",
            "batchnorm",
            [r(4, 3, 3, 3), 1 + 0.3 * r(3), r(3)],
            {"mode": "fixed", "mean": r(3), "var": 0.5 + rng.random(3), "eps": 1e-5},
        ),
        ("softmax_cross_entropy", "softmax_cross_entropy", [r(5, 4)], {"labels": labels}),
    ]


def check_primitive(name: str, kind: str, values: list, attrs: dict, rng: np.random.Generator, eps: float = 1e-5) -> CheckResult:
    """Backward of ``kind`` against central differences of <op(inputs), R> for a random R."""
    with Tape() as tape:
        ins = [Tensor(v.copy(), requires_grad=True) for v in values]
        out = ad.forward_op(kind, ins, attrs)
        proj = rng.normal(size=out.shape)
        loss = ad.reduce_sum(ad.mul(out, Tensor(proj)))
    tape.backward(loss)
    worst = 0.0
    for k, t in enumerate(ins):
        def fn(v, k=k):
            args = [Tensor(a) for a in values]
            args[k] = Tensor(v)
            return float((ad.forward_op(kind, args, attrs).data * proj).sum())

        worst = max(worst, ad.relative_error(t.grad, ad.finite_diff_grad(fn, values[k], eps)))
    return _upper(f"primitive:{name}", worst, GRAD_TOL)


def check_primitives(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check_primitive(n, k, v, a, rng) for n, k, v, a in _primitive_cases(rng)]


# ---------------------------------------------------------------------------
# whole models


def tiny_configs(size: int = 4) -> dict[str, ArchitectureConfig]:
    return {
        "single_repr": single_repr_config(2, 3, (1, size, size), 3),
        "original": ArchitectureConfig("original", [(1, 2), (1, 3)], 2, (1, size, size), 3, "conv1x1"),
        "avg_pool": ArchitectureConfig("avg_pool", [(1, 2), (1, 2)], 2, (1, size, size), 3, "pool"),
    }


def _perturb_affine(model: Model, rng: np.random.Generator) -> None:
    """Move gamma/beta/biases off their init values so every path carries signal."""
    for name, t in model.named_parameters().items():
        if name.endswith(("gamma", "beta", "bias")):
            t.data += 0.3 * rng.normal(size=t.data.shape)
    for name, buf in model.named_buffers().items():
        model.set_buffer(name, buf + (0.2 * rng.random(buf.shape) if name.endswith("var") else 0.2 * rng.normal(size=buf.shape)))


def _kink_aware_fd(fn, x: np.ndarray, eps: float):
    """Central differences of ``fn(v) -> (loss, relu_masks)``.

    Coordinates whose +eps and -eps evaluations see different ReLU patterns
    straddle a kink, where the difference quotient is meaningless; they are
    returned as invalid.
    """
    base = np.array(x, dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    valid = np.ones(flat.size, dtype=bool)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi, mh = fn(base)
        flat[k] = orig - eps
        lo, ml = fn(base)
        flat[k] = orig
        grad[k] = (hi - lo) / (2 * eps)
        valid[k] = all(np.array_equal(a, b) for a, b in zip(mh, ml))
    return grad.reshape(base.shape), valid.reshape(base.shape)


def model_gradient_error(model: Model, x: np.ndarray, y: np.ndarray, mode: str, eps: float = 1e-5) -> tuple[float, int]:
    """(max relative error, skipped coordinates) over all parameters and the input.

    ``mode`` is ``batch`` or ``eval``; coordinates straddling a ReLU kink
    are skipped.
    """
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        xt = tape.watch(Tensor(x.copy()))
        loss = ad.softmax_cross_entropy(model.run_from(0, model.stem_forward(xt), mode), y)
    tape.backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    analytic["input"] = xt.grad.copy()
    for p in params.values():
        p.grad = None

    def evaluate(xv):
        log: list = []
        logits = model.run_from(0, model.stem_forward(Tensor(xv)), mode, relu_log=log)
        return float(ad.softmax_cross_entropy(logits, y).total.data), log

    worst, skipped = 0.0, 0

    def compare(name, fd, valid):
        nonlocal worst, skipped
        skipped += int((~valid).sum())
        if valid.any():
            worst = max(worst, ad.relative_error(analytic[name][valid], fd[valid]))

    for name, p in params.items():
        def fn(v, p=p):
            old = p.data
            p.data = v
            try:
                return evaluate(x)
            finally:
                p.data = old

        compare(name, *_kink_aware_fd(fn, p.data, eps))
    compare("input", *_kink_aware_fd(evaluate, x, eps))
    return worst, skipped


def train_mode_matches_batch(model: Model, x, y) -> float:
    """Gradients in train mode equal batch mode (train only adds a running-statistics update)."""
    grads = {}
    for mode in ("batch", "train"):
        params = model.named_parameters()
        for p in params.values():
            p.grad = None
        snap = {k: v.copy() for k, v in model.named_buffers().items()}
        with Tape() as tape:
            loss = ad.softmax_cross_entropy(model.run_from(0, model.stem_forward(Tensor(x)), mode), y)
        tape.backward(loss)
        grads[mode] = {k: p.grad.copy() for k, p in params.items()}
        for k, v in snap.items():
            model.set_buffer(k, v)
        for p in params.values():
            p.grad = None
    return max(float(np.abs(grads["batch"][k] - grads["train"][k]).max()) for k in grads["batch"])


def check_models(seed: int = 0, size: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for fam, cfg in tiny_configs(size).items():
        model = build_model(cfg, seed)
        _perturb_affine(model, rng)
        x = rng.normal(size=(4,) + cfg.input_shape)
        y = rng.integers(cfg.num_classes, size=4)
        for mode in ("batch", "eval"):
            err, skipped = model_gradient_error(model, x, y, mode)
            out.append(_upper(f"model:{fam}[{mode}, {skipped} kinked coords skipped]", err, GRAD_TOL))
        out.append(_upper(f"model:{fam}[train==batch]", train_mode_matches_batch(model, x, y), 0.0))
    return out


# ---------------------------------------------------------------------------
# shared weights


def untied_copy(model: Model) -> Model:
    """An unshared model whose every block holds a private copy of the (possibly tied) weights."""
    import copy

    clone = copy.deepcopy(model)
    for stage in clone.stages:
        seen = set()
        for j, blk in enumerate(stage.blocks):
            if id(blk) in seen:
                stage.blocks[j] = copy.deepcopy(blk)
            seen.add(id(stage.blocks[j]))
    return clone


def shared_accumulation_error(model: Model, x, y, mode: str = "batch") -> float:
    """Gradient of each tied tensor vs the sum of per-application gradients of an untied copy."""
    def grads(m):
        params = m.named_parameters()
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            loss = ad.softmax_cross_entropy(m.run_from(0, m.stem_forward(Tensor(x)), mode), y)
        tape.backward(loss)
        return m

    shared = grads(model)
    untied = grads(untied_copy(model))
    worst = 0.0
    for stage_s, stage_u in zip(shared.stages, untied.stages):
        for j, blk in enumerate(stage_s.blocks):
            if j == 0 or blk is not stage_s.blocks[j - 1]:
                apps = [k for k, b in enumerate(stage_s.blocks) if b is blk]
                for cname in ("conv1", "conv2"):
                    for attr in ("weight", "bias"):
                        total = sum(getattr(getattr(stage_u.blocks[k], cname), attr).grad for k in apps)
                        worst = max(worst, ad.relative_error(getattr(getattr(blk, cname), attr).grad, total))
    for m in (shared, untied):
        for p in m.named_parameters().values():
            p.grad = None
    return worst


def check_shared(seed: int = 0, size: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    cfg = single_repr_config(4, 2, (1, size, size), 3)
    out = []
    for bn_mode in ("naive", "unshared_stats", "ubn_full"):
        model = build_shared_model(cfg, SharingSpec(1, bn_mode), seed)
        _perturb_affine(model, rng)
        x = rng.normal(size=(4,) + cfg.input_shape)
        y = rng.integers(3, size=4)
        for mode in ("batch", "eval"):
            err, skipped = model_gradient_error(model, x, y, mode)
            out.append(_upper(f"shared:{bn_mode}[{mode}, {skipped} kinked coords skipped]", err, GRAD_TOL))
        out.append(_upper(f"shared:{bn_mode}[sum over applications]", shared_accumulation_error(model, x, y), GRAD_TOL))
    return out


# ---------------------------------------------------------------------------
# first-layer identity and Taylor slopes


def check_first_layer_identity(seed: int = 0, pairs: int = 10, eta: float = 1e-6) -> CheckResult:
    worst = 0.0
    for k in range(pairs):
        rng = np.random.default_rng([seed, k])
        cfgs = list(tiny_configs(4).values())
        cfg = cfgs[k % len(cfgs)]
        model = build_model(cfg, seed * 1000 + k)
        _perturb_affine(model, rng)
        x = rng.normal(size=cfg.input_shape)
        y = int(rng.integers(cfg.num_classes))
        worst = max(worst, first_layer_gradient_step_check(model, (x, y), eta).rel_error)
    return _upper(f"first_layer_identity[{pairs} pairs, eta={eta:g}]", worst, IDENTITY_TOL)


def check_taylor(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 2)
    cfg = single_repr_config(3, 3, (1, 4, 4), 3)
    model = build_model(cfg, seed)
    x = rng.normal(size=(32,) + cfg.input_shape)
    y = rng.integers(3, size=32)
    # linear downstream: R(s) vanishes up to rounding
    w = rng.normal(size=(int(np.prod(model.stem_output_shape())), 1))

    def linear_loss(z, labels):
        return ad.reshape(ad.matmul(ad.flatten(z), Tensor(w)), (len(labels),))

    lin = taylor_residual_check(model, (x, y), 1, loss_fn=linear_loss)
    out = [_upper("taylor:linear_downstream[max R]", float(lin.residuals.max()), 1e-10)]
    # small residual branch: the expansion is second order on kink-free samples
    blk = model.stages[0].blocks[1]
    blk.conv2.weight.data *= 1e-2
    blk.conv2.bias.data[:] = 0
    rep = taylor_residual_check(model, (x, y), 1)
    slopes = rep.slopes[rep.kink_free & np.isfinite(rep.slopes)]
    frac = float(np.mean(slopes >= SLOPE_MIN)) if slopes.size else float("nan")
    out.append(_lower(f"taylor:slope>={SLOPE_MIN}[{slopes.size} kink-free]", frac, 0.9))
    return out


def run_gradcheck(seed: int = 0, size: int = 4) -> GradcheckReport:
    t0 = time.perf_counter()
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    try:
        results = check_primitives(seed)
        results += check_models(seed, size)
        results += check_shared(seed, size)
        results.append(check_first_layer_identity(seed))
        results += check_taylor(seed)
    finally:
        ad.set_default_dtype(prev)
    return GradcheckReport(results, time.perf_counter() - t0)
