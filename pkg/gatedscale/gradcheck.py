"""Finite-difference oracle and the gradient audits built on it.

Every audit case reduces an op's output to a scalar with a fixed random
readout, ``sum(out * R)``, so each output element contributes a distinct
weight to the checked gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gatedscale import gsto, modules, ops
from gatedscale.errors import NumericError, ShapeError
from gatedscale.gsto import GstoParams, GstoSpec, ScaleTransferSpec
from gatedscale.hrnet import NetConfig, build_net, gsto_hrnet_forward
from gatedscale.log import EventLog
from gatedscale.losses import LossSpec, network_loss, pixel_cross_entropy
from gatedscale.params import ParamStore
from gatedscale.rng import Stream
from gatedscale.synth import SynthSpec, SyntheticDataset
from gatedscale.tensor import Tape, Tensor, backward, no_grad


def _scalar(value) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericError(f"function returned non-finite value {v}")
    return v


def finite_diff_at(f: Callable[[], object], x: Tensor, indices: Sequence[int], eps: float = 1e-4) -> np.ndarray:
    """Central differences of ``f()`` with respect to the listed flat elements of ``x``.

    ``f`` must read ``x.data`` when called; elements are perturbed in place
    and restored.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not x.data.flags.c_contiguous:
        raise ValueError(f"{x.name or 'tensor'} must be C-contiguous to be perturbed in place")
    flat = x.data.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + eps
            plus = _scalar(f())
            flat[i] = orig - eps
            minus = _scalar(f())
            flat[i] = orig
            out[k] = (plus - minus) / (2 * eps)
    return out


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Per-element (f(x + eps e) - f(x - eps e)) / (2 eps) over every element of x."""
    g = finite_diff_at(lambda: f(x), x, range(x.size), eps)
    return Tensor(g.reshape(x.shape).astype(x.dtype))


@dataclass
class GradReport:
    name: str
    max_error: float
    passed: bool
    checked: int
    # (flat index, analytic, numeric, relative error), worst first
    worst: list[tuple[int, float, float, float]] = field(default_factory=list)


def grad_check(analytic, numeric, tol: float, name: str = "", top: int = 3) -> GradReport:
    """Relative error |a - n| / max(1e-8, |a| + |n|) per element; passes iff the max is below tol."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"grad_check shapes differ: {a.shape} vs {n.shape}")
    a, n = a.reshape(-1), n.reshape(-1)
    err = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
    order = np.argsort(-err, kind="stable")[:top]
    worst = [(int(i), float(a[i]), float(n[i]), float(err[i])) for i in order]
    max_error = float(err.max()) if err.size else 0.0
    return GradReport(name, max_error, max_error < tol, int(err.size), worst)


def sample_indices(size: int, samples: int, seed: int, name: str) -> list[int]:
    """Every index when size <= samples, else a deterministic sorted sample."""
    if size <= samples:
        return list(range(size))
    stream = Stream(seed, f"audit.{name}")
    picked: set[int] = set()
    while len(picked) < samples:
        picked.add(stream.randint(0, size - 1))
    return sorted(picked)


# ---------------------------------------------------------------------------
# Per-op audit
# ---------------------------------------------------------------------------

Checked = list[tuple[str, Tensor]]


@dataclass
class AuditCase:
    name: str
    build: Callable[[int], tuple[Checked, Callable[[], Tensor]]]


def _rand(seed: int, name: str, shape, away: float = 0.0) -> Tensor:
    """Uniform values in (-1, 1); with ``away`` the magnitudes lie in [away, 1)."""
    n = int(np.prod(shape))
    u = Stream(seed, name).uniform_array(n)
    if away:
        sign = np.where(Stream(seed, name + ".sign").uniform_array(n) < 0.5, -1.0, 1.0)
        v = sign * (away + (1 - away) * u)
    else:
        v = 2 * u - 1
    return Tensor(v.reshape(shape), requires_grad=True, name=name)


def _readout(seed: int, out: Tensor) -> Tensor:
    r = Stream(seed, "readout").uniform_array(out.size).reshape(out.shape) + 0.5
    return ops.sum_all(ops.mul(out, Tensor(r.astype(out.dtype))))


def _randomize_norm(store: ParamStore, seed: int, name: str) -> None:
    c = store[f"{name}.gamma"].shape
    store.assign(f"{name}.gamma", 0.5 + Stream(seed, f"{name}.g").uniform_array(int(np.prod(c))).reshape(c))
    store.assign(f"{name}.beta", Stream(seed, f"{name}.b").uniform_array(int(np.prod(c))).reshape(c) - 0.5)


def _store(seed: int) -> ParamStore:
    return ParamStore("f64", seed=seed)


def normalized_biases(store: ParamStore) -> set[str]:
    """Conv biases the audits skip: their train-mode gradient is zero, or zero up to rounding.

    A bias feeding a batch norm directly, and the bias of a norm-free 1x1
    pooled branch (ASPP image pooling, the bins = 1 PPM level): its output is
    one value per channel, which the next batch norm removes as a shift.
    """
    skip = set()
    for name in store:
        if name.endswith(".conv.bias") and name[: -len(".conv.bias")] + ".bn.gamma" in store:
            skip.add(name)
        elif name.endswith(".image.bias"):
            skip.add(name)
        elif name.endswith(".reduce.conv.bias") and name[: -len(".conv.bias")] + ".bn.gamma" not in store:
            skip.add(name)
    return skip


def _params(store: ParamStore) -> Checked:
    skip = normalized_biases(store)
    return [(name, e.tensor) for name, e in store.trainable() if name not in skip]


def _unary(op, shape, away: float = 0.0):
    def build(seed):
        x = _rand(seed, "x", shape, away)
        return [("x", x)], lambda: _readout(seed, op(x))

    return build


def _binary(op, a_shape, b_shape):
    def build(seed):
        a, b = _rand(seed, "a", a_shape), _rand(seed, "b", b_shape)
        return [("a", a), ("b", b)], lambda: _readout(seed, op(a, b))

    return build


def _conv(shape, c_out, kernel, stride=1, dilation=1):
    def build(seed):
        store = _store(seed)
        p = store.conv("conv", shape[1], c_out, kernel, stride=stride, dilation=dilation)
        store.assign("conv.bias", Stream(seed, "bias").uniform_array(c_out).reshape(1, c_out, 1, 1))
        x = _rand(seed, "x", shape)
        return [("x", x), *_params(store)], lambda: _readout(seed, ops.conv2d(x, p))

    return build


def _norm(mode):
    def build(seed):
        store = _store(seed)
        p = store.norm("bn", 3)
        _randomize_norm(store, seed, "bn")
        if mode == "eval":
            store.assign("bn.running_mean", np.full((1, 3, 1, 1), 0.1))
            store.assign("bn.running_var", np.full((1, 3, 1, 1), 0.7))
        p.mode = mode
        x = _rand(seed, "x", (2, 3, 4, 4))
        return [("x", x), *_params(store)], lambda: _readout(seed, ops.batch_norm(x, p))

    return build


def _cross_entropy(seed):
    x = _rand(seed, "logits", (2, 4, 3, 3))
    stream = Stream(seed, "labels")
    labels = np.array([stream.randint(0, 3) for _ in range(18)]).reshape(2, 3, 3)
    labels[0, 0, 0] = 255
    return [("logits", x)], lambda: pixel_cross_entropy(x, labels)


def _gate(mode):
    def build(seed):
        store = _store(seed)
        params = gsto.build_gate(store, "site", 3, 4, mode)
        F = _rand(seed, "F", (2, 3, 5, 5))

        def fn():
            if mode == "unsupervised":
                g = gsto.compute_gate_unsupervised(F, params.rho)
            else:
                g, _ = gsto.compute_gate_supervised(F, params)
            return _readout(seed, gsto.apply_gate(F, g))

        return [("F", F), *_params(store)], fn

    return build


def _transfer(direction):
    def build(seed):
        store = _store(seed)
        src, dst = ((1, 3, 4, 4), (1, 5, 8, 8)) if direction == "up" else ((1, 3, 8, 8), (1, 5, 4, 4))
        params = GstoParams(store.conv("site.conv", 3, 5), gsto.build_gate(store, "site", 3, 4, "supervised"))
        spec = GstoSpec(ScaleTransferSpec.between(src, dst), "supervised")
        F = _rand(seed, "F", src)

        def fn():
            out, P = gsto.gsto_transfer(F, spec, params)
            return ops.add(_readout(seed, out), ops.sum_all(P.logits))

        return [("F", F), *_params(store)], fn

    return build


def _gfm(seed):
    store = _store(seed)
    params = modules.build_gfm(store, "gfm", [2, 4], "unsupervised")
    b0, b1 = _rand(seed, "b0", (1, 2, 8, 8)), _rand(seed, "b1", (1, 4, 4, 4))

    def fn():
        out = modules.gfm([b0, b1], params)
        return ops.add(_readout(seed, out[0]), _readout(seed + 1, out[1]))

    return [("b0", b0), ("b1", b1), *_params(store)], fn


def _gtm(seed):
    store = _store(seed)
    params = modules.build_gtm(store, "gtm", [2, 4], 4, "supervised")
    b0, b1 = _rand(seed, "b0", (1, 2, 8, 8)), _rand(seed, "b1", (1, 4, 4, 4))

    def fn():
        out, P = modules.gtm([b0, b1], params, "supervised")
        return ops.add(_readout(seed, out), ops.sum_all(P.logits))

    return [("b0", b0), ("b1", b1), *_params(store)], fn


def _ppm(seed):
    store = _store(seed)
    params = modules.build_ppm(store, "ppm", 4, 4, (1, 2, 3), "supervised", classes=3)
    F = _rand(seed, "F", (4, 4, 6, 6))
    return [("F", F), *_params(store)], lambda: _readout(seed, modules.gsto_ppm(F, params, "supervised")[0])


def _aspp(seed):
    store = _store(seed)
    params = modules.build_aspp(store, "aspp", 3, 4, (1, 2), "unsupervised")
    F = _rand(seed, "F", (2, 3, 6, 6))
    return [("F", F), *_params(store)], lambda: _readout(seed, modules.gsto_aspp(F, params, "unsupervised")[0])


OP_CASES = [
    AuditCase("add", _binary(lambda a, b: ops.add(a, b), (2, 3, 4, 4), (1, 3, 1, 1))),
    AuditCase("mul", _binary(lambda a, b: ops.mul(a, b), (2, 3, 4, 4), (2, 1, 4, 4))),
    AuditCase("scale", _unary(lambda x: ops.scale(x, -1.7), (1, 2, 3, 3))),
    AuditCase("conv2d_1x1", _conv((2, 3, 5, 5), 4, 1)),
    AuditCase("conv2d_3x3_stride2", _conv((2, 3, 7, 7), 4, 3, stride=2)),
    AuditCase("conv2d_dilated", _conv((1, 2, 9, 9), 3, 3, dilation=2)),
    AuditCase("batch_norm_train", _norm("train")),
    AuditCase("batch_norm_eval", _norm("eval")),
    AuditCase("relu", _unary(lambda x: ops.relu(x), (1, 2, 4, 4), away=0.1)),
    AuditCase("sigmoid", _unary(lambda x: ops.sigmoid(x), (1, 2, 4, 4))),
    AuditCase("bilinear_upsample", _unary(lambda x: ops.bilinear_upsample(x, (7, 9)), (1, 2, 3, 5))),
    AuditCase("avg_pool_down", _unary(lambda x: ops.avg_pool_down(x, 2), (1, 2, 6, 6))),
    AuditCase("adaptive_avg_pool", _unary(lambda x: ops.adaptive_avg_pool(x, (3, 3)), (1, 2, 7, 7))),
    AuditCase("concat_channels", _binary(lambda a, b: ops.concat_channels([a, b]), (1, 2, 3, 3), (1, 3, 3, 3))),
    AuditCase("pixel_cross_entropy", _cross_entropy),
    AuditCase("gate_unsupervised", _gate("unsupervised")),
    AuditCase("gate_supervised", _gate("supervised")),
    AuditCase("gsto_transfer_up", _transfer("up")),
    AuditCase("gsto_transfer_down", _transfer("down")),
    AuditCase("gfm", _gfm),
    AuditCase("gtm", _gtm),
    AuditCase("gsto_ppm", _ppm),
    AuditCase("gsto_aspp", _aspp),
]


def run_case(case: AuditCase, tol: float, eps: float, seed: int) -> list[GradReport]:
    checked, fn = case.build(seed)
    with Tape():
        backward(fn())
    reports = []
    for label, t in checked:
        analytic = t.grad.copy()
        numeric = finite_diff_at(fn, t, range(t.size), eps).reshape(t.shape)
        reports.append(grad_check(analytic, numeric, tol, f"{case.name}:{label}"))
    return reports


def audit_ops(
    tol: float = 1e-5,
    eps: float = 1e-5,
    cases: Sequence[AuditCase] | None = None,
    seed: int = 0,
    event_log: EventLog | None = None,
) -> list[GradReport]:
    """Check every primitive and GSTO composite in f64."""
    reports = []
    for case in OP_CASES if cases is None else cases:
        case_reports = run_case(case, tol, eps, seed)
        reports.extend(case_reports)
        if event_log is not None:
            worst = max(r.max_error for r in case_reports)
            event_log.record_event(
                "gradcheck_case", "ops", {"case": case.name, "max_error": worst, "passed": worst < tol}
            )
    return reports


# ---------------------------------------------------------------------------
# End-to-end audit
# ---------------------------------------------------------------------------

MINIATURE = NetConfig(width=4, blocks_per_stage=2, input_size=(32, 32))


def audit_network(
    config: NetConfig = MINIATURE,
    tol: float = 1e-4,
    eps: float = 1e-6,
    samples: int = 4,
    seed: int = 0,
    batch: int = 4,
    event_log: EventLog | None = None,
) -> list[GradReport]:
    """Check sampled elements of every parameter of the full network loss in f64."""
    params = build_net(config, "f64")
    spec = LossSpec.for_config(config)
    data = SyntheticDataset(SynthSpec(canvas=config.input_size, seed=seed, n_train=batch, n_val=0), "f64", flip=False)
    images, labels = next(data.batches("train", batch))

    def fn() -> Tensor:
        logits, aux = gsto_hrnet_forward(images, config, params)
        return network_loss(logits, aux, labels, spec).total

    with Tape():
        backward(fn())

    skip = normalized_biases(params.store)
    reports = []
    for name, entry in params.store.trainable():
        if name in skip:
            continue
        t = entry.tensor
        idx = sample_indices(t.size, samples, seed, name)
        analytic = t.grad.reshape(-1)[idx]
        numeric = finite_diff_at(fn, t, idx, eps)
        report = grad_check(analytic, numeric, tol, name)
        # report flat indices into the parameter, not into the sample
        report.worst = [(idx[i], a, n, e) for i, a, n, e in report.worst]
        reports.append(report)
        if event_log is not None:
            event_log.record_event(
                "gradcheck_case", "network", {"param": name, "max_error": report.max_error, "passed": report.passed}
            )
    return reports


def format_reports(reports: Sequence[GradReport]) -> str:
    lines = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status} {r.name:<40} max_rel_err={r.max_error:.3e} checked={r.checked}"
        if not r.passed and r.worst:
            i, a, n, e = r.worst[0]
            line += f" worst=[{i}] analytic={a:.6e} numeric={n:.6e}"
        lines.append(line)
    return "\n".join(lines) + "\n"
