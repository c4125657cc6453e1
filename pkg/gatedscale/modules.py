"""Multi-scale building blocks assembled from GSTO sites.

Each module comes as a ``build_*`` function that registers parameters in a
ParamStore and a forward function that consumes them. Every forward takes
``gate_override`` (forwarded to each GSTO site) and an optional Trace.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

from gatedscale import ops
from gatedscale.errors import ShapeError
from gatedscale.gsto import (
    GatePredictorParams,
    GstoParams,
    GstoSpec,
    ProbabilityMap,
    ScaleTransferSpec,
    Trace,
    build_gate,
    gate_feature,
    gsto_transfer,
    predict_classes,
    scoped,
)
from gatedscale.params import Conv2dParams, NormParams, ParamStore
from gatedscale.tensor import Tensor

BranchSet = list[Tensor]


@dataclass
class CBR:
    """Conv + BatchNorm + ReLU. Without a norm it is conv + ReLU."""

    conv: Conv2dParams
    norm: NormParams | None

    @classmethod
    def identity(cls, channels: int, dtype) -> CBR:
        """1x1 identity conv with eval-mode identity norm. Passes non-negative input through."""
        return cls(Conv2dParams.identity(channels, dtype), NormParams.identity(channels, dtype))


def build_cbr(
    store: ParamStore,
    name: str,
    c_in: int,
    c_out: int,
    kernel: int = 3,
    *,
    stride: int = 1,
    dilation: int = 1,
    norm: bool = True,
) -> CBR:
    return CBR(
        store.conv(f"{name}.conv", c_in, c_out, kernel, stride=stride, dilation=dilation),
        store.norm(f"{name}.bn", c_out) if norm else None,
    )


def cbr(x: Tensor, p: CBR) -> Tensor:
    y = ops.conv2d(x, p.conv)
    return ops.relu(y if p.norm is None else ops.batch_norm(y, p.norm))


@dataclass
class BasicBlock:
    first: CBR
    second: CBR


def build_basic_block(store: ParamStore, name: str, channels: int) -> BasicBlock:
    return BasicBlock(build_cbr(store, f"{name}.cbr1", channels, channels), build_cbr(store, f"{name}.cbr2", channels, channels))


def basic_block(x: Tensor, p: BasicBlock) -> Tensor:
    """Two 3x3 CBR with an identity skip."""
    return ops.relu(ops.add(cbr(cbr(x, p.first), p.second), x))


def set_norm_mode(params, mode: str) -> None:
    """Switch every NormParams reachable from ``params`` to train or eval."""
    if mode not in ("train", "eval"):
        raise ValueError(f"norm mode is train or eval, got {mode!r}")
    if isinstance(params, NormParams):
        params.mode = mode
    elif dataclasses.is_dataclass(params) and not isinstance(params, type):
        for f in dataclasses.fields(params):
            set_norm_mode(getattr(params, f.name), mode)
    elif isinstance(params, dict):
        for v in params.values():
            set_norm_mode(v, mode)
    elif isinstance(params, (list, tuple)):
        for v in params:
            set_norm_mode(v, mode)


def check_branches(branches: Sequence[Tensor]) -> None:
    """Branch k must be half of branch k-1 per side with twice its channels."""
    if not branches:
        raise ShapeError("a branch set needs at least one branch")
    for k in range(1, len(branches)):
        prev, cur = branches[k - 1].shape, branches[k].shape
        if cur[0] != prev[0]:
            raise ShapeError(f"branch {k} batch {cur[0]} differs from {prev[0]}")
        if prev[2] != 2 * cur[2] or prev[3] != 2 * cur[3]:
            raise ShapeError(f"branch {k} is {cur[2:]} but must be half of {prev[2:]}")
        if cur[1] != 2 * prev[1]:
            raise ShapeError(f"branch {k} has {cur[1]} channels, expected {2 * prev[1]}")


def upsample_to(x: Tensor, hw: tuple[int, int]) -> Tensor:
    return x if x.shape[2:] == tuple(hw) else ops.bilinear_upsample(x, hw)


# ---------------------------------------------------------------------------
# Gated fusion
# ---------------------------------------------------------------------------

GfmParams = dict[tuple[int, int], GstoParams]


def build_gfm(store: ParamStore, name: str, widths: Sequence[int], mode: str) -> GfmParams:
    """One independent GSTO per ordered (source, target) pair."""
    out: GfmParams = {}
    for s, cs in enumerate(widths):
        for r, cr in enumerate(widths):
            if s == r:
                continue
            site = f"{name}.{s}to{r}"
            out[(s, r)] = GstoParams(store.conv(f"{site}.conv", cs, cr), build_gate(store, site, cs, 0, mode))
    return out


def gfm(
    branches: Sequence[Tensor],
    params: GfmParams,
    mode: str = "unsupervised",
    *,
    gate_override=None,
    trace: Trace | None = None,
) -> BranchSet:
    """out_r = F_r + sum over s != r of gsto_transfer(F_s -> r), summed in source order."""
    check_branches(branches)
    fused = []
    for r, target in enumerate(branches):
        out = target
        for s, source in enumerate(branches):
            if s == r:
                continue
            if (s, r) not in params:
                raise ShapeError(f"gfm has no parameters for the {s}->{r} edge")
            spec = GstoSpec(ScaleTransferSpec.between(source.shape, target.shape), mode, gate_override)
            moved, _ = gsto_transfer(source, spec, params[(s, r)], scoped(trace, f"gfm_{s}to{r}"))
            out = ops.add(out, moved)
        fused.append(out)
    return fused


# ---------------------------------------------------------------------------
# Branch generation
# ---------------------------------------------------------------------------

def build_gtm(store: ParamStore, name: str, widths: Sequence[int], classes: int, mode: str) -> GstoParams:
    united = sum(widths)
    return GstoParams(store.conv(f"{name}.conv", united, 2 * widths[-1]), build_gate(store, name, united, classes, mode))


def gtm(
    branches: Sequence[Tensor],
    params: GstoParams,
    mode: str,
    *,
    gate_override=None,
    trace: Trace | None = None,
) -> tuple[Tensor, ProbabilityMap | None]:
    """Upsample every branch to branch 0, concatenate, and GSTO the result to
    half the lowest branch's resolution with twice its width."""
    check_branches(branches)
    h, w = branches[0].shape[2:]
    last = branches[-1].shape
    if last[2] % 2 or last[3] % 2:
        raise ShapeError(f"lowest branch {last[2:]} cannot be halved")
    united = ops.concat_channels([upsample_to(b, (h, w)) for b in branches])
    target = (last[2] // 2, last[3] // 2)
    spec = GstoSpec(ScaleTransferSpec(target, 2 * last[1], "down"), mode, gate_override)
    return gsto_transfer(united, spec, params, scoped(trace, "gtm"))


def build_strided_transition(store: ParamStore, name: str, widths: Sequence[int]) -> CBR:
    return build_cbr(store, name, widths[-1], 2 * widths[-1], 3, stride=2)


def strided_transition(branches: Sequence[Tensor], p: CBR) -> Tensor:
    """HRNet's branch generation: 3x3 stride-2 CBR on the lowest branch."""
    return cbr(branches[-1], p)


# ---------------------------------------------------------------------------
# Pyramid pooling
# ---------------------------------------------------------------------------

@dataclass
class PyramidLevel:
    bins: int
    gate: GatePredictorParams | None
    reduce: CBR


@dataclass
class PPMParams:
    levels: list[PyramidLevel]
    fuse: CBR
    predictor: Conv2dParams | None = None


def build_ppm(
    store: ParamStore,
    name: str,
    channels: int,
    out_channels: int,
    bins: Sequence[int] = (1, 2, 3, 6),
    mode: str = "unsupervised",
    classes: int = 0,
) -> PPMParams:
    """Supervised levels share one predictor and keep their own theta.

    The bins = 1 level reduces a 1x1 map, so it is conv + ReLU without a norm.
    """
    predictor = store.conv(f"{name}.gate.predictor", channels, classes) if mode == "supervised" else None
    reduced = max(1, channels // len(bins))
    levels = [
        PyramidLevel(
            b,
            build_gate(store, f"{name}.level{i}", channels, classes, mode, predictor),
            build_cbr(store, f"{name}.level{i}.reduce", channels, reduced, 1, norm=b > 1),
        )
        for i, b in enumerate(bins)
    ]
    fuse = build_cbr(store, f"{name}.fuse", channels + reduced * len(bins), out_channels, 1)
    return PPMParams(levels, fuse, predictor)


def gsto_ppm(
    F: Tensor,
    params: PPMParams,
    mode: str = "unsupervised",
    *,
    gate_override=None,
    trace: Trace | None = None,
) -> tuple[Tensor, ProbabilityMap | None]:
    """Pyramid pooling with every level gated before pooling."""
    h, w = F.shape[2:]
    P = None
    if mode == "supervised" and gate_override is None:
        if params.predictor is None:
            raise ShapeError("supervised PPM needs a shared predictor")
        P = predict_classes(F, params.predictor)
    outs = [F]
    for i, level in enumerate(params.levels):
        if level.bins > min(h, w):
            raise ShapeError(f"PPM bins {level.bins} exceed input {(h, w)}")
        gated, _ = gate_feature(F, mode, level.gate, override=gate_override, shared=P, trace=scoped(trace, f"level{i}"))
        pooled = ops.adaptive_avg_pool(gated, (level.bins, level.bins))
        outs.append(ops.bilinear_upsample(cbr(pooled, level.reduce), (h, w)))
    return cbr(ops.concat_channels(outs), params.fuse), P


# ---------------------------------------------------------------------------
# Atrous spatial pyramid pooling
# ---------------------------------------------------------------------------

@dataclass
class AtrousBranch:
    rate: int
    gate: GatePredictorParams | None
    conv: CBR


@dataclass
class ASPPParams:
    branches: list[AtrousBranch]
    project: CBR
    # Image-level branch: global pool, 1x1 conv + ReLU. No norm, since it sees one value per channel.
    image: Conv2dParams | None = None
    predictor: Conv2dParams | None = None


def build_aspp(
    store: ParamStore,
    name: str,
    channels: int,
    out_channels: int,
    rates: Sequence[int] = (1, 6, 12, 18),
    mode: str = "unsupervised",
    classes: int = 0,
    image_pool: bool = True,
) -> ASPPParams:
    """Rate 1 is a 1x1 conv; larger rates are 3x3 convs with padding = dilation."""
    predictor = store.conv(f"{name}.gate.predictor", channels, classes) if mode == "supervised" else None
    branches = []
    for i, rate in enumerate(rates):
        kernel = 1 if rate == 1 else 3
        branches.append(
            AtrousBranch(
                rate,
                build_gate(store, f"{name}.branch{i}", channels, classes, mode, predictor),
                build_cbr(store, f"{name}.branch{i}", channels, out_channels, kernel, dilation=rate),
            )
        )
    image = store.conv(f"{name}.image", channels, out_channels) if image_pool else None
    width = out_channels * (len(rates) + (1 if image_pool else 0))
    return ASPPParams(branches, build_cbr(store, f"{name}.project", width, out_channels, 1), image, predictor)


def gsto_aspp(
    F: Tensor,
    params: ASPPParams,
    mode: str = "unsupervised",
    *,
    gate_override=None,
    trace: Trace | None = None,
) -> tuple[Tensor, ProbabilityMap | None]:
    """Parallel dilated branches, each behind its own gate, plus the image-level branch."""
    h, w = F.shape[2:]
    P = None
    if mode == "supervised" and gate_override is None:
        if params.predictor is None:
            raise ShapeError("supervised ASPP needs a shared predictor")
        P = predict_classes(F, params.predictor)
    outs = []
    for i, branch in enumerate(params.branches):
        conv = branch.conv.conv
        if branch.rate != conv.dilation or (conv.kernel == 3 and conv.padding != conv.dilation):
            raise ShapeError(
                f"ASPP rate {branch.rate} needs dilation = padding = rate, got "
                f"dilation {conv.dilation} padding {conv.padding}"
            )
        gated, _ = gate_feature(F, mode, branch.gate, override=gate_override, shared=P, trace=scoped(trace, f"branch{i}"))
        outs.append(cbr(gated, branch.conv))
    if params.image is not None:
        pooled = ops.relu(ops.conv2d(ops.adaptive_avg_pool(F, (1, 1)), params.image))
        outs.append(ops.bilinear_upsample(pooled, (h, w)))
    return cbr(ops.concat_channels(outs), params.project), P
