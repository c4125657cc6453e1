"""Gated scale transfer.

A conventional scale transfer maps a feature F (C, H, W) to (C', H', W')
with a 1x1 channel convolution followed by bilinear up-sampling or average
pooling. The gated form first multiplies F by a single-channel spatial gate
g in (0, 1), computed at the source resolution either from F itself
(unsupervised) or from a class-score map P predicted from F (supervised).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from gatedscale import ops
from gatedscale.errors import ConfigError, ShapeError
from gatedscale.params import Conv2dParams, ParamStore
from gatedscale.tensor import Tensor

GATE_MODES = ("none", "unsupervised", "supervised")
DIRECTIONS = ("up", "down", "same")


@dataclass(frozen=True)
class ScaleTransferSpec:
    """Target resolution and width of a transfer, and how to get there."""

    out_hw: tuple[int, int]
    out_channels: int
    direction: str
    channel_conv: bool = True

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ShapeError(f"unknown transfer direction {self.direction!r}")

    @classmethod
    def between(cls, source: tuple[int, ...], target: tuple[int, ...], channel_conv: bool = True) -> ScaleTransferSpec:
        """Spec that takes a tensor of shape ``source`` to the resolution and width of ``target``."""
        (sh, sw), (th, tw) = source[2:], target[2:]
        if (th, tw) == (sh, sw):
            direction = "same"
        elif th >= sh and tw >= sw:
            direction = "up"
        else:
            direction = "down"
        return cls((th, tw), target[1], direction, channel_conv)


@dataclass
class GateMap:
    """Per-pixel gate of shape (N, 1, H, W)."""

    values: Tensor

    def __post_init__(self):
        if self.values.shape[1] != 1:
            raise ShapeError(f"gate maps have one channel, got {self.values.shape}")


@dataclass
class ProbabilityMap:
    """Class scores P (N, c0, H, W) kept as logits, tagged with the stage that produced them."""

    logits: Tensor
    stage: int = 0

    @property
    def classes(self) -> int:
        return self.logits.shape[1]


@dataclass
class GatePredictorParams:
    """rho (C -> 1) for the unsupervised gate; predictor (C -> c0) and theta (c0 -> 1) for the supervised one."""

    mode: str
    rho: Conv2dParams | None = None
    predictor: Conv2dParams | None = None
    theta: Conv2dParams | None = None

    def __post_init__(self):
        if self.mode == "unsupervised":
            if self.rho is None or self.rho.c_out != 1 or self.rho.kernel != 1:
                raise ShapeError("unsupervised gate needs a 1x1 C -> 1 rho")
        elif self.mode == "supervised":
            if self.theta is None or self.theta.c_out != 1 or self.theta.kernel != 1:
                raise ShapeError("supervised gate needs a 1x1 c0 -> 1 theta")
            if self.predictor is not None and self.predictor.c_out != self.theta.c_in:
                raise ShapeError(
                    f"predictor emits {self.predictor.c_out} classes but theta reads {self.theta.c_in}"
                )
        else:
            raise ConfigError(f"gate parameters need mode unsupervised or supervised, got {self.mode!r}")


@dataclass
class GstoParams:
    """Parameters of one transfer site: the 1x1 channel conv and the gate."""

    conv: Conv2dParams | None
    gate: GatePredictorParams | None = None


@dataclass
class GstoSpec:
    scale: ScaleTransferSpec
    gate_mode: str = "none"
    # Testing/debugging only: a fixed gate (scalar or (N, 1, H, W)) that
    # replaces the computed one.
    gate_override: float | Tensor | None = None

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")


class Trace:
    """Collects gate maps and features by name during a forward pass."""

    def __init__(self, maps: dict[str, Tensor] | None = None, prefix: str = ""):
        self.maps: dict[str, Tensor] = {} if maps is None else maps
        self.prefix = prefix

    def scoped(self, name: str) -> Trace:
        return Trace(self.maps, f"{self.prefix}{name}_")

    def add(self, key: str, tensor: Tensor) -> None:
        self.maps[self.prefix + key] = tensor

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.maps.items())


def scoped(trace: Trace | None, name: str) -> Trace | None:
    return None if trace is None else trace.scoped(name)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def st_transfer(F: Tensor, spec: ScaleTransferSpec, channel_conv: Conv2dParams | None) -> Tensor:
    """Conventional scale transfer: 1x1 channel conv, then resize."""
    n, c, h, w = F.shape
    if spec.channel_conv:
        if channel_conv is None:
            raise ShapeError("scale transfer asks for a channel conv but none was given")
        if channel_conv.kernel != 1 or channel_conv.c_in != c or channel_conv.c_out != spec.out_channels:
            raise ShapeError(
                f"channel conv {channel_conv.c_in}->{channel_conv.c_out} (k={channel_conv.kernel}) "
                f"does not map {c} to {spec.out_channels} channels"
            )
        x = ops.conv2d(F, channel_conv)
    else:
        if c != spec.out_channels:
            raise ShapeError(f"no channel conv, yet {c} channels must become {spec.out_channels}")
        x = F

    oh, ow = spec.out_hw
    if spec.direction == "same":
        if (oh, ow) != (h, w):
            raise ShapeError(f"'same' transfer with differing sizes {(h, w)} -> {(oh, ow)}")
        return x
    if spec.direction == "up":
        if oh < h or ow < w:
            raise ShapeError(f"'up' transfer cannot shrink {(h, w)} to {(oh, ow)}")
        return ops.bilinear_upsample(x, (oh, ow))
    if oh < 1 or ow < 1 or h % oh or w % ow or h // oh != w // ow or h // oh < 2:
        raise ShapeError(f"'down' transfer needs one integer factor >= 2 from {(h, w)} to {(oh, ow)}")
    return ops.avg_pool_down(x, h // oh)


def compute_gate_unsupervised(F: Tensor, rho: Conv2dParams) -> GateMap:
    """g_ij = sigmoid(sum_m rho_m F_mij + b)."""
    if rho.c_in != F.shape[1]:
        raise ShapeError(f"rho has {rho.c_in} entries, feature has {F.shape[1]} channels")
    return GateMap(ops.sigmoid(ops.conv2d(F, rho)))


def predict_classes(F: Tensor, predictor: Conv2dParams) -> ProbabilityMap:
    """P = 1x1 conv of F, kept as logits."""
    if predictor.c_in != F.shape[1]:
        raise ShapeError(f"predictor reads {predictor.c_in} channels, feature has {F.shape[1]}")
    return ProbabilityMap(ops.conv2d(F, predictor))


def gate_from_scores(P: ProbabilityMap, theta: Conv2dParams) -> GateMap:
    """g_ij = sigmoid(sum_n theta_n P_nij + b)  on raw logits."""
    if theta.c_in != P.classes:
        raise ShapeError(f"theta has {theta.c_in} entries, P has {P.classes} classes")
    return GateMap(ops.sigmoid(ops.conv2d(P.logits, theta)))


def compute_gate_supervised(F: Tensor, params: GatePredictorParams) -> tuple[GateMap, ProbabilityMap]:
    if params.mode != "supervised" or params.predictor is None:
        raise ConfigError(f"supervised gate requested from {params.mode} parameters")
    P = predict_classes(F, params.predictor)
    return gate_from_scores(P, params.theta), P


def apply_gate(F: Tensor, g: GateMap) -> Tensor:
    """F^g_mij = g_ij * F_mij, broadcast over channels."""
    gv = g.values
    if gv.shape[0] != F.shape[0] or gv.shape[2:] != F.shape[2:]:
        raise ShapeError(f"gate {gv.shape} does not match feature {F.shape}")
    return ops.mul(F, gv)


def override_gate(F: Tensor, value: float | Tensor) -> GateMap:
    if isinstance(value, Tensor):
        return GateMap(value)
    n, _, h, w = F.shape
    return GateMap(Tensor(np.full((n, 1, h, w), value, dtype=F.dtype)))


def gate_feature(
    F: Tensor,
    mode: str,
    params: GatePredictorParams | None,
    *,
    override: float | Tensor | None = None,
    shared: ProbabilityMap | None = None,
    trace: Trace | None = None,
) -> tuple[Tensor, ProbabilityMap | None]:
    """Gate F according to ``mode``. Returns the gated feature and P when supervised.

    ``shared`` supplies an already-predicted P for sites that share one
    predictor; the gate is then formed with this site's theta.
    """
    P = None
    if override is not None:
        g = override_gate(F, override)
    elif mode == "none":
        return F, None
    else:
        if params is None or params.mode != mode:
            have = "none" if params is None else params.mode
            raise ConfigError(f"gate mode {mode} but parameters are {have}")
        if mode == "unsupervised":
            g = compute_gate_unsupervised(F, params.rho)
        elif shared is not None:
            P = shared
            g = gate_from_scores(P, params.theta)
        else:
            g, P = compute_gate_supervised(F, params)
    if trace is not None:
        trace.add("gate", g.values)
    return apply_gate(F, g), P


def gsto_transfer(
    F: Tensor, spec: GstoSpec, params: GstoParams, trace: Trace | None = None
) -> tuple[Tensor, ProbabilityMap | None]:
    """Gate at the source resolution, then st_transfer. P is returned only in supervised mode."""
    gated, P = gate_feature(F, spec.gate_mode, params.gate, override=spec.gate_override, trace=trace)
    return st_transfer(gated, spec.scale, params.conv), P


def gate_param_count(channels: int, classes: int, mode: str, shared_predictor: bool = False) -> int:
    """Parameters a gate adds: C + 1 unsupervised; (C*c0 + c0) + (c0 + 1) supervised."""
    if mode == "none":
        return 0
    if mode == "unsupervised":
        return channels + 1
    if mode == "supervised":
        predictor = 0 if shared_predictor else channels * classes + classes
        return predictor + classes + 1
    raise ConfigError(f"unknown gate mode {mode!r}")


def build_gate(
    store: ParamStore,
    name: str,
    channels: int,
    classes: int,
    mode: str,
    predictor: Conv2dParams | None = None,
) -> GatePredictorParams | None:
    """Register a site's gate parameters under ``<name>.gate.*``; None for mode 'none'."""
    if mode == "none":
        return None
    if mode == "unsupervised":
        return GatePredictorParams(mode, rho=store.conv(f"{name}.gate.rho", channels, 1))
    if mode == "supervised":
        if predictor is None:
            predictor = store.conv(f"{name}.gate.predictor", channels, classes)
        return GatePredictorParams(mode, predictor=predictor, theta=store.conv(f"{name}.gate.theta", classes, 1))
    raise ConfigError(f"unknown gate mode {mode!r}")
