"""The toy GSTO-HRNet: stem, stages of parallel branches, and a segmentation head.

Stage s (1-based) runs ``blocks_per_stage`` basic blocks on each of its s
branches, fuses them with a GFM and, except for the last stage, spawns
branch s+1 with a GTM (or HRNet's strided transition). Supervised GTMs
contribute a class-score map to the auxiliary losses.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from gatedscale import ops
from gatedscale.errors import ConfigError, ShapeError
from gatedscale.gsto import GATE_MODES, GstoParams, ProbabilityMap, Trace, gate_param_count, scoped
from gatedscale.modules import (
    CBR,
    ASPPParams,
    BasicBlock,
    GfmParams,
    PPMParams,
    basic_block,
    build_aspp,
    build_basic_block,
    build_cbr,
    build_gfm,
    build_gtm,
    build_ppm,
    build_strided_transition,
    cbr,
    gfm,
    gsto_aspp,
    gsto_ppm,
    gtm,
    strided_transition,
    upsample_to,
)
from gatedscale.params import Conv2dParams, ParamStore
from gatedscale.tensor import Tensor

TRANSITIONS = ("gtm", "strided")
HEADS = ("concat", "ppm", "aspp")


@dataclass(frozen=True)
class NetConfig:
    width: int = 8
    stages: int = 4
    blocks_per_stage: int = 2
    classes: int = 4
    # Gate mode of the GTM after stage 1, 2, 3.
    gtm_modes: tuple[str, ...] = ("unsupervised", "supervised", "supervised")
    gfm_mode: str = "unsupervised"
    transition: str = "gtm"
    # Auxiliary 1x1 head on branch 0 after stage 1, 2, 3 (used when that stage has no supervised GTM).
    aux_heads: tuple[bool, ...] = (True, False, False)
    head: str = "concat"
    head_gate_mode: str = "none"
    # Weight of the class-score map of a supervised PPM or ASPP head.
    head_loss_weight: float = 0.4
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    aspp_rates: tuple[int, ...] = (1, 2, 4, 6)
    loss_weights: tuple[float, ...] = (0.2, 0.3, 0.5, 1.0)
    input_size: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.stages < 1 or self.width < 1 or self.blocks_per_stage < 0 or self.classes < 2:
            raise ConfigError(
                f"bad net size: stages={self.stages} width={self.width} "
                f"blocks_per_stage={self.blocks_per_stage} classes={self.classes}"
            )
        for key in ("gtm_modes", "aux_heads"):
            if len(getattr(self, key)) != self.stages - 1:
                raise ConfigError(f"{key} needs {self.stages - 1} entries, got {len(getattr(self, key))}")
        if len(self.loss_weights) != self.stages:
            raise ConfigError(f"loss_weights needs {self.stages} entries, got {len(self.loss_weights)}")
        for mode in (*self.gtm_modes, self.gfm_mode, self.head_gate_mode):
            if mode not in GATE_MODES:
                raise ConfigError(f"unknown gate mode {mode!r}")
        if self.gfm_mode == "supervised":
            raise ConfigError("GFM gates are none or unsupervised")
        if self.head_loss_weight < 0:
            raise ConfigError(f"head_loss_weight must be >= 0, got {self.head_loss_weight}")
        if self.transition not in TRANSITIONS:
            raise ConfigError(f"transition is one of {TRANSITIONS}, got {self.transition!r}")
        if self.transition == "strided" and any(m != "none" for m in self.gtm_modes):
            raise ConfigError("strided transitions carry no gates; set gtm_modes to none")
        if self.head not in HEADS:
            raise ConfigError(f"head is one of {HEADS}, got {self.head!r}")
        step = 2 ** (self.stages + 1)
        h, w = self.input_size
        if h % step or w % step:
            raise ConfigError(f"input_size {self.input_size} must be divisible by {step}")

    def widths(self) -> list[int]:
        return [self.width * 2**k for k in range(self.stages)]

    def aux_source(self, stage: int) -> str | None:
        """Where the loss of ``stage`` comes from: 'gtm', 'head' or None (no loss)."""
        if not 1 <= stage < self.stages:
            return None
        if self.transition == "gtm" and self.gtm_modes[stage - 1] == "supervised":
            return "gtm"
        return "head" if self.aux_heads[stage - 1] else None

    def stage_has_aux(self, stage: int) -> bool:
        return self.aux_source(stage) is not None

    def head_supervised(self) -> bool:
        return self.head != "concat" and self.head_gate_mode == "supervised"

    def without_gates(self) -> NetConfig:
        """Same architecture with every GSTO site ungated."""
        return dataclasses.replace(
            self, gtm_modes=("none",) * (self.stages - 1), gfm_mode="none", head_gate_mode="none"
        )


@dataclass
class StageParams:
    blocks: list[list[BasicBlock]]
    gfm: GfmParams = field(default_factory=dict)
    transition: GstoParams | CBR | None = None
    aux_head: Conv2dParams | None = None


@dataclass
class HeadParams:
    kind: str
    classifier: Conv2dParams
    ppm: PPMParams | None = None
    aspp: ASPPParams | None = None


@dataclass
class NetParams:
    store: ParamStore
    stem: list[CBR]
    stages: list[StageParams]
    head: HeadParams


def build_net(config: NetConfig, dtype: str = "f32") -> NetParams:
    """Register every parameter of the network, in forward order, in a fresh store."""
    store = ParamStore(dtype, seed=config.seed)
    w, c0 = config.width, config.classes
    widths = config.widths()
    stem = [build_cbr(store, "stem.0", 3, w, 3, stride=2), build_cbr(store, "stem.1", w, w, 3, stride=2)]

    stages = []
    for s in range(1, config.stages + 1):
        current = widths[:s]
        blocks = [
            [build_basic_block(store, f"stage{s}.branch{b}.block{i}", c) for i in range(config.blocks_per_stage)]
            for b, c in enumerate(current)
        ]
        sp = StageParams(blocks, build_gfm(store, f"stage{s}.gfm", current, config.gfm_mode))
        if s < config.stages:
            if config.transition == "gtm":
                sp.transition = build_gtm(store, f"stage{s}.gtm", current, c0, config.gtm_modes[s - 1])
            else:
                sp.transition = build_strided_transition(store, f"stage{s}.transition", current)
            if config.aux_source(s) == "head":
                sp.aux_head = store.conv(f"stage{s}.aux", w, c0)
        stages.append(sp)

    united = sum(widths)
    if config.head == "ppm":
        ppm = build_ppm(store, "head.ppm", united, united, config.ppm_bins, config.head_gate_mode, c0)
        head = HeadParams("ppm", store.conv("head.classifier", united, c0), ppm=ppm)
    elif config.head == "aspp":
        aspp = build_aspp(store, "head.aspp", united, united, config.aspp_rates, config.head_gate_mode, c0)
        head = HeadParams("aspp", store.conv("head.classifier", united, c0), aspp=aspp)
    else:
        head = HeadParams("concat", store.conv("head.classifier", united, c0))
    return NetParams(store, stem, stages, head)


def gsto_hrnet_forward(
    image: Tensor,
    config: NetConfig,
    params: NetParams,
    *,
    gate_override=None,
    trace: Trace | None = None,
) -> tuple[Tensor, list[ProbabilityMap]]:
    """Logits at input resolution plus the auxiliary class-score maps in stage order.

    A supervised PPM or ASPP head adds its map last, tagged with stage = config.stages.
    """
    n, c, h, w = image.shape
    if c != 3:
        raise ShapeError(f"images have 3 channels, got {c}")
    step = 2 ** (config.stages + 1)
    if h % step or w % step:
        raise ShapeError(f"image {(h, w)} is not divisible by {step}")

    x = image
    for p in params.stem:
        x = cbr(x, p)
    branches = [x]
    aux: list[ProbabilityMap] = []

    for s, sp in enumerate(params.stages, start=1):
        stage_trace = scoped(trace, f"stage{s}")
        for b, blocks in enumerate(sp.blocks):
            for block in blocks:
                branches[b] = basic_block(branches[b], block)
        if len(branches) > 1:
            branches = gfm(branches, sp.gfm, config.gfm_mode, gate_override=gate_override, trace=stage_trace)
        if stage_trace is not None:
            for b, feature in enumerate(branches):
                stage_trace.add(f"branch{b}_feature", feature)
        if s == config.stages:
            break

        if config.transition == "gtm":
            new, P = gtm(branches, sp.transition, config.gtm_modes[s - 1], gate_override=gate_override, trace=stage_trace)
            if P is not None:
                P.stage = s
                aux.append(P)
        else:
            new = strided_transition(branches, sp.transition)
        if sp.aux_head is not None:
            aux.append(ProbabilityMap(ops.conv2d(branches[0], sp.aux_head), stage=s))
        branches.append(new)

    size = branches[0].shape[2:]
    rep = ops.concat_channels([upsample_to(b, size) for b in branches])
    head = params.head
    P = None
    if head.kind == "ppm":
        rep, P = gsto_ppm(rep, head.ppm, config.head_gate_mode, gate_override=gate_override, trace=scoped(trace, "head_ppm"))
    elif head.kind == "aspp":
        rep, P = gsto_aspp(rep, head.aspp, config.head_gate_mode, gate_override=gate_override, trace=scoped(trace, "head_aspp"))
    if P is not None:
        P.stage = config.stages
        aux.append(P)
    logits = ops.bilinear_upsample(ops.conv2d(rep, head.classifier), (h, w))
    return logits, aux


@dataclass(frozen=True)
class GateSite:
    name: str
    channels: int
    mode: str
    shared_predictor: bool = False

    def param_count(self, classes: int) -> int:
        return gate_param_count(self.channels, classes, self.mode, self.shared_predictor)


def gate_sites(config: NetConfig) -> list[GateSite]:
    """Every gated transfer in the network, in build order; ungated sites are left out."""
    widths = config.widths()
    sites = []
    for s in range(1, config.stages + 1):
        current = widths[:s]
        if config.gfm_mode != "none":
            for a, ca in enumerate(current):
                sites.extend(
                    GateSite(f"stage{s}.gfm.{a}to{r}", ca, config.gfm_mode) for r in range(len(current)) if r != a
                )
        if s < config.stages and config.transition == "gtm" and config.gtm_modes[s - 1] != "none":
            sites.append(GateSite(f"stage{s}.gtm", sum(current), config.gtm_modes[s - 1]))
    if config.head_gate_mode != "none" and config.head != "concat":
        united = sum(widths)
        n = len(config.ppm_bins) if config.head == "ppm" else len(config.aspp_rates)
        part = "level" if config.head == "ppm" else "branch"
        # Supervised levels share one predictor; the first site carries its count.
        sites.extend(
            GateSite(f"head.{config.head}.{part}{i}", united, config.head_gate_mode, shared_predictor=i > 0)
            for i in range(n)
        )
    return sites


def gate_overhead(config: NetConfig) -> int:
    return sum(site.param_count(config.classes) for site in gate_sites(config))


def check_gate_params(config: NetConfig, params: NetParams) -> None:
    """Cross-check the store's gate entries against the per-site formulas."""
    counted = params.store.total_param_count(lambda name: ".gate." in name)
    expected = gate_overhead(config)
    if counted != expected:
        raise ShapeError(f"store holds {counted} gate parameters, site formulas give {expected}")
