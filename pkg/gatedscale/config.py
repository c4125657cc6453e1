"""Run configuration: one flat set of ``key = value`` settings.

Resolution order is defaults, then the ``--config`` file, then each
``--set key=value`` in order, then the ``--seed/--out/--precision`` flags.
The resolved config is echoed to ``<out>/config.txt`` in a form that
parses back to an equal config.
"""

from __future__ import annotations

import dataclasses
import json
import re
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from gatedscale.errors import ConfigError
from gatedscale.hrnet import NetConfig
from gatedscale.losses import LossSpec
from gatedscale.optim import OptimState
from gatedscale.synth import SynthSpec
from gatedscale.tensor import DTYPES

ALL_VARIANTS = (
    "hrnet",
    "baseline",
    "baseline_sup",
    "gfm",
    "gtm_unsup",
    "gtm_sup",
    "gtm_unsup_gfm",
    "full",
    "ppm",
    "gsto_ppm",
    "aspp",
    "gsto_aspp",
)


@dataclass(frozen=True)
class RunConfig:
    # network
    width: int = 8
    stages: int = 4
    blocks_per_stage: int = 2
    classes: int = 4
    gtm_modes: tuple[str, ...] = ("unsupervised", "supervised", "supervised")
    gfm_mode: str = "unsupervised"
    transition: str = "gtm"
    aux_heads: tuple[bool, ...] = (True, False, False)
    head: str = "concat"
    head_gate_mode: str = "none"
    head_loss_weight: float = 0.4
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    aspp_rates: tuple[int, ...] = (1, 2, 4, 6)
    # loss
    loss_weights: tuple[float, ...] = (0.2, 0.3, 0.5, 1.0)
    ignore_index: int = 255
    # optimizer
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    max_iter: int = 400
    batch_size: int = 16
    # data
    image_size: int = 64
    n_train: int = 16
    n_val: int = 8
    noise: float = 0.1
    flip: bool = True
    data_seed: int = 0
    # run
    seed: int = 0
    precision: str = "f32"
    out: str = "out"
    log_every: int = 10
    eval_every: int = 100
    # compare
    variants: tuple[str, ...] = ALL_VARIANTS
    seeds: int = 5
    workers: int = 1
    # gradcheck
    gradcheck_samples: int = 4

    def __post_init__(self):
        if self.precision not in DTYPES:
            raise ConfigError(f"precision is one of {sorted(DTYPES)}, got {self.precision!r}")
        for key in ("batch_size", "log_every", "eval_every", "seeds", "workers", "gradcheck_samples"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        unknown = [v for v in self.variants if v not in ALL_VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}; choose from {', '.join(ALL_VARIANTS)}")

    def net_config(self) -> NetConfig:
        return NetConfig(
            width=self.width,
            stages=self.stages,
            blocks_per_stage=self.blocks_per_stage,
            classes=self.classes,
            gtm_modes=self.gtm_modes,
            gfm_mode=self.gfm_mode,
            transition=self.transition,
            aux_heads=self.aux_heads,
            head=self.head,
            head_gate_mode=self.head_gate_mode,
            head_loss_weight=self.head_loss_weight,
            ppm_bins=self.ppm_bins,
            aspp_rates=self.aspp_rates,
            loss_weights=self.loss_weights,
            input_size=(self.image_size, self.image_size),
            seed=self.seed,
        )

    def optim_state(self) -> OptimState:
        return OptimState(self.base_lr, self.momentum, self.weight_decay, self.power, self.max_iter)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            canvas=(self.image_size, self.image_size),
            noise=self.noise,
            seed=self.data_seed,
            n_train=self.n_train,
            n_val=self.n_val,
        )

    def loss_spec(self) -> LossSpec:
        return LossSpec.for_config(self.net_config(), self.ignore_index)


_HINTS = typing.get_type_hints(RunConfig)
FIELDS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _parse_scalar(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_value(key: str, text: str):
    """Convert the text of ``key`` to its field type. Tuples are comma separated."""
    if key not in _HINTS:
        raise ConfigError(f"unknown key {key!r}")
    kind = _HINTS[key]
    text = text.strip()
    if typing.get_origin(kind) is tuple:
        item = typing.get_args(kind)[0]
        if not text:
            return ()
        return tuple(_parse_scalar(item, part.strip()) for part in text.split(","))
    return _parse_scalar(kind, text)


# "#" opens a comment at line start or after whitespace. Quoted strings may hold anything.
_COMMENT = re.compile(r"\s#")
_NEEDS_QUOTES = re.compile(r'[#"]')


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    text = str(value)
    if isinstance(value, str) and (_NEEDS_QUOTES.search(text) or text != text.strip()):
        return json.dumps(text)
    return text


def _value_text(key: str, text: str, where: str):
    if text.startswith('"'):
        if _HINTS[key] is not str:
            raise ConfigError(f"{where}: {key} does not take a quoted value")
        try:
            value, end = json.JSONDecoder().raw_decode(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{where}: bad quoted value for {key}: {e.msg}") from e
        rest = text[end:].strip()
        if rest and not rest.startswith("#"):
            raise ConfigError(f"{where}: unexpected text after quoted value: {rest!r}")
        return value
    try:
        return parse_value(key, _COMMENT.split(text, 1)[0])
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from e


def _assignments(lines: Iterable[str], origin: str) -> dict:
    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{origin}:{number}" if origin else f"line {number}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _value_text(key, text, where)
    return values


def parse_config(text: str, base: RunConfig | None = None, origin: str = "") -> RunConfig:
    """Apply the assignments in ``text`` on top of ``base`` (defaults when None)."""
    return dataclasses.replace(base or RunConfig(), **_assignments(text.splitlines(), origin))


def load_config(path: Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base, str(path))


def apply_overrides(config: RunConfig, assignments: Iterable[str]) -> RunConfig:
    """Apply ``key=value`` strings in order."""
    for i, item in enumerate(assignments, start=1):
        config = dataclasses.replace(config, **_assignments([item], f"--set #{i}"))
    return config


def resolve(
    path: Path | None = None,
    sets: Iterable[str] = (),
    *,
    seed: int | None = None,
    out: str | None = None,
    precision: str | None = None,
) -> RunConfig:
    config = load_config(path) if path else RunConfig()
    config = apply_overrides(config, sets)
    flags = {k: v for k, v in (("seed", seed), ("out", out), ("precision", precision)) if v is not None}
    return dataclasses.replace(config, **flags)


def format_config(config: RunConfig) -> str:
    return "".join(f"{key} = {format_value(getattr(config, key))}\n" for key in FIELDS)


def echo_config(config: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.txt"
    path.write_text(format_config(config), encoding="utf-8")
    return path
