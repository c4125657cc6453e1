"""Runs the variant comparison: every variant over every seed on the same data.

Trainings share nothing, so they run concurrently on a bounded pool of
worker threads; results are gathered back in variant/seed order.
"""

from __future__ import annotations

import asyncio
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gatedscale.config import RunConfig
from gatedscale.errors import ConfigError
from gatedscale.hrnet import build_net
from gatedscale.log import EventLog
from gatedscale.loop import count_forward_macs, heatmap_image, run_training
from gatedscale.synth import SyntheticDataset

TREND_CHECKS = (
    ("full", "baseline"),
    ("gfm", "baseline"),
    ("gtm_sup", "baseline"),
    ("gsto_ppm", "ppm"),
    ("gsto_aspp", "aspp"),
)


def _modes(cfg: RunConfig, pattern: str) -> tuple[str, ...]:
    n = cfg.stages - 1
    if pattern == "none":
        return ("none",) * n
    if pattern == "unsupervised":
        return ("unsupervised",) * n
    # unsupervised after stage 1, supervised after the later stages
    return ("unsupervised",) + ("supervised",) * (n - 1) if n else ()


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """``cfg`` rewired as one comparison row."""
    n = cfg.stages - 1
    no_aux = (False,) * n
    # Supervised-GTM rows keep the configured stage-1 head; later stages get their loss from the GTMs.
    stage1_aux = cfg.aux_heads[:1] + (False,) * (n - 1)
    baseline = {"gtm_modes": _modes(cfg, "none"), "gfm_mode": "none"}
    common = {"aux_heads": no_aux, "head": "concat", "head_gate_mode": "none"}
    table = {
        "hrnet": {**baseline, "transition": "strided"},
        "baseline": baseline,
        "baseline_sup": {**baseline, "aux_heads": (True,) * n},
        "gfm": {**baseline, "gfm_mode": "unsupervised"},
        "gtm_unsup": {"gtm_modes": _modes(cfg, "unsupervised"), "gfm_mode": "none"},
        "gtm_sup": {"gtm_modes": _modes(cfg, "supervised"), "gfm_mode": "none", "aux_heads": stage1_aux},
        "gtm_unsup_gfm": {"gtm_modes": _modes(cfg, "unsupervised"), "gfm_mode": "unsupervised"},
        "full": {"gtm_modes": _modes(cfg, "supervised"), "gfm_mode": "unsupervised", "aux_heads": stage1_aux},
        "ppm": {**baseline, "head": "ppm"},
        "gsto_ppm": {**baseline, "head": "ppm", "head_gate_mode": "supervised"},
        "aspp": {**baseline, "head": "aspp"},
        "gsto_aspp": {**baseline, "head": "aspp", "head_gate_mode": "supervised"},
    }
    if variant not in table:
        raise ConfigError(f"unknown variant {variant!r}")
    changes = {"transition": "gtm", **common, **table[variant]}
    return dataclasses.replace(cfg, **changes)


@dataclass
class RunOutcome:
    variant: str
    seed: int
    miou: float
    pixel_acc: float


@dataclass
class VariantRow:
    variant: str
    params: int
    gate_params: int
    macs: int
    mean: float
    std: float
    runs: int


class Orchestrator:
    """Schedules (variant, seed) trainings on at most ``cfg.workers`` threads."""

    def __init__(self, cfg: RunConfig, event_log: EventLog, out_dir: Path | None = None):
        self.cfg = cfg
        self.event_log = event_log
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out)

    def seeds(self) -> list[int]:
        return [self.cfg.seed + k for k in range(self.cfg.seeds)]

    def _train_one(self, variant: str, seed: int) -> RunOutcome:
        cfg = dataclasses.replace(variant_config(self.cfg, variant), seed=seed)
        result = run_training(cfg, self.event_log, self.out_dir / variant / f"seed{seed}", f"{variant}/seed{seed}")
        if result.val is None:
            raise ConfigError("compare needs a validation split (n_val >= 1)")
        return RunOutcome(variant, seed, result.val.miou, result.val.pixel_acc)

    async def _run_one(self, sem: asyncio.Semaphore, variant: str, seed: int) -> RunOutcome:
        async with sem:
            self.event_log.record_event("variant_start", variant, {"seed": seed})
            outcome = await asyncio.to_thread(self._train_one, variant, seed)
            self.event_log.record_event("variant_end", variant, {"seed": seed, "miou": outcome.miou})
            return outcome

    async def run(self) -> list[RunOutcome]:
        sem = asyncio.Semaphore(self.cfg.workers)
        jobs = [self._run_one(sem, v, s) for v in self.cfg.variants for s in self.seeds()]
        return list(await asyncio.gather(*jobs))

    def rows(self, outcomes: list[RunOutcome]) -> list[VariantRow]:
        """Aggregate outcomes per variant; sizes and MACs come from a fresh build."""
        dataset = SyntheticDataset(self.cfg.synth_spec(), self.cfg.precision, flip=False)
        image = heatmap_image(dataset)
        rows = []
        for variant in self.cfg.variants:
            net_cfg = variant_config(self.cfg, variant).net_config()
            params = build_net(net_cfg, self.cfg.precision)
            scores = np.array([o.miou for o in outcomes if o.variant == variant])
            rows.append(
                VariantRow(
                    variant,
                    params.store.total_param_count(),
                    params.store.total_param_count(lambda name: ".gate." in name),
                    count_forward_macs(net_cfg, params, image),
                    float(scores.mean()) if scores.size else float("nan"),
                    float(scores.std(ddof=1)) if scores.size > 1 else 0.0,
                    int(scores.size),
                )
            )
        return rows


def trend_checks(rows: list[VariantRow]) -> list[tuple[str, bool]]:
    """Each pairwise ordering that the comparison is expected to show, if both rows exist."""
    by_name = {r.variant: r for r in rows}
    checks = []
    for better, base in TREND_CHECKS:
        if better in by_name and base in by_name:
            checks.append((f"{better} >= {base}", by_name[better].mean >= by_name[base].mean))
    return checks


def format_report(rows: list[VariantRow], checks: list[tuple[str, bool]]) -> str:
    header = f"{'variant':<14} {'params':>9} {'gate':>6} {'gate%':>6} {'conv MACs':>12} {'val mIoU':>17} {'runs':>4}"
    lines = [header, "-" * len(header)]
    for r in rows:
        share = 100.0 * r.gate_params / r.params if r.params else 0.0
        lines.append(
            f"{r.variant:<14} {r.params:>9} {r.gate_params:>6} {share:>5.2f}% {r.macs:>12} "
            f"{r.mean:>8.4f} ± {r.std:<6.4f} {r.runs:>4}"
        )
    if checks:
        lines.append("")
        for label, ok in checks:
            lines.append(f"{label:<24} {'ok' if ok else 'EXCEPTION (toy scale)'}")
    return "\n".join(lines) + "\n"


def compare(cfg: RunConfig, event_log: EventLog) -> str:
    """Train every variant over every seed and write ``compare.txt`` into the output directory."""
    orch = Orchestrator(cfg, event_log)
    outcomes = asyncio.run(orch.run())
    rows = orch.rows(outcomes)
    report = format_report(rows, trend_checks(rows))
    orch.out_dir.mkdir(parents=True, exist_ok=True)
    (orch.out_dir / "compare.txt").write_text(report, encoding="utf-8")
    return report
