"""The training loop: forward, loss, backward, step. Repeat.

A plain function, not a class. Every notable step emits an Event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from gatedscale import ops
from gatedscale.codec import save_checkpoint
from gatedscale.config import RunConfig, echo_config
from gatedscale.errors import NumericError
from gatedscale.gsto import Trace
from gatedscale.heatmap import export_heatmaps
from gatedscale.hrnet import NetConfig, NetParams, build_net, gate_overhead, gsto_hrnet_forward
from gatedscale.log import EventLog, MetricsLog
from gatedscale.losses import network_loss
from gatedscale.metrics import SegEvaluator, pixel_accuracy, predict
from gatedscale.modules import set_norm_mode
from gatedscale.optim import sgd_step
from gatedscale.synth import SyntheticDataset
from gatedscale.tensor import Tape, Tensor, backward, no_grad

CHECKPOINT = "checkpoint.bin"


@dataclass
class EvalReport:
    pixel_acc: float
    mean_acc: float
    miou: float
    iou: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    params: NetParams
    final_loss: float
    # Batch accuracy of the last step, measured in train mode before the update.
    train_acc: float
    val: EvalReport | None
    param_count: int
    gate_params: int
    out_dir: Path
    # Eval-mode metrics over the whole train split after the last step.
    train: EvalReport | None = None


def evaluate(
    config: NetConfig, params: NetParams, dataset: SyntheticDataset, split: str = "val", batch_size: int = 16
) -> EvalReport | None:
    """Eval-mode metrics over a whole split; None when the split is empty."""
    evaluator = SegEvaluator(config.classes)
    set_norm_mode(params, "eval")
    try:
        with no_grad():
            for images, labels in dataset.batches(split, batch_size):
                logits, _ = gsto_hrnet_forward(images, config, params)
                evaluator.update(predict(logits), labels)
    finally:
        set_norm_mode(params, "train")
    if not evaluator.confusion.any():
        return None
    return EvalReport(evaluator.pixel_accuracy(), evaluator.mean_accuracy(), evaluator.miou(), evaluator.iou())


def count_forward_macs(config: NetConfig, params: NetParams, image: Tensor) -> int:
    """Convolution multiply-accumulates of one eval-mode forward pass."""
    set_norm_mode(params, "eval")
    try:
        with no_grad(), ops.count_macs() as counter:
            gsto_hrnet_forward(image, config, params)
    finally:
        set_norm_mode(params, "train")
    return counter.total


def heatmap_image(dataset: SyntheticDataset) -> Tensor:
    split = dataset.val or dataset.train
    return Tensor(split[0][0][None].astype(dataset.dtype))


def trace_forward(config: NetConfig, params: NetParams, image: Tensor, gate_override=None) -> Trace:
    trace = Trace()
    set_norm_mode(params, "eval")
    try:
        with no_grad():
            gsto_hrnet_forward(image, config, params, gate_override=gate_override, trace=trace)
    finally:
        set_norm_mode(params, "train")
    return trace


def run_training(cfg: RunConfig, event_log: EventLog, out_dir: Path | None = None, name: str = "train") -> TrainResult:
    """Train one network per ``cfg``; writes config, metrics, checkpoint and heatmaps into ``out_dir``."""
    out_dir = Path(out_dir if out_dir is not None else cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    event_log.record_event("config_echoed", name, {"path": str(out_dir / "config.txt")})

    net_cfg = cfg.net_config()
    loss_spec = cfg.loss_spec()
    state = cfg.optim_state()
    params = build_net(net_cfg, cfg.precision)
    dataset = SyntheticDataset(cfg.synth_spec(), cfg.precision, cfg.flip)
    metrics = MetricsLog(out_dir / "metrics.txt", net_cfg.stages, head=loss_spec.head_weight is not None)
    param_count = params.store.total_param_count()
    gates = gate_overhead(net_cfg)

    event_log.record_event(
        "run_start",
        name,
        {"params": param_count, "gate_params": gates, "max_iter": cfg.max_iter, "seed": cfg.seed},
    )

    loss_value, train_acc, val = float("nan"), 0.0, None
    for it in range(cfg.max_iter):
        images, labels = dataset.train_batch(it, cfg.batch_size)
        with Tape():
            logits, aux = gsto_hrnet_forward(images, net_cfg, params)
            parts = network_loss(logits, aux, labels, loss_spec)
            loss_value = parts.total.item()
            if not math.isfinite(loss_value):
                event_log.record_event("nonfinite_loss", name, {"iter": it, "loss": loss_value})
                raise NumericError(f"{name}: loss became {loss_value} at iteration {it}")
            backward(parts.total)
        lr = sgd_step(params.store, state)
        train_acc = pixel_accuracy(predict(logits), labels)

        last = it == cfg.max_iter - 1
        row = None
        if it % cfg.log_every == 0 or last:
            row = {
                "iter": it,
                "lr": lr,
                "loss": loss_value,
                "loss_main": parts.main.item(),
                "train_acc": train_acc,
            }
            for s, loss in enumerate(parts.stages, start=1):
                if loss is not None:
                    row[f"loss_s{s}"] = loss.item()
            if parts.head is not None:
                row["loss_head"] = parts.head.item()
            event_log.record_event("iter", name, {"iter": it, "lr": lr, "loss": loss_value, "train_acc": train_acc})
        if (it + 1) % cfg.eval_every == 0 or last:
            val = evaluate(net_cfg, params, dataset, "val", cfg.batch_size)
            if val is not None:
                row = row or {"iter": it, "lr": lr}
                row.update(val_acc=val.pixel_acc, val_miou=val.miou)
                event_log.record_event(
                    "eval", name, {"iter": it, "pixel_acc": val.pixel_acc, "miou": val.miou}
                )
        if row is not None:
            metrics.write(row)

    train = evaluate(net_cfg, params, dataset, "train", cfg.batch_size)

    save_checkpoint(out_dir / CHECKPOINT, params.store)
    event_log.record_event("checkpoint_saved", name, {"path": str(out_dir / CHECKPOINT)})

    trace = trace_forward(net_cfg, params, heatmap_image(dataset))
    export_heatmaps(trace, out_dir / "heatmaps", event_log)

    event_log.record_event(
        "run_end",
        name,
        {
            "loss": loss_value,
            "train_acc": train_acc,
            "train_pixel_acc": train.pixel_acc if train else float("nan"),
            "val_miou": val.miou if val else float("nan"),
        },
    )
    return TrainResult(params, loss_value, train_acc, val, param_count, gates, out_dir, train)

