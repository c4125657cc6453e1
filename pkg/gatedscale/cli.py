"""Command line: train, eval, compare, gradcheck, heatmap, gen-data.

Every command resolves a RunConfig, logs events to stdout and to
``<out>/events.jsonl``, and returns 0 on success. Library errors become
``error: ...`` on stderr and exit code 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from gatedscale.codec import load_checkpoint, read_tensor, write_tensor
from gatedscale.config import RunConfig, echo_config, resolve
from gatedscale.errors import ConfigError, GatedScaleError, ShapeError
from gatedscale.gradcheck import MINIATURE, audit_network, audit_ops, format_reports
from gatedscale.heatmap import export_heatmaps
from gatedscale.hrnet import build_net
from gatedscale.log import EventLog
from gatedscale.loop import CHECKPOINT, evaluate, run_training, trace_forward
from gatedscale.orchestrator import compare
from gatedscale.synth import SyntheticDataset, synth_generate
from gatedscale.tensor import DTYPES, Tensor


def _event_log(cfg: RunConfig) -> EventLog:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return EventLog(out / "events.jsonl")


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / CHECKPOINT


def cmd_train(cfg: RunConfig, args) -> int:
    result = run_training(cfg, _event_log(cfg))
    print(f"final loss {result.final_loss:.6f}  last batch acc {result.train_acc:.4f}")
    if result.train is not None:
        print(f"train pixel acc {result.train.pixel_acc:.4f}  train mIoU {result.train.miou:.4f}")
    if result.val is not None:
        print(f"val pixel acc {result.val.pixel_acc:.4f}  val mIoU {result.val.miou:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    net_cfg = cfg.net_config()
    params = build_net(net_cfg, cfg.precision)
    load_checkpoint(_checkpoint_path(cfg, args), params.store)
    dataset = SyntheticDataset(cfg.synth_spec(), cfg.precision, flip=False)
    report = evaluate(net_cfg, params, dataset, args.split, cfg.batch_size)
    if report is None:
        raise ConfigError(f"the {args.split} split is empty")
    print(f"pixel acc  {report.pixel_acc:.4f}")
    print(f"mean acc   {report.mean_acc:.4f}")
    print(f"mIoU       {report.miou:.4f}")
    for c, iou in enumerate(report.iou):
        print(f"  class {c}  IoU {iou:.4f}")
    return 0


def cmd_compare(cfg: RunConfig, args) -> int:
    echo_config(cfg, Path(cfg.out))
    print(compare(cfg, _event_log(cfg)), end="")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    cfg = dataclasses.replace(cfg, precision="f64")
    log = _event_log(cfg)
    reports = audit_ops(tol=1e-5, seed=cfg.seed, event_log=log)
    mini = dataclasses.replace(MINIATURE, seed=cfg.seed)
    reports += audit_network(mini, tol=1e-4, samples=cfg.gradcheck_samples, seed=cfg.seed, event_log=log)
    text = format_reports(reports)
    (Path(cfg.out) / "gradcheck.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"error: {len(failed)} gradient check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(reports)} gradient checks passed")
    return 0


def load_image(source: str, cfg: RunConfig) -> Tensor:
    """``synth:N`` renders scene N; anything else is read as a (1, 3, H, W) GST1 file."""
    if source.startswith("synth:"):
        try:
            index = int(source.split(":", 1)[1])
        except ValueError as e:
            raise ConfigError(f"bad image source {source!r}; expected synth:<index>") from e
        image, _ = synth_generate(cfg.synth_spec(), index)
        return Tensor(image[None].astype(DTYPES[cfg.precision]))
    data = read_tensor(Path(source))
    if data.shape[0] != 1 or data.shape[1] != 3:
        raise ShapeError(f"{source}: expected a (1, 3, H, W) image, got {data.shape}")
    return Tensor(data.astype(DTYPES[cfg.precision]))


def cmd_heatmap(cfg: RunConfig, args) -> int:
    log = _event_log(cfg)
    net_cfg = cfg.net_config()
    params = build_net(net_cfg, cfg.precision)
    load_checkpoint(_checkpoint_path(cfg, args), params.store)
    image = load_image(args.image, cfg)
    trace = trace_forward(net_cfg, params, image, gate_override=args.gate_override)
    out_dir = Path(args.heatmap_dir) if args.heatmap_dir else Path(cfg.out) / "heatmaps"
    written = export_heatmaps(trace, out_dir, log)
    print(f"wrote {len(written)} heatmaps to {out_dir}")
    return 0


def cmd_gen_data(cfg: RunConfig, args) -> int:
    log = _event_log(cfg)
    spec = cfg.synth_spec()
    out_dir = Path(cfg.out) / "data"
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = (("train", range(spec.n_train)), ("val", range(spec.n_train, spec.n_train + spec.n_val)))
    for split, indices in splits:
        for k, index in enumerate(indices):
            image, labels = synth_generate(spec, index)
            stem = out_dir / f"{split}_{k:04d}"
            dtype = DTYPES[cfg.precision]
            write_tensor(stem.with_name(stem.name + "_image.gst"), image[None].astype(dtype))
            write_tensor(stem.with_name(stem.name + "_labels.gst"), labels[None, None].astype(dtype))
            log.record_event("data_exported", "gen-data", {"split": split, "index": int(index)})
    print(f"exported {spec.n_train} train and {spec.n_val} val scenes to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=sorted(DTYPES))

    parser = argparse.ArgumentParser(prog="gatedscale", description="Gated scale-transfer networks at toy scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one network").set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help=f"defaults to <out>/{CHECKPOINT}")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_eval)

    sub.add_parser("compare", parents=[common], help="train every variant over every seed").set_defaults(
        func=cmd_compare
    )
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audits").set_defaults(
        func=cmd_gradcheck
    )

    p = sub.add_parser("heatmap", parents=[common], help="export gate and feature heatmaps")
    p.add_argument("--checkpoint", help=f"defaults to <out>/{CHECKPOINT}")
    p.add_argument("--image", default="synth:0", help="synth:<index> or a GST1 image file")
    p.add_argument("--heatmap-dir", help="defaults to <out>/heatmaps")
    p.add_argument("--gate-override", type=float, help="replace every gate by this constant")
    p.set_defaults(func=cmd_heatmap)

    sub.add_parser("gen-data", parents=[common], help="export the synthetic splits as GST1").set_defaults(
        func=cmd_gen_data
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.config, args.set, seed=args.seed, out=args.out, precision=args.precision)
        return args.func(cfg, args)
    except (GatedScaleError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
