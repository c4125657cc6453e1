import asyncio
import contextlib
import dataclasses
import io
import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

from gatedscale.cli import main
from gatedscale.codec import (
    HEADER,
    decode_tensor,
    encode_checkpoint,
    encode_pgm,
    encode_tensor,
    load_checkpoint,
    read_tensor,
    save_checkpoint,
    write_tensor,
)
from gatedscale.config import ALL_VARIANTS, RunConfig, apply_overrides, format_config, parse_config, resolve
from gatedscale.errors import ConfigError, FormatError
from gatedscale.gradcheck import OP_CASES, audit_network, audit_ops, format_reports
from gatedscale.gsto import Trace
from gatedscale.heatmap import export_heatmaps, normalize_map
from gatedscale.hrnet import NetConfig, build_net, check_gate_params, gate_overhead
from gatedscale.log import EventLog, MetricsLog
from gatedscale.loop import trace_forward
from gatedscale.orchestrator import Orchestrator, VariantRow, format_report, trend_checks, variant_config
from gatedscale.params import ParamStore
from gatedscale.synth import synth_generate
from gatedscale.tensor import Tensor, record

SLOW = os.environ.get("GATEDSCALE_SLOW") == "1"
ROOT = Path(__file__).resolve().parent.parent

TINY = """\
# two stages, four-pixel branches: seconds per run
width = 2
stages = 2
blocks_per_stage = 1
gtm_modes = supervised
aux_heads = false
loss_weights = 0.4,1.0
image_size = 16
n_train = 2
n_val = 1
batch_size = 2
max_iter = 3
log_every = 1
eval_every = 2
flip = false
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def metrics_rows(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split()
    return [dict(zip(header, line.split())) for line in lines[1:]]


def pgm_pixels(path):
    raw = Path(path).read_bytes()
    header_end = raw.index(b"\n255\n") + len(b"\n255\n")
    return raw[:header_end], raw[header_end:]


class ConfigTests(unittest.TestCase):
    def test_round_trip(self):
        cfg = dataclasses.replace(
            RunConfig(),
            base_lr=0.123,
            flip=False,
            gtm_modes=("none", "unsupervised", "supervised"),
            aux_heads=(True, False, True),
            out="runs/a b",
            variants=("baseline", "full"),
        )
        self.assertEqual(parse_config(format_config(cfg)), cfg)

    def test_unknown_key_names_the_line(self):
        with self.assertRaisesRegex(ConfigError, "cfg:2"):
            parse_config("seed = 1\nbogus = 2\n", origin="cfg")

    def test_bad_value_raises(self):
        with self.assertRaises(ConfigError):
            parse_config("max_iter = many")
        with self.assertRaises(ConfigError):
            parse_config("flip = maybe")
        with self.assertRaises(ConfigError):
            parse_config("precision = f16")

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# header\n\nseed = 7  # trailing\n")
        self.assertEqual(cfg.seed, 7)

    def test_hash_inside_values_survives(self):
        for out in ("runs/#1", "runs/a #b", " padded ", 'say "hi"'):
            cfg = dataclasses.replace(RunConfig(), out=out)
            self.assertEqual(parse_config(format_config(cfg)), cfg)
        self.assertEqual(parse_config("out = runs/#1\n").out, "runs/#1")
        self.assertEqual(parse_config('out = "runs/ #1"  # note\n').out, "runs/ #1")
        self.assertEqual(apply_overrides(RunConfig(), ["out=runs/#2"]).out, "runs/#2")

    def test_bad_quoting_raises(self):
        with self.assertRaises(ConfigError):
            parse_config('seed = "7"')
        with self.assertRaises(ConfigError):
            parse_config('out = "open')
        with self.assertRaises(ConfigError):
            parse_config('out = "a" b')

    def test_resolution_order(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.cfg"
            path.write_text("seed = 1\nmax_iter = 9\n", encoding="utf-8")
            cfg = resolve(path, ["seed=2", "seed=3"])
            self.assertEqual((cfg.seed, cfg.max_iter), (3, 9))
            self.assertEqual(resolve(path, ["seed=2"], seed=4).seed, 4)
        self.assertEqual(apply_overrides(RunConfig(), ["out=x", "out=y"]).out, "y")

    def test_presets_parse(self):
        for name in ("overfit.cfg", "compare.cfg", "gradcheck.cfg"):
            text = (ROOT / "configs" / name).read_text(encoding="utf-8")
            cfg = parse_config(text, origin=name)
            cfg.net_config()
            cfg.synth_spec()


class CodecTests(unittest.TestCase):
    def test_tensor_round_trip(self):
        for dtype in (np.float32, np.float64):
            data = np.arange(24, dtype=dtype).reshape(1, 2, 3, 4) / 7
            buf = encode_tensor(data)
            self.assertEqual(len(buf), HEADER.size + data.nbytes)
            self.assertEqual(buf[:4], b"GST1")
            back, end = decode_tensor(buf)
            self.assertEqual(end, len(buf))
            self.assertEqual(back.dtype, dtype)
            np.testing.assert_array_equal(back, data)
            self.assertEqual(encode_tensor(back), buf)

    def test_bad_files(self):
        good = encode_tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with self.assertRaises(FormatError):
            decode_tensor(b"GST2" + good[4:])
        with self.assertRaises(FormatError):
            decode_tensor(good[:-1])
        with self.assertRaises(FormatError):
            decode_tensor(good[:5])
        with self.assertRaises(FormatError):
            decode_tensor(good[:4] + bytes([7]) + good[5:])
        with self.assertRaises(FormatError):
            encode_tensor(np.zeros((2, 2), dtype=np.float32))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "t.gst"
            path.write_bytes(good + b"\x00")
            with self.assertRaises(FormatError):
                read_tensor(path)

    def store(self, seed):
        store = ParamStore("f32", seed=seed)
        store.conv("a", 2, 3, 3)
        store.norm("a.bn", 3)
        return store

    def test_checkpoint_round_trip_is_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ckpt.bin"
            source = self.store(1)
            save_checkpoint(path, source)
            target = self.store(2)
            load_checkpoint(path, target)
            for name in source:
                np.testing.assert_array_equal(target[name].data, source[name].data)
            self.assertEqual(encode_checkpoint(target), path.read_bytes())

    def test_checkpoint_mismatch_leaves_store_untouched(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ckpt.bin"
            save_checkpoint(path, self.store(1))
            other = ParamStore("f32", seed=3)
            other.conv("a", 2, 3, 3)
            other.norm("a.bn", 3)
            other.add("extra", np.zeros((1, 1, 1, 1)))
            before = other["a.weight"].data.copy()
            with self.assertRaises(FormatError):
                load_checkpoint(path, other)
            np.testing.assert_array_equal(other["a.weight"].data, before)
            wide = ParamStore("f64", seed=1)
            wide.conv("a", 2, 3, 3)
            wide.norm("a.bn", 3)
            with self.assertRaises(FormatError):
                load_checkpoint(path, wide)

    def test_pgm_header(self):
        raw = encode_pgm(np.zeros((16, 16), dtype=np.uint8))
        self.assertTrue(raw.startswith(b"P5\n16 16\n255\n"))
        self.assertEqual(len(raw), len(b"P5\n16 16\n255\n") + 256)

    def test_pgm_width_comes_first(self):
        self.assertTrue(encode_pgm(np.zeros((2, 5), dtype=np.uint8)).startswith(b"P5\n5 2\n255\n"))


class LogTests(unittest.TestCase):
    def test_jsonl_events(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "events.jsonl"
            log = EventLog(path, echo=False)
            log.record_event("iter", "train", {"iter": 0, "loss": 1.5})
            log.record_event("eval", "train", {"miou": 0.25})
            lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
        self.assertEqual([e["kind"] for e in lines], ["iter", "eval"])
        self.assertEqual(lines[0]["data"], {"iter": 0, "loss": 1.5})
        self.assertEqual(len(log.of_kind("eval")), 1)

    def test_metrics_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "metrics.txt"
            metrics = MetricsLog(path, stages=3)
            metrics.write({"iter": 0, "lr": 0.01, "loss": 2.0})
            with self.assertRaises(KeyError):
                metrics.write({"iter": 1, "loss_s3": 1.0})
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "iter lr loss loss_main loss_s1 loss_s2 train_acc val_acc val_miou")
        self.assertEqual(lines[1], "0 1.00000000e-02 2.00000000e+00 - - - - - -")

    def test_head_loss_column(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "metrics.txt"
            MetricsLog(path, stages=2, head=True).write({"iter": 0, "loss_head": 0.5})
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "iter lr loss loss_main loss_s1 loss_head train_acc val_acc val_miou")
        self.assertEqual(lines[1], "0 - - - - 5.00000000e-01 - - -")


class HeatmapTests(unittest.TestCase):
    def test_single_hot_pixel(self):
        feature = np.zeros((1, 2, 16, 16))
        feature[0, 0, 5, 9] = 3.0
        trace = Trace({"stage1_branch0_feature": Tensor(feature)})
        with tempfile.TemporaryDirectory() as tmp:
            (path,) = export_heatmaps(trace, Path(tmp))
            header, body = pgm_pixels(path)
        self.assertEqual(header, b"P5\n16 16\n255\n")
        pixels = np.frombuffer(body, dtype=np.uint8).reshape(16, 16)
        self.assertEqual(int((pixels == 255).sum()), 1)
        self.assertEqual(pixels[5, 9], 255)
        self.assertEqual(int(pixels.sum()), 255)

    def test_constant_maps(self):
        gate, constant = normalize_map(np.full((4, 4), 1.0), "gate")
        self.assertTrue(constant)
        self.assertTrue((gate == 255).all())
        half, _ = normalize_map(np.full((4, 4), 0.5), "gate")
        self.assertTrue((half == 128).all())
        feature, constant = normalize_map(np.full((4, 4), 3.0), "feature")
        self.assertTrue(constant)
        self.assertFalse(feature.any())

    def test_gate_override_one_gives_white_gate_maps(self):
        config = NetConfig(width=2, stages=2, blocks_per_stage=1, gtm_modes=("supervised",), aux_heads=(False,),
                           loss_weights=(0.4, 1.0), input_size=(16, 16))
        params = build_net(config, "f64")
        image, _ = synth_generate(RunConfig(image_size=16).synth_spec(), 0)
        trace = trace_forward(config, params, Tensor(image[None]), gate_override=1.0)
        log = EventLog(echo=False)
        with tempfile.TemporaryDirectory() as tmp:
            export_heatmaps(trace, Path(tmp), log)
            gates = sorted(Path(tmp).glob("*gate.pgm"))
            self.assertEqual([p.name for p in gates], ["stage1_gtm_gate.pgm", "stage2_gfm_0to1_gate.pgm",
                                                       "stage2_gfm_1to0_gate.pgm"])
            for path in gates:
                _, body = pgm_pixels(path)
                self.assertTrue(all(b == 255 for b in body), path.name)
                self.assertTrue(path.with_suffix(".gst").exists())
        constant = {e.data["map"] for e in log.of_kind("heatmap_constant")}
        self.assertTrue({"stage1_gtm_gate", "stage2_gfm_0to1_gate", "stage2_gfm_1to0_gate"} <= constant)


def wrong_sigmoid(x):
    s = 1 / (1 + np.exp(-x.data))

    def rule(g):
        return (g * s,)

    return record("sigmoid", (x,), s, rule)


class GradCheckTests(unittest.TestCase):
    def test_corrupted_rule_fails_and_names_the_op(self):
        cases = [c for c in OP_CASES if c.name == "sigmoid"]
        with patch("gatedscale.ops.sigmoid", new=wrong_sigmoid):
            reports = audit_ops(cases=cases)
        self.assertEqual([r.name for r in reports], ["sigmoid:x"])
        self.assertFalse(reports[0].passed)
        self.assertIn("FAIL sigmoid:x", format_reports(reports))

    def test_corruption_shows_up_in_the_gates_too(self):
        cases = [c for c in OP_CASES if c.name == "gate_unsupervised"]
        with patch("gatedscale.ops.sigmoid", new=wrong_sigmoid):
            reports = audit_ops(cases=cases)
        self.assertTrue(any(not r.passed for r in reports))

    def test_reports_are_stable(self):
        cases = [c for c in OP_CASES if c.name in ("conv2d_1x1", "gsto_transfer_down")]
        a, b = audit_ops(cases=cases, seed=3), audit_ops(cases=cases, seed=3)
        self.assertEqual(format_reports(a), format_reports(b))
        self.assertTrue(all(r.passed for r in a))

    def test_pyramid_heads_pass_without_their_pooled_biases(self):
        cases = [c for c in OP_CASES if c.name in ("gsto_ppm", "gsto_aspp")]
        reports = audit_ops(cases=cases)
        names = {r.name for r in reports}
        self.assertIn("gsto_ppm:ppm.level0.reduce.conv.weight", names)
        self.assertNotIn("gsto_ppm:ppm.level0.reduce.conv.bias", names)
        self.assertNotIn("gsto_aspp:aspp.image.bias", names)
        self.assertTrue(all(r.passed for r in reports), format_reports(reports))

    def test_network_audit_covers_every_parameter(self):
        config = NetConfig(width=2, stages=2, blocks_per_stage=1, gtm_modes=("supervised",), aux_heads=(False,),
                           loss_weights=(0.4, 1.0), input_size=(16, 16))
        reports = audit_network(config, samples=1)
        names = {r.name for r in reports}
        self.assertIn("stage1.gtm.gate.theta.weight", names)
        self.assertIn("head.classifier.bias", names)
        self.assertNotIn("stem.0.conv.bias", names)
        self.assertTrue(all(r.checked == 1 for r in reports))
        self.assertTrue(all(r.passed for r in reports), format_reports(reports))

    def test_network_audit_passes_with_a_supervised_head(self):
        config = NetConfig(width=2, stages=2, blocks_per_stage=1, gtm_modes=("unsupervised",), aux_heads=(True,),
                           loss_weights=(0.4, 1.0), head="ppm", head_gate_mode="supervised", ppm_bins=(2,),
                           input_size=(16, 16))
        reports = audit_network(config, samples=2)
        names = {r.name for r in reports}
        self.assertIn("head.ppm.gate.predictor.weight", names)
        self.assertIn("stage1.gtm.gate.rho.weight", names)
        self.assertIn("stage1.aux.weight", names)
        self.assertIn("head.ppm.level0.gate.theta.weight", names)
        self.assertTrue(all(r.passed for r in reports), format_reports(reports))

    @unittest.skipUnless(SLOW, "set GATEDSCALE_SLOW=1 to run")
    def test_gradcheck_command_passes(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, out, err = run("gradcheck", "--config", str(ROOT / "configs" / "gradcheck.cfg"), "--out", tmp)
            self.assertEqual(code, 0, err)
            self.assertNotIn("FAIL", (Path(tmp) / "gradcheck.txt").read_text(encoding="utf-8"))


class CommandTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.cfg = cls.tmp / "tiny.cfg"
        cls.cfg.write_text(TINY, encoding="utf-8")
        cls.first = cls.tmp / "first"
        cls.train_result = run("train", "--config", str(cls.cfg), "--out", str(cls.first))

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def test_train_writes_its_outputs(self):
        code, out, err = self.train_result
        self.assertEqual(code, 0, err)
        self.assertIn("final loss", out)
        self.assertIn("train pixel acc", out)
        for name in ("config.txt", "metrics.txt", "checkpoint.bin", "events.jsonl"):
            self.assertTrue((self.first / name).exists(), name)
        self.assertTrue(list((self.first / "heatmaps").glob("*.pgm")))
        rows = metrics_rows(self.first / "metrics.txt")
        self.assertEqual([r["iter"] for r in rows], ["0", "1", "2"])
        self.assertEqual(rows[0]["val_miou"], "-")
        self.assertNotEqual(rows[1]["val_miou"], "-")
        kinds = [json.loads(line)["kind"] for line in (self.first / "events.jsonl").read_text().splitlines()]
        self.assertEqual(kinds[0], "config_echoed")
        self.assertIn("checkpoint_saved", kinds)
        self.assertEqual(kinds[-1], "run_end")

    def test_echoed_config_reloads(self):
        echoed = parse_config((self.first / "config.txt").read_text(encoding="utf-8"))
        self.assertEqual(echoed, resolve(self.cfg, out=str(self.first)))

    def test_same_seed_same_bytes(self):
        second = self.tmp / "second"
        code, _, err = run("train", "--config", str(self.cfg), "--out", str(second))
        self.assertEqual(code, 0, err)
        for name in ("metrics.txt", "checkpoint.bin"):
            self.assertEqual((second / name).read_bytes(), (self.first / name).read_bytes(), name)

    def test_zero_learning_rate_keeps_training_metrics_constant(self):
        out = self.tmp / "frozen"
        code, _, err = run("train", "--config", str(self.cfg), "--out", str(out), "--set", "base_lr=0.0")
        self.assertEqual(code, 0, err)
        rows = metrics_rows(out / "metrics.txt")
        for column in ("lr", "loss", "loss_main", "loss_s1", "train_acc"):
            self.assertEqual(len({r[column] for r in rows}), 1, column)

    def test_eval(self):
        code, out, err = run("eval", "--config", str(self.cfg), "--out", str(self.first))
        self.assertEqual(code, 0, err)
        self.assertIn("mIoU", out)
        self.assertIn("class 3", out)

    def test_heatmap_with_gate_override(self):
        hm = self.tmp / "hm"
        code, _, err = run(
            "heatmap", "--config", str(self.cfg), "--out", str(self.first),
            "--heatmap-dir", str(hm), "--gate-override", "1.0", "--image", "synth:1",
        )
        self.assertEqual(code, 0, err)
        gates = list(hm.glob("*gate.pgm"))
        self.assertTrue(gates)
        for path in gates:
            _, body = pgm_pixels(path)
            self.assertEqual(set(body), {255})

    def test_heatmap_from_exported_image(self):
        image = self.tmp / "image.gst"
        write_tensor(image, synth_generate(RunConfig(image_size=16).synth_spec(), 0)[0][None].astype(np.float32))
        code, _, err = run("heatmap", "--config", str(self.cfg), "--out", str(self.first),
                           "--heatmap-dir", str(self.tmp / "hm2"), "--image", str(image))
        self.assertEqual(code, 0, err)

    def test_gen_data(self):
        out = self.tmp / "data_run"
        code, _, err = run("gen-data", "--config", str(self.cfg), "--out", str(out))
        self.assertEqual(code, 0, err)
        files = sorted(p.name for p in (out / "data").iterdir())
        self.assertEqual(
            files,
            ["train_0000_image.gst", "train_0000_labels.gst", "train_0001_image.gst", "train_0001_labels.gst",
             "val_0000_image.gst", "val_0000_labels.gst"],
        )
        labels = read_tensor(out / "data" / "val_0000_labels.gst")
        expected = synth_generate(resolve(self.cfg).synth_spec(), 2)[1]
        np.testing.assert_array_equal(labels[0, 0], expected)

    def test_errors_become_exit_code_one(self):
        code, _, err = run("train", "--set", "bogus=1", "--out", str(self.tmp / "bad"))
        self.assertEqual(code, 1)
        self.assertIn("error:", err)
        code, _, err = run("eval", "--config", str(self.cfg), "--out", str(self.tmp / "missing"))
        self.assertEqual(code, 1)
        code, _, err = run("heatmap", "--config", str(self.cfg), "--out", str(self.first), "--image", "synth:x")
        self.assertEqual(code, 1)


class CompareTests(unittest.TestCase):
    def test_variants_over_seeds(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = parse_config(TINY)
            cfg = dataclasses.replace(cfg, out=tmp, variants=("baseline", "full"), seeds=2, workers=2, max_iter=2)
            orch = Orchestrator(cfg, EventLog(Path(tmp) / "events.jsonl", echo=False))
            outcomes = asyncio.run(orch.run())
            self.assertEqual([(o.variant, o.seed) for o in outcomes],
                             [("baseline", 0), ("baseline", 1), ("full", 0), ("full", 1)])
            self.assertTrue((Path(tmp) / "full" / "seed1" / "checkpoint.bin").exists())
            rows = orch.rows(outcomes)
        self.assertEqual([r.variant for r in rows], ["baseline", "full"])
        self.assertEqual([r.runs for r in rows], [2, 2])
        full_net = variant_config(cfg, "full").net_config()
        self.assertEqual(rows[1].params - rows[0].params, gate_overhead(full_net))
        self.assertEqual(rows[0].gate_params, 0)
        self.assertEqual(rows[1].gate_params, gate_overhead(full_net))
        self.assertGreater(rows[0].macs, 0)
        checks = trend_checks(rows)
        self.assertEqual([label for label, _ in checks], ["full >= baseline"])
        report = format_report(rows, checks)
        self.assertIn("baseline", report)
        self.assertTrue("ok" in report or "EXCEPTION (toy scale)" in report)

    def test_variant_table(self):
        cfg = RunConfig()
        self.assertEqual(variant_config(cfg, "hrnet").transition, "strided")
        self.assertEqual(variant_config(cfg, "full").gtm_modes, ("unsupervised", "supervised", "supervised"))
        self.assertEqual(variant_config(cfg, "gfm").gfm_mode, "unsupervised")
        self.assertEqual(variant_config(cfg, "baseline_sup").aux_heads, (True, True, True))
        self.assertEqual(variant_config(cfg, "full").aux_heads, (True, False, False))
        self.assertEqual(variant_config(cfg, "gtm_sup").aux_heads, (True, False, False))
        self.assertEqual(variant_config(cfg, "baseline").aux_heads, (False, False, False))
        no_stage1 = dataclasses.replace(cfg, aux_heads=(False, False, False))
        self.assertEqual(variant_config(no_stage1, "full").aux_heads, (False, False, False))
        with self.assertRaises(ConfigError):
            variant_config(cfg, "everything")

    def test_head_variants(self):
        cfg = RunConfig()
        self.assertLessEqual({"ppm", "gsto_ppm", "aspp", "gsto_aspp"}, set(ALL_VARIANTS))
        for head in ("ppm", "aspp"):
            plain = variant_config(cfg, head)
            gated = variant_config(cfg, f"gsto_{head}")
            self.assertEqual((plain.head, plain.head_gate_mode), (head, "none"))
            self.assertEqual((gated.head, gated.head_gate_mode), (head, "supervised"))
            self.assertEqual(gated.gtm_modes, ("none",) * 3)
            self.assertEqual(gated.loss_spec().head_weight, 0.4)
            net = gated.net_config()
            check_gate_params(net, build_net(net, "f32"))
            self.assertEqual(gate_overhead(plain.net_config()), 0)
        self.assertEqual(variant_config(dataclasses.replace(cfg, head="ppm"), "full").head, "concat")
        rows = [VariantRow(name, 1, 0, 1, mean, 0.0, 1) for name, mean in (("ppm", 0.2), ("gsto_ppm", 0.3))]
        self.assertEqual(trend_checks(rows), [("gsto_ppm >= ppm", True)])


if __name__ == "__main__":
    unittest.main()
