"""Grayscale heatmaps of traced gate maps and branch features."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from gatedscale.codec import write_pgm, write_tensor
from gatedscale.gsto import Trace
from gatedscale.log import EventLog


def map_kind(key: str) -> str:
    return "gate" if key.endswith("gate") else "feature"


def normalize_map(values: np.ndarray, kind: str) -> tuple[np.ndarray, bool]:
    """Min-max scale a (H, W) map to uint8. Returns the pixels and whether the map was constant.

    A constant gate map keeps its absolute level, round(clip(c, 0, 1) * 255);
    a constant feature map becomes all zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        level = int(np.rint(np.clip(lo, 0.0, 1.0) * 255)) if kind == "gate" else 0
        return np.full(values.shape, level, dtype=np.uint8), True
    scaled = np.rint((values - lo) / (hi - lo) * 255.0)
    return scaled.astype(np.uint8), False


def heatmap_pixels(tensor_data: np.ndarray, kind: str, sample: int = 0) -> tuple[np.ndarray, bool]:
    """Features are averaged over channels; gates are used as they are."""
    x = tensor_data[sample]
    return normalize_map(x.mean(axis=0) if kind == "feature" else x[0], kind)


def export_heatmaps(trace: Trace, out_dir: Path, event_log: EventLog | None = None, sample: int = 0) -> list[Path]:
    """Write one PGM per traced map, plus the raw gate tensors as GST1."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, tensor in trace.items():
        kind = map_kind(key)
        pixels, constant = heatmap_pixels(tensor.data, kind, sample)
        path = out_dir / f"{key}.pgm"
        write_pgm(path, pixels)
        written.append(path)
        if kind == "gate":
            write_tensor(out_dir / f"{key}.gst", tensor.data[sample : sample + 1])
        if event_log is not None:
            if constant:
                event_log.record_event("heatmap_constant", "heatmap", {"map": key, "level": int(pixels.flat[0])})
            event_log.record_event("heatmap_written", "heatmap", {"path": str(path)})
    return written
