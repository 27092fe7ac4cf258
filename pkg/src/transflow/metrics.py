"""Average end-point error and F1-all outlier rate.

An outlier has EPE > 3 px and EPE > 5% of the ground-truth magnitude (KITTI rule).
Metrics over a dataset pool all valid pixels rather than averaging per image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .types import FlowField

OUTLIER_PX = 3.0
OUTLIER_REL = 0.05


def _arrays(pred, gt, valid=None):
    p = pred.flow if isinstance(pred, FlowField) else np.asarray(pred)
    if isinstance(gt, FlowField):
        g, v = gt.flow, gt.valid
    else:
        g = np.asarray(gt)
        v = np.isfinite(g).all(axis=-1)
    if valid is not None:
        v = v & np.asarray(valid, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth {g.shape}")
    if not v.any():
        raise ValueError("no valid pixels to evaluate")
    return p.astype(np.float64), g.astype(np.float64), v


def endpoint_error(pred, gt) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def aepe(pred, gt, valid=None) -> float:
    p, g, v = _arrays(pred, gt, valid)
    return float(endpoint_error(p, g)[v].mean())


def outliers(epe: np.ndarray, gt: np.ndarray) -> np.ndarray:
    mag = np.sqrt(gt[..., 0] ** 2 + gt[..., 1] ** 2)
    return (epe > OUTLIER_PX) & (epe > OUTLIER_REL * mag)


def f1_all(pred, gt, valid=None) -> float:
    p, g, v = _arrays(pred, gt, valid)
    out = outliers(endpoint_error(p, g), g)
    return float(100.0 * out[v].sum() / v.sum())


@dataclass(frozen=True)
class EvalReport:
    aepe: float
    f1_all: float
    pixels: int
    sequences: int = 0

    def __post_init__(self):
        if not self.aepe >= 0:
            raise ValueError(f"aepe must be >= 0, got {self.aepe}")
        if not 0.0 <= self.f1_all <= 100.0:
            raise ValueError(f"f1_all must be in [0, 100], got {self.f1_all}")

    def to_text(self) -> str:
        return "\n".join([
            f"aepe: {self.aepe:.6f}",
            f"f1_all: {self.f1_all:.4f}",
            f"pixels: {self.pixels}",
            f"sequences: {self.sequences}",
        ]) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        values = dict(line.split(": ", 1) for line in text.strip().splitlines())
        return cls(float(values["aepe"]), float(values["f1_all"]),
                   int(values["pixels"]), int(values.get("sequences", 0)))


class Accumulator:
    """Running pooled AEPE / F1-all over many flow fields."""

    def __init__(self):
        self.epe_sum = 0.0
        self.outliers = 0
        self.pixels = 0
        self.sequences = 0

    def add(self, pred, gt, valid=None) -> None:
        p, g, v = _arrays(pred, gt, valid)
        epe = endpoint_error(p, g)
        self.epe_sum += float(epe[v].sum())
        self.outliers += int(outliers(epe, g)[v].sum())
        self.pixels += int(v.sum())

    def report(self) -> EvalReport:
        if self.pixels == 0:
            raise ValueError("no valid pixels to evaluate")
        return EvalReport(self.epe_sum / self.pixels, 100.0 * self.outliers / self.pixels,
                          self.pixels, self.sequences)
