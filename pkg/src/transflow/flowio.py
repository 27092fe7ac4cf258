"""Flow file formats, flow visualisation and on-disk synthetic datasets.

.flo (Middlebury): little-endian float32 magic 202021.25, int32 width, int32
height, then interleaved float32 (u, v) in row-major order.

KITTI flow PNG: 16-bit, 3 channels (u, v, valid) with u = (c1 - 2^15) / 64,
v = (c2 - 2^15) / 64, valid = c3 > 0. Channel order here is the file's
logical RGB order; OpenCV's BGR is undone on read and write.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .types import FlowField

FLO_MAGIC = 202021.25
MANIFEST_HEADER = "# transflow manifest v1"


class FlowFormatError(ValueError):
    pass


def write_flo(flow, path) -> None:
    f = flow.flow if isinstance(flow, FlowField) else np.asarray(flow)
    if f.ndim != 3 or f.shape[2] != 2:
        raise ValueError(f"flow must be [H, W, 2], got {f.shape}")
    H, W = f.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, W, H))
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: unexpected EOF in header")
    magic, W, H = struct.unpack("<fii", data[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: invalid flo magic {magic!r}")
    if W < 0 or H < 0:
        raise FlowFormatError(f"{path}: negative size {W}x{H}")
    need = 12 + 8 * W * H
    if len(data) < need:
        raise FlowFormatError(f"{path}: unexpected EOF ({len(data)} of {need} bytes)")
    flow = np.frombuffer(data, dtype="<f4", count=2 * W * H, offset=12).reshape(H, W, 2)
    return FlowField(flow.astype(np.float32))


def read_kitti_flow(path) -> FlowField:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FlowFormatError(f"{path}: cannot read image")
    if img.dtype != np.uint16 or img.ndim != 3 or img.shape[2] != 3:
        raise FlowFormatError(
            f"{path}: expected a 16-bit 3-channel PNG, got dtype {img.dtype} shape {img.shape}"
        )
    return decode_kitti(img[..., ::-1])


def decode_kitti(rgb: np.ndarray) -> FlowField:
    """[H, W, 3] uint16 (u, v, valid) channels -> FlowField."""
    c = rgb.astype(np.float64)
    flow = np.stack([(c[..., 0] - 2 ** 15) / 64.0, (c[..., 1] - 2 ** 15) / 64.0], axis=-1)
    valid = rgb[..., 2] > 0
    flow[~valid] = 0.0
    return FlowField(flow.astype(np.float32), valid)


def encode_kitti(flow: FlowField) -> np.ndarray:
    f = flow.flow.astype(np.float64)
    out = np.zeros((*f.shape[:2], 3), dtype=np.uint16)
    out[..., :2] = np.clip(np.round(f * 64.0 + 2 ** 15), 0, 2 ** 16 - 1)
    out[..., 2] = flow.valid
    return out


def write_kitti_flow(flow, path) -> None:
    if not isinstance(flow, FlowField):
        flow = FlowField(np.asarray(flow, dtype=np.float32))
    if not cv2.imwrite(str(path), encode_kitti(flow)[..., ::-1]):
        raise OSError(f"could not write {path}")


def flow_to_color(flow, max_mag: float | None = None) -> np.ndarray:
    """uint8 [H, W, 3] RGB: hue = direction, saturation = magnitude / p99, value 1.

    Zero flow is white. ``max_mag`` overrides the 99th-percentile normaliser.
    """
    f = flow.flow if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    u, v = f[..., 0].astype(np.float64), f[..., 1].astype(np.float64)
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99)) if mag.size else 0.0
    sat = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    hue = np.mod(np.degrees(np.arctan2(v, u)), 360.0)
    # OpenCV float HSV: H in degrees, S and V in [0, 1]
    hsv = np.stack([hue, sat, np.ones_like(sat)], axis=-1).astype(np.float32)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def write_png(path, image) -> None:
    """Write an RGB / gray uint8 or uint16 image."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[..., ::-1]
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def read_png(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return img[..., ::-1].copy() if img.ndim == 3 else img


def read_frame(path) -> np.ndarray:
    """Image file -> float32 [H, W, C] in [0, 1]."""
    img = read_png(path)
    if img.ndim == 2:
        img = img[..., None]
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return (img.astype(np.float32) / scale)


# --- dataset manifests -----------------------------------------------------

@dataclass(frozen=True)
class SequenceRecord:
    frames: tuple[Path, ...]
    flows: tuple[Path, ...]
    occlusions: tuple[Path, ...]


def write_manifest(path, records) -> None:
    """One sequence per line: frames, flows, occlusions as tab-separated fields of
    comma-separated paths relative to the manifest directory."""
    root = Path(path).parent
    lines = [MANIFEST_HEADER]
    for rec in records:
        fields = [",".join(str(Path(p).relative_to(root)) for p in group)
                  for group in (rec.frames, rec.flows, rec.occlusions)]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[SequenceRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    root = path.parent
    records = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (1, 3):
            raise ValueError(f"{path}:{n}: expected 1 or 3 tab-separated fields, got {len(parts)}")
        groups = [tuple(root / p for p in part.split(",") if p) for part in parts]
        frames = groups[0]
        flows, occs = (groups[1], groups[2]) if len(groups) == 3 else ((), ())
        if flows and len(flows) != len(frames) - 1:
            raise ValueError(f"{path}:{n}: {len(frames)} frames but {len(flows)} flows")
        records.append(SequenceRecord(frames, flows, occs))
    return records


def load_sequence(rec: SequenceRecord):
    """(frames [T,H,W,C], flows [T-1,H,W,2] or None, valid [T-1,H,W] or None,
    occlusion [T-1,H,W] or None) as numpy arrays."""
    frames = np.stack([read_frame(p) for p in rec.frames])
    flows = valid = occ = None
    if rec.flows:
        fields = [read_flow(p) for p in rec.flows]
        flows = np.stack([f.flow for f in fields])
        valid = np.stack([f.valid for f in fields])
    if rec.occlusions:
        occ = np.stack([read_png(p) > 127 for p in rec.occlusions])
    return frames, flows, valid, occ


def read_flow(path) -> FlowField:
    """Dispatch on extension: .flo or KITTI .png."""
    return read_kitti_flow(path) if str(path).lower().endswith(".png") else read_flo(path)
