"""Immutable value types shared by every stage of the pipeline.

Arrays are stored as read-only numpy arrays; constructing a value that breaks
an invariant raises ``ValueError`` instead of repairing it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _frozen(array, dtype=None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PatchGeometry:
    H: int
    W: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.H, self.W, self.h, self.w) <= 0:
            raise ValueError("frame and patch sizes must be positive")
        if self.H % self.h or self.W % self.w:
            raise ValueError(
                f"frame size {self.H}x{self.W} is not divisible by patch size {self.h}x{self.w}"
            )

    @property
    def grid_rows(self) -> int:
        return self.H // self.h

    @property
    def grid_cols(self) -> int:
        return self.W // self.w

    @property
    def N(self) -> int:
        return self.grid_rows * self.grid_cols

    @classmethod
    def from_config(cls, config) -> "PatchGeometry":
        return cls(config.image_size[0], config.image_size[1], config.patch[0], config.patch[1])


@dataclass(frozen=True)
class FrameSequence:
    """T frames of shape [H, W, C] with intensities in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        frames = _frozen(self.frames, np.float32)
        if frames.ndim != 4:
            raise ValueError(f"frames must be [T, H, W, C], got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError(f"a frame sequence needs T >= 2, got T={frames.shape[0]}")
        if not np.isfinite(frames).all():
            raise ValueError("frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]

    @property
    def C(self) -> int:
        return self.frames.shape[3]

    def check_geometry(self, h: int, w: int) -> PatchGeometry:
        return PatchGeometry(self.H, self.W, h, w)

    @classmethod
    def from_uint8(cls, frames: np.ndarray) -> "FrameSequence":
        return cls(np.asarray(frames, dtype=np.float32) / 255.0)


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray  # [N, d] or [T, N, d]
    geometry: PatchGeometry

    def __post_init__(self):
        tokens = _frozen(self.tokens)
        if tokens.ndim not in (2, 3) or tokens.shape[-2] != self.geometry.N:
            raise ValueError(f"token axis must have length N={self.geometry.N}, got shape {tokens.shape}")
        if not np.isfinite(tokens).all():
            raise ValueError("tokens contain non-finite values")
        object.__setattr__(self, "tokens", tokens)

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]


@dataclass(frozen=True)
class FlowField:
    """Forward flow in pixels: source pixel x maps to x + flow[x] in the target frame."""

    flow: np.ndarray  # [H, W, 2] as (u, v)
    valid: np.ndarray | None = None  # [H, W] bool

    def __post_init__(self):
        flow = _frozen(self.flow, np.float32)
        if flow.ndim != 3 or flow.shape[-1] != 2:
            raise ValueError(f"flow must be [H, W, 2], got shape {flow.shape}")
        if self.valid is None:
            valid = np.isfinite(flow).all(axis=-1)
        else:
            valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != flow.shape[:2]:
            raise ValueError(f"valid mask shape {valid.shape} does not match flow {flow.shape[:2]}")
        if not np.isfinite(flow[valid]).all():
            raise ValueError("flow is non-finite at a valid pixel")
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "valid", _frozen(valid, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]


@dataclass(frozen=True)
class OcclusionMask:
    occluded: np.ndarray  # [H, W] bool

    def __post_init__(self):
        occ = _frozen(self.occluded, bool)
        if occ.ndim != 2:
            raise ValueError(f"occlusion mask must be [H, W], got shape {occ.shape}")
        object.__setattr__(self, "occluded", occ)

    def check_matches(self, flow: FlowField) -> None:
        if self.occluded.shape != flow.shape:
            raise ValueError(f"occlusion mask {self.occluded.shape} does not match flow {flow.shape}")
