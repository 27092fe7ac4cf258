"""Patch tokenisation and the four positional-embedding variants."""

from __future__ import annotations


import numpy as np
import torch
from torch import nn

from .config import POS_EMBED_KINDS
from .types import PatchGeometry


def patchify(frame, geometry: PatchGeometry) -> torch.Tensor:
    """Split ``[..., H, W, C]`` frames into ``[..., N, h*w*C]`` row-major patch rows."""
    x = torch.as_tensor(frame)
    *lead, H, W, C = x.shape
    if (H, W) != (geometry.H, geometry.W):
        raise ValueError(f"frame size {H}x{W} does not match geometry {geometry.H}x{geometry.W}")
    if H % geometry.h or W % geometry.w:
        raise ValueError(f"frame size {H}x{W} is not divisible by patch size {geometry.h}x{geometry.w}")
    R, Cc, h, w = geometry.grid_rows, geometry.grid_cols, geometry.h, geometry.w
    x = x.reshape(*lead, R, h, Cc, w, C)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, R * Cc, h * w * C)


def unpatchify(patches, geometry: PatchGeometry, channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    x = torch.as_tensor(patches)
    *lead, N, P = x.shape
    R, Cc, h, w = geometry.grid_rows, geometry.grid_cols, geometry.h, geometry.w
    if N != geometry.N or P != h * w * channels:
        raise ValueError(f"patch tensor {tuple(x.shape)} inconsistent with geometry and C={channels}")
    x = x.reshape(*lead, R, Cc, h, w, channels)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, R * h, Cc * w, channels)


def sincos_table(rows: int, cols: int, d: int) -> torch.Tensor:
    """Fixed 2-D sin-cos table [rows*cols, d].

    The first d/2 dims encode the column coordinate and the last d/2 the row,
    each as interleaved (sin, cos) pairs over geometric frequencies.
    """
    if d % 4:
        raise ValueError(f"fixed_abs embeddings need d divisible by 4, got {d}")
    quarter = d // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")

    def encode(pos):
        angles = pos.reshape(-1, 1) * omega[None, :]
        out = np.empty((pos.size, 2 * quarter))
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    table = np.concatenate([encode(cc), encode(rr)], axis=1)
    return torch.from_numpy(table).float()


def relative_index(rows: int, cols: int) -> torch.Tensor:
    """[N, N] index into a (2*rows-1)*(2*cols-1) table of (drow, dcol) offsets."""
    rr, cc = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    rr, cc = rr.flatten(), cc.flatten()
    dr = rr[:, None] - rr[None, :] + rows - 1
    dc = cc[:, None] - cc[None, :] + cols - 1
    return dr * (2 * cols - 1) + dc


class PEG(nn.Module):
    """Depthwise 3x3 convolution over the token grid, added residually."""

    def __init__(self, d: int, geometry: PatchGeometry):
        super().__init__()
        self.geometry = geometry
        self.conv = nn.Conv2d(d, d, 3, padding=1, groups=d)
        nn.init.zeros_(self.conv.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        *lead, N, d = tokens.shape
        grid = tokens.reshape(-1, self.geometry.grid_rows, self.geometry.grid_cols, d).permute(0, 3, 1, 2)
        out = self.conv(grid).permute(0, 2, 3, 1).reshape(*lead, N, d)
        return tokens + out


def positional_table(kind: str, geometry: PatchGeometry, d: int, num_heads: int = 1):
    """Positional parameters for ``kind``.

    Returns a [N, d] buffer (fixed_abs), a [N, d] parameter (learnable_abs),
    a PEG module (peg) or a [(2R-1)*(2C-1), num_heads] bias parameter
    (learnable_rel).
    """
    if kind == "fixed_abs":
        return sincos_table(geometry.grid_rows, geometry.grid_cols, d)
    if kind == "learnable_abs":
        return nn.Parameter(torch.randn(geometry.N, d) * 0.02)
    if kind == "peg":
        return PEG(d, geometry)
    if kind == "learnable_rel":
        size = (2 * geometry.grid_rows - 1) * (2 * geometry.grid_cols - 1)
        table = torch.empty(size, num_heads)
        nn.init.trunc_normal_(table, std=0.02)
        return nn.Parameter(table)
    raise ValueError(f"unknown positional embedding kind {kind!r}; expected one of {POS_EMBED_KINDS}")


def embed(patches: torch.Tensor, proj: nn.Linear, pos: torch.Tensor | None) -> torch.Tensor:
    """tokens[p] = W_e^T patches[p] + b + pos[p]; ``pos=None`` for peg / learnable_rel."""
    if patches.shape[-1] != proj.in_features:
        raise ValueError(f"patch width {patches.shape[-1]} != projection input {proj.in_features}")
    tokens = proj(patches)
    if pos is not None:
        if pos.shape != tokens.shape[-2:]:
            raise ValueError(f"positional table {tuple(pos.shape)} does not match tokens {tuple(tokens.shape[-2:])}")
        tokens = tokens + pos
    return tokens


class PatchEmbedder(nn.Module):
    def __init__(self, geometry: PatchGeometry, channels: int, d: int, kind: str, num_heads: int):
        super().__init__()
        self.geometry = geometry
        self.channels = channels
        self.kind = kind
        self.proj = nn.Linear(geometry.h * geometry.w * channels, d)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)
        table = positional_table(kind, geometry, d, num_heads)
        self.peg = None
        self.rel_table = None
        if kind == "fixed_abs":
            self.register_buffer("pos", table)
        elif kind == "learnable_abs":
            self.pos = table
        elif kind == "peg":
            self.pos = None
            self.peg = table
        else:
            self.pos = None
            self.rel_table = table
            self.register_buffer("rel_index", relative_index(geometry.grid_rows, geometry.grid_cols), persistent=False)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[..., H, W, C] -> [..., N, d]"""
        return embed(patchify(frames, self.geometry), self.proj, self.pos)

    def attn_bias(self) -> torch.Tensor | None:
        """[heads, N, N] relative-position logit bias, or None for absolute kinds."""
        if self.rel_table is None:
            return None
        return self.rel_table[self.rel_index].permute(2, 0, 1)

    def apply_peg(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens if self.peg is None else self.peg(tokens)
