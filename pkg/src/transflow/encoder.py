"""Spatial-temporal transformer encoder.

Each block runs self-attention within a frame and cross-attention to the
adjacent frame (t attends to t+1, the final frame attends to t-1); after the
last block every frame attends to all other frames of the clip.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .embedder import PatchEmbedder
from .types import PatchGeometry


def attention_weights(q: torch.Tensor, k: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(head_dim) + bias) over the key axis.

    q: [..., heads, Nq, hd], k: [..., heads, Nk, hd]. Non-finite logits raise.
    """
    logits = q @ k.transpose(-1, -2) / q.shape[-1] ** 0.5
    if bias is not None:
        logits = logits + bias
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    return logits.softmax(dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, num_heads: int):
        super().__init__()
        if d % num_heads:
            raise ValueError(f"d not divisible by heads (d={d}, heads={num_heads})")
        self.num_heads = num_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.num_heads, d // self.num_heads).transpose(-2, -3)

    def forward(self, query, key, value=None, bias=None, return_weights=False):
        """Queries from ``query`` [..., Nq, d]; keys/values from ``key``/``value`` [..., Nk, d]."""
        if key.shape[-1] != query.shape[-1]:
            raise ValueError("query and key tokens must share width d")
        value = key if value is None else value
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        attn = attention_weights(q, k, bias)
        out = (attn @ v).transpose(-2, -3)
        out = self.out(out.reshape(*out.shape[:-2], -1))
        return (out, attn) if return_weights else out


def msa(z: torch.Tensor, attn: MultiHeadAttention, bias=None, return_weights=False):
    return attn(z, z, bias=bias, return_weights=return_weights)


def mca(z: torch.Tensor, z_adj: torch.Tensor, attn: MultiHeadAttention, bias=None, return_weights=False):
    if z.shape[-2:] != z_adj.shape[-2:]:
        raise ValueError(f"cross-attention needs matching (N, d), got {tuple(z.shape)} and {tuple(z_adj.shape)}")
    return attn(z, z_adj, bias=bias, return_weights=return_weights)


class MLP(nn.Module):
    def __init__(self, d: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _init_linear(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)


class SelfAttentionBlock(nn.Module):
    """z + MLP(MSA(norm(z)))"""

    def __init__(self, d: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, num_heads)
        self.mlp = MLP(d)
        _init_linear(self)

    def forward(self, z, bias=None, return_weights=False):
        a, w = msa(self.norm(z), self.attn, bias=bias, return_weights=True)
        out = z + self.mlp(a)
        return (out, w) if return_weights else out


class EncoderBlock(nn.Module):
    def __init__(self, d: int, num_heads: int):
        super().__init__()
        self.spatial = SelfAttentionBlock(d, num_heads)
        self.norm_y = nn.LayerNorm(d)
        self.norm_adj = nn.LayerNorm(d)
        self.cross = MultiHeadAttention(d, num_heads)
        self.mlp = MLP(d)
        _init_linear(self)

    def forward(self, z, z_adj, bias=None):
        """Returns (y, z_new) with y = z + MLP(MSA(norm z)), z_new = y + MLP(MCA(norm y, norm z_adj))."""
        y = self.spatial(z, bias=bias)
        z_new = y + self.mlp(mca(self.norm_y(y), self.norm_adj(z_adj), self.cross, bias=bias))
        return y, z_new


def encoder_block(z, z_adj, block: EncoderBlock, bias=None):
    return block(z, z_adj, bias=bias)


def adjacent_index(T: int) -> list[int]:
    """Cross-attention partner of each frame: t -> t+1, last frame -> T-2."""
    if T < 2:
        raise ValueError(f"need T >= 2 frames, got {T}")
    return list(range(1, T)) + [T - 2]


class TemporalAssociation(nn.Module):
    """Each frame queries the tokens of all other frames; residual on the query frame.

    Queries and keys are layer-normalised, values are the raw tokens.
    """

    def __init__(self, d: int, num_heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.norm_k = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, num_heads)
        _init_linear(self)

    def forward(self, x: torch.Tensor, return_weights=False):
        """x: [..., T, N, d] -> same shape."""
        T, N, d = x.shape[-3:]
        if T < 2:
            raise ValueError(f"temporal association needs T >= 2, got {T}")
        others = torch.tensor([[s for s in range(T) if s != t] for t in range(T)], device=x.device)
        ctx = x[..., others, :, :].reshape(*x.shape[:-3], T, (T - 1) * N, d)
        out, w = self.attn(self.norm_q(x), self.norm_k(ctx), ctx, return_weights=True)
        out = x + out
        return (out, w) if return_weights else out


def temporal_association(volume: torch.Tensor, module: TemporalAssociation) -> torch.Tensor:
    """[..., T, rows, cols, d] feature volume in, same shape out."""
    *lead, T, rows, cols, d = volume.shape
    out = module(volume.reshape(*lead, T, rows * cols, d))
    return out.reshape(volume.shape)


class Encoder(nn.Module):
    def __init__(self, geometry: PatchGeometry, channels: int, d: int, num_heads: int,
                 num_blocks: int, pos_embed_kind: str):
        super().__init__()
        self.geometry = geometry
        self.embedder = PatchEmbedder(geometry, channels, d, pos_embed_kind, num_heads)
        self.blocks = nn.ModuleList(EncoderBlock(d, num_heads) for _ in range(num_blocks))
        self.temporal = TemporalAssociation(d, num_heads)

    def spatial(self, tokens: torch.Tensor) -> torch.Tensor:
        """Interleaved self/cross blocks on [B, T, N, d] tokens."""
        adj = adjacent_index(tokens.shape[-3])
        bias = self.embedder.attn_bias()
        z = tokens
        for i, block in enumerate(self.blocks):
            _, z = block(z, z[..., adj, :, :], bias=bias)
            if i == 0:
                z = self.embedder.apply_peg(z)
        return z

    def single_frames(self, tokens: torch.Tensor) -> torch.Tensor:
        """Encode every frame of [..., N, d] tokens on its own: each block's
        cross-attention partner is the frame itself and temporal association
        is skipped. Used by masked pre-training."""
        bias = self.embedder.attn_bias()
        z = tokens
        for i, block in enumerate(self.blocks):
            _, z = block(z, z, bias=bias)
            if i == 0:
                z = self.embedder.apply_peg(z)
        return z

    def forward(self, frames: torch.Tensor, tokens: torch.Tensor | None = None) -> torch.Tensor:
        """[B, T, H, W, C] frames -> [B, T, rows, cols, d] feature volume.

        ``tokens`` overrides the patch embedding (used by masked pre-training).
        """
        if tokens is None:
            tokens = self.embedder(frames)
        z = self.temporal(self.spatial(tokens))
        g = self.geometry
        return z.reshape(*z.shape[:-2], g.grid_rows, g.grid_cols, z.shape[-1])
