"""Masked self-supervised pre-training with attention-ranked (strategic) masking.

A small self-attention network scores every patch token by the attention mass
it receives. SoftSort turns the ranking into a row-stochastic relaxation of the
sort permutation; the hard top-k mask is used in the forward pass while the
soft membership carries gradients back to the scorer (straight-through).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .embedder import patchify
from .encoder import SelfAttentionBlock


@dataclass(frozen=True)
class MaskPlan:
    masked: torch.Tensor  # [..., N] bool
    ratio: float
    scores: torch.Tensor | None = None  # [..., N]
    soft_perm: torch.Tensor | None = None  # [..., N, N]
    weights: torch.Tensor | None = None  # [..., N] float; hard forward, soft backward

    @property
    def mask_weights(self) -> torch.Tensor:
        return self.masked.float() if self.weights is None else self.weights

    @property
    def count(self) -> int:
        return int(self.masked.sum(-1).flatten()[0])


def mask_count(N: int, ratio: float) -> int:
    """round(ratio * N), halves rounded up; 0 and N are rejected."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must satisfy 0 < ratio < 1, got {ratio}")
    k = int(math.floor(ratio * N + 0.5))
    if k in (0, N):
        raise ValueError(f"mask ratio {ratio} on N={N} tokens masks k={k}; need 0 < k < N")
    return k


class PretrainHead(nn.Module):
    """Scoring network, shared mask token and pixel reconstruction head."""

    def __init__(self, d: int, num_heads: int, num_score_blocks: int, patch_dim: int):
        super().__init__()
        self.score_blocks = nn.ModuleList(SelfAttentionBlock(d, num_heads) for _ in range(num_score_blocks))
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.recon_norm = nn.LayerNorm(d)
        self.recon = nn.Linear(d, patch_dim)
        nn.init.trunc_normal_(self.recon.weight, std=0.02)
        nn.init.zeros_(self.recon.bias)


def score_tokens(tokens: torch.Tensor, blocks) -> torch.Tensor:
    """Per-token informativeness [..., N]: column mean of the final block's
    head-averaged attention map. Non-negative and sums to 1."""
    N = tokens.shape[-2]
    if N < 2:
        raise ValueError(f"scoring needs N >= 2 tokens, got {N}")
    z = tokens
    attn = None
    for block in blocks:
        z, attn = block(z, return_weights=True)
    score_map = attn.mean(-3)  # [..., N, N], rows sum to 1
    return score_map.mean(-2)


def soft_sort(scores: torch.Tensor, tau: float) -> torch.Tensor:
    """Row i: softmax_j(-|sort_desc(scores)[i] - scores[j]| / tau)."""
    if not tau > 0:
        raise ValueError(f"SoftSort temperature must be > 0, got {tau}")
    ranked = scores.sort(dim=-1, descending=True).values
    dist = (ranked.unsqueeze(-1) - scores.unsqueeze(-2)).abs()
    return (-dist / tau).softmax(dim=-1)


def top_k_mask(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Bool mask of the k highest scores; ties go to the lower token index."""
    order = scores.sort(dim=-1, descending=True, stable=True).indices[..., :k]
    masked = torch.zeros(scores.shape, dtype=torch.bool, device=scores.device)
    return masked.scatter(-1, order, True)


def select_mask(scores: torch.Tensor, ratio: float, tau: float, training: bool = False) -> MaskPlan:
    N = scores.shape[-1]
    k = mask_count(N, ratio)
    masked = top_k_mask(scores.detach(), k)
    perm = soft_sort(scores, tau)
    weights = masked.to(scores.dtype)
    if training:
        soft = perm[..., :k, :].sum(-2)  # soft membership in the top-k
        weights = weights + (soft - soft.detach())  # exactly the hard mask forward
    return MaskPlan(masked=masked, ratio=ratio, scores=scores, soft_perm=perm, weights=weights)


def random_mask(shape, N: int, ratio: float, generator: torch.Generator | None = None) -> MaskPlan:
    k = mask_count(N, ratio)
    keys = torch.rand(*shape, N, generator=generator)
    return MaskPlan(masked=top_k_mask(keys, k), ratio=ratio)


def uniform_mask(shape, N: int, ratio: float, generator: torch.Generator | None = None) -> MaskPlan:
    """Evenly spaced token indices with a random phase."""
    k = mask_count(N, ratio)
    masked = torch.zeros(*shape, N, dtype=torch.bool)
    flat = masked.reshape(-1, N)
    for row in flat:
        phase = float(torch.rand((), generator=generator))
        idx = torch.floor((torch.arange(k) + phase) * N / k).long().clamp_(max=N - 1)
        row[idx] = True
    return MaskPlan(masked=masked, ratio=ratio)


def block_mask(shape, rows: int, cols: int, ratio: float, generator: torch.Generator | None = None) -> MaskPlan:
    """Block-wise masking: random rectangles until k tokens are covered, trimmed to exactly k."""
    N = rows * cols
    k = mask_count(N, ratio)
    masked = torch.zeros(*shape, N, dtype=torch.bool)
    flat = masked.reshape(-1, N)

    def rand():
        return float(torch.rand((), generator=generator))

    for row in flat:
        order: list[int] = []
        grid = torch.zeros(rows, cols, dtype=torch.bool)
        while len(order) < k:
            area = max(1.0, rand() * min(N / 4, k - len(order) + 1))
            aspect = math.exp(math.log(0.3) + rand() * (math.log(1 / 0.3) - math.log(0.3)))
            bh = min(rows, max(1, int(round(math.sqrt(area * aspect)))))
            bw = min(cols, max(1, int(round(math.sqrt(area / aspect)))))
            top = int(rand() * (rows - bh + 1))
            left = int(rand() * (cols - bw + 1))
            for i in range(top, top + bh):
                for j in range(left, left + bw):
                    if not grid[i, j]:
                        grid[i, j] = True
                        order.append(i * cols + j)
        row[torch.tensor(order[:k])] = True
    return MaskPlan(masked=masked, ratio=ratio)


def plan_masks(model, tokens: torch.Tensor, config, training: bool = True,
               generator: torch.Generator | None = None) -> MaskPlan:
    """Mask plan for [..., N, d] tokens using ``config.sampling``."""
    lead, N = tokens.shape[:-2], tokens.shape[-2]
    g = model.geometry
    if config.sampling == "strategic":
        scores = score_tokens(tokens, model.pretrain.score_blocks)
        return select_mask(scores, config.mask_ratio, config.softsort_tau, training=training)
    if config.sampling == "random":
        return random_mask(lead, N, config.mask_ratio, generator)
    if config.sampling == "uniform":
        return uniform_mask(lead, N, config.mask_ratio, generator)
    return block_mask(lead, g.grid_rows, g.grid_cols, config.mask_ratio, generator)


def reconstruct(model, tokens: torch.Tensor, plan: MaskPlan, target_patches: torch.Tensor):
    """Replace masked tokens by the mask token, encode each frame on its own,
    predict pixel patches.

    tokens: [..., N, d]; target_patches: [..., N, h*w*C].
    Returns (predicted patches, MSE over masked patches). An empty mask gives loss 0.
    """
    head = model.pretrain
    m = plan.mask_weights.to(tokens.dtype).unsqueeze(-1)
    fill = head.mask_token
    pos = model.encoder.embedder.pos
    if pos is not None:
        # masked positions keep their absolute position code
        fill = fill + pos
    x = tokens * (1 - m) + m * fill
    feats = model.encoder.single_frames(x)
    pred = head.recon(head.recon_norm(feats))
    err = ((pred - target_patches) ** 2).mean(-1)
    count = plan.masked.sum()
    if count == 0:
        return pred, err.new_zeros(())
    return pred, (err * m.squeeze(-1)).sum() / count


def pretrain_loss(model, frames: torch.Tensor, config, generator: torch.Generator | None = None):
    tokens = model.encoder.embedder(frames)
    plan = plan_masks(model, tokens, config, training=model.training, generator=generator)
    target = patchify(frames, model.geometry).to(tokens.dtype)
    _, loss = reconstruct(model, tokens, plan, target)
    return loss, plan


def pretrain_step(model, frames: torch.Tensor, optimizer, config, scheduler=None,
                  generator: torch.Generator | None = None) -> float:
    """One optimisation step on the masked reconstruction loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    def diagnostics():
        return (f"input range [{frames.min().item():.3g}, {frames.max().item():.3g}], "
                f"non-finite inputs {int((~torch.isfinite(frames)).sum())}")

    try:
        loss, _ = pretrain_loss(model, frames, config, generator)
    except FloatingPointError as err:
        raise FloatingPointError(f"{err} during pre-training ({diagnostics()})") from err
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite pre-training loss {loss.item()} ({diagnostics()})")
    loss.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return loss.item()
