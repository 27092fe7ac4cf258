"""Flow decoder and head: correlation, soft-argmax matching, convex upsampling,
forward photometric occlusion check and the multi-iteration L1 loss.

Flow vectors are (u, v) = (dx, dy). Coarse flow is measured in token units,
fine flow in pixels.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .encoder import SelfAttentionBlock


class Decoder(nn.Module):
    """Self-attention blocks run on every frame at once; no cross-attention."""

    def __init__(self, d: int, num_heads: int, num_blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList(SelfAttentionBlock(d, num_heads) for _ in range(num_blocks))

    def forward(self, volume: torch.Tensor, bias=None) -> torch.Tensor:
        """[..., T, rows, cols, d] -> same shape."""
        *lead, rows, cols, d = volume.shape
        z = volume.reshape(*lead, rows * cols, d)
        for block in self.blocks:
            z = block(z, bias=bias)
        return z.reshape(volume.shape)


def decode(volume: torch.Tensor, decoder: Decoder, bias=None) -> torch.Tensor:
    return decoder(volume, bias=bias)


def displacements(r: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """[(2r+1)^2, 2] candidate (u, v) offsets, row-major over (dv, du)."""
    steps = torch.arange(-r, r + 1, dtype=dtype, device=device)
    dv, du = torch.meshgrid(steps, steps, indexing="ij")
    return torch.stack([du.flatten(), dv.flatten()], dim=-1)


def correlate(feat_s: torch.Tensor, feat_t: torch.Tensor, r: int) -> torch.Tensor:
    """Windowed dot-product correlation.

    feat_s, feat_t: [..., rows, cols, d]. Returns scores [..., rows, cols, (2r+1)^2]
    where candidate k compares source (i, j) with target (i + dv_k, j + du_k);
    out-of-grid candidates are -inf. Works on token grids and pixel maps alike.
    """
    if r < 0:
        raise ValueError(f"correlation radius must be >= 0, got {r}")
    if feat_s.shape != feat_t.shape:
        raise ValueError(f"feature shapes differ: {tuple(feat_s.shape)} vs {tuple(feat_t.shape)}")
    rows, cols, d = feat_s.shape[-3:]
    scores = _WindowDot.apply(feat_s, feat_t, r) / d ** 0.5
    return scores.masked_fill(~_window_valid(rows, cols, r, feat_s.device), float("-inf"))


class _WindowDot(torch.autograd.Function):
    """Raw windowed dot products; zero padding outside the grid.

    Hand-written backward accumulates into one padded buffer instead of one
    zero-filled buffer per candidate, which dominates the autograd cost.
    """

    @staticmethod
    def forward(ctx, fs, ft, r):
        rows, cols = fs.shape[-3:-1]
        padded = F.pad(ft, (0, 0, r, r, r, r))
        k = 2 * r + 1
        out = torch.stack([(fs * padded[..., i : i + rows, j : j + cols, :]).sum(-1)
                           for i in range(k) for j in range(k)], dim=-1)
        ctx.save_for_backward(fs, padded)
        ctx.r = r
        return out

    @staticmethod
    def backward(ctx, grad):
        fs, padded = ctx.saved_tensors
        r = ctx.r
        rows, cols = fs.shape[-3:-1]
        k = 2 * r + 1
        grad = grad.movedim(-1, 0).contiguous()
        gs = torch.zeros_like(fs)
        gp = torch.zeros_like(padded)
        for n in range(k * k):
            i, j = divmod(n, k)
            g = grad[n].unsqueeze(-1)
            gs.addcmul_(g, padded[..., i : i + rows, j : j + cols, :])
            gp[..., i : i + rows, j : j + cols, :].addcmul_(g, fs)
        return gs, gp[..., r : r + rows, r : r + cols, :], None


def _window_valid(rows: int, cols: int, r: int, device=None) -> torch.Tensor:
    off = displacements(r, torch.long, device)
    ii = torch.arange(rows, device=device).view(rows, 1, 1) + off[:, 1]
    jj = torch.arange(cols, device=device).view(1, cols, 1) + off[:, 0]
    return (ii >= 0) & (ii < rows) & (jj >= 0) & (jj < cols)


def match(scores: torch.Tensor) -> torch.Tensor:
    """Soft-argmax: expected (u, v) displacement under softmax(scores)."""
    K = scores.shape[-1]
    r = int(round((K ** 0.5 - 1) / 2))
    if (2 * r + 1) ** 2 != K:
        raise ValueError(f"candidate axis {K} is not a square window")
    if torch.isneginf(scores).all(dim=-1).any():
        raise ValueError("every candidate is masked at some position")
    p = scores.softmax(dim=-1).unflatten(-1, (2 * r + 1, 2 * r + 1))  # [..., dv, du]
    pu, pv = p.sum(-2), p.sum(-1)
    # pair +k with -k so symmetric distributions give exactly zero
    k = torch.arange(1, r + 1, dtype=scores.dtype, device=scores.device)
    u = ((pu[..., r + 1 :] - pu[..., :r].flip(-1)) * k).sum(-1)
    v = ((pv[..., r + 1 :] - pv[..., :r].flip(-1)) * k).sum(-1)
    return torch.stack([u, v], dim=-1)


def convex_upsample(coarse: torch.Tensor, weights: torch.Tensor, patch: tuple[int, int] | int,
                    check: bool = True) -> torch.Tensor:
    """Fine flow as convex combinations of the 3x3 coarse neighbourhood.

    coarse: [..., rows, cols, 2] token units; weights: [..., rows, cols, h*w, 9]
    (softmax-normalised over the last axis). Borders replicate the edge flow.
    Returns [..., rows*h, cols*w, 2] in pixels.
    """
    h, w = (patch, patch) if isinstance(patch, int) else patch
    *lead, rows, cols, _ = coarse.shape
    if weights.shape[-2:] != (h * w, 9) or weights.shape[:-2] != coarse.shape[:-1]:
        raise ValueError(f"mask shape {tuple(weights.shape)} incompatible with coarse {tuple(coarse.shape)}")
    if check:
        tol = 1e-5 if weights.dtype == torch.float32 else 1e-9
        if (weights < 0).any() or ((weights.sum(-1) - 1).abs() > tol).any():
            raise ValueError("upsampling weights are not normalised convex weights")
    scale = coarse.new_tensor([w, h])
    c = (coarse * scale).reshape(-1, rows, cols, 2).permute(0, 3, 1, 2)
    c = F.pad(c, (1, 1, 1, 1), mode="replicate")
    nb = F.unfold(c, 3).reshape(-1, 2, 9, rows, cols).permute(0, 3, 4, 2, 1)  # [B, rows, cols, 9, 2]
    wts = weights.reshape(-1, rows, cols, h * w, 9)
    fine = wts @ nb  # [B, rows, cols, h*w, 2]
    fine = fine.reshape(-1, rows, cols, h, w, 2).permute(0, 1, 3, 2, 4, 5)
    return fine.reshape(*lead, rows * h, cols * w, 2)


def warp(image: torch.Tensor, flow: torch.Tensor):
    """Backward-warp ``image`` [..., H, W, C] to I(x + flow) with bilinear sampling.

    Returns the warped image and a bool mask of samples that land inside the frame.
    """
    *lead, H, W, C = image.shape
    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=flow.dtype, device=flow.device),
        torch.arange(W, dtype=flow.dtype, device=flow.device),
        indexing="ij",
    )
    x = xs + flow[..., 0]
    y = ys + flow[..., 1]
    inside = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    grid = torch.stack([2 * x / max(W - 1, 1) - 1, 2 * y / max(H - 1, 1) - 1], dim=-1).reshape(-1, H, W, 2)
    img = image.reshape(-1, H, W, C).permute(0, 3, 1, 2).to(flow.dtype)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.permute(0, 2, 3, 1).reshape(*lead, H, W, C), inside


def occlusion(I_s, I_t, flow, threshold: float) -> torch.Tensor:
    """Forward photometric consistency: occluded where mean |I_s - I_t(x+f)| over
    channels exceeds ``threshold`` or x+f leaves the frame. Inputs [..., H, W, C]."""
    I_s, I_t, flow = (torch.as_tensor(a) for a in (I_s, I_t, flow))
    flow = flow.to(torch.float64 if flow.dtype == torch.float64 else torch.float32)
    warped, inside = warp(I_t, flow)
    diff = (I_s.to(warped.dtype) - warped).abs().mean(-1)
    return (diff > threshold) | ~inside


def sequence_loss(preds, f_gt: torch.Tensor, occluded: torch.Tensor | None, gamma: float,
                  valid: torch.Tensor | None = None) -> torch.Tensor:
    """sum_i gamma^(R-i) * mean over non-occluded valid pixels of |f_gt - f_i|_1.

    The final prediction has weight 1; earlier ones decay by gamma per step.
    """
    R = len(preds)
    if R < 1:
        raise ValueError("need at least one prediction")
    keep = torch.ones(f_gt.shape[:-1], dtype=torch.bool, device=f_gt.device)
    if occluded is not None:
        keep = keep & ~occluded
    if valid is not None:
        keep = keep & valid
    count = keep.sum()
    if count == 0:
        raise ValueError("no non-occluded valid pixels to supervise")
    weight = keep.to(f_gt.dtype)
    loss = f_gt.new_zeros(())
    for i, pred in enumerate(preds, start=1):
        if pred.shape != f_gt.shape:
            raise ValueError(f"prediction shape {tuple(pred.shape)} != ground truth {tuple(f_gt.shape)}")
        l1 = (pred - f_gt).abs().sum(-1)
        loss = loss + gamma ** (R - i) * (l1 * weight).sum() / count
    return loss


class FlowHead(nn.Module):
    """Token matching features, convex-upsampling weights and per-pixel
    refinement features.

    Per-pixel features sum a linear descriptor of the pixel's k x k image
    neighbourhood and a per-position projection of the token covering it.
    Source-side features carry a learnable score scale.
    """

    def __init__(self, d: int, patch: tuple[int, int], fine_dim: int, channels: int, local_size: int = 5):
        super().__init__()
        h, w = patch
        self.patch = patch
        self.fine_dim = fine_dim
        self.local_size = local_size
        self.norm = nn.LayerNorm(d)
        self.mask = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, h * w * 9))
        self.fine = nn.Linear(d, h * w * fine_dim)
        self.local = nn.Linear(channels * local_size ** 2, fine_dim)
        self.fine_norm = nn.LayerNorm(fine_dim)
        self.log_scale = nn.Parameter(torch.zeros(()))
        self.log_scale_fine = nn.Parameter(torch.tensor(math.log(32.0)))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.local.weight, std=(channels * local_size ** 2) ** -0.5)

    def match_features(self, decoded: torch.Tensor):
        """(scaled source features, target features) for the token correlation."""
        feats = self.norm(decoded)
        return feats[:, :-1] * self.log_scale.exp(), feats[:, 1:]

    def upsample_weights(self, feat: torch.Tensor) -> torch.Tensor:
        h, w = self.patch
        logits = self.mask(feat)
        return logits.reshape(*feat.shape[:-1], h * w, 9).softmax(-1)

    def pixel_features(self, decoded: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """decoded [..., rows, cols, d], frames [..., H, W, C] -> [..., H, W, fine_dim]."""
        h, w = self.patch
        *lead, rows, cols, _ = decoded.shape
        x = self.fine(decoded).reshape(*lead, rows, cols, h, w, self.fine_dim)
        n = len(lead)
        x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4).reshape(*lead, rows * h, cols * w, self.fine_dim)
        H, W, C = frames.shape[-3:]
        k = self.local_size
        img = frames.reshape(-1, H, W, C).permute(0, 3, 1, 2).to(x.dtype)
        nb = F.unfold(img, k, padding=k // 2).transpose(1, 2).reshape(*lead, H, W, C * k * k)
        return self.fine_norm(x + self.local(nb))

    def split_fine(self, fine: torch.Tensor):
        return fine[:, :-1] * self.log_scale_fine.exp(), fine[:, 1:]


def refine(flow: torch.Tensor, fine_s: torch.Tensor, fine_t: torch.Tensor, r: int) -> torch.Tensor:
    """One residual update: warp target pixel features by ``flow``, re-match in a
    (2r+1)^2 pixel window and add the soft-argmax residual."""
    warped, _ = warp(fine_t, flow)
    return flow + match(correlate(fine_s, warped, r))
