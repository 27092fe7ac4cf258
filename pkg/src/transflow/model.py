"""The full flow network: encoder, decoder, matching head and pre-training head."""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig, validate_config
from .decoder import Decoder, FlowHead, convex_upsample, correlate, match, refine
from .encoder import Encoder
from .pretrain import PretrainHead
from .types import FrameSequence, PatchGeometry


class TransFlow(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        validate_config(config)
        self.config = config
        self.geometry = PatchGeometry.from_config(config)
        g, d = self.geometry, config.d
        self.encoder = Encoder(g, config.channels, d, config.num_heads,
                               config.num_encoder_blocks, config.pos_embed_kind)
        self.decoder = Decoder(d, config.num_heads, config.num_decoder_blocks)
        self.head = FlowHead(d, config.patch, config.fine_dim, config.channels)
        self.pretrain = PretrainHead(d, config.num_heads, config.num_score_blocks,
                                     g.h * g.w * config.channels)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """[B, T, H, W, C] -> decoded [B, T, rows, cols, d]."""
        volume = self.encoder(frames)
        return self.decoder(volume, bias=self.encoder.embedder.attn_bias())

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """R flow predictions, each [B, T-1, H, W, 2] in pixels, for pairs (t, t+1)."""
        cfg = self.config
        frames = _as_batch(frames, self.geometry)
        decoded = self.features(frames)
        fs, ft = self.head.match_features(decoded)
        weights = self.head.upsample_weights(decoded[:, :-1])
        coarse = match(correlate(fs, ft, cfg.corr_radius))
        flow = convex_upsample(coarse, weights, cfg.patch, check=False)
        preds = [flow]
        if cfg.refine_iters > 1:
            fine_s, fine_t = self.head.split_fine(self.head.pixel_features(decoded, frames))
            for _ in range(cfg.refine_iters - 1):
                flow = refine(flow, fine_s, fine_t, cfg.refine_radius)
                preds.append(flow)
        return preds


def _as_batch(frames, geometry: PatchGeometry) -> torch.Tensor:
    if isinstance(frames, FrameSequence):
        frames = torch.from_numpy(frames.frames.copy())
    frames = torch.as_tensor(frames)
    if frames.dim() == 4:
        frames = frames.unsqueeze(0)
    if frames.dim() != 5:
        raise ValueError(f"expected frames [B, T, H, W, C], got shape {tuple(frames.shape)}")
    H, W = frames.shape[-3:-1]
    if (H, W) != (geometry.H, geometry.W):
        raise ValueError(
            f"frame size {H}x{W} does not match the model's image_size {geometry.H}x{geometry.W} "
            f"(must be divisible by patch {geometry.h}x{geometry.w})"
        )
    if frames.shape[1] < 2:
        raise ValueError("need at least T=2 frames")
    return frames


@torch.no_grad()
def predict_flow(model: TransFlow, frames) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Final flow [B, T-1, H, W, 2] and all intermediate predictions."""
    was_training = model.training
    model.eval()
    try:
        preds = model(frames)
    finally:
        model.train(was_training)
    return preds[-1], preds
