"""Model/training configuration, its validation and the YAML key-value file format.

Every field of :class:`ModelConfig` is a key in the config file. Unknown keys
are rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

POS_EMBED_KINDS = ("fixed_abs", "learnable_abs", "peg", "learnable_rel")
SAMPLING_KINDS = ("strategic", "random", "block", "uniform")
OCC_MODES = ("gt_flow", "pred_flow", "off")


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    # architecture
    patch: tuple[int, int] = (8, 8)
    d: int = 256
    num_heads: int = 8
    num_encoder_blocks: int = 12
    num_decoder_blocks: int = 12
    num_score_blocks: int = 2
    temporal_length: int = 5
    pos_embed_kind: str = "learnable_abs"
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    # flow head
    corr_radius: int = 4
    refine_radius: int = 1
    fine_dim: int = 16
    refine_iters: int = 4
    gamma: float = 0.8
    occ_threshold: float = 0.15
    occ_mode: str = "gt_flow"
    # pre-training
    mask_ratio: float = 0.5
    softsort_tau: float = 0.1
    sampling: str = "strategic"
    pretrain_lr: float = 1e-4
    # optimisation
    lr: float = 12.5e-5
    batch: int = 6
    steps: int = 140_000
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    eval_every: int = 250
    ckpt_every: int = 500
    seed: int = 0

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["patch"] = list(self.patch)
        out["image_size"] = list(self.image_size)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(values)
        for key in ("patch", "image_size"):
            if key in values:
                values[key] = _pair(values[key], key)
        return validate_config(cls(**values))


def _pair(value: Any, key: str) -> tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    try:
        a, b = value
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an int or a pair of ints, got {value!r}") from None
    return (int(a), int(b))


def desk_profile(**overrides: Any) -> ModelConfig:
    """CPU-sized profile: d=64, two encoder/decoder blocks, 64x64 frames, batch 4."""
    base = ModelConfig(
        d=64,
        num_heads=4,
        num_encoder_blocks=2,
        num_decoder_blocks=2,
        image_size=(64, 64),
        lr=1e-3,
        batch=4,
        steps=2000,
    )
    return validate_config(base.replace(**overrides))


def paper_profile(**overrides: Any) -> ModelConfig:
    return validate_config(ModelConfig().replace(**overrides))


def validate_config(config: ModelConfig) -> ModelConfig:
    """Return ``config`` unchanged if every invariant holds, else raise ConfigError.

    The error message names the first violated invariant.
    """
    c = config
    checks = [
        (c.d > 0 and c.num_heads > 0, "d and num_heads must be positive"),
        (c.d % c.num_heads == 0, f"d not divisible by heads (d={c.d}, heads={c.num_heads})"),
        (all(p > 0 for p in c.patch), f"patch sides must be positive, got {c.patch}"),
        (
            c.image_size[0] % c.patch[0] == 0 and c.image_size[1] % c.patch[1] == 0,
            f"image_size {c.image_size} not divisible by patch {c.patch}",
        ),
        (c.channels > 0, "channels must be positive"),
        (c.num_encoder_blocks >= 1, "num_encoder_blocks must be >= 1"),
        (c.num_decoder_blocks >= 0, "num_decoder_blocks must be >= 0"),
        (c.num_score_blocks >= 1, "num_score_blocks must be >= 1"),
        (c.temporal_length >= 2, f"temporal_length must be >= 2, got {c.temporal_length}"),
        (c.pos_embed_kind in POS_EMBED_KINDS, f"unknown pos_embed_kind {c.pos_embed_kind!r}"),
        (c.corr_radius >= 0, "corr_radius must be >= 0"),
        (c.refine_radius >= 0, "refine_radius must be >= 0"),
        (c.fine_dim >= 1, "fine_dim must be >= 1"),
        (c.refine_iters >= 1, f"refine_iters R must be >= 1, got {c.refine_iters}"),
        (0.0 < c.gamma <= 1.0, f"gamma must satisfy 0 < gamma <= 1, got {c.gamma}"),
        (c.occ_threshold > 0.0, "occ_threshold must be > 0"),
        (c.occ_mode in OCC_MODES, f"unknown occ_mode {c.occ_mode!r}"),
        (0.0 < c.mask_ratio < 1.0, f"mask_ratio must satisfy 0 < ratio < 1, got {c.mask_ratio}"),
        (c.softsort_tau > 0.0, f"softsort_tau must be > 0, got {c.softsort_tau}"),
        (c.sampling in SAMPLING_KINDS, f"unknown sampling {c.sampling!r}"),
        (c.lr > 0 and c.pretrain_lr > 0, "learning rates must be > 0"),
        (c.batch >= 1, "batch must be >= 1"),
        (c.steps >= 0 and c.warmup_steps >= 0, "steps and warmup_steps must be >= 0"),
        (c.weight_decay >= 0, "weight_decay must be >= 0"),
        (c.eval_every >= 1 and c.ckpt_every >= 1, "eval_every and ckpt_every must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    return config


def load_config(path: str | Path, base: ModelConfig | None = None) -> ModelConfig:
    """Read a YAML key-value file; missing keys come from ``base`` (desk profile by default)."""
    text = Path(path).read_text()
    values = yaml.safe_load(text) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a mapping of key: value pairs")
    merged = (base or desk_profile()).to_dict()
    unknown = sorted(set(values) - set(merged))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    merged.update(values)
    return ModelConfig.from_dict(merged)


def dump_config(config: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


# Key documentation, rendered by ``transflow config --describe``.
CONFIG_KEYS: dict[str, str] = {
    "patch": "patch side lengths (h, w) in pixels",
    "d": "token embedding width",
    "num_heads": "attention heads; must divide d",
    "num_encoder_blocks": "interleaved self/cross attention blocks in the encoder",
    "num_decoder_blocks": "self-attention blocks in the decoder",
    "num_score_blocks": "self-attention blocks in the masking score network",
    "temporal_length": "frames per input clip (T)",
    "pos_embed_kind": "one of " + ", ".join(POS_EMBED_KINDS),
    "image_size": "frame size (H, W) in pixels",
    "channels": "colour channels per frame",
    "corr_radius": "correlation search radius in token units",
    "refine_radius": "pixel search radius of the residual refinement matches",
    "fine_dim": "width of the per-pixel refinement features",
    "refine_iters": "number of flow predictions per pair (R)",
    "gamma": "per-iteration loss decay",
    "occ_threshold": "mean abs photometric difference above which a pixel is occluded",
    "occ_mode": "flow used for the occlusion check in the loss: " + ", ".join(OCC_MODES),
    "mask_ratio": "fraction of tokens masked during pre-training",
    "softsort_tau": "SoftSort temperature",
    "sampling": "mask sampling strategy: " + ", ".join(SAMPLING_KINDS),
    "pretrain_lr": "pre-training learning rate",
    "lr": "flow training learning rate",
    "batch": "clips per optimisation step",
    "steps": "optimisation steps",
    "warmup_steps": "linear learning-rate warmup steps",
    "weight_decay": "decoupled weight decay",
    "grad_clip": "global gradient-norm clip (0 disables)",
    "eval_every": "held-out evaluation period in steps",
    "ckpt_every": "checkpoint period in steps",
    "seed": "global RNG seed",
}
assert set(CONFIG_KEYS) == {f.name for f in fields(ModelConfig)}
