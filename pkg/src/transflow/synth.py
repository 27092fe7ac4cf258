"""Synthetic flow scenes with analytic ground truth.

A scene is a textured background translating at constant velocity plus a
stack of textured rectangular sprites, each with its own constant translation
and rotation rate. Frames are rendered by bilinear texture sampling with
box-filter edge coverage, so fractional motion is rendered exactly and the
ground-truth flow is the analytic motion of whichever layer owns each pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .types import FlowField, FrameSequence, OcclusionMask


@dataclass(frozen=True)
class Sprite:
    texture: np.ndarray  # [sh, sw, C]
    center: tuple[float, float]  # (x, y) at t=0, pixels
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vy) pixels / frame
    spin: float = 0.0  # radians / frame

    def __post_init__(self):
        tex = np.asarray(self.texture, dtype=np.float32)
        if tex.ndim != 3 or tex.shape[0] == 0 or tex.shape[1] == 0:
            raise ValueError(f"degenerate sprite texture of shape {tex.shape}")
        object.__setattr__(self, "texture", tex)

    @property
    def size(self) -> tuple[int, int]:
        return self.texture.shape[1], self.texture.shape[0]  # (sw, sh)

    def pose(self, t: float) -> tuple[np.ndarray, float]:
        c = np.array(self.center, dtype=np.float64) + t * np.array(self.velocity, dtype=np.float64)
        return c, t * self.spin


@dataclass(frozen=True)
class SyntheticScene:
    H: int
    W: int
    T: int
    background: np.ndarray  # [H + 2m, W + 2m, C], sampled with margin m
    bg_velocity: tuple[float, float] = (0.0, 0.0)
    sprites: tuple[Sprite, ...] = field(default_factory=tuple)
    seed: int | None = None

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"a scene needs T >= 2 frames, got T={self.T}")
        bg = np.asarray(self.background, dtype=np.float32)
        if bg.ndim != 3 or bg.shape[0] < self.H or bg.shape[1] < self.W:
            raise ValueError(f"background {bg.shape} smaller than the {self.H}x{self.W} canvas")
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "sprites", tuple(self.sprites))
        for s in self.sprites:
            c, _ = s.pose(0)
            sw, sh = s.size
            if not (sw / 2 <= c[0] + 0.5 <= self.W - sw / 2 and sh / 2 <= c[1] + 0.5 <= self.H - sh / 2):
                raise ValueError("sprite does not lie within the canvas at t=0")

    @property
    def margin(self) -> tuple[float, float]:
        return ((self.background.shape[1] - self.W) / 2, (self.background.shape[0] - self.H) / 2)

    @property
    def channels(self) -> int:
        return self.background.shape[2]


def _sample(texture: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup at texel coordinates (x, y), edge-clamped. Returns [..., C]."""
    coords = np.stack([y.ravel(), x.ravel()])
    out = [ndimage.map_coordinates(texture[..., c], coords, order=1, mode="nearest") for c in range(texture.shape[2])]
    return np.stack(out, axis=-1).reshape(*x.shape, texture.shape[2])


def _rotate(vx, vy, angle):
    ca, sa = math.cos(angle), math.sin(angle)
    return ca * vx - sa * vy, sa * vx + ca * vy


def sprite_local(sprite: Sprite, t: float, x: np.ndarray, y: np.ndarray):
    """Sprite-frame coordinates of canvas points (x, y) at time t."""
    c, theta = sprite.pose(t)
    return _rotate(x - c[0], y - c[1], -theta)


def sprite_alpha(sprite: Sprite, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Box-filter coverage of a unit pixel centred at (x, y)."""
    qx, qy = sprite_local(sprite, t, x, y)
    sw, sh = sprite.size
    ax = np.clip(sw / 2 - np.abs(qx) + 0.5, 0.0, 1.0)
    ay = np.clip(sh / 2 - np.abs(qy) + 0.5, 0.0, 1.0)
    return ax * ay


def sprite_flow(sprite: Sprite, t: float, x: np.ndarray, y: np.ndarray):
    """Displacement of sprite material at (x, y) from frame t to t+1."""
    c0, _ = sprite.pose(t)
    c1, _ = sprite.pose(t + 1)
    rx, ry = _rotate(x - c0[0], y - c0[1], sprite.spin)
    return c1[0] + rx - x, c1[1] + ry - y


def render(scene: SyntheticScene, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Frame t [H, W, C] and its layer-ownership map (0 = background, k = sprite k)."""
    ys, xs = np.mgrid[0 : scene.H, 0 : scene.W].astype(np.float64)
    mx, my = scene.margin
    vx, vy = scene.bg_velocity
    frame = _sample(scene.background, xs + mx - t * vx, ys + my - t * vy).astype(np.float64)
    owner = np.zeros((scene.H, scene.W), dtype=np.int32)
    for k, s in enumerate(scene.sprites, start=1):
        a = sprite_alpha(s, t, xs, ys)
        if not a.any():
            continue
        qx, qy = sprite_local(s, t, xs, ys)
        sw, sh = s.size
        color = _sample(s.texture, qx + sw / 2 - 0.5, qy + sh / 2 - 0.5)
        frame = (1 - a[..., None]) * frame + a[..., None] * color
        owner[a > 0.5] = k
    return frame.astype(np.float32), owner


def ground_truth(scene: SyntheticScene, t: int, owner: np.ndarray | None = None):
    """Flow [H, W, 2] and occlusion [H, W] for the pair (t, t+1).

    A pixel is occluded when x + f leaves the canvas or lands under a layer
    stacked above its own layer in frame t+1.
    """
    ys, xs = np.mgrid[0 : scene.H, 0 : scene.W].astype(np.float64)
    if owner is None:
        owner = render(scene, t)[1]
    flow = np.zeros((scene.H, scene.W, 2))
    flow[..., 0], flow[..., 1] = scene.bg_velocity
    for k, s in enumerate(scene.sprites, start=1):
        sel = owner == k
        if sel.any():
            u, v = sprite_flow(s, t, xs[sel], ys[sel])
            flow[sel, 0], flow[sel, 1] = u, v
    tx, ty = xs + flow[..., 0], ys + flow[..., 1]
    occ = (tx < 0) | (tx > scene.W - 1) | (ty < 0) | (ty > scene.H - 1)
    for k, s in enumerate(scene.sprites, start=1):
        covered = sprite_alpha(s, t + 1, tx, ty) > 0.5
        occ |= covered & (owner < k)
    return flow.astype(np.float32), occ


def generate(scene: SyntheticScene):
    """Render the clip: (FrameSequence, [FlowField] * (T-1), [OcclusionMask] * (T-1))."""
    frames, flows, occs = generate_arrays(scene)
    return (
        FrameSequence(frames),
        [FlowField(f) for f in flows],
        [OcclusionMask(o) for o in occs],
    )


def generate_arrays(scene: SyntheticScene):
    """Like :func:`generate` but returns plain arrays [T,H,W,C], [T-1,H,W,2], [T-1,H,W]."""
    rendered = [render(scene, t) for t in range(scene.T)]
    frames = np.stack([f for f, _ in rendered])
    gts = [ground_truth(scene, t, rendered[t][1]) for t in range(scene.T - 1)]
    flows = np.stack([f for f, _ in gts])
    occs = np.stack([o for _, o in gts])
    return frames, flows, occs


def smooth_texture(rng: np.random.Generator, H: int, W: int, C: int,
                   sigmas=(1.0, 2.0, 4.0), lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Multi-scale smoothed noise rescaled to [lo, hi] per channel."""
    tex = np.zeros((H, W, C))
    for s in sigmas:
        noise = rng.standard_normal((H, W, C))
        tex += ndimage.gaussian_filter(noise, sigma=(s, s, 0), mode="wrap") * s ** 0.5
    tex -= tex.min(axis=(0, 1))
    tex /= tex.max(axis=(0, 1)) + 1e-12
    return (lo + (hi - lo) * tex).astype(np.float32)


@dataclass(frozen=True)
class SceneSampler:
    """Distribution over random scenes; every draw is a pure function of the seed."""

    H: int = 64
    W: int = 64
    T: int = 5
    C: int = 3
    max_bg_speed: float = 2.0
    max_sprite_speed: float = 4.0
    max_spin: float = 0.0
    sprites: tuple[int, int] = (1, 3)
    sprite_size: tuple[int, int] = (12, 28)

    def __call__(self, seed: int) -> SyntheticScene:
        rng = np.random.default_rng(seed)
        m = int(math.ceil(self.max_bg_speed * (self.T - 1))) + 2
        background = smooth_texture(rng, self.H + 2 * m, self.W + 2 * m, self.C, lo=0.05, hi=0.6)
        bg_velocity = tuple(rng.uniform(-self.max_bg_speed, self.max_bg_speed, 2))
        sprites = []
        for _ in range(rng.integers(self.sprites[0], self.sprites[1] + 1)):
            sw, sh = rng.integers(self.sprite_size[0], self.sprite_size[1] + 1, 2)
            tint = rng.uniform(0.0, 0.4, self.C)
            tex = smooth_texture(rng, sh, sw, self.C, sigmas=(1.0, 2.0), lo=0.3, hi=0.9)
            tex = np.clip(tex + tint - 0.2, 0.0, 1.0)
            cx = rng.uniform(sw / 2, self.W - sw / 2) - 0.5
            cy = rng.uniform(sh / 2, self.H - sh / 2) - 0.5
            vel = tuple(rng.uniform(-self.max_sprite_speed, self.max_sprite_speed, 2))
            spin = rng.uniform(-self.max_spin, self.max_spin) if self.max_spin > 0 else 0.0
            sprites.append(Sprite(tex, (cx, cy), vel, spin))
        return SyntheticScene(self.H, self.W, self.T, background, bg_velocity, tuple(sprites), seed)
