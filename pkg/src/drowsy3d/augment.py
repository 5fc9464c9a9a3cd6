"""On-the-fly clip distortions for training.

A training clip goes through window selection, a horizontal flip, one
brightness shift, and a random crop box that is resized to the network
input. Clips here are float arrays shaped ``(frames, height, width)`` in
``[0, 1]``; :func:`to_network_layout` converts to ``(h, w, f, 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class CropBox:
    """Inner box of a frame; ``x`` is its height, ``y`` its width."""

    x: int
    y: int
    top: int
    left: int


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    brightness_delta_max: float = 48 / 255
    min_area_fraction: float = 0.55
    aspect_range: tuple[float, float] = (0.96, 1.04)
    output_size: int = 224
    window: int = 10
    frame_height: int = 240
    frame_width: int = 320
    full_frame_box: bool = False

    def __post_init__(self):
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip probability must be in [0, 1]")
        if not 0 <= self.brightness_delta_max <= 1:
            raise ValueError("brightness delta must be in [0, 1]")
        if not 0 < self.min_area_fraction <= 1:
            raise ValueError("minimum area fraction must be in (0, 1]")
        lo, hi = self.aspect_range
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"aspect range {self.aspect_range} must bracket 1")
        if self.window < 1 or self.output_size < 1:
            raise ValueError("window and output size must be positive")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights ``(n_out, n_in)`` with half-pixel centers."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_bilinear(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize the last two axes of ``images``."""
    rh = resize_matrix(images.shape[-2], height)
    rw = resize_matrix(images.shape[-1], width)
    out = np.einsum("ij,...jk,lk->...il", rh, images, rw, optimize=True)
    return out.astype(images.dtype, copy=False)


def center_square(frames: np.ndarray) -> np.ndarray:
    """Center crop the last two axes to a square of the shorter side."""
    h, w = frames.shape[-2:]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return frames[..., top:top + s, left:left + s]


def prescale(frames: np.ndarray, size: int) -> np.ndarray:
    """Deterministic network preprocessing: center square crop then resize."""
    sq = center_square(frames)
    if sq.shape[-1] == size:
        return sq.astype(np.float32, copy=True)
    return resize_bilinear(sq.astype(np.float32), size, size)


def to_network_layout(clip: np.ndarray) -> np.ndarray:
    """``(f, h, w)`` -> ``(h, w, f, 1)``."""
    return np.ascontiguousarray(clip.transpose(1, 2, 0))[..., None]


def select_window(frames: np.ndarray, rng: np.random.Generator, length: int = 10) -> np.ndarray:
    if len(frames) < length:
        raise ValueError(f"record has {len(frames)} frames, need at least {length}")
    start = int(rng.integers(0, len(frames) - length + 1))
    return frames[start:start + length]


def maybe_flip(clip: np.ndarray, rng: np.random.Generator, probability: float = 0.5):
    # one draw per clip so every frame shares the flip state
    if rng.random() < probability:
        return clip[..., ::-1]
    return clip


def distort_brightness(clip: np.ndarray, rng: np.random.Generator,
                       delta_max: float = 48 / 255) -> np.ndarray:
    delta = rng.uniform(-delta_max, delta_max) if delta_max > 0 else 0.0
    return shift_brightness(clip, delta)


def shift_brightness(clip: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(clip + np.asarray(delta, clip.dtype), 0, 1)


def min_crop_height(frame_height: int = 240, frame_width: int = 320,
                    min_area_fraction: float = 0.55, max_aspect: float = 1.04) -> int:
    """Smallest integer box height for which some width meets every constraint."""
    need = min_area_fraction * frame_height * frame_width
    x = max(1, math.floor(math.sqrt(need / max_aspect)))
    while x <= frame_height:
        y = min(math.floor(max_aspect * x), frame_width)
        if x * y >= need:
            return x
        x += 1
    raise ValueError("crop constraints are infeasible for this frame size")


def sample_crop_box(rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> CropBox:
    """Draw a crop box: height uniform over feasible values, aspect uniform
    over the allowed range, offsets uniform over valid placements."""
    H, W = config.frame_height, config.frame_width
    lo_aspect, hi_aspect = config.aspect_range
    need = config.min_area_fraction * H * W
    x_min = min_crop_height(H, W, config.min_area_fraction, hi_aspect)
    for _ in range(100):
        x = int(rng.integers(x_min, H + 1))
        aspect = rng.uniform(lo_aspect, hi_aspect)
        y = int(round(aspect * x))
        if y > W or not lo_aspect <= y / x <= hi_aspect or x * y < need:
            continue
        break
    else:
        x, y = H, min(W, H)
    top = int(rng.integers(0, H - x + 1))
    left = int(rng.integers(0, W - y + 1))
    return CropBox(x, y, top, left)


def crop_and_resize(clip: np.ndarray, box: CropBox, size: int = 224) -> np.ndarray:
    """Crop every frame of an ``(f, h, w)`` clip to ``box`` and resize to
    ``size x size``; returns ``(f, size, size)``."""
    h, w = clip.shape[-2:]
    if box.top < 0 or box.left < 0 or box.top + box.x > h or box.left + box.y > w:
        raise ValueError(f"{box} falls outside a {h}x{w} frame")
    cropped = clip[..., box.top:box.top + box.x, box.left:box.left + box.y]
    return resize_bilinear(cropped, size, size)


def augment_sample(frames: np.ndarray, config: AugmentConfig, rng: np.random.Generator):
    """Full training distortion of one record; returns ``(h, w, f, 1)``."""
    clip = select_window(frames, rng, config.window)
    clip = maybe_flip(clip, rng, config.flip_probability)
    clip = distort_brightness(clip, rng, config.brightness_delta_max)
    cfg = config
    if (cfg.frame_height, cfg.frame_width) != clip.shape[-2:]:
        cfg = _with_frame(config, clip.shape[-2:])
    if cfg.full_frame_box:
        box = CropBox(cfg.frame_height, cfg.frame_width, 0, 0)
    else:
        box = sample_crop_box(rng, cfg)
    return to_network_layout(crop_and_resize(clip, box, config.output_size))


def _with_frame(config: AugmentConfig, hw) -> AugmentConfig:
    return replace(config, frame_height=int(hw[0]), frame_width=int(hw[1]))
