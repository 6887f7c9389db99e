"""Weak/strong view generation, complementary feature-dropout masks and CutMix.

All three views of a bundle share one geometry (a horizontal flip or not), so
pixel ``i`` refers to the same scene point in the weak view and both strong
views.  Randomness comes only from the ``numpy.random.Generator`` passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    sigma_weak: float = 0.02
    sigma_strong: float = 0.1
    gain_low: float = 0.7
    gain_high: float = 1.3
    gray_prob: float = 0.2
    flip_prob: float = 0.5
    p_drop: float = 0.5

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.p_drop

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(sigma_weak=0.0, sigma_strong=0.0, gain_low=1.0, gain_high=1.0,
                   gray_prob=0.0, flip_prob=0.0)


@dataclass(frozen=True)
class Geometry:
    flipped: bool = False

    def apply(self, grid: np.ndarray) -> np.ndarray:
        """Apply to an ``H x W [x ...]`` array (image or label map)."""
        return grid[:, ::-1].copy() if self.flipped else grid


@dataclass(frozen=True)
class ViewBundle:
    weak: np.ndarray
    strong1: np.ndarray
    strong2: np.ndarray
    geometry: Geometry
    dropout_mask1: np.ndarray
    dropout_mask2: np.ndarray


def _strong(weak: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    d = weak.shape[-1]
    gain = rng.uniform(cfg.gain_low, cfg.gain_high, size=d)
    out = weak * gain
    if rng.random() < cfg.gray_prob:
        out = np.repeat(out.mean(axis=-1, keepdims=True), d, axis=-1)
    return out + cfg.sigma_strong * rng.standard_normal(weak.shape)


def make_views(img, rng: np.random.Generator, hidden: int,
               cfg: AugmentConfig = AugmentConfig()) -> ViewBundle:
    x = np.asarray(img, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty image")
    geom = Geometry(bool(rng.random() < cfg.flip_prob))
    weak = geom.apply(x) + cfg.sigma_weak * rng.standard_normal(x.shape)
    s1 = _strong(weak, rng, cfg)
    s2 = _strong(weak, rng, cfg)
    mask1 = rng.random(hidden) < cfg.keep_prob
    return ViewBundle(weak, s1, s2, geom, mask1, ~mask1)


@dataclass(frozen=True)
class CutMix:
    strong1: np.ndarray
    strong2: np.ndarray
    from_b: np.ndarray  # H x W booleans, True where the pixel comes from B
    box: tuple[int, int, int, int]


def sample_box(rng: np.random.Generator, h: int, w: int) -> tuple[int, int, int, int]:
    """Box ``(y0, y1, x0, x1)`` whose area fraction is uniform in [0, 1]."""
    frac = rng.uniform()
    bh, bw = int(round(h * np.sqrt(frac))), int(round(w * np.sqrt(frac)))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, y0 + bh, x0, x0 + bw


def cutmix(a: ViewBundle, b: ViewBundle, rng: np.random.Generator | None = None,
           box: tuple[int, int, int, int] | None = None) -> CutMix:
    """Paste a rectangle of B's strong views into A's strong views."""
    if a.strong1.shape != b.strong1.shape:
        raise ValueError("cutmix needs equal image shapes")
    h, w = a.strong1.shape[:2]
    if box is None:
        box = sample_box(rng, h, w)
    y0, y1, x0, x1 = box
    from_b = np.zeros((h, w), dtype=bool)
    from_b[y0:y1, x0:x1] = True
    sel = from_b[..., None]
    return CutMix(np.where(sel, b.strong1, a.strong1), np.where(sel, b.strong2, a.strong2),
                  from_b, box)
