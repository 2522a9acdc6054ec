"""Synthetic action videos: a bright sprite moving over static clutter.

Classes are defined by (sprite shape, motion). The default set pairs two
sprite shapes with two vertical directions, so a single frame tells the
shape but never the direction. Vertical motion is kept so that horizontal
flipping (used for augmentation and test crops) never changes a label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .video_io import write_manifest, write_sequence

SPRITES = ("square", "cross", "ring", "bar")


def sprite_mask(kind: str, size: int) -> np.ndarray:
    """Binary ``(size, size)`` mask; every shape is symmetric under x-reversal."""
    if kind not in SPRITES:
        raise ValueError(f"unknown sprite {kind!r}, choose from {SPRITES}")
    m = np.zeros((size, size))
    w = max(1, size // 4)
    if (size - w) % 2:
        w += 1
    lo = (size - w) // 2
    if kind == "square":
        m[:] = 1.0
    elif kind == "cross":
        m[lo:lo + w, :] = 1.0
        m[:, lo:lo + w] = 1.0
    elif kind == "ring":
        m[:] = 1.0
        m[w:size - w, w:size - w] = 0.0
    elif kind == "bar":
        m[lo:lo + w, :] = 1.0
    return m


@dataclass(frozen=True)
class ActionClass:
    name: str
    sprite: str
    velocity: tuple = (0.0, 0.0)  # pixels per frame along (x, y)
    oscillation: float = 0.0      # amplitude in pixels along y
    period: float = 8.0           # frames


def default_classes() -> tuple[ActionClass, ...]:
    return (
        ActionClass("square_up", "square", (0.0, -1.0)),
        ActionClass("square_down", "square", (0.0, 1.0)),
        ActionClass("cross_up", "cross", (0.0, -1.0)),
        ActionClass("cross_down", "cross", (0.0, 1.0)),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    classes: tuple = field(default_factory=default_classes)
    sequences_per_class: int = 40
    test_fraction: float = 0.25
    frame_size: tuple = (40, 40)
    num_frames: int = 24
    channels: int = 1
    sprite_size: int = 8
    speed_range: tuple = (0.8, 1.2)
    clutter: float = 0.35
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a synthetic dataset needs at least 2 classes")
        if self.sequences_per_class < 1:
            raise ValueError("sequences_per_class must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")


def _clutter(shape: tuple, amount: float, rng) -> np.ndarray:
    """Blocky static background in ``[0, amount]``."""
    m_x, m_y = shape
    block = 4
    coarse = rng.random((-(-m_x // block), -(-m_y // block)))
    fine = rng.random((m_x, m_y))
    bg = np.kron(coarse, np.ones((block, block)))[:m_x, :m_y]
    return amount * (0.7 * bg + 0.3 * fine)


def render_sequence(action: ActionClass, cfg: SyntheticConfig, origin: tuple,
                    speed: float = 1.0, phase: float = 0.0,
                    background: Optional[np.ndarray] = None,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Frames ``(m_x, m_y, m_t, channels)`` for one sprite trajectory.

    ``origin`` is the sprite's top-left corner in frame 0. Positions are
    clipped to keep the sprite inside the frame. Noise is only added when an
    ``rng`` is passed.
    """
    m_x, m_y = cfg.frame_size
    s = cfg.sprite_size
    mask = sprite_mask(action.sprite, s)
    frames = np.zeros((m_x, m_y, cfg.num_frames))
    bg = np.zeros((m_x, m_y)) if background is None else background
    vx, vy = action.velocity
    for t in range(cfg.num_frames):
        wobble = action.oscillation * np.sin(2 * np.pi * t / action.period + phase)
        x = int(round(np.clip(origin[0] + speed * vx * t, 0, m_x - s)))
        y = int(round(np.clip(origin[1] + speed * vy * t + wobble, 0, m_y - s)))
        f = bg.copy()
        patch = f[x:x + s, y:y + s]
        f[x:x + s, y:y + s] = np.where(mask > 0, 1.0, patch)
        frames[:, :, t] = f
    if rng is not None and cfg.noise > 0:
        frames = frames + rng.normal(0.0, cfg.noise, frames.shape)
    return np.repeat(frames[..., None], cfg.channels, axis=-1)


def _random_origin(action: ActionClass, cfg: SyntheticConfig, speed: float, rng) -> tuple:
    """Start position such that the whole trajectory stays inside the frame."""
    m_x, m_y = cfg.frame_size
    s = cfg.sprite_size
    travel = speed * (cfg.num_frames - 1)
    out = []
    for axis, (v, extent) in enumerate(zip(action.velocity, (m_x, m_y))):
        lo, hi = 0.0, float(extent - s)
        if v > 0:
            hi -= v * travel
        elif v < 0:
            lo -= v * travel
        if action.oscillation and axis == 1:
            lo, hi = lo + action.oscillation, hi - action.oscillation
        if hi < lo:
            lo = hi = (lo + hi) / 2
        out.append(rng.uniform(lo, hi))
    return tuple(out)


def sample_sequence(action: ActionClass, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    speed = rng.uniform(*cfg.speed_range)
    origin = _random_origin(action, cfg, speed, rng)
    phase = rng.uniform(0, 2 * np.pi)
    bg = _clutter(cfg.frame_size, cfg.clutter, rng)
    return render_sequence(action, cfg, origin, speed, phase, bg, rng)


def generate_synthetic(cfg: SyntheticConfig, root) -> Path:
    """Write the dataset under ``root`` in the on-disk sequence format.

    The output is a pure function of ``cfg``: the same seed produces
    byte-identical files.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.sequences_per_class
    n_test = int(round(n * cfg.test_fraction))
    entries = []
    for ci, action in enumerate(cfg.classes):
        cdir = f"{ci:02d}_{action.name}"
        (root / cdir).mkdir(exist_ok=True)
        for k in range(n):
            frames = sample_sequence(action, cfg, rng)
            rel = f"{cdir}/{k:04d}.seq"
            write_sequence(root / rel, frames)
            entries.append((rel, "test" if k >= n - n_test else "train"))
    write_manifest(root, entries)
    return root
