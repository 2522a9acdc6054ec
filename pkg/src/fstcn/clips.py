"""Frame differencing and (appearance clip, difference clip) pair sampling.

All frame indices here are 0-based. A clip with ``l_t`` frames at stride
``s_t`` starting at ``start`` uses frames ``start, start + s_t, ...,
start + (l_t - 1) * s_t``; the difference clip uses the same indices into
the frame-difference sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class VideoSequence:
    """Frames ``(m_x, m_y, m_t, channels)`` with an optional class label.

    Axis 0 is horizontal, so a horizontal flip reverses axis 0.
    """

    frames: np.ndarray
    label: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise ValueError(f"frames must be (m_x, m_y, m_t[, channels]), got shape {frames.shape}")
        if min(frames.shape) < 1:
            raise ValueError(f"frames must have positive extents, got shape {frames.shape}")
        self.frames = frames

    @property
    def shape(self) -> tuple:
        return self.frames.shape

    @property
    def num_frames(self) -> int:
        return self.frames.shape[2]


def frame_diff(seq: VideoSequence, d_t: int) -> VideoSequence:
    """``|V[:, :, i] - V[:, :, i + d_t]|`` for ``i = 0 .. m_t - d_t - 1``."""
    m_t = seq.num_frames
    if d_t < 1:
        raise ValueError(f"d_t must be >= 1, got {d_t}")
    if d_t >= m_t:
        raise ValueError(f"d_t={d_t} must be smaller than the number of frames m_t={m_t}")
    f = seq.frames
    diff = np.abs(f[:, :, :m_t - d_t] - f[:, :, d_t:])
    return VideoSequence(diff, seq.label, seq.name)


@dataclass(frozen=True)
class ClipSpec:
    """Clip geometry: crop ``l_x x l_y``, ``l_t`` frames at stride ``s_t``,
    differences over ``d_t`` frames, ``clips_per_sequence`` pairs at test time."""

    l_x: int
    l_y: int
    l_t: int = 5
    s_t: int = 5
    d_t: int = 9
    clips_per_sequence: int = 5

    def __post_init__(self):
        for name in ("l_x", "l_y", "l_t", "s_t", "d_t", "clips_per_sequence"):
            if getattr(self, name) < 1:
                raise ValueError(f"ClipSpec.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def span(self) -> int:
        """Temporal extent covered by a clip, ``(l_t - 1) * s_t``."""
        return (self.l_t - 1) * self.s_t

    @property
    def min_frames(self) -> int:
        """Shortest sequence that can host one clip pair."""
        return self.span + self.d_t + 1

    def indices(self, start: int) -> np.ndarray:
        return start + self.s_t * np.arange(self.l_t)

    def max_start(self, m_t: int) -> int:
        return m_t - self.min_frames

    def validate(self, shape: tuple) -> None:
        m_x, m_y, m_t = shape[:3]
        if self.l_x > m_x or self.l_y > m_y:
            raise ValueError(f"crop {self.l_x}x{self.l_y} larger than frame {m_x}x{m_y}")
        if m_t < self.min_frames:
            raise ValueError(
                f"sequence has {m_t} frames but clips need at least {self.min_frames} "
                f"((l_t-1)*s_t + d_t + 1 with l_t={self.l_t}, s_t={self.s_t}, d_t={self.d_t})")


@dataclass(frozen=True)
class SamplingRecord:
    start: int
    crop_origin: tuple[int, int]
    flip: bool
    indices: tuple[int, ...]


@dataclass
class ClipPair:
    """Appearance clip and difference clip, both ``(l_x, l_y, l_t, channels)``."""

    clip: np.ndarray
    diff_clip: np.ndarray
    record: SamplingRecord
    label: Optional[int] = None

    def flipped(self) -> "ClipPair":
        rec = self.record
        return ClipPair(self.clip[::-1].copy(), self.diff_clip[::-1].copy(),
                        SamplingRecord(rec.start, rec.crop_origin, not rec.flip, rec.indices),
                        self.label)


def sample_clip_pair(seq: VideoSequence, spec: ClipSpec, start: Optional[int] = None,
                     crop_origin: Optional[tuple[int, int]] = None, flip: bool = False,
                     seed=None) -> ClipPair:
    """Cut a clip pair out of ``seq``.

    ``start`` and ``crop_origin`` are drawn uniformly over their valid ranges
    from ``seed`` (an int or a ``np.random.Generator``) when not given.
    """
    spec.validate(seq.shape)
    m_x, m_y, m_t = seq.shape[:3]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hi = spec.max_start(m_t)
    if start is None:
        start = int(rng.integers(0, hi + 1))
    if crop_origin is None:
        crop_origin = (int(rng.integers(0, m_x - spec.l_x + 1)), int(rng.integers(0, m_y - spec.l_y + 1)))
    if not 0 <= start <= hi:
        raise ValueError(f"start frame {start} out of range [0, {hi}] for m_t={m_t}, "
                         f"span={spec.span}, d_t={spec.d_t}")
    ox, oy = crop_origin
    if not (0 <= ox <= m_x - spec.l_x and 0 <= oy <= m_y - spec.l_y):
        raise ValueError(f"crop origin {crop_origin} out of range: x must be in [0, {m_x - spec.l_x}], "
                         f"y in [0, {m_y - spec.l_y}]")

    idx = spec.indices(start)
    region = seq.frames[ox:ox + spec.l_x, oy:oy + spec.l_y]
    clip = region[:, :, idx]
    # same values as frame_diff(seq, d_t) at idx, then cropped
    diff_clip = np.abs(clip - region[:, :, idx + spec.d_t])
    if flip:
        clip, diff_clip = clip[::-1], diff_clip[::-1]
    record = SamplingRecord(int(start), (int(ox), int(oy)), bool(flip), tuple(int(i) for i in idx))
    return ClipPair(np.ascontiguousarray(clip), np.ascontiguousarray(diff_clip), record, seq.label)


def random_clip_pair(seq: VideoSequence, spec: ClipSpec, rng: np.random.Generator,
                     flip: bool = True) -> ClipPair:
    """Training-time pair: uniform start and crop origin, coin-flip mirroring."""
    m_x, m_y, m_t = seq.shape[:3]
    spec.validate(seq.shape)
    start = int(rng.integers(0, spec.max_start(m_t) + 1))
    origin = (int(rng.integers(0, m_x - spec.l_x + 1)), int(rng.integers(0, m_y - spec.l_y + 1)))
    mirror = bool(rng.integers(0, 2)) if flip else False
    return sample_clip_pair(seq, spec, start, origin, mirror)


def sample_training_batch(dataset: Sequence[VideoSequence], spec: ClipSpec, batch_size: int,
                          seed=None, flip: bool = True) -> list[ClipPair]:
    """Draw ``batch_size`` pairs from sequences chosen uniformly with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.integers(0, len(dataset), size=batch_size)
    return [random_clip_pair(dataset[int(i)], spec, rng, flip) for i in picks]


def evenly_spaced_starts(m_t: int, spec: ClipSpec, count: Optional[int] = None) -> list[int]:
    """``count`` clip starts spread evenly over the valid range (inference)."""
    count = count or spec.clips_per_sequence
    hi = spec.max_start(m_t)
    if hi < 0:
        raise ValueError(f"sequence has {m_t} frames, needs at least {spec.min_frames}")
    if count == 1:
        return [hi // 2]
    return [int(round(v)) for v in np.linspace(0, hi, count)]


_GRID = {"top": 0, "left": 0, "middle": 1, "bottom": 2, "right": 2}


@dataclass
class CropSet:
    """Test-time crops: 3x3 grid of positions, each optionally mirrored."""

    positions: tuple = ("top_left", "top_middle", "top_right",
                        "middle_left", "middle", "middle_right",
                        "bottom_left", "bottom_middle", "bottom_right")
    flips: tuple = (False, True)

    def __post_init__(self):
        if len(self.positions) * len(self.flips) < 1:
            raise ValueError("a crop set needs at least one crop")

    def __len__(self) -> int:
        return len(self.positions) * len(self.flips)

    def origins(self, frame_shape: tuple, spec: ClipSpec) -> list[tuple[tuple[int, int], bool]]:
        """``[((x, y), flip), ...]`` in position-major order."""
        m_x, m_y = frame_shape[:2]
        xs = (0, (m_x - spec.l_x) // 2, m_x - spec.l_x)
        ys = (0, (m_y - spec.l_y) // 2, m_y - spec.l_y)
        out = []
        for pos in self.positions:
            if pos == "middle":
                row = col = 1
            else:
                vert, horiz = pos.split("_")
                row = _GRID[vert]
                col = _GRID[horiz]
            for fl in self.flips:
                # rows run along y (vertical), columns along x (horizontal)
                out.append(((xs[col], ys[row]), fl))
        return out
