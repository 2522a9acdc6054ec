"""Test-time score fusion over crops and clips.

Each test sequence yields ``M`` clip pairs (evenly spaced starts) and each
pair is evaluated at ``C`` crops. Crop scores inside a clip are combined by
a sparsity-weighted mean, the per-clip results by an entrywise maximum. The
plain mean over all ``C*M`` vectors is kept as a baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .clips import ClipSpec, CropSet, VideoSequence, evenly_spaced_starts, sample_clip_pair
from .network import Network, stack_pairs

SCHEMES = ("sci", "average")


def _as_scores(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty list of score vectors, got shape {arr.shape}")
    return arr


def sci(p) -> float | np.ndarray:
    """Sparsity concentration index ``(N*max(p)/sum(p) - 1) / (N - 1)``.

    Args:
        p: Score vector of length ``N >= 2``, or a stack ``(..., N)``; entries
            must be non-negative with a positive sum.

    Returns:
        A value in ``[0, 1]``: 1 for one-hot, 0 for uniform. Arrays in give
        arrays out (one value per vector).
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    if n < 2:
        raise ValueError("SCI needs at least 2 classes (N - 1 is the denominator)")
    if np.any(p < 0):
        raise ValueError("scores must be non-negative")
    total = p.sum(axis=-1)
    if np.any(total <= 0):
        raise ValueError("scores must have a positive sum")
    out = (n * p.max(axis=-1) / total - 1.0) / (n - 1)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def fuse_crops(scores) -> np.ndarray:
    """SCI-weighted mean of ``C`` crop score vectors.

    When every weight is zero (all crops exactly uniform) the weighted mean
    is undefined and the plain mean is returned instead.
    """
    arr = _as_scores(scores)
    if arr.shape[0] == 1:
        return arr[0].copy()
    w = sci(arr)
    total = w.sum()
    if total == 0:
        return arr.mean(axis=0)
    return (w[:, None] * arr).sum(axis=0) / total


def fuse_clips(clip_scores) -> np.ndarray:
    """Entrywise maximum over ``M`` per-clip vectors (not renormalized)."""
    if not isinstance(clip_scores, np.ndarray):
        lengths = {len(s) for s in clip_scores}
        if len(lengths) > 1:
            raise ValueError(f"score vectors have different lengths: {sorted(lengths)}")
    return _as_scores(clip_scores).max(axis=0)


def fuse_average(scores) -> np.ndarray:
    """Arithmetic mean over every score vector given (any leading shape)."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot average an empty set of scores")
    return arr.reshape(-1, arr.shape[-1]).mean(axis=0)


def predict(fused) -> int:
    """Arg-max class; exact ties go to the lowest index."""
    return int(np.argmax(fused))


def fuse(scores: np.ndarray, scheme: str) -> np.ndarray:
    """Fuse an ``(M, C, N)`` score array with ``"sci"`` or ``"average"``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ValueError(f"expected scores shaped (clips, crops, classes), got {scores.shape}")
    if scheme == "sci":
        return fuse_clips(np.stack([fuse_crops(s) for s in scores]))
    if scheme == "average":
        return fuse_average(scores)
    raise ValueError(f"unknown fusion scheme {scheme!r}, choose from {SCHEMES}")


def crop_scores(net: Network, seq: VideoSequence, spec: ClipSpec, crops: CropSet,
                batch_size: int = 256) -> np.ndarray:
    """Raw class probabilities ``(M, C, N)`` for every clip and crop of ``seq``."""
    spec.validate(seq.shape)
    starts = evenly_spaced_starts(seq.num_frames, spec)
    origins = crops.origins(seq.shape, spec)
    pairs = [sample_clip_pair(seq, spec, start, origin, flip)
             for start in starts for origin, flip in origins]
    clips, diffs, _ = stack_pairs(pairs)
    probs = net.predict_proba(clips, diffs, batch_size)
    return probs.reshape(len(starts), len(origins), -1)


def infer_sequence(net: Network, seq: VideoSequence, spec: ClipSpec, crops: CropSet | None = None,
                   scheme: str = "sci") -> tuple[int, np.ndarray]:
    """Predicted class and fused score vector for one sequence.

    Raises:
        ValueError: the sequence is shorter than ``spec.min_frames`` or
            smaller than the crop.
    """
    scores = crop_scores(net, seq, spec, crops or CropSet())
    fused = fuse(scores, scheme)
    return predict(fused), fused


@dataclass
class ScoreRecord:
    """One dumped row: probabilities of one (sequence, clip, crop)."""

    sequence: str
    label: int
    clip: int
    crop: int
    scores: list

    def to_json(self) -> str:
        return json.dumps({"sequence": self.sequence, "label": self.label, "clip": self.clip,
                           "crop": self.crop, "scores": self.scores})


def dump_scores(path, entries: Iterable[tuple[str, int, np.ndarray]]) -> None:
    """Write ``(name, label, scores (M, C, N))`` triples as JSON lines.

    Floats are written with ``repr`` precision, so reloading is exact.
    """
    with open(path, "w") as fh:
        for name, label, scores in entries:
            for m, row in enumerate(np.asarray(scores)):
                for c, vec in enumerate(row):
                    rec = ScoreRecord(name, int(label), m, c, [float(v) for v in vec])
                    fh.write(rec.to_json() + "\n")


def load_scores(path) -> list[tuple[str, int, np.ndarray]]:
    """Inverse of :func:`dump_scores`, preserving sequence order."""
    grouped: dict[str, dict] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            key, label = rec["sequence"], int(rec["label"])
            cell = (int(rec["clip"]), int(rec["crop"]))
            vec = [float(v) for v in rec["scores"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed score record ({exc})") from None
        entry = grouped.setdefault(key, {"label": label, "cells": {}})
        entry["cells"][cell] = vec
    out = []
    for name, entry in grouped.items():
        cells = entry["cells"]
        n_m = 1 + max(m for m, _ in cells)
        n_c = 1 + max(c for _, c in cells)
        if len(cells) != n_m * n_c:
            raise ValueError(f"{path}: sequence {name!r} is missing (clip, crop) records")
        arr = np.array([[cells[(m, c)] for c in range(n_c)] for m in range(n_m)])
        out.append((name, entry["label"], arr))
    return out


def accuracy_report(entries: Sequence[tuple[str, int, np.ndarray]], num_classes: int,
                    scheme: str) -> dict:
    """Per-class and mean accuracy of a fusion scheme over dumped scores.

    Returns:
        ``{"scheme", "per_class": [...], "mean_class": float, "overall": float}``.
        Classes with no test sequence get ``None`` and are skipped in the mean.
    """
    hits = np.zeros(num_classes)
    counts = np.zeros(num_classes)
    for _, label, scores in entries:
        counts[label] += 1
        hits[label] += predict(fuse(scores, scheme)) == label
    per_class = [float(h / c) if c else None for h, c in zip(hits, counts)]
    present = [a for a in per_class if a is not None]
    return {
        "scheme": scheme,
        "per_class": per_class,
        "mean_class": float(np.mean(present)) if present else float("nan"),
        "overall": float(hits.sum() / counts.sum()) if counts.sum() else float("nan"),
    }
