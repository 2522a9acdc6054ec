"""On-disk action datasets.

Layout::

    root/
      manifest.txt           # "<relative path>\t<train|test>" per line
      <class_dir>/<name>.seq

A ``.seq`` file is a little-endian int32 header ``(magic, version, m_x, m_y,
m_t, channels)`` followed by ``m_t`` frames of little-endian float32, each
frame stored row-major as ``(m_x, m_y, channels)``. Class labels are the
positions of the class directories in sorted order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clips import VideoSequence

SEQ_MAGIC = 0x56545346  # b"FSTV" little-endian
SEQ_VERSION = 1
_HEADER = struct.Struct("<6i")
MANIFEST = "manifest.txt"
SPLITS = ("train", "test")


def write_sequence(path, frames: np.ndarray) -> None:
    """Write ``(m_x, m_y, m_t, channels)`` frames; values are stored as float32."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[..., None]
    m_x, m_y, m_t, ch = frames.shape
    body = np.ascontiguousarray(np.transpose(frames, (2, 0, 1, 3)), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, m_x, m_y, m_t, ch))
        fh.write(body.tobytes())


def read_sequence(path, label=None, dtype=np.float64) -> VideoSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, m_x, m_y, m_t, ch = _HEADER.unpack_from(raw)
    if magic != SEQ_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}")
    if version != SEQ_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = m_x * m_y * m_t * ch * 4
    if len(raw) - _HEADER.size != expected:
        raise ValueError(f"{path}: expected {expected} bytes of frame data, found {len(raw) - _HEADER.size}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(m_t, m_x, m_y, ch)
    frames = np.transpose(data, (1, 2, 0, 3)).astype(dtype)
    return VideoSequence(frames, label, Path(path).stem)


def write_manifest(root, entries: list[tuple[str, str]]) -> None:
    with open(Path(root) / MANIFEST, "w", newline="\n") as fh:
        for rel, split in entries:
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            fh.write(f"{rel}\t{split}\n")


def read_manifest(root) -> list[tuple[str, str]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, split = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected '<path>\\t<split>'") from None
        if split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
        entries.append((rel, split))
    return entries


@dataclass
class ActionDataset:
    classes: list[str]
    train: list[VideoSequence] = field(default_factory=list)
    test: list[VideoSequence] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def load_dataset(root, dtype=np.float64) -> ActionDataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    entries = read_manifest(root)
    classes = sorted({rel.split("/")[0] for rel, _ in entries})
    index = {name: i for i, name in enumerate(classes)}
    ds = ActionDataset(classes)
    for rel, split in entries:
        seq = read_sequence(root / rel, index[rel.split("/")[0]], dtype)
        seq.name = rel
        getattr(ds, split).append(seq)
    return ds
