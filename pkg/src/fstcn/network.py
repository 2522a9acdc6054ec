"""Factorized spatio-temporal network.

Data flow for a batch of clip pairs::

    one appearance frame ----+                     +--> parallel SCL -> FC -> FC --+
                             +--> lower SCLs ------+                               +--> FC -> classifier
    all difference frames ---+                     +--> T-P -> TCL (3 | 5) -> FC -> FC --+

The lower SCL weights are shared by both streams. ``paths`` in the config
selects the appearance branch only (``"scl"``), the motion branch only
(``"tcl"``) or both.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .clips import ClipPair
from .tensor import Tape, Tensor

KINDS = ("conv2d", "relu", "lrn", "maxpool", "conv1d_tf", "fc", "softmax", "dropout",
         "tp_operator", "concat")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``features``/``kernel``/``stride`` follow the Conv(c_f, c_k, c_s)
    and Pooling(p_k, p_s) notation; ``padding=None`` means ``kernel // 2`` for
    convolutions and 0 for pooling."""

    kind: str
    features: int = 0
    kernel: int = 0
    stride: int = 1
    padding: Optional[int] = None
    prob: float = 0.5
    lrn_k: float = 2.0
    lrn_n: int = 5
    lrn_alpha: float = 5e-4
    lrn_beta: float = 0.75

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "conv1d_tf", "maxpool") and (self.kernel < 1 or self.stride < 1):
            raise ValueError(f"{self.kind} needs positive kernel and stride, got {self}")
        if self.kind in ("conv2d", "conv1d_tf", "fc") and self.features < 1:
            raise ValueError(f"{self.kind} needs a positive feature count, got {self}")

    @property
    def pad(self) -> int:
        if self.padding is not None:
            return self.padding
        return self.kernel // 2 if self.kind in ("conv2d", "conv1d_tf") else 0


def Conv(c_f: int, c_k: int, c_s: int = 1, padding: Optional[int] = None) -> LayerSpec:
    return LayerSpec("conv2d", features=c_f, kernel=c_k, stride=c_s, padding=padding)


def Pooling(p_k: int, p_s: int, padding: int = 0) -> LayerSpec:
    return LayerSpec("maxpool", kernel=p_k, stride=p_s, padding=padding)


def TemporalConv(c_f: int, c_k: int, c_s: int = 1, dropout: float = 0.5) -> LayerSpec:
    return LayerSpec("conv1d_tf", features=c_f, kernel=c_k, stride=c_s, prob=dropout)


RELU = LayerSpec("relu")
NORM = LayerSpec("lrn")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple = (204, 204)
    channels: int = 3
    l_t: int = 5
    lower_scl: tuple = (Conv(96, 7, 2), RELU, NORM, Pooling(3, 2),
                        Conv(256, 5, 2), RELU, NORM, Pooling(3, 2),
                        Conv(512, 3, 1), RELU, Conv(512, 3, 1), RELU)
    # brings the lower-SCL channels down to the T-P operator's f
    tp_scl: tuple = (Conv(128, 3, 1), RELU)
    parallel_scl: tuple = (Conv(128, 3, 1), RELU, Pooling(3, 3))
    permute_in: int = 128
    permute_out: int = 128
    tcl_branches: tuple = (TemporalConv(32, 3, 1), TemporalConv(32, 5, 1))
    tcl_fc: tuple = (4096, 2048)
    scl_fc: tuple = (4096, 2048)
    fusion_fc: int = 2048
    fc_dropout: float = 0.5
    num_classes: int = 101
    aux_classifier: bool = False
    paths: str = "both"
    init: str = "gaussian"
    init_std: float = 0.01

    def __post_init__(self):
        if self.paths not in ("both", "scl", "tcl"):
            raise ValueError(f"paths must be 'both', 'scl' or 'tcl', got {self.paths!r}")
        if len(self.tcl_branches) != 2:
            raise ValueError("the TCL has exactly two parallel branches")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.init not in ("gaussian", "he"):
            raise ValueError(f"unknown init scheme {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown NetworkConfig keys: {sorted(unknown)}")
        for key in ("lower_scl", "tp_scl", "parallel_scl", "tcl_branches"):
            if key in d:
                d[key] = tuple(s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in d[key])
        for key in ("input_size", "tcl_fc", "scl_fc"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def full_config(num_classes: int = 101, **overrides) -> NetworkConfig:
    """Layer sizes as published: 204x204 RGB input, P of 128x128, FC 4096/2048."""
    return replace(NetworkConfig(num_classes=num_classes), **overrides)


def desk_config(num_classes: int = 4, **overrides) -> NetworkConfig:
    """Same topology at 1/8 the width for 32x32 single-channel input.

    The second pooling has stride 1, so a 4x4 spatial grid reaches the T-P
    operator; a coarser grid blurs position too much to read motion direction.
    """
    cfg = NetworkConfig(
        input_size=(32, 32),
        channels=1,
        l_t=5,
        lower_scl=(Conv(12, 7, 2), RELU, NORM, Pooling(3, 2, 1),
                   Conv(32, 5, 2), RELU, NORM, Pooling(3, 1, 1),
                   Conv(64, 3, 1), RELU, Conv(64, 3, 1), RELU),
        tp_scl=(Conv(16, 3, 1), RELU),
        parallel_scl=(Conv(16, 3, 1), RELU, Pooling(3, 3, 1)),
        permute_in=16,
        permute_out=16,
        tcl_branches=(TemporalConv(4, 3, 1), TemporalConv(4, 5, 1)),
        tcl_fc=(256, 128),
        scl_fc=(256, 128),
        fusion_fc=256,
        fc_dropout=0.5,
        num_classes=num_classes,
        init="he",
    )
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------

def _stack_shapes(specs: Sequence[LayerSpec], shape: tuple, prefix: str, params: OrderedDict) -> tuple:
    """Walk a spatial stack from ``(x, y, c)``; record parameter shapes."""
    x, y, c = shape
    for i, s in enumerate(specs):
        if s.kind == "conv2d":
            params[f"{prefix}.{i}.w"] = (s.kernel, s.kernel, c, s.features)
            params[f"{prefix}.{i}.b"] = (s.features,)
            x = (x + 2 * s.pad - s.kernel) // s.stride + 1
            y = (y + 2 * s.pad - s.kernel) // s.stride + 1
            c = s.features
        elif s.kind == "maxpool":
            x = (x + 2 * s.pad - s.kernel) // s.stride + 1
            y = (y + 2 * s.pad - s.kernel) // s.stride + 1
        elif s.kind not in ("relu", "lrn", "dropout"):
            raise ValueError(f"layer kind {s.kind!r} not allowed in a spatial stack")
        if x < 1 or y < 1:
            raise ValueError(f"{prefix}.{i} ({s.kind}) shrinks the feature map to {x}x{y}")
    return x, y, c


def _fc_shapes(widths: Sequence[int], d_in: int, prefix: str, params: OrderedDict) -> int:
    for i, h in enumerate(widths):
        params[f"{prefix}.{i}.w"] = (d_in, h)
        params[f"{prefix}.{i}.b"] = (h,)
        d_in = h
    return d_in


def param_shapes(cfg: NetworkConfig) -> OrderedDict:
    """Parameter name -> shape, in checkpoint order, without allocating anything."""
    params: OrderedDict = OrderedDict()
    low = _stack_shapes(cfg.lower_scl, tuple(cfg.input_size) + (cfg.channels,), "lower", params)
    fused = 0
    if cfg.paths in ("both", "tcl"):
        x, y, f = _stack_shapes(cfg.tp_scl, low, "tp_scl", params)
        if f != cfg.permute_in:
            raise ValueError(f"T-P operator expects {cfg.permute_in} channels, SCL stack gives {f}")
        params["P"] = (cfg.permute_in, cfg.permute_out)
        for name, s in zip("ab", cfg.tcl_branches):
            params[f"tcl.{name}.w"] = (s.kernel, s.kernel, s.features)
            params[f"tcl.{name}.b"] = (s.features,)
        n_out = sum(s.features for s in cfg.tcl_branches)
        fused += _fc_shapes(cfg.tcl_fc, x * y * cfg.l_t * cfg.permute_out * n_out, "tcl_fc", params)
    if cfg.paths in ("both", "scl"):
        x, y, c = _stack_shapes(cfg.parallel_scl, low, "scl", params)
        fused += _fc_shapes(cfg.scl_fc, x * y * c, "scl_fc", params)
    _fc_shapes((cfg.fusion_fc,), fused, "fuse_fc", params)
    params["cls.w"] = (cfg.fusion_fc, cfg.num_classes)
    params["cls.b"] = (cfg.num_classes,)
    if cfg.aux_classifier:
        params["aux.w"] = (low[2], cfg.num_classes)
        params["aux.b"] = (cfg.num_classes,)
    return params


# ---------------------------------------------------------------------------
# ops specific to this architecture
# ---------------------------------------------------------------------------

def tp_operator(features, P) -> Tensor:
    """Vectorize each x-by-y map, put (t, f) last, and mix channels with ``P``.

    Args:
        features: ``([batch,] x, y, t, f)``.
        P: ``(f, f')``.

    Returns:
        ``([batch,] x*y, t, f')`` with ``out[..., j'] = sum_j in[..., j] * P[j, j']``.
    """
    features, P = T.as_tensor(features), T.as_tensor(P)
    if features.ndim not in (4, 5):
        raise ValueError(f"T-P operator expects ([B,] x, y, t, f) features, got {features.shape}")
    if P.ndim != 2 or P.shape[0] != features.shape[-1]:
        raise ValueError(f"P has shape {P.shape} but features carry {features.shape[-1]} channels")
    lead = features.shape[:-4]
    x, y, t, f = features.shape[-4:]
    vec = T.reshape(features, lead + (x * y, t, f))
    return T.matmul(vec, P)


class Scores(NamedTuple):
    scores: np.ndarray
    aux_scores: Optional[np.ndarray]


class Logits(NamedTuple):
    logits: Tensor
    aux_logits: Optional[Tensor]


class SaliencyMaps(NamedTuple):
    """Per-pixel gradient magnitude, max over channels, ``(l_x, l_y, l_t)`` each."""

    appearance: np.ndarray
    motion: np.ndarray


class Network:
    """Parameters for a :class:`NetworkConfig` plus the forward pass."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in param_shapes(config).items():
            self.params[name] = Tensor(self._init(name, shape, rng), requires_grad=True, dtype=dtype, name=name)

    def _init(self, name: str, shape: tuple, rng) -> np.ndarray:
        if name.endswith(".b"):
            return np.zeros(shape)
        if self.config.init == "gaussian" or name in ("cls.w", "aux.w"):
            # small classifier weights keep the initial loss near ln(num_classes)
            std = self.config.init_std
        elif name == "P":
            std = np.sqrt(1.0 / shape[0])
        else:
            std = np.sqrt(2.0 / int(np.prod(shape[:-1])))
        return rng.normal(0.0, std, size=shape)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> OrderedDict:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state(self, state: dict) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"state is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    # -- building blocks ---------------------------------------------------

    def as_input(self, x) -> Tensor:
        return T.as_tensor(x, self.dtype)

    def aux_head(self, pooled: Tensor) -> Tensor:
        """Auxiliary classifier on globally pooled lower-SCL features."""
        return T.fully_connected(pooled, self.params["aux.w"], self.params["aux.b"])

    def _apply_stack(self, x: Tensor, specs, prefix: str, training: bool, rng) -> Tensor:
        for i, s in enumerate(specs):
            if s.kind == "conv2d":
                x = T.conv2d(x, self.params[f"{prefix}.{i}.w"], self.params[f"{prefix}.{i}.b"],
                             stride=s.stride, padding=s.pad)
            elif s.kind == "relu":
                x = T.relu(x)
            elif s.kind == "lrn":
                x = T.lrn(x, s.lrn_k, s.lrn_n, s.lrn_alpha, s.lrn_beta)
            elif s.kind == "maxpool":
                x = T.maxpool2d(x, s.kernel, s.stride, s.pad)
            elif s.kind == "dropout":
                x = T.dropout(x, s.prob, training, rng)
        return x

    def _apply_fc(self, x: Tensor, prefix: str, count: int, training: bool, rng) -> Tensor:
        for i in range(count):
            x = T.fully_connected(x, self.params[f"{prefix}.{i}.w"], self.params[f"{prefix}.{i}.b"])
            x = T.dropout(T.relu(x), self.config.fc_dropout, training, rng)
        return x

    def _tcl(self, vectorized: Tensor, training: bool, rng) -> Tensor:
        outs = []
        for name, s in zip("ab", self.config.tcl_branches):
            h = T.conv1d_tf(vectorized, self.params[f"tcl.{name}.w"], self.params[f"tcl.{name}.b"],
                            stride=s.stride, padding="same")
            outs.append(T.dropout(T.relu(h), s.prob, training, rng))
        return T.concat(outs, axis=-1)

    # -- forward -------------------------------------------------------------

    def logits(self, clips, diffs, mode: str = "infer", rng: Optional[np.random.Generator] = None,
               frame_index=None) -> Logits:
        """Class logits for a batch.

        Args:
            clips, diffs: ``(batch, l_x, l_y, l_t, channels)`` arrays or tensors.
            mode: ``"train"`` (dropout on, random appearance frame; needs an
                active tape) or ``"infer"`` (middle appearance frame).
            rng: generator for dropout and frame choice in train mode.
            frame_index: override the appearance frame per sample.
        """
        cfg = self.config
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        training = mode == "train"
        if training:
            if T.active_tape() is None:
                raise RuntimeError("forward in train mode must run under an active Tape")
            if rng is None:
                raise ValueError("train mode needs an rng")
        clips, diffs = self.as_input(clips), self.as_input(diffs)
        if clips.ndim != 5 or clips.shape != diffs.shape:
            raise ValueError(f"clips {clips.shape} and diffs {diffs.shape} must share a (B, l_x, l_y, l_t, C) shape")
        bsz, lx, ly, lt, ch = clips.shape
        if (lx, ly) != tuple(cfg.input_size) or lt != cfg.l_t or ch != cfg.channels:
            raise ValueError(f"input {(lx, ly, lt, ch)} does not match config "
                             f"{tuple(cfg.input_size) + (cfg.l_t, cfg.channels)}")

        use_scl = cfg.paths in ("both", "scl")
        use_tcl = cfg.paths in ("both", "tcl")
        frames = []
        if use_scl:
            if frame_index is None:
                frame_index = rng.integers(0, lt, size=bsz) if training else np.full(bsz, lt // 2)
            by_time = T.transpose(clips, (0, 3, 1, 2, 4))
            frames.append(T.take_per_row(by_time, frame_index))
        if use_tcl:
            d = T.transpose(diffs, (0, 3, 1, 2, 4))
            frames.append(T.reshape(d, (bsz * lt, lx, ly, ch)))
        # the lower SCLs are shared, so both streams go through in one batch
        stacked = frames[0] if len(frames) == 1 else T.concat(frames, axis=0)
        low = self._apply_stack(stacked, cfg.lower_scl, "lower", training, rng)

        feats = []
        aux_source = None
        if use_tcl:
            low_d = T.take(low, np.arange(low.shape[0] - bsz * lt, low.shape[0]), axis=0) if use_scl else low
            h = self._apply_stack(low_d, cfg.tp_scl, "tp_scl", training, rng)
            _, x, y, f = h.shape
            h = T.transpose(T.reshape(h, (bsz, lt, x, y, f)), (0, 2, 3, 1, 4))
            h = self._tcl(tp_operator(h, self.params["P"]), training, rng)
            h = T.reshape(h, (bsz, -1))
            feats.append(self._apply_fc(h, "tcl_fc", len(cfg.tcl_fc), training, rng))
            if not use_scl:
                aux_source = T.mean(T.reshape(low_d, (bsz, lt) + low_d.shape[1:]), axis=(1, 2, 3))
        if use_scl:
            low_a = T.take(low, np.arange(bsz), axis=0) if use_tcl else low
            h = self._apply_stack(low_a, cfg.parallel_scl, "scl", training, rng)
            h = T.reshape(h, (bsz, -1))
            feats.insert(0, self._apply_fc(h, "scl_fc", len(cfg.scl_fc), training, rng))
            aux_source = T.mean(low_a, axis=(1, 2))

        joint = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
        joint = self._apply_fc(joint, "fuse_fc", 1, training, rng)
        logits = T.fully_connected(joint, self.params["cls.w"], self.params["cls.b"])
        aux = None
        if cfg.aux_classifier:
            aux = self.aux_head(aux_source)
        return Logits(logits, aux)

    def loss(self, clips, diffs, labels, mode: str = "train", rng=None,
             aux_weight: float = 0.3) -> Tensor:
        """Cross-entropy, plus ``aux_weight`` times the auxiliary head's cross-entropy."""
        out = self.logits(clips, diffs, mode, rng)
        loss = T.cross_entropy(out.logits, labels)
        if out.aux_logits is not None and aux_weight:
            loss = loss + aux_weight * T.cross_entropy(out.aux_logits, labels)
        return loss

    def predict_proba(self, clips, diffs, batch_size: int = 256) -> np.ndarray:
        """Inference-mode class probabilities, evaluated in chunks."""
        clips, diffs = np.asarray(clips), np.asarray(diffs)
        out = []
        for i in range(0, len(clips), batch_size):
            lg = self.logits(clips[i:i + batch_size], diffs[i:i + batch_size], "infer").logits
            out.append(T.softmax(lg).data)
        return np.concatenate(out, axis=0)


def stack_pairs(pairs: Sequence[ClipPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(clips, diffs, labels)`` from a list of pairs."""
    clips = np.stack([p.clip for p in pairs])
    diffs = np.stack([p.diff_clip for p in pairs])
    labels = np.array([-1 if p.label is None else p.label for p in pairs], dtype=np.intp)
    return clips, diffs, labels


def forward(net: Network, pair: ClipPair, mode: str = "infer", seed=None) -> Scores:
    """Class probabilities (and auxiliary probabilities) for one clip pair."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = net.logits(pair.clip[None], pair.diff_clip[None], mode, rng)
    aux = T.softmax(out.aux_logits).data[0] if out.aux_logits is not None else None
    return Scores(T.softmax(out.logits).data[0], aux)


def input_saliency(score_fn, inputs: Sequence[np.ndarray], class_index: int) -> list[np.ndarray]:
    """``|d score_fn(*inputs)[0, class_index] / d input|`` for each input."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        scores = score_fn(*leaves)
        if not 0 <= class_index < scores.shape[-1]:
            raise ValueError(f"class_index {class_index} out of range for {scores.shape[-1]} classes")
        target = T.take(T.reshape(scores, (-1,)), [class_index])
        target = T.sum(target)
    return [np.abs(g) for g in tape.gradient(target, leaves)]


def saliency(net: Network, pair: ClipPair, class_index: int) -> SaliencyMaps:
    """Gradient magnitude of a class logit with respect to the input pixels.

    Uses the pre-softmax logit of ``class_index`` in inference mode, and
    reduces over channels with a max.
    """
    n = net.config.num_classes
    if not 0 <= class_index < n:
        raise ValueError(f"class_index {class_index} out of range for {n} classes")

    def score(clip, diff):
        return net.logits(clip, diff, "infer").logits

    g_clip, g_diff = input_saliency(score, [pair.clip[None], pair.diff_clip[None]], class_index)
    return SaliencyMaps(g_clip[0].max(axis=-1), g_diff[0].max(axis=-1))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FSTCNCKP"
CKPT_VERSION = 1


def save_checkpoint(net: Network, path, extra: Optional[dict] = None) -> None:
    """Magic, version, JSON config, then ``(name, shape, float64 LE data)`` per parameter."""
    header = json.dumps({"config": net.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(net.params)))
        for name, p in net.params.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[Network, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    state = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=int))
        state[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
    cfg = NetworkConfig.from_dict(header["config"])
    net = Network(cfg, dtype=dtype)
    net.load_state(state)
    return net, header.get("extra", {})
