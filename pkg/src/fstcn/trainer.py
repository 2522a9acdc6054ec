"""SGD with momentum and weight decay, and the supervised training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .clips import ClipSpec, VideoSequence, random_clip_pair, sample_clip_pair, evenly_spaced_starts
from .network import Network, save_checkpoint, stack_pairs
from .tensor import Tape, cross_entropy, mean
from .video_io import ActionDataset

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr: float = 0.01
    lr_decay: float = 0.1
    lr_decay_at: float = 2 / 3   # fraction of epochs after which lr is multiplied by lr_decay
    epochs: int = 30
    seed: int = 0
    aux_loss_weight: float = 0.3
    pairs_per_sequence: int = 4  # training pairs drawn from each sequence per epoch
    flip: bool = True
    checkpoint_every: int = 0    # 0 disables periodic checkpoints
    trainable: Optional[tuple] = None  # parameter-name prefixes; None trains everything

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: ``lr`` before ``floor(lr_decay_at * epochs)``, then ``lr * lr_decay``."""
        boundary = int(math.floor(self.lr_decay_at * self.epochs))
        return self.lr * (self.lr_decay if epoch >= boundary else 1.0)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
             weight_decay: float) -> None:
    """In place: ``v <- m*v - lr*(g + wd*w)``, ``w <- w + v``.

    ``params`` maps names to Tensors, ``grads`` and ``velocity`` map names to
    arrays. Parameters absent from ``grads`` are left untouched. All gradients
    are checked before any parameter moves.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        w = params[name]
        v = velocity.get(name)
        step = -lr * (g + weight_decay * w.data)
        v = step if v is None else momentum * v + step
        velocity[name] = v
        w.data = w.data + v


class SGD:
    """Momentum SGD over a network's parameters, optionally restricted by name prefix."""

    def __init__(self, net: Network, momentum: float = 0.9, weight_decay: float = 0.0005,
                 trainable: Optional[Sequence[str]] = None):
        self.net = net
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.trainable = tuple(trainable) if trainable else None
        self.velocity: dict[str, np.ndarray] = {}

    def is_trainable(self, name: str) -> bool:
        return self.trainable is None or name.startswith(self.trainable)

    def step(self, lr: float) -> None:
        grads = {}
        for name, p in self.net.params.items():
            if not self.is_trainable(name):
                continue
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        sgd_step(self.net.params, grads, self.velocity, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.net.params.values():
            p.grad = None


def _batch_loss(net: Network, pairs, rng, aux_weight: float):
    clips, diffs, labels = stack_pairs(pairs)
    with Tape() as tape:
        out = net.logits(clips, diffs, "train", rng)
        loss = cross_entropy(out.logits, labels)
        if out.aux_logits is not None and aux_weight:
            loss = loss + aux_weight * cross_entropy(out.aux_logits, labels)
    correct = int(np.sum(out.logits.data.argmax(axis=1) == labels))
    return tape, loss, correct


def train_step(net: Network, opt: SGD, pairs, lr: float, rng, aux_weight: float = 0.3) -> tuple[float, int]:
    """One forward/backward/update on a list of pairs. Returns (loss, #correct)."""
    tape, loss, correct = _batch_loss(net, pairs, rng, aux_weight)
    opt.zero_grad()
    tape.backward(loss)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    opt.step(lr)
    return value, correct


def quick_eval(net: Network, sequences: Sequence[VideoSequence], spec: ClipSpec,
               batch_size: int = 128) -> tuple[float, float]:
    """Loss and accuracy from one centered clip per sequence (no fusion)."""
    if not sequences:
        return float("nan"), float("nan")
    pairs = []
    for seq in sequences:
        m_x, m_y, m_t = seq.shape[:3]
        start = evenly_spaced_starts(m_t, spec, 1)[0]
        origin = ((m_x - spec.l_x) // 2, (m_y - spec.l_y) // 2)
        pairs.append(sample_clip_pair(seq, spec, start, origin))
    clips, diffs, labels = stack_pairs(pairs)
    probs = net.predict_proba(clips, diffs, batch_size)
    loss = float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))
    return loss, float(np.mean(probs.argmax(axis=1) == labels))


class MetricsLog:
    """Newline-delimited JSON records ``{"epoch", "split", "loss", "accuracy"}``."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def append(self, epoch: int, split: str, loss: float, accuracy: float, **extra) -> None:
        rec = {"epoch": epoch, "split": split, "loss": loss, "accuracy": accuracy, **extra}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def lines(self) -> list[str]:
        return [json.dumps(r) for r in self.records]


def train(net: Network, dataset: ActionDataset, cfg: TrainConfig, spec: ClipSpec,
          log_path=None, checkpoint_dir=None) -> tuple[Network, MetricsLog]:
    """Train on ``dataset.train`` with randomly sampled, cropped, flipped clip pairs.

    After every epoch the mean training loss/accuracy and a quick test
    evaluation are appended to the metrics log. On a non-finite loss the
    last good parameters are restored, written to ``checkpoint_dir`` (when
    given) and :class:`TrainingDiverged` is raised.
    """
    if not dataset.train:
        raise ValueError("training set is empty")
    log = MetricsLog(log_path)
    root = np.random.SeedSequence(cfg.seed)
    order_seed, sample_seed, drop_seed = root.spawn(3)
    order_rng = np.random.default_rng(order_seed)
    sample_rng = np.random.default_rng(sample_seed)
    drop_rng = np.random.default_rng(drop_seed)
    opt = SGD(net, cfg.momentum, cfg.weight_decay, cfg.trainable)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None

    if dataset.num_classes == 1:
        log.append(0, "train", 0.0, 1.0)
        return net, log

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.repeat(np.arange(len(dataset.train)), cfg.pairs_per_sequence)
        order_rng.shuffle(order)
        total_loss, total_correct, seen = 0.0, 0, 0
        good = net.state()
        for i in range(0, len(order), cfg.batch_size):
            pairs = [random_clip_pair(dataset.train[j], spec, sample_rng, cfg.flip) for j in order[i:i + cfg.batch_size]]
            try:
                loss, correct = train_step(net, opt, pairs, lr, drop_rng, cfg.aux_loss_weight)
            except (TrainingDiverged, FloatingPointError) as exc:
                net.load_state(good)
                if ckpt_dir:
                    ckpt_dir.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(net, ckpt_dir / "last_good.ckpt", {"epoch": epoch})
                if isinstance(exc, TrainingDiverged):
                    raise
                raise TrainingDiverged(f"epoch {epoch + 1}: {exc}") from exc
            total_loss += loss * len(pairs)
            total_correct += correct
            seen += len(pairs)
        log.append(epoch + 1, "train", total_loss / seen, total_correct / seen, lr=lr)
        test_loss, test_acc = quick_eval(net, dataset.test, spec)
        log.append(epoch + 1, "test", test_loss, test_acc)
        logger.info("epoch %d lr %.4g train loss %.4f acc %.3f | test loss %.4f acc %.3f",
                    epoch + 1, lr, total_loss / seen, total_correct / seen, test_loss, test_acc)
        if ckpt_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, ckpt_dir / f"epoch{epoch + 1:03d}.ckpt", {"epoch": epoch + 1})
    return net, log


def pretrain_auxiliary(net: Network, dataset: ActionDataset, cfg: TrainConfig, spec: ClipSpec,
                       epochs: int = 5, trainable: Optional[Sequence[str]] = ("lower", "aux")) -> list[float]:
    """Train the lower SCLs and the auxiliary head on single random frames.

    This is the image-level stage that precedes global training. A narrower
    ``trainable`` prefix list, e.g. ``("lower.10", "aux")``, updates only
    those layers.
    """
    if not net.config.aux_classifier:
        raise ValueError("pre-training needs a network built with aux_classifier=True")

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
    opt = SGD(net, cfg.momentum, cfg.weight_decay, trainable)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset.train))
        for i in range(0, len(order), cfg.batch_size):
            pairs = [random_clip_pair(dataset.train[j], spec, rng, cfg.flip) for j in order[i:i + cfg.batch_size]]
            clips, _, labels = stack_pairs(pairs)
            frame = rng.integers(0, clips.shape[3], size=len(pairs))
            frames = clips[np.arange(len(pairs)), :, :, frame]
            with Tape() as tape:
                low = net._apply_stack(net.as_input(frames), net.config.lower_scl, "lower", True, rng)
                logits = net.aux_head(mean(low, axis=(1, 2)))
                loss = cross_entropy(logits, labels)
            opt.zero_grad()
            tape.backward(loss)
            opt.step(cfg.lr_at(epoch))
            losses.append(loss.item())
    return losses
