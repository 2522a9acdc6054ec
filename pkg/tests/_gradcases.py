"""Finite-difference gradient cases shared by the op and acceptance tests."""

import numpy as np

from fstcn import tensor as T
from fstcn.network import Network
from fstcn.tensor import Tensor, check_gradients

from _helpers import tiny_config

GRAD_TOL = 1e-4
INSTANCES = 20


def _weighted_sum(out, seed=1234):
    """Scalar ``sum(out * R)`` with a fixed random R, so every output entry
    contributes a distinct upstream gradient."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(T.mul(out, r))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape, spacing=0.05):
    """Values with pairwise gaps >> h, so max/argmax never flip under perturbation."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing + rng.uniform(0, 0.01)).reshape(shape)


# builders: rng -> (fn over leaves, list of leaf arrays)
def _case_add(rng):
    return T.add, [rng.standard_normal((3, 4)), rng.standard_normal((4,))]


def _case_sub(rng):
    return T.sub, [rng.standard_normal((2, 3)), rng.standard_normal((2, 1))]


def _case_mul(rng):
    return T.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]


def _case_exp(rng):
    return T.exp, [rng.standard_normal((5,))]


def _case_log(rng):
    return T.log, [rng.uniform(0.5, 2.0, (4, 2))]


def _case_matmul(rng):
    return T.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]


def _case_sum_axis(rng):
    return (lambda x: T.sum(x, axis=1)), [rng.standard_normal((3, 4, 2))]


def _case_mean_axes(rng):
    return (lambda x: T.mean(x, axis=(0, 2))), [rng.standard_normal((3, 4, 2))]


def _case_reshape(rng):
    return (lambda x: T.reshape(x, (6, -1))), [rng.standard_normal((3, 4, 2))]


def _case_transpose(rng):
    return (lambda x: T.transpose(x, (2, 0, 1))), [rng.standard_normal((3, 4, 2))]


def _case_concat(rng):
    return (lambda a, b: T.concat([a, b], axis=1)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]


def _case_take(rng):
    idx = rng.integers(0, 5, size=7)  # repeats exercise accumulation
    return (lambda x: T.take(x, idx, axis=0)), [rng.standard_normal((5, 3))]


def _case_take_per_row(rng):
    idx = rng.integers(0, 4, size=3)
    return (lambda x: T.take_per_row(x, idx)), [rng.standard_normal((3, 4, 2))]


def _case_relu(rng):
    return T.relu, [_away_from_zero(rng, (4, 5))]


def _case_softmax(rng):
    return T.softmax, [rng.standard_normal((3, 5))]


def _case_log_softmax(rng):
    return T.log_softmax, [rng.standard_normal((3, 5))]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 5, size=4)
    return (lambda z: T.cross_entropy(z, labels)), [rng.standard_normal((4, 5))]


def _case_dropout(rng):
    seed = int(rng.integers(1 << 30))
    return (lambda x: T.dropout(x, 0.5, True, np.random.default_rng(seed))), [rng.standard_normal((4, 6))]


def _case_lrn(rng):
    # large activations so the normalizer is far from its k floor
    return T.lrn, [3.0 * rng.standard_normal((2, 3, 7))]


def _case_lrn_strong(rng):
    return (lambda x: T.lrn(x, k=1.0, n=3, alpha=0.1, beta=0.75)), [rng.standard_normal((2, 6))]


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=pad)), [
        rng.standard_normal((2, 6, 5, 2)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)]


def _case_conv2d_same(rng):
    return (lambda x, w: T.conv2d(x, w, padding="same")), [
        rng.standard_normal((1, 5, 5, 1)), rng.standard_normal((4, 2, 1, 2))]


def _case_conv1d_tf(rng):
    return (lambda x, w, b: T.conv1d_tf(x, w, b)), [
        rng.standard_normal((2, 3, 5, 4)), rng.standard_normal((3, 3, 2)), rng.standard_normal(2)]


def _case_maxpool(rng):
    stride = int(rng.integers(1, 3))
    return (lambda x: T.maxpool2d(x, 3, stride, 1)), [_distinct(rng, (2, 5, 6, 2))]


def _case_fully_connected(rng):
    return T.fully_connected, [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)]


CASES = {name[len("_case_"):]: fn for name, fn in dict(globals()).items() if name.startswith("_case_")}


def worst_op_error(case: str, instances: int = INSTANCES) -> float:
    """Largest relative gradient error of one op over seeded random instances."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng(1000 * i + 7)
        fn, arrays = CASES[case](rng)
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        errors = check_gradients(lambda: _weighted_sum(fn(*leaves)), leaves)
        worst = max(worst, *errors.values())
    return worst


def network_gradient_errors(paths: str, instances: int = INSTANCES) -> dict:
    """Worst relative error per parameter of the tiny network's training loss."""
    worst = {}
    for instance in range(instances):
        cfg = tiny_config(paths=paths)
        net = Network(cfg, seed=instance)
        rng = np.random.default_rng(100 + instance)
        # scale the classifier up so its gradient is not swamped by rounding
        for name in ("cls.w", "aux.w"):
            net[name].data = rng.normal(0.0, 0.7, net[name].shape)
        for p in net.parameters():
            if p.name.endswith(".b"):
                p.data = 0.1 * rng.standard_normal(p.shape)
        data = np.random.default_rng(instance)
        shape = (2,) + tuple(cfg.input_size) + (cfg.l_t, cfg.channels)
        clips, diffs = data.standard_normal(shape), np.abs(data.standard_normal(shape))
        labels = data.integers(0, cfg.num_classes, 2)

        def loss():
            return net.loss(clips, diffs, labels, "train", np.random.default_rng(7))

        errs = check_gradients(loss, net.parameters(), max_entries=6, rng=rng)
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
