"""Network configuration, T-P operator, forward modes, saliency and checkpoints."""

import numpy as np
import pytest

from fstcn import tensor as T
from fstcn.clips import ClipSpec, VideoSequence, sample_clip_pair
from fstcn.network import (
    Conv,
    Network,
    NetworkConfig,
    Pooling,
    TemporalConv,
    desk_config,
    forward,
    load_checkpoint,
    full_config,
    param_shapes,
    saliency,
    save_checkpoint,
    stack_pairs,
    tp_operator,
)
from fstcn.tensor import Tape, Tensor, check_gradients

from _gradcases import network_gradient_errors
from _helpers import tiny_config


def _batch(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    shape = (n,) + tuple(cfg.input_size) + (cfg.l_t, cfg.channels)
    return rng.standard_normal(shape), np.abs(rng.standard_normal(shape)), rng.integers(0, cfg.num_classes, n)


class TestConfigs:
    def test_full_size_shapes(self):
        shapes = param_shapes(full_config(101))
        assert shapes["lower.0.w"] == (7, 7, 3, 96)
        assert shapes["lower.4.w"] == (5, 5, 96, 256)
        assert shapes["lower.8.w"] == (3, 3, 256, 512)
        assert shapes["lower.10.w"] == (3, 3, 512, 512)
        assert shapes["P"] == (128, 128)
        assert shapes["tcl.a.w"][::2] == (3, 32) and shapes["tcl.b.w"][::2] == (5, 32)
        assert shapes["tcl_fc.0.w"][1] == 4096 and shapes["tcl_fc.1.w"] == (4096, 2048)
        assert shapes["scl_fc.1.w"] == (4096, 2048)
        assert shapes["cls.w"] == (2048, 101)

    def test_full_size_layer_hyperparameters(self):
        cfg = full_config()
        convs = [s for s in cfg.lower_scl if s.kind == "conv2d"]
        assert [(s.features, s.kernel, s.stride) for s in convs] == [(96, 7, 2), (256, 5, 2), (512, 3, 1), (512, 3, 1)]
        norms = [s for s in cfg.lower_scl if s.kind == "lrn"]
        assert len(norms) == 2
        assert all((s.lrn_k, s.lrn_n, s.lrn_alpha, s.lrn_beta) == (2.0, 5, 5e-4, 0.75) for s in norms)
        assert all(b.prob == 0.5 for b in cfg.tcl_branches)

    def test_desk_network_builds(self):
        net = Network(desk_config(4))
        assert set(net.params) == set(param_shapes(desk_config(4)))
        assert net.num_parameters == sum(int(np.prod(s)) for s in param_shapes(desk_config(4)).values())

    @pytest.mark.parametrize("paths,absent,present", [
        ("scl", "P", "scl_fc.0.w"), ("tcl", "scl_fc.0.w", "P"), ("both", None, "P"),
    ])
    def test_paths_select_parameters(self, paths, absent, present):
        shapes = param_shapes(desk_config(4, paths=paths))
        assert present in shapes
        if absent:
            assert absent not in shapes

    def test_round_trip_dict(self):
        cfg = tiny_config()
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="bogus"):
            NetworkConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("kw", [{"paths": "both_ways"}, {"num_classes": 0}, {"init": "xavier"},
                                    {"tcl_branches": (TemporalConv(2, 3),)}])
    def test_invalid_values(self, kw):
        with pytest.raises(ValueError):
            tiny_config(**kw)

    def test_channel_mismatch_at_tp(self):
        with pytest.raises(ValueError, match="T-P"):
            param_shapes(tiny_config(permute_in=5))

    def test_feature_map_collapse(self):
        with pytest.raises(ValueError, match="shrinks"):
            param_shapes(tiny_config(lower_scl=(Conv(3, 3, 4), Pooling(3, 3))))


class TestTPOperator:
    def test_matches_loops(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((2, 3, 4, 5, 6))  # (B, x, y, t, f)
        P = rng.standard_normal((6, 7))
        out = tp_operator(feats, P).data
        assert out.shape == (2, 12, 5, 7)
        for b in range(2):
            for i in range(3):
                for j in range(4):
                    np.testing.assert_allclose(out[b, i * 4 + j], feats[b, i, j] @ P, atol=1e-12)

    def test_identity_P_is_pure_rearrangement(self):
        feats = np.arange(2 * 2 * 3 * 4, dtype=float).reshape(2, 2, 3, 4)
        out = tp_operator(feats, np.eye(4)).data
        np.testing.assert_array_equal(out, feats.reshape(4, 3, 4))

    def test_permutation_P_permutes_channels(self):
        feats = np.random.default_rng(1).standard_normal((2, 2, 3, 4))
        perm = np.array([2, 0, 3, 1])
        P = np.eye(4)[:, perm]
        np.testing.assert_array_equal(tp_operator(feats, P).data, feats.reshape(4, 3, 4)[..., perm])

    def test_gradients(self):
        worst = 0.0
        for i in range(20):
            rng = np.random.default_rng(i)
            f = Tensor(rng.standard_normal((2, 2, 3, 3, 4)), requires_grad=True)
            P = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
            r = rng.standard_normal((2, 6, 3, 5))
            errs = check_gradients(lambda: T.sum(T.mul(tp_operator(f, P), r)), [f, P])
            worst = max(worst, *errs.values())
        assert worst <= 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            tp_operator(np.zeros((2, 2, 3, 4)), np.zeros((5, 5)))


class TestForward:
    @pytest.mark.parametrize("paths", ["both", "scl", "tcl"])
    def test_logit_shapes(self, paths):
        cfg = tiny_config(paths=paths)
        net = Network(cfg, seed=0)
        clips, diffs, _ = _batch(cfg, n=3)
        out = net.logits(clips, diffs)
        assert out.logits.shape == (3, 3)
        assert out.aux_logits.shape == (3, 3)

    def test_inference_is_deterministic(self):
        cfg = tiny_config()
        net = Network(cfg, seed=0)
        clips, diffs, _ = _batch(cfg)
        a = net.predict_proba(clips, diffs)
        b = net.predict_proba(clips, diffs)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)

    def test_chunked_prediction_matches_single_batch(self):
        cfg = tiny_config()
        net = Network(cfg, seed=0)
        clips, diffs, _ = _batch(cfg, n=7)
        np.testing.assert_allclose(net.predict_proba(clips, diffs, batch_size=3),
                                   net.predict_proba(clips, diffs, batch_size=100), atol=1e-14)

    def test_train_mode_needs_tape_and_rng(self):
        cfg = tiny_config()
        net = Network(cfg)
        clips, diffs, _ = _batch(cfg)
        with pytest.raises(RuntimeError, match="Tape"):
            net.logits(clips, diffs, "train", np.random.default_rng(0))
        with Tape(), pytest.raises(ValueError, match="rng"):
            net.logits(clips, diffs, "train")

    def test_bad_mode(self):
        cfg = tiny_config()
        with pytest.raises(ValueError):
            Network(cfg).logits(*_batch(cfg)[:2], mode="eval")

    def test_input_shape_checked(self):
        net = Network(tiny_config())
        with pytest.raises(ValueError, match="does not match"):
            net.logits(np.zeros((1, 8, 8, 4, 2)), np.zeros((1, 8, 8, 4, 2)))

    def test_infer_uses_middle_appearance_frame(self):
        cfg = tiny_config(paths="scl")
        net = Network(cfg, seed=3)
        clips, diffs, _ = _batch(cfg)
        default = net.logits(clips, diffs).logits.data
        chosen = net.logits(clips, diffs, frame_index=np.array([1, 1])).logits.data
        other = net.logits(clips, diffs, frame_index=np.array([0, 0])).logits.data
        np.testing.assert_array_equal(default, chosen)
        assert not np.allclose(default, other)

    def test_scl_path_ignores_other_frames(self):
        cfg = tiny_config(paths="scl")
        net = Network(cfg, seed=3)
        clips, diffs, _ = _batch(cfg)
        edited = clips.copy()
        edited[:, :, :, [0, 2]] = 0.0
        np.testing.assert_array_equal(net.logits(clips, diffs).logits.data,
                                      net.logits(edited, np.zeros_like(diffs)).logits.data)

    def test_tcl_path_ignores_appearance(self):
        cfg = tiny_config(paths="tcl")
        net = Network(cfg, seed=3)
        clips, diffs, _ = _batch(cfg)
        np.testing.assert_array_equal(net.logits(clips, diffs).logits.data,
                                      net.logits(np.zeros_like(clips), diffs).logits.data)

    def test_initial_loss_near_chance(self):
        cfg = desk_config(4)
        net = Network(cfg, seed=0)
        clips, diffs, labels = _batch(cfg, n=16)
        loss = net.loss(clips, diffs, labels, mode="infer")
        assert abs(loss.item() - np.log(4)) < 0.05

    def test_single_pair_forward(self):
        cfg = tiny_config()
        seq = VideoSequence(np.random.default_rng(0).standard_normal((10, 10, 8, 2)), label=1)
        pair = sample_clip_pair(seq, ClipSpec(8, 8, 3, 2, 1), seed=0)
        scores = forward(Network(cfg), pair)
        assert scores.scores.shape == (3,) and scores.aux_scores.shape == (3,)
        assert abs(scores.scores.sum() - 1.0) < 1e-12

    def test_stack_pairs(self):
        seq = VideoSequence(np.zeros((10, 10, 8, 2)), label=2)
        pairs = [sample_clip_pair(seq, ClipSpec(8, 8, 3, 2, 1), seed=s) for s in range(3)]
        clips, diffs, labels = stack_pairs(pairs)
        assert clips.shape == diffs.shape == (3, 8, 8, 3, 2)
        assert labels.tolist() == [2, 2, 2]


class TestEndToEndGradients:
    """Whole-network finite differences, dropout and aux head included."""

    @pytest.mark.parametrize("paths", ["both", "scl", "tcl"])
    def test_network_gradcheck(self, paths):
        worst = network_gradient_errors(paths)
        assert "P" in worst or paths == "scl"
        bad = {k: v for k, v in worst.items() if v > 1e-4}
        assert not bad, f"relative errors above 1e-4: {bad}"


class TestSaliency:
    def _setup(self):
        cfg = tiny_config(aux_classifier=False)
        net = Network(cfg, seed=1)
        seq = VideoSequence(np.random.default_rng(2).standard_normal((8, 8, 6, 2)), label=0)
        return net, sample_clip_pair(seq, ClipSpec(8, 8, 3, 2, 1), start=0, crop_origin=(0, 0))

    def test_shapes_and_sign(self):
        net, pair = self._setup()
        maps = saliency(net, pair, 2)
        assert maps.appearance.shape == maps.motion.shape == (8, 8, 3)
        assert np.all(maps.appearance >= 0) and np.all(maps.motion >= 0)
        # only the middle appearance frame reaches the output in inference mode
        assert not maps.appearance[:, :, [0, 2]].any()
        assert maps.appearance[:, :, 1].any() and maps.motion.any()

    def test_matches_finite_differences(self):
        net, pair = self._setup()
        maps = saliency(net, pair, 1)
        h = 1e-6

        def logit(clip, diff):
            return net.logits(clip[None], diff[None]).logits.data[0, 1]

        for site in [(3, 4, 1, 0), (0, 7, 1, 1), (5, 2, 0, 1), (6, 6, 2, 0)]:
            for slot, grad_map in ((0, maps.appearance), (1, maps.motion)):
                plus = [pair.clip.copy(), pair.diff_clip.copy()]
                minus = [pair.clip.copy(), pair.diff_clip.copy()]
                plus[slot][site] += h
                minus[slot][site] -= h
                fd = abs(logit(*plus) - logit(*minus)) / (2 * h)
                # the map is a max over channels, so it bounds each channel's entry
                assert grad_map[site[:3]] >= fd - 1e-6

    def test_class_out_of_range(self):
        net, pair = self._setup()
        with pytest.raises(ValueError):
            saliency(net, pair, 3)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        cfg = tiny_config()
        net = Network(cfg, seed=4)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path, {"epoch": 3})
        loaded, extra = load_checkpoint(path)
        assert extra == {"epoch": 3}
        assert loaded.config == cfg
        for name, p in net.params.items():
            assert np.array_equal(p.data, loaded[name].data)
        clips, diffs, _ = _batch(cfg)
        assert np.array_equal(net.predict_proba(clips, diffs), loaded.predict_proba(clips, diffs))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_load_state_checks_shapes(self):
        net = Network(tiny_config())
        state = net.state()
        state["P"] = np.zeros((3, 3))
        with pytest.raises(ValueError, match="P"):
            net.load_state(state)
        del state["P"]
        with pytest.raises(KeyError):
            net.load_state(state)
