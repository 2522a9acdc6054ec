"""Frame differencing, clip-pair sampling and test-time crops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fstcn.clips import (
    ClipSpec,
    CropSet,
    VideoSequence,
    evenly_spaced_starts,
    frame_diff,
    random_clip_pair,
    sample_clip_pair,
    sample_training_batch,
)


@pytest.fixture
def seq():
    rng = np.random.default_rng(0)
    return VideoSequence(rng.standard_normal((12, 10, 30, 2)), label=3, name="toy")


def _ramp(m_x=6, m_y=5, m_t=30):
    """Pixel value encodes (x, y, t) so any index mix-up shows."""
    x, y, t = np.meshgrid(np.arange(m_x), np.arange(m_y), np.arange(m_t), indexing="ij")
    return VideoSequence((1000 * t + 10 * x + y)[..., None].astype(float))


class TestFrameDiff:
    def test_constant_sequence(self):
        d = frame_diff(VideoSequence(np.full((3, 3, 6), 2.5)), 2)
        assert d.num_frames == 4 and not d.frames.any()

    def test_hand_example(self):
        s = VideoSequence(np.array([3.0, 5.0, 9.0]).reshape(1, 1, 3))
        assert frame_diff(s, 1).frames.ravel().tolist() == [2.0, 4.0]

    def test_sign_flip_invariance(self, seq):
        neg = VideoSequence(-seq.frames)
        np.testing.assert_array_equal(frame_diff(seq, 3).frames, frame_diff(neg, 3).frames)

    def test_non_negative(self, seq):
        assert np.all(frame_diff(seq, 4).frames >= 0)

    @pytest.mark.parametrize("d_t", [30, 31])
    def test_distance_too_large(self, seq, d_t):
        with pytest.raises(ValueError):
            frame_diff(seq, d_t)

    def test_distance_must_be_positive(self, seq):
        with pytest.raises(ValueError):
            frame_diff(seq, 0)

    def test_keeps_label(self, seq):
        assert frame_diff(seq, 1).label == 3


class TestClipSpec:
    def test_span_and_min_frames(self):
        spec = ClipSpec(8, 8, l_t=5, s_t=5, d_t=9)
        assert spec.span == 20
        assert spec.min_frames == 30
        assert spec.indices(0).tolist() == [0, 5, 10, 15, 20]

    @pytest.mark.parametrize("field", ["l_x", "l_y", "l_t", "s_t", "d_t", "clips_per_sequence"])
    def test_positive_fields(self, field):
        kw = dict(l_x=4, l_y=4)
        kw[field] = 0
        with pytest.raises(ValueError):
            ClipSpec(**kw)

    def test_short_sequence_message_names_requirement(self):
        with pytest.raises(ValueError, match="at least 30"):
            ClipSpec(4, 4, 5, 5, 9).validate((8, 8, 29))


class TestSampleClipPair:
    def test_index_set_and_span(self):
        pair = sample_clip_pair(_ramp(), ClipSpec(6, 5, l_t=5, s_t=5, d_t=9), start=0, crop_origin=(0, 0))
        assert pair.record.indices == (0, 5, 10, 15, 20)
        assert pair.record.indices[-1] - pair.record.indices[0] == 20
        # frame t carries 1000 * t
        assert (pair.clip[0, 0, :, 0] // 1000).tolist() == [0, 5, 10, 15, 20]

    def test_diff_uses_same_indices(self):
        s = _ramp()
        spec = ClipSpec(4, 3, l_t=5, s_t=5, d_t=9)
        pair = sample_clip_pair(s, spec, start=0, crop_origin=(1, 2))
        full = frame_diff(s, 9).frames
        idx = list(pair.record.indices)
        np.testing.assert_array_equal(pair.diff_clip, full[1:5, 2:5][:, :, idx])
        np.testing.assert_array_equal(pair.clip, s.frames[1:5, 2:5][:, :, idx])

    def test_single_frame_clip(self, seq):
        pair = sample_clip_pair(seq, ClipSpec(4, 4, l_t=1, s_t=3, d_t=1), start=7, crop_origin=(0, 0))
        assert pair.clip.shape == (4, 4, 1, 2)
        assert pair.record.indices == (7,)

    def test_seeded_draws_repeat(self, seq):
        spec = ClipSpec(5, 5, 3, 2, 2)
        a = sample_clip_pair(seq, spec, seed=11)
        b = sample_clip_pair(seq, spec, seed=11)
        assert a.record == b.record
        np.testing.assert_array_equal(a.clip, b.clip)
        np.testing.assert_array_equal(a.diff_clip, b.diff_clip)

    def test_start_out_of_range_names_bound(self, seq):
        spec = ClipSpec(4, 4, 5, 5, 3)  # min_frames 24, max start 6
        with pytest.raises(ValueError, match=r"\[0, 6\]"):
            sample_clip_pair(seq, spec, start=7, crop_origin=(0, 0))

    def test_crop_out_of_range_names_bound(self, seq):
        with pytest.raises(ValueError, match=r"\[0, 8\]"):
            sample_clip_pair(seq, ClipSpec(4, 4, 2, 1, 1), start=0, crop_origin=(9, 0))

    def test_crop_larger_than_frame(self, seq):
        with pytest.raises(ValueError):
            sample_clip_pair(seq, ClipSpec(13, 4, 2, 1, 1), start=0, crop_origin=(0, 0))

    def test_flip_mirrors_both(self, seq):
        spec = ClipSpec(6, 6, 3, 2, 2)
        plain = sample_clip_pair(seq, spec, start=2, crop_origin=(1, 1))
        mirrored = sample_clip_pair(seq, spec, start=2, crop_origin=(1, 1), flip=True)
        np.testing.assert_array_equal(mirrored.clip, plain.clip[::-1])
        np.testing.assert_array_equal(mirrored.diff_clip, plain.diff_clip[::-1])
        assert mirrored.record.flip

    def test_flip_is_an_involution(self, seq):
        pair = sample_clip_pair(seq, ClipSpec(6, 6, 3, 2, 2), seed=0)
        twice = pair.flipped().flipped()
        np.testing.assert_array_equal(twice.clip, pair.clip)
        np.testing.assert_array_equal(twice.diff_clip, pair.diff_clip)
        assert twice.record == pair.record

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 10), st.integers(2, 25), st.integers(1, 6),
           st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_fuzz_indices_in_bounds(self, m_x, m_y, m_t, l_t, s_t, d_t, seed):
        spec = ClipSpec(max(1, m_x // 2), max(1, m_y // 2), l_t, s_t, d_t)
        s = VideoSequence(np.zeros((m_x, m_y, m_t)))
        if m_t < spec.min_frames:
            with pytest.raises(ValueError):
                sample_clip_pair(s, spec, seed=seed)
            return
        pair = sample_clip_pair(s, spec, seed=seed)
        idx = np.array(pair.record.indices)
        assert idx.min() >= 0 and idx.max() + d_t <= m_t - 1
        assert np.all(np.diff(idx) == s_t)
        assert pair.clip.shape == pair.diff_clip.shape == (spec.l_x, spec.l_y, l_t, 1)


class TestTrainingBatch:
    def test_pairs_satisfy_invariants(self, seq):
        spec = ClipSpec(8, 8, 4, 3, 2)
        for pair in sample_training_batch([seq], spec, 64, seed=1):
            assert pair.clip.shape == pair.diff_clip.shape == (8, 8, 4, 2)
            assert pair.label == 3
            rec = pair.record
            region = seq.frames[rec.crop_origin[0]:rec.crop_origin[0] + 8, rec.crop_origin[1]:rec.crop_origin[1] + 8]
            clip = region[:, :, list(rec.indices)]
            clip = clip[::-1] if rec.flip else clip
            np.testing.assert_array_equal(pair.clip, clip)

    def test_crop_origins_are_uniform(self):
        s = VideoSequence(np.zeros((12, 10, 8)))
        spec = ClipSpec(8, 8, 2, 2, 1)
        pairs = sample_training_batch([s], spec, 12_000, seed=5)
        counts = np.zeros((5, 3))
        for p in pairs:
            counts[p.record.crop_origin] += 1
        assert np.all(counts > 0)
        _, p_value = stats.chisquare(counts.ravel())
        assert p_value > 1e-3

    def test_flip_rate_near_half(self, seq):
        pairs = sample_training_batch([seq], ClipSpec(4, 4, 2, 2, 2), 4000, seed=2)
        rate = np.mean([p.record.flip for p in pairs])
        assert abs(rate - 0.5) < 0.03

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            sample_training_batch([], ClipSpec(4, 4), 1)

    def test_batch_size_positive(self, seq):
        with pytest.raises(ValueError):
            sample_training_batch([seq], ClipSpec(4, 4), 0)

    def test_random_pair_without_flip(self, seq):
        rng = np.random.default_rng(0)
        assert not any(random_clip_pair(seq, ClipSpec(4, 4, 2, 2, 2), rng, flip=False).record.flip
                       for _ in range(50))


class TestInferenceSampling:
    def test_even_starts_cover_range(self):
        spec = ClipSpec(4, 4, 5, 4, 2, clips_per_sequence=5)  # min_frames 19
        assert evenly_spaced_starts(24, spec) == [0, 1, 2, 4, 5]
        assert evenly_spaced_starts(19, spec) == [0, 0, 0, 0, 0]
        assert evenly_spaced_starts(24, spec, 1) == [2]

    def test_too_short(self):
        with pytest.raises(ValueError, match="at least 19"):
            evenly_spaced_starts(18, ClipSpec(4, 4, 5, 4, 2))

    def test_default_crop_set(self):
        crops = CropSet()
        origins = crops.origins((40, 36), ClipSpec(32, 32))
        assert len(crops) == len(origins) == 18
        assert len(set(origins)) == 18
        assert origins[0] == ((0, 0), False) and origins[1] == ((0, 0), True)
        # "top_right": rows run along y, columns along x
        assert origins[4] == ((8, 0), False)
        assert dict.fromkeys(o for o, _ in origins).keys() == {
            (x, y) for x in (0, 4, 8) for y in (0, 2, 4)}

    def test_crop_set_needs_a_crop(self):
        with pytest.raises(ValueError):
            CropSet(positions=())


class TestVideoSequence:
    def test_channel_axis_added(self):
        assert VideoSequence(np.zeros((2, 3, 4))).shape == (2, 3, 4, 1)

    def test_rejects_bad_rank(self):
        with pytest.raises(ValueError):
            VideoSequence(np.zeros((2, 3)))
