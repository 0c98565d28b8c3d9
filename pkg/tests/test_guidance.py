import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posekit.dit import VideoLatent
from posekit.errors import DimensionError, DomainError
from posekit.guidance import (
    GuidanceConfig,
    SparseBucket,
    SparsePolicy,
    apply_sparse_mask,
    build_camera_anchor,
    build_static_pose_anchor,
    cfg_decoupled,
    cfg_paired,
    denoise_loop,
    draw_sparse_pose_mask,
    encode_pose_condition,
    sparse_pose_mask,
)
from posekit.maskgeom import SkeletonFrame, SkeletonSegment, SkeletonSequence
from posekit.rng import make_rng


class TestCfgPaired:
    def test_s_one_returns_positive_exactly(self):
        pos = make_rng(0).standard_normal((3, 4))
        neg = make_rng(1).standard_normal((3, 4))
        assert np.array_equal(cfg_paired(pos, neg, 1.0), pos)

    def test_s_zero_returns_negative_exactly(self):
        pos = make_rng(2).standard_normal((3, 4))
        neg = make_rng(3).standard_normal((3, 4))
        assert np.array_equal(cfg_paired(pos, neg, 0.0), neg)

    def test_direct_substitution(self):
        out = cfg_paired(np.array([2.0]), np.array([1.0]), 3.0)
        assert np.array_equal(out, np.array([4.0]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cfg_paired(np.zeros(3), np.zeros(4), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-10, 10), st.integers(0, 100))
    def test_equal_anchors_fixed_point(self, s, seed):
        x = make_rng(seed).standard_normal(5)
        assert np.array_equal(cfg_paired(x, x, s), x)


class TestCfgDecoupled:
    def test_subject_only(self):
        base = make_rng(4).standard_normal(6)
        subj = make_rng(5).standard_normal(6)
        cam = make_rng(6).standard_normal(6)
        out = cfg_decoupled(base, subj, cam, 1.0, 0.0)
        assert np.allclose(out, subj, atol=1e-14)

    def test_passthrough_denoiser_superposition(self):
        # denoiser returns its condition; null condition is zero
        base = np.zeros(2)
        subj = np.array([1.0, 0.0])
        cam = np.array([0.0, 1.0])
        out = cfg_decoupled(base, subj, cam, 2.0, 1.0)
        assert np.array_equal(out, np.array([2.0, -1.0]))

    def test_degenerate_equality(self):
        base = make_rng(7).standard_normal(4)
        for s_s, s_c in [(0.0, 0.0), (1.5, 2.5), (-3.0, 7.0)]:
            assert np.array_equal(cfg_decoupled(base, base, base, s_s, s_c), base)

    def test_affine_denoiser_matches_symbolic(self):
        rng = make_rng(8)
        for _ in range(50):
            n, m = 5, 3
            a = rng.standard_normal((n, n))
            b = rng.standard_normal((n, m))
            z = rng.standard_normal(n)
            c_s = rng.standard_normal(m)
            c_c = rng.standard_normal(m)
            s_s = float(rng.uniform(-3, 3))
            s_c = float(rng.uniform(-3, 3))
            eps = lambda cond: a @ z + b @ cond
            got = cfg_decoupled(eps(np.zeros(m)), eps(c_s), eps(c_c), s_s, s_c)
            want = a @ z + s_s * (b @ c_s) - s_c * (b @ c_c)
            assert np.max(np.abs(got - want)) < 1e-12


def skeleton(points_per_frame, valid=None):
    frames = []
    for i, pts in enumerate(points_per_frame):
        segments = (
            [SkeletonSegment(np.asarray(pts), frame_index=i)] if pts is not None else []
        )
        v = valid[i] if valid is not None else None
        frames.append(SkeletonFrame(segments=segments, valid=v))
    return SkeletonSequence(frames=frames)


class TestStaticAnchor:
    def test_moving_sequence_freezes_to_first(self):
        seq = skeleton([[[0, 0], [0, 1]], [[2, 2], [2, 3]], [[4, 4], [4, 5]]])
        out = build_static_pose_anchor(seq)
        for frame in out.frames:
            assert np.array_equal(frame.segments[0].points, [[0, 0], [0, 1]])

    def test_idempotent(self):
        seq = skeleton([[[1, 1]], [[3, 3]]])
        once = build_static_pose_anchor(seq)
        twice = build_static_pose_anchor(once)
        for a, b in zip(once.frames, twice.frames):
            assert np.array_equal(a.segments[0].points, b.segments[0].points)

    def test_first_invalid_frame_skipped(self):
        seq = skeleton([None, [[5, 5]], [[7, 7]]])
        out = build_static_pose_anchor(seq)
        assert not out.frames[0].valid
        assert np.array_equal(out.frames[1].segments[0].points, [[5, 5]])
        assert np.array_equal(out.frames[2].segments[0].points, [[5, 5]])

    def test_validity_flags_preserved(self):
        seq = skeleton([[[1, 1]], [[2, 2]], [[3, 3]]], valid=[True, False, True])
        out = build_static_pose_anchor(seq)
        assert [f.valid for f in out.frames] == [True, False, True]

    def test_no_valid_frame(self):
        with pytest.raises(DomainError):
            build_static_pose_anchor(skeleton([None, None]))


class TestCameraAnchor:
    def test_zero_speed_is_static(self):
        seq = build_camera_anchor("left", 0.0, (4, 4, 6, 6), frames=3, height=20, width=20)
        first = {tuple(p) for s in seq.frames[0].segments for p in s.points}
        for frame in seq.frames[1:]:
            pts = {tuple(p) for s in frame.segments for p in s.points}
            assert pts == first

    def test_leftward_translation_arithmetic(self):
        seq = build_camera_anchor("left", 2.0, (5, 10, 4, 4), frames=3, height=30, width=30)
        lefts = []
        for frame in seq.frames:
            cols = [int(p[1]) for s in frame.segments for p in s.points]
            lefts.append(min(cols))
        assert lefts == [10, 8, 6]

    def test_clipping_then_invalid(self):
        seq = build_camera_anchor("left", 4.0, (2, 0, 3, 3), frames=5, height=10, width=10)
        assert seq.frames[0].valid
        exited = [f for f in seq.frames if not f.valid]
        assert exited, "rectangle should eventually leave the grid"
        for frame in seq.frames:
            if frame.valid:
                for seg in frame.segments:
                    assert seg.points[:, 1].min() >= 0

    def test_initially_outside_rejected(self):
        with pytest.raises(DomainError):
            build_camera_anchor("left", 1.0, (8, 8, 5, 5), frames=2, height=10, width=10)

    def test_direction_vector_accepted(self):
        seq = build_camera_anchor((1, 0), 1.0, (0, 0, 3, 3), frames=2, height=10, width=10)
        rows0 = min(int(p[0]) for s in seq.frames[0].segments for p in s.points)
        rows1 = min(int(p[0]) for s in seq.frames[1].segments for p in s.points)
        assert rows1 == rows0 + 1


class TestSparseMask:
    def test_single_frame(self):
        # keep-count clamps to the actual sequence length
        assert sparse_pose_mask(1, SparsePolicy(), make_rng(0)) == {0}

    def test_uniform_spacing_three_of_81(self):
        policy = SparsePolicy(
            buckets=(SparseBucket("only", 1.0, 3, 3),),
            random_scheme_probability=0.0,
        )
        kept = sparse_pose_mask(81, policy, make_rng(1))
        assert kept == {0, 40, 80}

    def test_frame_zero_always_kept_and_count_exact(self):
        policy = SparsePolicy()
        rng = make_rng(2)
        for _ in range(500):
            draw = draw_sparse_pose_mask(81, policy, rng)
            assert 0 in draw.kept
            assert len(draw.kept) == draw.keep_count
            bucket = {b.name: b for b in policy.buckets}[draw.bucket]
            assert bucket.lo <= draw.keep_count <= bucket.hi

    def test_bucket_frequencies(self):
        policy = SparsePolicy()
        rng = make_rng(3)
        counts = {"dense": 0, "medium": 0, "sparse": 0}
        n = 20000
        for _ in range(n):
            counts[draw_sparse_pose_mask(81, policy, rng).bucket] += 1
        assert abs(counts["dense"] / n - 0.35) < 0.02
        assert abs(counts["medium"] / n - 0.20) < 0.02
        assert abs(counts["sparse"] / n - 0.45) < 0.02

    def test_keep_clamped_to_total(self):
        policy = SparsePolicy(
            buckets=(SparseBucket("big", 1.0, 5, 9),), total_frames=9
        )
        draw = draw_sparse_pose_mask(6, policy, make_rng(4))
        assert draw.keep_count <= 6

    def test_bad_probabilities_rejected(self):
        with pytest.raises(DomainError):
            SparsePolicy(buckets=(SparseBucket("a", 0.5, 1, 2),))

    def test_apply_mask_invalidates_dropped_frames(self):
        seq = skeleton([[[1, 1]], [[2, 2]], [[3, 3]]])
        out = apply_sparse_mask(seq, {0, 2})
        assert [f.valid for f in out.frames] == [True, False, True]


def const_latent(value, shape=(2, 2, 2, 1)):
    return VideoLatent(np.full(shape, float(value)))


class TestDenoiseLoop:
    def test_zero_steps(self):
        z = const_latent(3.0)
        out = denoise_loop(lambda z, t, c: z, z, GuidanceConfig(steps=0))
        assert out is z

    def test_zero_model_keeps_input(self):
        z = const_latent(2.0)
        model = lambda z, t, c: VideoLatent(np.zeros_like(z.data))
        out = denoise_loop(model, z, GuidanceConfig(mode="paired", s=1.0, steps=5))
        assert np.array_equal(out.data, z.data)

    def test_linear_model_single_euler_step(self):
        z = const_latent(1.0)
        model = lambda z, t, c: z
        cfg = GuidanceConfig(mode="paired", s=1.0, steps=1, step_size=0.5)
        out = denoise_loop(model, z, cfg)
        assert np.allclose(out.data, 0.5)

    def test_additive_mode_reaches_all_anchors(self):
        seen = []
        model = lambda z, t, c: (seen.append(c), VideoLatent(np.zeros_like(z.data)))[1]
        cfg = GuidanceConfig(
            mode="additive", s_s=1.0, s_c=1.0, steps=1,
            subject_anchor="SUBJ", camera_anchor="CAM",
        )
        denoise_loop(model, const_latent(0.0), cfg)
        assert seen == [None, "SUBJ", "CAM"]

    def test_non_finite_abort_names_step(self):
        model = lambda z, t, c: VideoLatent(np.full_like(z.data, np.inf))
        with pytest.raises(DomainError, match="step 0"):
            denoise_loop(model, const_latent(1.0), GuidanceConfig(mode="paired", steps=2))

    def test_deterministic(self):
        rng_model = lambda z, t, c: VideoLatent(z.data * 0.9 + t / 1000.0)
        cfg = GuidanceConfig(mode="paired", s=0.5, steps=7)
        a = denoise_loop(rng_model, const_latent(1.0), cfg)
        b = denoise_loop(rng_model, const_latent(1.0), cfg)
        assert np.array_equal(a.data, b.data)


class TestEncodePoseCondition:
    def test_renders_valid_frames_only(self):
        seq = skeleton([[[0, 0], [0, 1]], [[0, 0], [0, 1]]], valid=[True, False])
        lat = encode_pose_condition(seq, (4, 4), stride=2, channels=3)
        assert lat.data.shape == (2, 2, 2, 3)
        assert lat.data[0].max() > 0
        assert np.array_equal(lat.data[1], np.zeros((2, 2, 3)))

    def test_channels_tiled(self):
        seq = skeleton([[[0, 0]]])
        lat = encode_pose_condition(seq, (2, 2), stride=1, channels=4)
        assert np.array_equal(lat.data[..., 0], lat.data[..., 3])
