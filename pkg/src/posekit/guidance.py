"""Guidance algebra, motion anchors, sparse pose masking, and the sampler.

Subject and camera motion are controlled through separate guidance
anchors: the subject pose conditions the positive side, a synthetic
camera-motion sequence conditions the negative side. Two combiners are
provided: the paired form

    (1 - s) * eps_neg + s * eps_pos

(algebraically eps_neg + s * (eps_pos - eps_neg), written so that s = 0
and s = 1 return the anchors bit-exactly), and the additive decoupled
form

    eps_base + s_s * (eps_subject - eps_base) - s_c * (eps_camera - eps_base)

whose two deltas steer subject motion toward and background motion away
from their respective conditions independently.

Sampling is a deterministic explicit-Euler loop over a linear schedule;
all randomness comes from the caller's seeded generator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .dit import VideoLatent, encode_latent
from .errors import DimensionError, DomainError
from .maskgeom import (
    SkeletonFrame,
    SkeletonSegment,
    SkeletonSequence,
    chain_points,
    rasterize_segment,
)

SCHEDULE_MAX_T = 1000.0

_DIRECTIONS = {
    "left": (0, -1),
    "right": (0, 1),
    "up": (-1, 0),
    "down": (1, 0),
}


# --------------------------------------------------------------------------
# Guidance combiners
# --------------------------------------------------------------------------


def cfg_paired(eps_pos: np.ndarray, eps_neg: np.ndarray, s: float) -> np.ndarray:
    """Blend positive and negative anchors with scale s:

        eps_neg + s * (eps_pos - eps_neg)

    The s = 1 endpoint short-circuits to the positive anchor so both
    endpoints and the equal-anchor case are exact, not just within
    rounding.
    """
    eps_pos = np.asarray(eps_pos)
    eps_neg = np.asarray(eps_neg)
    if eps_pos.shape != eps_neg.shape:
        raise DimensionError(f"anchor shapes differ: {eps_pos.shape} vs {eps_neg.shape}")
    if s == 1.0:
        return eps_pos.copy()
    return eps_neg + s * (eps_pos - eps_neg)


def cfg_decoupled(
    eps_base: np.ndarray,
    eps_subject: np.ndarray,
    eps_camera: np.ndarray,
    s_s: float,
    s_c: float,
) -> np.ndarray:
    """Additive decoupled guidance.

    The subject delta is scaled toward its condition, the camera delta is
    scaled away from its condition (negative-anchor steering).
    """
    eps_base = np.asarray(eps_base)
    eps_subject = np.asarray(eps_subject)
    eps_camera = np.asarray(eps_camera)
    if eps_subject.shape != eps_base.shape or eps_camera.shape != eps_base.shape:
        raise DimensionError("guidance operands must share one shape")
    return eps_base + s_s * (eps_subject - eps_base) - s_c * (eps_camera - eps_base)


# --------------------------------------------------------------------------
# Anchors
# --------------------------------------------------------------------------


def build_static_pose_anchor(poses: SkeletonSequence) -> SkeletonSequence:
    """Freeze every valid frame's skeleton to the first valid frame's pose.

    Validity flags are preserved; invalid frames keep their content. The
    operation is idempotent.
    """
    ref_index = next((i for i, f in enumerate(poses.frames) if f.valid), None)
    if ref_index is None:
        raise DomainError("pose sequence has no valid frame")
    ref_segments = poses.frames[ref_index].segments
    frames = []
    for i, frame in enumerate(poses.frames):
        if frame.valid:
            segments = [
                SkeletonSegment(seg.points, frame_index=i, segment_index=seg.segment_index)
                for seg in ref_segments
            ]
            frames.append(SkeletonFrame(segments=segments, valid=True))
        else:
            frames.append(SkeletonFrame(segments=list(frame.segments), valid=frame.valid))
    return SkeletonSequence(frames=frames)


def _rect_edges(top: int, left: int, height: int, width: int) -> list[list[tuple[int, int]]]:
    bottom = top + height - 1
    right = left + width - 1
    edges = [
        [(top, left), (top, right)],
        [(top, right), (bottom, right)],
        [(bottom, right), (bottom, left)],
        [(bottom, left), (top, left)],
    ]
    if height == 1:
        edges = edges[:1]
    elif width == 1:
        edges = edges[1:2]
    return edges


def build_camera_anchor(
    direction: str | tuple[int, int],
    speed: float,
    rect: tuple[int, int, int, int],
    frames: int,
    height: int,
    width: int,
) -> SkeletonSequence:
    """Rectangle outline translated frame by frame: a camera-motion stand-in.

    direction names the desired camera motion; injecting the moving
    rectangle as a negative anchor pushes background flow the opposite
    way. The outline is clipped at the grid; once it fully exits, frames
    are marked invalid.
    """
    if isinstance(direction, str):
        try:
            dr, dc = _DIRECTIONS[direction]
        except KeyError as exc:
            raise DomainError(f"unknown direction {direction!r}") from exc
    else:
        dr, dc = direction
    if speed < 0:
        raise DomainError("speed must be >= 0")
    top, left, rect_h, rect_w = rect
    if rect_h < 1 or rect_w < 1:
        raise DomainError("rectangle must be at least 1x1")
    if top < 0 or left < 0 or top + rect_h > height or left + rect_w > width:
        raise DomainError("rectangle must start fully inside the grid")

    out_frames = []
    for t in range(frames):
        shift = t * speed
        offset_r = int(np.floor(dr * shift + 0.5)) if dr else 0
        offset_c = int(np.floor(dc * shift + 0.5)) if dc else 0
        segments = []
        seg_index = 0
        for edge in _rect_edges(top + offset_r, left + offset_c, rect_h, rect_w):
            pts = chain_points(edge)
            inside = (
                (pts[:, 0] >= 0)
                & (pts[:, 0] < height)
                & (pts[:, 1] >= 0)
                & (pts[:, 1] < width)
            )
            pts = pts[inside]
            if pts.shape[0] == 0:
                continue
            segments.append(
                SkeletonSegment(pts, frame_index=t, segment_index=seg_index)
            )
            seg_index += 1
        out_frames.append(SkeletonFrame(segments=segments, valid=len(segments) > 0))
    return SkeletonSequence(frames=out_frames)


# --------------------------------------------------------------------------
# Sparse pose masking
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseBucket:
    name: str
    probability: float
    lo: int
    hi: int


@dataclass(frozen=True)
class SparsePolicy:
    """Keep-count buckets and masking schemes for sparse pose injection."""

    buckets: tuple[SparseBucket, ...] = (
        SparseBucket("dense", 0.35, 21, 81),
        SparseBucket("medium", 0.20, 11, 21),
        SparseBucket("sparse", 0.45, 1, 11),
    )
    random_scheme_probability: float = 0.5
    total_frames: int = 81

    def __post_init__(self) -> None:
        total = sum(b.probability for b in self.buckets)
        if abs(total - 1.0) > 1e-9:
            raise DomainError(f"bucket probabilities sum to {total}, expected 1")
        for b in self.buckets:
            if b.lo < 1 or b.hi < b.lo:
                raise DomainError(f"bucket {b.name} has an invalid range [{b.lo}, {b.hi}]")
            if b.lo > self.total_frames:
                raise DomainError(
                    f"bucket {b.name} starts beyond total_frames {self.total_frames}"
                )
        if not (0.0 <= self.random_scheme_probability <= 1.0):
            raise DomainError("scheme probability must lie in [0, 1]")


@dataclass(frozen=True)
class SparseDraw:
    bucket: str
    keep_count: int
    scheme: str
    kept: tuple[int, ...]


def draw_sparse_pose_mask(
    total_frames: int, policy: SparsePolicy, rng: np.random.Generator
) -> SparseDraw:
    """One draw of the sparse masking procedure, with its provenance.

    Draw order: bucket by probability, keep-count uniform over the
    bucket's inclusive range (clamped to total_frames), then the scheme.
    The random scheme samples the remaining indices without replacement;
    the uniform scheme spaces them evenly. Frame 0 is always kept.
    """
    if total_frames < 1:
        raise DomainError("total_frames must be >= 1")
    u = rng.random()
    acc = 0.0
    bucket = policy.buckets[-1]
    for b in policy.buckets:
        acc += b.probability
        if u < acc:
            bucket = b
            break
    keep = int(rng.integers(bucket.lo, bucket.hi + 1))
    keep = min(keep, total_frames)
    scheme = "random" if rng.random() < policy.random_scheme_probability else "uniform"
    if keep >= total_frames:
        kept = tuple(range(total_frames))
    elif scheme == "uniform":
        idx = np.round(np.linspace(0.0, total_frames - 1, keep)).astype(np.int64)
        kept = tuple(int(i) for i in idx)
    else:
        rest = rng.choice(np.arange(1, total_frames), size=keep - 1, replace=False)
        kept = tuple(sorted({0, *map(int, rest)}))
    return SparseDraw(bucket=bucket.name, keep_count=keep, scheme=scheme, kept=kept)


def sparse_pose_mask(
    total_frames: int, policy: SparsePolicy, rng: np.random.Generator
) -> set[int]:
    """Kept-frame index set drawn per the sparse masking policy."""
    return set(draw_sparse_pose_mask(total_frames, policy, rng).kept)


def apply_sparse_mask(poses: SkeletonSequence, kept: set[int]) -> SkeletonSequence:
    """Mark every frame outside the kept set invalid (condition withheld)."""
    frames = []
    for i, frame in enumerate(poses.frames):
        if i in kept:
            frames.append(SkeletonFrame(segments=list(frame.segments), valid=frame.valid))
        else:
            frames.append(SkeletonFrame(segments=list(frame.segments), valid=False))
    return SkeletonSequence(frames=frames)


# --------------------------------------------------------------------------
# Condition encoding and the sampling loop
# --------------------------------------------------------------------------


def encode_pose_condition(
    poses: SkeletonSequence,
    grid_hw: tuple[int, int],
    stride: int,
    channels: int,
) -> VideoLatent:
    """Render skeletons to pixels, pool to latent resolution, tile channels.

    Invalid frames render blank, which is how sparsely conditioned frames
    carry "no pose" downstream.
    """
    gh, gw = grid_hw
    rendered = np.zeros((len(poses.frames), gh, gw), dtype=np.float32)
    for i, frame in enumerate(poses.frames):
        if not frame.valid:
            continue
        for seg in frame.segments:
            rendered[i] = np.maximum(rendered[i], rasterize_segment(seg, gh, gw).data)
    pooled = encode_latent(rendered, stride)
    tiled = np.repeat(pooled.data, channels, axis=3)
    return VideoLatent(tiled.astype(np.float32))


@dataclass
class GuidanceConfig:
    """Sampler controls: combiner mode, scales, anchors, and step count."""

    mode: str = "additive"  # "paired" | "additive"
    s: float = 1.0
    s_s: float = 1.0
    s_c: float = 0.0
    steps: int = 0
    seed: int = 0
    step_size: float | None = None
    subject_anchor: Any = None
    camera_anchor: Any = None

    def __post_init__(self) -> None:
        if self.mode not in ("paired", "additive"):
            raise DomainError(f"unknown guidance mode {self.mode!r}")
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        for name in ("s", "s_s", "s_c"):
            if not np.isfinite(getattr(self, name)):
                raise DomainError(f"guidance scale {name} must be finite")


def denoise_loop(
    model: Callable[[VideoLatent, float, Any], VideoLatent],
    z_init: VideoLatent,
    guidance: GuidanceConfig,
) -> VideoLatent:
    """Explicit-Euler denoising over a linear schedule.

    model(z, t, cond) returns a noise estimate shaped like z; cond is
    passed through opaquely from the guidance anchors. Deterministic for
    a fixed model and config. Non-finite estimates abort with the step
    index.
    """
    steps = guidance.steps
    if steps == 0:
        return z_init
    dt = guidance.step_size if guidance.step_size is not None else 1.0 / steps
    z = z_init
    for k in range(steps):
        t = SCHEDULE_MAX_T * (1.0 - k / steps)
        if guidance.mode == "paired":
            eps_pos = _eps_array(model(z, t, guidance.subject_anchor), z)
            eps_neg = _eps_array(model(z, t, guidance.camera_anchor), z)
            eps = cfg_paired(eps_pos, eps_neg, guidance.s)
        else:
            eps_base = _eps_array(model(z, t, None), z)
            eps_subject = (
                eps_base
                if guidance.subject_anchor is None
                else _eps_array(model(z, t, guidance.subject_anchor), z)
            )
            eps_camera = (
                eps_base
                if guidance.camera_anchor is None
                else _eps_array(model(z, t, guidance.camera_anchor), z)
            )
            eps = cfg_decoupled(eps_base, eps_subject, eps_camera, guidance.s_s, guidance.s_c)
        if not np.isfinite(eps).all():
            raise DomainError(f"non-finite noise estimate at step {k}")
        z = VideoLatent(z.data - dt * eps)
    return z


def _eps_array(eps, z: VideoLatent) -> np.ndarray:
    arr = eps.data if isinstance(eps, VideoLatent) else np.asarray(eps)
    if arr.shape != z.data.shape:
        raise DimensionError(f"model output {arr.shape} does not match latent {z.data.shape}")
    return arr


class SkeletonConditionedModel:
    """Adapter: a token denoiser whose conditions are skeleton sequences.

    Anchor sequences are rasterized on the pose grid, pooled down to the
    latent resolution, and injected by the wrapped model's strategy.
    Encoded conditions are cached per anchor object.
    """

    def __init__(self, model, pose_grid: tuple[int, int], stride: int):
        self.model = model
        self.pose_grid = pose_grid
        self.stride = stride
        self._cache: dict[int, VideoLatent] = {}

    def _condition(self, anchor, z: VideoLatent) -> VideoLatent | None:
        if anchor is None:
            return None
        if isinstance(anchor, VideoLatent):
            return anchor
        key = id(anchor)
        if key not in self._cache:
            self._cache[key] = encode_pose_condition(
                anchor, self.pose_grid, self.stride, z.channels
            )
        return self._cache[key]

    def __call__(self, z: VideoLatent, t: float, cond) -> VideoLatent:
        return self.model.epsilon(z, timestep=t, cond=self._condition(cond, z))
