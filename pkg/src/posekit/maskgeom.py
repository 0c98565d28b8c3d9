"""Binary masks, skeleton polylines, and the geometry that connects them.

Covers IoU, morphological dilation, per-part body regions, the adaptive
dilation radius that grows a skeleton segment until it covers its body
region, and pixel-to-token footprints. Also owns the two on-disk formats
for this layer: binary PGM (P5) masks and per-video skeleton JSON.

Conventions: grids are row-major (row, col); all nearest/argmax ties break
toward the lowest index; dilation uses a 3x3 structuring element per unit
radius (square by default, plus-shaped "disk" behind config).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, DomainError, FormatError


# --------------------------------------------------------------------------
# Core types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mask:
    """A labeled binary occupancy grid."""

    data: np.ndarray
    label: str | None = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=bool)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError("mask grid must be at least 1x1")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def same_grid(self, other: "Mask") -> bool:
        return self.data.shape == other.data.shape


@dataclass(frozen=True, eq=False)
class SkeletonSegment:
    """One polyline of a skeleton: an ordered chain of 8-connected pixels."""

    points: np.ndarray
    frame_index: int = 0
    segment_index: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionError(f"segment points must be (n, 2), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DomainError("segment needs at least one point")
        if pts.shape[0] > 1:
            steps = np.abs(np.diff(pts, axis=0)).max(axis=1)
            if not np.all(steps == 1):
                raise DomainError("consecutive segment points must be 8-neighbors")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def translated(self, dr: int, dc: int) -> "SkeletonSegment":
        return SkeletonSegment(
            self.points + np.array([dr, dc], dtype=np.int64),
            frame_index=self.frame_index,
            segment_index=self.segment_index,
        )


@dataclass
class SkeletonFrame:
    """Segments extracted for one video frame plus a validity flag."""

    segments: list[SkeletonSegment] = field(default_factory=list)
    valid: bool | None = None

    def __post_init__(self) -> None:
        if self.valid is None:
            self.valid = len(self.segments) > 0


@dataclass
class SkeletonSequence:
    """Per-frame skeletons for one video."""

    frames: list[SkeletonFrame]

    def __len__(self) -> int:
        return len(self.frames)

    def valid_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.valid]


@dataclass
class MaskSequence:
    """Per-frame collections of labeled masks on a common grid."""

    height: int
    width: int
    frames: list[list[Mask]]

    def __post_init__(self) -> None:
        for i, masks in enumerate(self.frames):
            for m in masks:
                if m.data.shape != (self.height, self.width):
                    raise DimensionError(
                        f"frame {i} mask grid {m.data.shape} != sequence grid "
                        f"({self.height}, {self.width})"
                    )


@dataclass(frozen=True)
class PartMaskConfig:
    """Controls for part-mask growth.

    alpha_cap bounds the dilation radius search; coverage_tau is the
    fraction of the body region a dilated segment must cover (1.0 means
    full containment); structuring_element picks the 3x3 neighborhood
    applied per unit radius.
    """

    alpha_cap: int = 100
    coverage_tau: float = 1.0
    structuring_element: str = "square"

    def __post_init__(self) -> None:
        if self.alpha_cap < 0:
            raise DomainError("alpha_cap must be >= 0")
        if not (0.0 < self.coverage_tau <= 1.0):
            raise DomainError("coverage_tau must lie in (0, 1]")
        if self.structuring_element not in ("square", "disk"):
            raise DomainError(f"unknown structuring element {self.structuring_element!r}")


def _structure(kind: str) -> np.ndarray:
    if kind == "square":
        return np.ones((3, 3), dtype=bool)
    return np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def iou(a: Mask, b: Mask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    if not a.same_grid(b):
        raise DimensionError(f"grid mismatch: {a.data.shape} vs {b.data.shape}")
    inter = int(np.logical_and(a.data, b.data).sum())
    union = int(np.logical_or(a.data, b.data).sum())
    if union == 0:
        return 0.0
    return inter / union


def dilate(m: Mask, alpha: int, cfg: PartMaskConfig | None = None) -> Mask:
    """Dilate alpha times with the configured 3x3 element, clipped at the border."""
    if alpha < 0:
        raise DomainError("dilation radius must be >= 0")
    if alpha == 0:
        return m
    cfg = cfg or PartMaskConfig()
    grown = ndimage.binary_dilation(
        m.data, structure=_structure(cfg.structuring_element), iterations=alpha
    )
    return Mask(grown, label=m.label)


def rasterize_segment(seg: SkeletonSegment, height: int, width: int) -> Mask:
    """Set exactly the segment's pixels on a height x width grid."""
    pts = seg.points
    if (
        pts[:, 0].min() < 0
        or pts[:, 1].min() < 0
        or pts[:, 0].max() >= height
        or pts[:, 1].max() >= width
    ):
        raise DomainError(
            f"segment (frame {seg.frame_index}, index {seg.segment_index}) "
            f"has points outside the {height}x{width} grid"
        )
    grid = np.zeros((height, width), dtype=bool)
    grid[pts[:, 0], pts[:, 1]] = True
    return Mask(grid)


def part_body_region(subject: Mask, segments: list[SkeletonSegment]) -> list[Mask]:
    """Partition the subject mask by nearest segment.

    Each subject pixel goes to the segment whose pixels are closest in
    Euclidean distance; ties go to the lowest segment index. The outputs
    are pairwise disjoint and their union is exactly the subject mask.
    """
    if not segments:
        raise DomainError("need at least one segment to partition the subject")
    if subject.area == 0:
        raise DomainError("subject mask is empty")
    h, w = subject.height, subject.width
    distances = np.empty((len(segments), h, w), dtype=np.float64)
    for idx, seg in enumerate(segments):
        seg_mask = rasterize_segment(seg, h, w)
        distances[idx] = ndimage.distance_transform_edt(~seg_mask.data)
    nearest = np.argmin(distances, axis=0)
    regions = []
    for idx in range(len(segments)):
        regions.append(Mask(subject.data & (nearest == idx), label=subject.label))
    return regions


def adaptive_dilation_radius(
    seg: SkeletonSegment, body: Mask, cfg: PartMaskConfig | None = None
) -> int:
    """Smallest radius at which the dilated segment covers its body region.

    Coverage is |dilated & body| / |body| >= coverage_tau. Returns
    alpha_cap when no radius up to the cap qualifies. Grows the mask
    incrementally, one dilation per step.
    """
    cfg = cfg or PartMaskConfig()
    body_area = body.area
    if body_area == 0:
        raise DomainError("body region is empty")
    structure = _structure(cfg.structuring_element)
    current = rasterize_segment(seg, body.height, body.width).data
    for alpha in range(cfg.alpha_cap + 1):
        covered = int(np.logical_and(current, body.data).sum())
        if covered / body_area >= cfg.coverage_tau:
            return alpha
        if alpha < cfg.alpha_cap:
            current = ndimage.binary_dilation(current, structure=structure)
    return cfg.alpha_cap


def part_masks_for_frame(
    subject: Mask,
    segments: list[SkeletonSegment],
    cfg: PartMaskConfig | None = None,
) -> tuple[list[Mask], list[int]]:
    """Grow one part mask per segment: rasterize, then dilate until the
    segment's nearest-neighbor body region is covered.

    Returns (part masks, chosen radii), indexed like the input segments.
    """
    cfg = cfg or PartMaskConfig()
    bodies = part_body_region(subject, segments)
    masks: list[Mask] = []
    alphas: list[int] = []
    for seg, body in zip(segments, bodies):
        raster = rasterize_segment(seg, subject.height, subject.width)
        if body.area == 0:
            # Segment claimed no subject pixels; keep the bare rasterization.
            masks.append(raster)
            alphas.append(0)
            continue
        alpha = adaptive_dilation_radius(seg, body, cfg)
        masks.append(dilate(raster, alpha, cfg))
        alphas.append(alpha)
    return masks, alphas


def token_footprint(m: Mask, patch_h: int, patch_w: int, rho: float) -> np.ndarray:
    """Project a pixel mask onto a token grid of ceil(H/ph) x ceil(W/pw).

    A token is set iff at least a rho fraction of its patch's pixels
    (counting only pixels inside the grid) are set.
    """
    if patch_h < 1 or patch_w < 1:
        raise DomainError("patch sizes must be >= 1")
    if not (0.0 < rho <= 1.0):
        raise DomainError("rho must lie in (0, 1]")
    h, w = m.height, m.width
    row_starts = np.arange(0, h, patch_h)
    col_starts = np.arange(0, w, patch_w)
    counts = np.add.reduceat(np.add.reduceat(m.data.astype(np.int64), row_starts, axis=0), col_starts, axis=1)
    row_sizes = np.minimum(row_starts + patch_h, h) - row_starts
    col_sizes = np.minimum(col_starts + patch_w, w) - col_starts
    sizes = np.outer(row_sizes, col_sizes)
    return counts >= rho * sizes


def chain_points(waypoints: list[tuple[int, int]]) -> np.ndarray:
    """Expand sparse waypoints into a full 8-connected pixel chain.

    Consecutive waypoints are joined by Bresenham lines so the result
    satisfies the segment adjacency invariant.
    """
    if not waypoints:
        raise DomainError("need at least one waypoint")
    out: list[tuple[int, int]] = [tuple(waypoints[0])]
    for (r0, c0), (r1, c1) in zip(waypoints, waypoints[1:]):
        dr = abs(r1 - r0)
        dc = abs(c1 - c0)
        sr = 1 if r1 >= r0 else -1
        sc = 1 if c1 >= c0 else -1
        err = dr - dc
        r, c = r0, c0
        while (r, c) != (r1, c1):
            e2 = 2 * err
            if e2 > -dc:
                err -= dc
                r += sr
            if e2 < dr:
                err += dr
                c += sc
            out.append((r, c))
    # Drop consecutive duplicates introduced by repeated waypoints.
    deduped = [out[0]]
    for p in out[1:]:
        if p != deduped[-1]:
            deduped.append(p)
    return np.array(deduped, dtype=np.int64)


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def write_pgm(path: str | Path, m: Mask) -> None:
    """Write a mask as binary PGM: 0 background, 255 foreground."""
    payload = np.where(m.data, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.width} {m.height}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def _pgm_tokens(raw: bytes):
    """Yield header tokens, skipping whitespace and # comments."""
    i = 0
    n = len(raw)
    while i < n:
        ch = raw[i : i + 1]
        if ch.isspace():
            i += 1
            continue
        if ch == b"#":
            while i < n and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not raw[i : i + 1].isspace():
            i += 1
        yield raw[start:i], i
    yield b"", n


def _read_pgm_raw(path: str | Path) -> tuple[np.ndarray, int]:
    """Parse a P5 file into (uint8 grid, maxval)."""
    raw = Path(path).read_bytes()
    tokens = _pgm_tokens(raw)
    magic, _ = next(tokens)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        width = int(next(tokens)[0])
        height = int(next(tokens)[0])
        maxval_tok, pos = next(tokens)
        maxval = int(maxval_tok)
    except (StopIteration, ValueError) as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if not (0 < maxval < 256):
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data_start = pos + 1  # single whitespace byte after maxval
    expected = width * height
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=data_start, count=-1)
    if pixels.size != expected:
        raise FormatError(
            f"{path}: expected {expected} pixel bytes, found {pixels.size}"
        )
    return pixels.reshape(height, width), maxval


def read_pgm(path: str | Path, label: str | None = None) -> Mask:
    """Read a binary PGM mask; any pixel not 0 or 255 is a format error."""
    grid, maxval = _read_pgm_raw(path)
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    bad = ~np.isin(grid, (0, 255))
    if bad.any():
        raise FormatError(f"{path}: pixel values other than 0/255 present")
    return Mask(grid == 255, label=label)


def read_gray_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a grayscale PGM frame; returns (uint8 grid, maxval)."""
    return _read_pgm_raw(path)


def write_gray_pgm(path: str | Path, frame: np.ndarray, maxval: int = 255) -> None:
    """Write a grayscale frame as binary PGM."""
    arr = np.asarray(frame)
    if arr.ndim != 2:
        raise DimensionError(f"frame must be 2-D, got {arr.shape}")
    if arr.min() < 0 or arr.max() > maxval:
        raise DomainError(f"frame values leave [0, {maxval}]")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def save_skeletons(path: str | Path, seq: SkeletonSequence) -> None:
    """Write a skeleton sequence as one JSON document.

    Frames serialize as bare arrays of segments unless the validity flag
    differs from the default (non-empty means valid), in which case the
    frame becomes an object carrying an explicit "valid".
    """
    doc = []
    for frame in seq.frames:
        segments = [seg.points.tolist() for seg in frame.segments]
        default_valid = len(frame.segments) > 0
        if frame.valid == default_valid:
            doc.append(segments)
        else:
            doc.append({"segments": segments, "valid": frame.valid})
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_skeletons(path: str | Path) -> SkeletonSequence:
    """Read a skeleton sequence JSON document."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON") from exc
    if not isinstance(doc, list):
        raise FormatError(f"{path}: top level must be an array of frames")
    frames = []
    for i, entry in enumerate(doc):
        if isinstance(entry, dict):
            raw_segments = entry.get("segments", [])
            valid = entry.get("valid")
            if valid is not None and not isinstance(valid, bool):
                raise FormatError(f"{path}: frame {i} has a non-boolean valid flag")
        elif isinstance(entry, list):
            raw_segments = entry
            valid = None
        else:
            raise FormatError(f"{path}: frame {i} is neither array nor object")
        segments = []
        for j, pts in enumerate(raw_segments):
            try:
                segments.append(
                    SkeletonSegment(np.asarray(pts), frame_index=i, segment_index=j)
                )
            except (DomainError, DimensionError, ValueError) as exc:
                raise FormatError(f"{path}: frame {i} segment {j}: {exc}") from exc
        frames.append(SkeletonFrame(segments=segments, valid=valid))
    return SkeletonSequence(frames=frames)
