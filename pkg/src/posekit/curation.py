"""Dataset curation: tag filtering, subject-mask tracking, and skeleton-rate
screening, orchestrated into a manifest-in, manifest-out pipeline.

Stage 1 keeps videos whose metadata tags satisfy the configured predicate.
Stage 2 selects the largest first-frame mask as the subject, tracks it
forward by IoU among same-label candidates (skipping frames with none),
and rejects videos whose tracked-mask area ratio leaves the configured
open interval. Stage 3 rejects videos whose fraction of frames with an
extracted skeleton falls below a threshold. Stages short-circuit: a video
rejected at stage 1 never touches the filesystem.

Manifests are JSON Lines, one record or decision per line. Mask sequences
live on disk as a JSON index referencing one PGM file per mask.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DomainError, FormatError, PosekitError
from .maskgeom import (
    Mask,
    MaskSequence,
    SkeletonSequence,
    iou,
    load_skeletons,
    read_pgm,
    write_pgm,
)

REASON_STAGE1_REQUIRED = "stage1_required_tag_missing"
REASON_STAGE1_FORBIDDEN = "stage1_forbidden_tag"
REASON_AREA = "area_ratio_out_of_range"
REASON_EMPTY_FIRST_FRAME = "empty_first_frame"
REASON_SKELETON_RATE = "skeleton_rate_below_threshold"
REASON_IO = "io_error"

REASON_CODES = frozenset(
    {
        REASON_STAGE1_REQUIRED,
        REASON_STAGE1_FORBIDDEN,
        REASON_AREA,
        REASON_EMPTY_FIRST_FRAME,
        REASON_SKELETON_RATE,
        REASON_IO,
    }
)


@dataclass
class VideoRecord:
    """One input video: identity, geometry, tags, and data file paths."""

    id: str
    frame_count: int
    height: int
    width: int
    metadata_tags: list[str] = field(default_factory=list)
    mask_file: str | None = None
    skeleton_file: str | None = None

    def __post_init__(self) -> None:
        if self.frame_count < 1:
            raise DomainError(f"{self.id}: frame_count must be >= 1")
        if self.height < 1 or self.width < 1:
            raise DomainError(f"{self.id}: grid must be at least 1x1")


@dataclass
class CurationDecision:
    """Verdict for one video, with the stage and reason when rejected."""

    video_id: str
    verdict: str  # "retained" | "rejected"
    stage: int | None = None
    reason: str | None = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.verdict not in ("retained", "rejected"):
            raise DomainError(f"unknown verdict {self.verdict!r}")
        if self.verdict == "rejected" and self.reason not in REASON_CODES:
            raise DomainError(f"rejection reason {self.reason!r} not in the closed set")


@dataclass
class CurationConfig:
    lo: float = 0.2
    hi: float = 0.8
    skeleton_threshold: float = 0.8
    required_tags: tuple[str, ...] = ()
    forbidden_tags: tuple[str, ...] = ()
    base_dir: str | Path | None = None
    workers: int | None = None


@dataclass
class CurationManifest:
    """All per-video decisions plus aggregate dataset statistics."""

    decisions: list[CurationDecision]
    segment_histogram: dict[int, int] = field(default_factory=dict)

    def retained_ids(self) -> list[str]:
        return [d.video_id for d in self.decisions if d.verdict == "retained"]


# --------------------------------------------------------------------------
# Stage predicates
# --------------------------------------------------------------------------


def stage1_filter(
    rec: VideoRecord,
    required_tags: tuple[str, ...] | list[str] = (),
    forbidden_tags: tuple[str, ...] | list[str] = (),
) -> CurationDecision:
    """Tag predicate standing in for the upstream content filter."""
    tags = set(rec.metadata_tags)
    missing = [t for t in required_tags if t not in tags]
    if missing:
        return CurationDecision(
            rec.id, "rejected", stage=1, reason=REASON_STAGE1_REQUIRED,
            stats={"missing_tags": missing},
        )
    present = [t for t in forbidden_tags if t in tags]
    if present:
        return CurationDecision(
            rec.id, "rejected", stage=1, reason=REASON_STAGE1_FORBIDDEN,
            stats={"forbidden_tags": present},
        )
    return CurationDecision(rec.id, "retained", stage=1)


def select_primary_mask(first_frame_masks: list[Mask]) -> Mask:
    """Largest mask in the first frame; ties go to the lowest list index."""
    if not first_frame_masks:
        raise DomainError("first frame has no masks")
    best = first_frame_masks[0]
    for m in first_frame_masks[1:]:
        if m.area > best.area:
            best = m
    return best


def track_primary_mask(
    seq: MaskSequence,
) -> tuple[list[tuple[int, Mask]], list[int]]:
    """Track the primary subject mask across frames.

    The first frame uses the largest mask. Each later frame picks, among
    masks sharing the primary label, the one with the highest IoU against
    the last selected mask (ties to the lowest candidate index). Frames
    with no same-label candidate are skipped; tracking continues from the
    last selected mask.
    """
    if not seq.frames or not seq.frames[0]:
        raise DomainError("first frame has no masks")
    primary = select_primary_mask(seq.frames[0])
    tracked: list[tuple[int, Mask]] = [(0, primary)]
    skipped: list[int] = []
    last = primary
    for t in range(1, len(seq.frames)):
        candidates = [m for m in seq.frames[t] if m.label == primary.label]
        if not candidates:
            skipped.append(t)
            continue
        best = candidates[0]
        best_iou = iou(best, last)
        for m in candidates[1:]:
            score = iou(m, last)
            if score > best_iou:
                best, best_iou = m, score
        tracked.append((t, best))
        last = best
    return tracked, skipped


def area_ratio_filter(
    masks: list[Mask],
    height: int,
    width: int,
    lo: float = 0.2,
    hi: float = 0.8,
    video_id: str = "",
) -> CurationDecision:
    """Retain only if every mask's area ratio lies strictly inside (lo, hi)."""
    if not masks:
        raise DomainError("area filter needs at least one mask")
    total = float(height * width)
    ratios = [m.area / total for m in masks]
    stats = {"area_ratios": ratios}
    for ratio in ratios:
        if not (lo < ratio < hi):
            stats["violating_ratio"] = ratio
            return CurationDecision(
                video_id, "rejected", stage=2, reason=REASON_AREA, stats=stats
            )
    return CurationDecision(video_id, "retained", stage=2, stats=stats)


def skeleton_rate_filter(
    skeletons: SkeletonSequence,
    total_frames: int,
    threshold: float = 0.8,
    video_id: str = "",
) -> CurationDecision:
    """Reject when the fraction of frames with a skeleton is below threshold.

    The inequality is strict: a rate exactly at the threshold is retained.
    """
    if total_frames < 1:
        raise DomainError("total frame count must be >= 1")
    t_skel = sum(1 for f in skeletons.frames if f.segments)
    rate = t_skel / total_frames
    stats = {"t_skel": t_skel, "total_frames": total_frames, "skeleton_rate": rate}
    if rate < threshold:
        return CurationDecision(
            video_id, "rejected", stage=3, reason=REASON_SKELETON_RATE, stats=stats
        )
    return CurationDecision(video_id, "retained", stage=3, stats=stats)


# --------------------------------------------------------------------------
# Mask sequence files
# --------------------------------------------------------------------------


def save_mask_sequence(index_path: str | Path, seq: MaskSequence) -> None:
    """Write a mask sequence as a JSON index plus one PGM per mask."""
    index_path = Path(index_path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    stem = index_path.stem
    frames_doc = []
    for i, masks in enumerate(seq.frames):
        entries = []
        for k, m in enumerate(masks):
            fname = f"{stem}_f{i:04d}_m{k}.pgm"
            write_pgm(index_path.parent / fname, m)
            entries.append({"label": m.label, "file": fname})
        frames_doc.append(entries)
    doc = {"height": seq.height, "width": seq.width, "frames": frames_doc}
    index_path.write_text(json.dumps(doc), encoding="utf-8")


def load_mask_sequence(index_path: str | Path) -> MaskSequence:
    """Read a mask sequence JSON index; PGM paths resolve next to the index."""
    index_path = Path(index_path)
    try:
        doc = json.loads(index_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{index_path}: invalid JSON") from exc
    if not isinstance(doc, dict) or "frames" not in doc:
        raise FormatError(f"{index_path}: missing frames array")
    try:
        height = int(doc["height"])
        width = int(doc["width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{index_path}: missing or invalid grid size") from exc
    frames: list[list[Mask]] = []
    for i, entries in enumerate(doc["frames"]):
        masks = []
        for entry in entries:
            mask_path = index_path.parent / entry["file"]
            masks.append(read_pgm(mask_path, label=entry.get("label")))
        frames.append(masks)
    return MaskSequence(height=height, width=width, frames=frames)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


def _resolve(base: str | Path | None, path: str) -> Path:
    p = Path(path)
    if base is not None and not p.is_absolute():
        return Path(base) / p
    return p


def curate_video(rec: VideoRecord, config: CurationConfig) -> CurationDecision:
    """Apply the three stages in order with short-circuit on rejection."""
    d1 = stage1_filter(rec, config.required_tags, config.forbidden_tags)
    if d1.verdict == "rejected":
        return d1

    stats: dict = {}
    if rec.mask_file is None:
        return CurationDecision(rec.id, "rejected", stage=2, reason=REASON_IO,
                                stats={"error": "no mask file declared"})
    try:
        seq = load_mask_sequence(_resolve(config.base_dir, rec.mask_file))
    except (OSError, FormatError, PosekitError) as exc:
        return CurationDecision(rec.id, "rejected", stage=2, reason=REASON_IO,
                                stats={"error": str(exc)})
    if not seq.frames or not seq.frames[0]:
        return CurationDecision(rec.id, "rejected", stage=2,
                                reason=REASON_EMPTY_FIRST_FRAME)
    tracked, skipped = track_primary_mask(seq)
    tracked_ious = []
    for (fa, ma), (_, mb) in zip(tracked, tracked[1:]):
        tracked_ious.append(iou(ma, mb))
    stats["skipped_frames"] = skipped
    stats["tracked_ious"] = tracked_ious
    d2 = area_ratio_filter(
        [m for _, m in tracked], seq.height, seq.width,
        lo=config.lo, hi=config.hi, video_id=rec.id,
    )
    d2.stats.update(stats)
    if d2.verdict == "rejected":
        return d2
    stats.update(d2.stats)

    if rec.skeleton_file is None:
        return CurationDecision(rec.id, "rejected", stage=3, reason=REASON_IO,
                                stats={"error": "no skeleton file declared"})
    try:
        skeletons = load_skeletons(_resolve(config.base_dir, rec.skeleton_file))
    except (OSError, FormatError, PosekitError) as exc:
        return CurationDecision(rec.id, "rejected", stage=3, reason=REASON_IO,
                                stats={"error": str(exc)})
    d3 = skeleton_rate_filter(
        skeletons, rec.frame_count, threshold=config.skeleton_threshold,
        video_id=rec.id,
    )
    stats.update(d3.stats)
    stats["segment_count"] = _video_segment_count(skeletons)
    if d3.verdict == "rejected":
        d3.stats = stats
        return d3
    return CurationDecision(rec.id, "retained", stats=stats)


def _video_segment_count(skeletons: SkeletonSequence) -> int:
    """Representative segment count: the first frame with any segments."""
    for frame in skeletons.frames:
        if frame.segments:
            return len(frame.segments)
    return 0


def resolve_workers(requested: int | None) -> int:
    """Worker count: explicit request wins, else the env cap, else the CPU count."""
    if requested is not None and requested > 0:
        return requested
    env = os.environ.get("POSEANYTHING_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise DomainError(f"POSEANYTHING_THREADS must be an integer, got {env!r}") from exc
        if n > 0:
            return n
    return min(8, os.cpu_count() or 1)


def run_pipeline(records: list[VideoRecord], config: CurationConfig) -> CurationManifest:
    """Curate every record; failures are isolated per video.

    Videos are independent work units and may run on a thread pool; the
    manifest preserves input order so output is deterministic either way.
    """
    n_workers = min(resolve_workers(config.workers), max(len(records), 1))
    if n_workers <= 1 or len(records) <= 1:
        decisions = [curate_video(rec, config) for rec in records]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            decisions = list(pool.map(lambda r: curate_video(r, config), records))
    histogram: dict[int, int] = {}
    for d in decisions:
        if d.verdict == "retained":
            count = d.stats.get("segment_count", 0)
            histogram[count] = histogram.get(count, 0) + 1
    return CurationManifest(decisions=decisions, segment_histogram=histogram)


def segment_count_histogram(
    records: list[VideoRecord], base_dir: str | Path | None = None
) -> dict[int, int]:
    """Histogram of per-video segment counts over readable skeleton files."""
    histogram: dict[int, int] = {}
    for rec in records:
        if rec.skeleton_file is None:
            continue
        try:
            skeletons = load_skeletons(_resolve(base_dir, rec.skeleton_file))
        except (OSError, FormatError, PosekitError):
            continue
        count = _video_segment_count(skeletons)
        histogram[count] = histogram.get(count, 0) + 1
    return histogram


# --------------------------------------------------------------------------
# Manifest files (JSON Lines)
# --------------------------------------------------------------------------


def read_records(path: str | Path) -> list[VideoRecord]:
    records = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
            records.append(
                VideoRecord(
                    id=doc["id"],
                    frame_count=int(doc["frame_count"]),
                    height=int(doc["height"]),
                    width=int(doc["width"]),
                    metadata_tags=list(doc.get("metadata_tags", [])),
                    mask_file=doc.get("mask_file"),
                    skeleton_file=doc.get("skeleton_file"),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{line_no}: bad video record ({exc})") from exc
    return records


def write_records(path: str | Path, records: list[VideoRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def write_decisions(path: str | Path, decisions: list[CurationDecision]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(asdict(d), sort_keys=True) + "\n")


def read_decisions(path: str | Path) -> list[CurationDecision]:
    decisions = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        doc = json.loads(line)
        decisions.append(
            CurationDecision(
                video_id=doc["video_id"],
                verdict=doc["verdict"],
                stage=doc.get("stage"),
                reason=doc.get("reason"),
                stats=doc.get("stats", {}),
            )
        )
    return decisions
