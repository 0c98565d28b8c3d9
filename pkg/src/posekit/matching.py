"""Part correspondence from attention patterns.

Matched parts attend to each other more strongly than unmatched ones, so
each first-frame part is assigned its argmax counterpart: attention
weights are pulled from a configured block at the first sufficiently
noisy timestep, head-averaged, restricted to the two frames' tokens,
row-renormalized, aggregated over each part's token set by arithmetic
mean, and reduced by an independent per-part argmax (ties to the lowest
candidate; the assignment need not be injective).

The reference policy reads block 27 at timesteps above 975; for shallow
toy models it scales to the deepest block and the top 5% of the schedule.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, PolicyError

REFERENCE_BLOCK_ID = 27
REFERENCE_TIMESTEP_THRESHOLD = 975.0


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """Raw attention weights captured during one block's forward pass.

    weights is (heads, n_q, n_k); single-head models record a length-1
    head axis.
    """

    block_id: int
    timestep: float
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Head-averaged, row-normalized attention between two frames."""

    weights: np.ndarray
    query_frame: int = 0
    key_frame: int = 0
    block_id: int = 0
    timestep: float = 0.0
    head_averaged: bool = True

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.size == 0:
            raise DimensionError(f"attention map must be 2-D and non-empty, got {w.shape}")
        sums = w.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise DomainError("attention map rows must sum to 1 within 1e-6")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class MatchPolicy:
    """Where to read attention from: which block, which timesteps."""

    block_id: int = REFERENCE_BLOCK_ID
    timestep_threshold: float = REFERENCE_TIMESTEP_THRESHOLD
    aggregation: str = "mean"
    timestep_reduction: str = "first"  # "first" | "mean" over qualifying steps

    def __post_init__(self) -> None:
        if self.aggregation != "mean":
            raise DomainError(f"unsupported aggregation {self.aggregation!r}")
        if self.timestep_reduction not in ("first", "mean"):
            raise DomainError(f"unsupported reduction {self.timestep_reduction!r}")

    def resolve(self, n_blocks: int, max_timestep: float) -> "MatchPolicy":
        """Clamp the policy to a concrete model and schedule.

        Shallow models use their deepest block; short schedules use the
        first 5% of their range as the qualifying window.
        """
        block = self.block_id if self.block_id < n_blocks else n_blocks - 1
        threshold = self.timestep_threshold
        if threshold >= max_timestep:
            threshold = 0.95 * max_timestep
        return replace(self, block_id=block, timestep_threshold=threshold)


@dataclass(frozen=True)
class PartMatch:
    j: int
    j_prime: int
    confidence: float


@dataclass
class PartAssignment:
    """Per-frame mapping from first-frame part index to matched part index."""

    frames: dict[int, list[PartMatch]] = field(default_factory=dict)

    def mapping(self, frame: int) -> dict[int, int]:
        return {m.j: m.j_prime for m in self.frames.get(frame, [])}


def _weight_matrix(attn) -> np.ndarray:
    if isinstance(attn, AttentionMap):
        return attn.weights
    w = np.asarray(attn, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"attention weights must be 2-D, got {w.shape}")
    return w


def extract_attention(
    records: Iterable[AttentionRecord],
    policy: MatchPolicy,
    frame0_tokens: np.ndarray,
    frame_i_tokens: np.ndarray,
    query_frame: int = 0,
    key_frame: int = 1,
    n_blocks: int | None = None,
    max_timestep: float | None = None,
) -> AttentionMap:
    """Select, head-average, restrict, and renormalize recorded attention.

    records must be in execution order. With the default "first"
    reduction the first qualifying record (matching block, timestep above
    threshold) is used; "mean" averages all qualifying records. Rows are
    renormalized after restriction to the two frames' token sets.
    """
    if n_blocks is not None and max_timestep is not None:
        policy = policy.resolve(n_blocks, max_timestep)
    frame0_tokens = np.asarray(frame0_tokens, dtype=np.int64)
    frame_i_tokens = np.asarray(frame_i_tokens, dtype=np.int64)
    if frame0_tokens.size == 0 or frame_i_tokens.size == 0:
        raise DomainError("token index sets must be non-empty")

    qualifying = []
    for rec in records:
        if rec.block_id == policy.block_id and rec.timestep > policy.timestep_threshold:
            qualifying.append(rec)
            if policy.timestep_reduction == "first":
                break
    if not qualifying:
        raise PolicyError(
            f"no attention recorded for block {policy.block_id} above "
            f"timestep {policy.timestep_threshold}"
        )

    maps = []
    for rec in qualifying:
        w = np.asarray(rec.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.ndim != 3:
            raise DimensionError(f"recorded weights must be (heads, n_q, n_k), got {w.shape}")
        maps.append(w.mean(axis=0))
    averaged = maps[0] if len(maps) == 1 else np.mean(maps, axis=0)

    sub = averaged[np.ix_(frame0_tokens, frame_i_tokens)]
    sums = sub.sum(axis=1, keepdims=True)
    if np.any(sums <= 0.0):
        raise DomainError("a query row has no attention mass on the key frame")
    used = qualifying[0]
    return AttentionMap(
        weights=sub / sums,
        query_frame=query_frame,
        key_frame=key_frame,
        block_id=used.block_id,
        timestep=used.timestep,
        head_averaged=True,
    )


def mean_mask_attention(attn, q_tokens, k_tokens) -> float:
    """Mean attention weight over the product of two token index sets."""
    w = _weight_matrix(attn)
    q = np.asarray(q_tokens, dtype=np.int64)
    k = np.asarray(k_tokens, dtype=np.int64)
    if q.size == 0 or k.size == 0:
        raise DomainError("token sets must be non-empty")
    for name, idx, bound in (("query", q, w.shape[0]), ("key", k, w.shape[1])):
        if idx.min() < 0 or idx.max() >= bound:
            raise DomainError(f"{name} token indices leave [0, {bound})")
    return float(w[np.ix_(q, k)].mean())


def match_parts(
    attn,
    parts0: Sequence[np.ndarray],
    parts_i: Sequence[np.ndarray],
) -> list[PartMatch]:
    """Assign each first-frame part to its argmax counterpart.

    Scores are mean attention over the token-set product; ties break
    toward the lowest candidate index. Two first-frame parts may map to
    the same counterpart.
    """
    if not len(parts0) or not len(parts_i):
        raise DomainError("part lists must be non-empty")
    w = _weight_matrix(attn)
    matches = []
    for j, q_tokens in enumerate(parts0):
        scores = np.array(
            [mean_mask_attention(w, q_tokens, k_tokens) for k_tokens in parts_i]
        )
        j_prime = int(np.argmax(scores))
        matches.append(PartMatch(j=j, j_prime=j_prime, confidence=float(scores[j_prime])))
    return matches


def save_assignment(path: str | Path, assignment: PartAssignment, seed: int | None = None) -> None:
    doc = {
        "seed": seed,
        "frames": {
            str(frame): [
                {"j": m.j, "j_prime": m.j_prime, "confidence": m.confidence}
                for m in matches
            ]
            for frame, matches in sorted(assignment.frames.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_assignment(path: str | Path) -> PartAssignment:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    frames = {}
    for key, matches in doc.get("frames", {}).items():
        frames[int(key)] = [
            PartMatch(j=int(m["j"]), j_prime=int(m["j_prime"]),
                      confidence=float(m["confidence"]))
            for m in matches
        ]
    return PartAssignment(frames=frames)
