"""Toy diffusion-transformer forward path.

Latents are dense (frames, height, width, channels) arrays produced by a
deterministic strided average-pool encoder. A pose condition is merged
into the latent by one of three injection strategies (channel concat,
MLP residual, width concat), the result is patchified into tokens, and a
stack of pre-norm transformer blocks (self-attention, a single-vector
conditioning cross-attention, an optional part-aware temporal coherence
residual, MLP) maps tokens to a noise prediction of the latent's shape.

The part-aware layer runs cross-attention from each frame's part tokens
back to the matched part's tokens in frame 0 and adds the result only at
the selected positions; it carries a hand-written backward pass so its
gradients can be checked against finite differences (float64 required).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .maskgeom import Mask, token_footprint
from .matching import AttentionRecord
from .tensorops import matmul, require_finite, scaled_dot_attention, load_tensor, save_tensor


# --------------------------------------------------------------------------
# Latents
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VideoLatent:
    """Dense latent with axes (frames, height, width, channels)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise DimensionError(f"latent must be 4-D (F, H, W, C), got {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"latent axes must all be >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


def encode_latent(frames: np.ndarray, stride: int) -> VideoLatent:
    """Average-pool stand-in for a learned video encoder.

    frames: (F, H, W) or (F, H, W, C). Spatial dims not divisible by the
    stride are edge-padded first. Linear and deterministic.
    """
    arr = np.asarray(frames, dtype=np.float64 if np.asarray(frames).dtype.kind != "f" else None)
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise DimensionError(f"frames must be (F, H, W[, C]), got {np.asarray(frames).shape}")
    if arr.shape[0] < 1 or arr.size == 0:
        raise DomainError("no frames to encode")
    if stride < 1:
        raise DomainError("stride must be >= 1")
    f, h, w, c = arr.shape
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    h2, w2 = arr.shape[1], arr.shape[2]
    blocks = arr.reshape(f, h2 // stride, stride, w2 // stride, stride, c)
    pooled = blocks.mean(axis=(2, 4))
    return VideoLatent(pooled)


def align_condition_frames(zp: VideoLatent, frames: int) -> VideoLatent:
    """Pad a condition latent to the target frame count.

    A condition one frame short (the reference frame is prepended to the
    main latent elsewhere) is front-padded with a repeat of its first
    frame; any other mismatch is an error.
    """
    if zp.frames == frames:
        return zp
    if zp.frames == frames - 1:
        padded = np.concatenate([zp.data[:1], zp.data], axis=0)
        return VideoLatent(padded)
    raise DimensionError(
        f"condition has {zp.frames} frames; expected {frames} or {frames - 1}"
    )


def prepend_reference(reference: VideoLatent, noise: VideoLatent) -> VideoLatent:
    """Concatenate a one-frame reference latent ahead of a noise latent."""
    if reference.data.shape[1:] != noise.data.shape[1:]:
        raise DimensionError(
            f"reference {reference.data.shape} and noise {noise.data.shape} disagree"
        )
    return VideoLatent(np.concatenate([reference.data, noise.data], axis=0))


# --------------------------------------------------------------------------
# Injection strategies
# --------------------------------------------------------------------------


def inject_channel_concat(z0: VideoLatent, zp: VideoLatent) -> VideoLatent:
    """Stack condition channels after the latent's own channels."""
    if z0.data.shape[:3] != zp.data.shape[:3]:
        raise DimensionError(
            f"non-channel axes differ: {z0.data.shape} vs {zp.data.shape}"
        )
    return VideoLatent(np.concatenate([z0.data, zp.data], axis=3))


@dataclass
class MlpWeights:
    """Two linear layers with a ReLU between them."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _mlp_apply(x: np.ndarray, w: MlpWeights, activation: str = "relu") -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1])
    hidden = matmul(flat, w.w1) + w.b1
    if activation == "relu":
        hidden = np.maximum(hidden, 0.0)
    elif activation == "gelu":
        hidden = _gelu(hidden)
    else:
        raise DomainError(f"unknown activation {activation!r}")
    out = matmul(hidden, w.w2) + w.b2
    return out.reshape(x.shape[:-1] + (out.shape[-1],))


def inject_mlp_add(z0: VideoLatent, zp: VideoLatent, weights: MlpWeights) -> VideoLatent:
    """Map the condition through a small MLP and add it to the latent."""
    mapped = _mlp_apply(zp.data, weights, activation="relu")
    if mapped.shape != z0.data.shape:
        raise DimensionError(
            f"MLP output shape {mapped.shape} does not match latent {z0.data.shape}"
        )
    return VideoLatent(z0.data + mapped)


def inject_width_concat(z0: VideoLatent, zp: VideoLatent) -> VideoLatent:
    """Place the condition to the right of the latent along the width axis."""
    shape0 = z0.data.shape
    shapep = zp.data.shape
    if (shape0[0], shape0[1], shape0[3]) != (shapep[0], shapep[1], shapep[3]):
        raise DimensionError(f"non-width axes differ: {shape0} vs {shapep}")
    return VideoLatent(np.concatenate([z0.data, zp.data], axis=2))


# --------------------------------------------------------------------------
# Patchify
# --------------------------------------------------------------------------


@dataclass
class PatchifyConfig:
    """Non-overlapping patch extraction plus a linear projection (no bias)."""

    p_f: int
    p_h: int
    p_w: int
    width: int
    weight: np.ndarray  # (p_f * p_h * p_w * in_channels, width)

    def __post_init__(self) -> None:
        if min(self.p_f, self.p_h, self.p_w) < 1:
            raise DomainError("patch sizes must be >= 1")
        if self.width < 1:
            raise DomainError("token width must be >= 1")
        if self.weight.ndim != 2 or self.weight.shape[1] != self.width:
            raise DimensionError(
                f"projection weight {self.weight.shape} inconsistent with width {self.width}"
            )

    @property
    def in_channels(self) -> int:
        voxels = self.p_f * self.p_h * self.p_w
        if self.weight.shape[0] % voxels != 0:
            raise DimensionError("projection rows are not a multiple of the patch volume")
        return self.weight.shape[0] // voxels


def patchify(z: VideoLatent, cfg: PatchifyConfig) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Flatten non-overlapping patches and project them to tokens.

    Token order is row-major over (frame patches, height patches, width
    patches). Latent dims are zero-padded up to patch multiples. Returns
    (tokens, (f, h, w)) with tokens shaped (f*h*w, width).
    """
    if z.channels != cfg.in_channels:
        raise DimensionError(
            f"projection sized for {cfg.in_channels} channels, latent has {z.channels}"
        )
    arr = z.data
    pad_f = (-arr.shape[0]) % cfg.p_f
    pad_h = (-arr.shape[1]) % cfg.p_h
    pad_w = (-arr.shape[2]) % cfg.p_w
    if pad_f or pad_h or pad_w:
        arr = np.pad(arr, ((0, pad_f), (0, pad_h), (0, pad_w), (0, 0)))
    f = arr.shape[0] // cfg.p_f
    h = arr.shape[1] // cfg.p_h
    w = arr.shape[2] // cfg.p_w
    c = arr.shape[3]
    patches = arr.reshape(f, cfg.p_f, h, cfg.p_h, w, cfg.p_w, c)
    patches = patches.transpose(0, 2, 4, 1, 3, 5, 6).reshape(f * h * w, -1)
    tokens = matmul(patches, cfg.weight)
    return tokens, (f, h, w)


def unpatchify(
    vox: np.ndarray,
    grid: tuple[int, int, int],
    patch: tuple[int, int, int],
    out_shape: tuple[int, int, int, int],
) -> VideoLatent:
    """Inverse of the patch layout: tokens-as-voxels back to a latent.

    vox holds one flattened patch per token; padding introduced by
    patchify is cropped away to recover out_shape.
    """
    f, h, w = grid
    p_f, p_h, p_w = patch
    channels = out_shape[3]
    expected = p_f * p_h * p_w * channels
    if vox.ndim != 2 or vox.shape != (f * h * w, expected):
        raise DimensionError(
            f"voxel array {vox.shape} inconsistent with grid {grid} and patch {patch}"
        )
    full = vox.reshape(f, h, w, p_f, p_h, p_w, channels)
    full = full.transpose(0, 3, 1, 4, 2, 5, 6).reshape(f * p_f, h * p_h, w * p_w, channels)
    cropped = full[: out_shape[0], : out_shape[1], : out_shape[2], :]
    return VideoLatent(cropped)


# --------------------------------------------------------------------------
# Transformer pieces
# --------------------------------------------------------------------------


def layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class BlockWeights:
    self_attn: AttentionWeights
    cross_attn: AttentionWeights
    ptcm: AttentionWeights
    mlp: MlpWeights


@dataclass
class DitWeights:
    patch_proj: np.ndarray
    out_proj: np.ndarray
    blocks: list[BlockWeights]
    inject_mlp: MlpWeights | None = None


# --------------------------------------------------------------------------
# Part-aware temporal coherence layer
# --------------------------------------------------------------------------


@dataclass
class _PairCache:
    q_idx: np.ndarray
    kv_idx: np.ndarray
    xq: np.ndarray
    xkv: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    p: np.ndarray
    out: np.ndarray


@dataclass
class PtcmCache:
    x_shape: tuple[int, ...]
    x0_shape: tuple[int, ...]
    weights: AttentionWeights
    pairs: list[_PairCache] = field(default_factory=list)


@dataclass
class PtcmGrads:
    x: np.ndarray
    x0: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


def ptcm_forward(
    x: np.ndarray,
    x0: np.ndarray,
    parts_i: Sequence[np.ndarray],
    parts0: Sequence[np.ndarray],
    assignment: Mapping[int, int],
    weights: AttentionWeights,
    return_cache: bool = False,
):
    """Part-matched cross-attention residual for one frame.

    For each first-frame part j matched to frame part assignment[j],
    queries come from this frame's tokens under the matched part's
    footprint and keys/values from frame 0's tokens under part j. The
    attention output (through the output projection) is added only at the
    query token positions; all other tokens pass through bit-identical.
    Pairs with an empty footprint on either side are skipped.
    """
    x = np.asarray(x)
    x0 = np.asarray(x0)
    if x.ndim != 2 or x0.ndim != 2 or x.shape[1] != x0.shape[1]:
        raise DimensionError(f"token widths differ: {x.shape} vs {x0.shape}")
    out = x.copy()
    cache = PtcmCache(x_shape=x.shape, x0_shape=x0.shape, weights=weights)
    for j in sorted(assignment):
        j_prime = assignment[j]
        if j < 0 or j >= len(parts0) or j_prime < 0 or j_prime >= len(parts_i):
            raise DomainError(
                f"assignment {j} -> {j_prime} references an unknown part index"
            )
        q_idx = np.asarray(parts_i[j_prime], dtype=np.int64)
        kv_idx = np.asarray(parts0[j], dtype=np.int64)
        if q_idx.size == 0 or kv_idx.size == 0:
            continue
        xq = x[q_idx]
        xkv = x0[kv_idx]
        q = matmul(xq, weights.w_q)
        k = matmul(xkv, weights.w_k)
        v = matmul(xkv, weights.w_v)
        attn_out, p = scaled_dot_attention(q, k, v)
        out[q_idx] += matmul(attn_out, weights.w_o)
        if return_cache:
            cache.pairs.append(
                _PairCache(q_idx=q_idx, kv_idx=kv_idx, xq=xq, xkv=xkv,
                           q=q, k=k, v=v, p=p, out=attn_out)
            )
    if return_cache:
        return out, cache
    return out


def ptcm_backward(upstream: np.ndarray, cache: PtcmCache) -> PtcmGrads:
    """Analytic gradients of the part-attention residual.

    upstream is dL/d(output tokens) for the frame the cache was built on.
    Returns gradients for the frame tokens, the frame-0 tokens, and the
    four projection matrices.
    """
    upstream = np.asarray(upstream)
    if upstream.shape != cache.x_shape:
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match cached {cache.x_shape}"
        )
    w = cache.weights
    d = cache.x_shape[1]
    scale = 1.0 / np.sqrt(float(d))
    dx = upstream.astype(np.float64).copy()
    dx0 = np.zeros(cache.x0_shape, dtype=np.float64)
    dw_q = np.zeros_like(np.asarray(w.w_q, dtype=np.float64))
    dw_k = np.zeros_like(dw_q)
    dw_v = np.zeros_like(dw_q)
    dw_o = np.zeros_like(dw_q)
    for pair in cache.pairs:
        g = upstream[pair.q_idx].astype(np.float64)  # grad of the residual delta
        dw_o += matmul(pair.out.T, g)
        d_out = matmul(g, np.asarray(w.w_o).T)
        dp = matmul(d_out, pair.v.T)
        dv = matmul(pair.p.T, d_out)
        # softmax backward, rows independent
        ds = pair.p * (dp - (dp * pair.p).sum(axis=1, keepdims=True))
        ds_raw = ds * scale
        dq = matmul(ds_raw, pair.k)
        dk = matmul(ds_raw.T, pair.q)
        dw_q += matmul(pair.xq.T, dq)
        dx[pair.q_idx] += matmul(dq, np.asarray(w.w_q).T)
        dw_k += matmul(pair.xkv.T, dk)
        dw_v += matmul(pair.xkv.T, dv)
        dx0_contrib = matmul(dk, np.asarray(w.w_k).T) + matmul(dv, np.asarray(w.w_v).T)
        np.add.at(dx0, pair.kv_idx, dx0_contrib)
    return PtcmGrads(x=dx, x0=dx0, w_q=dw_q, w_k=dw_k, w_v=dw_v, w_o=dw_o)


@dataclass
class PtcmInputs:
    """Token-space part footprints and matches for a whole clip.

    parts0 indexes into frame 0's tokens; parts_by_frame and assignments
    are keyed by frame index (frame 0 itself is never modified).
    """

    parts0: list[np.ndarray]
    parts_by_frame: dict[int, list[np.ndarray]]
    assignments: dict[int, dict[int, int]]


def token_index_sets(
    part_masks: Sequence[Mask], patch_h: int, patch_w: int, rho: float = 0.5
) -> list[np.ndarray]:
    """Flatten each part mask's token footprint into token indices."""
    sets = []
    for m in part_masks:
        footprint = token_footprint(m, patch_h, patch_w, rho)
        sets.append(np.flatnonzero(footprint.ravel()))
    return sets


def _apply_ptcm(x, grid, inputs: PtcmInputs, weights: AttentionWeights):
    f, h, w = grid
    hw = h * w
    x0 = x[:hw]
    out = x.copy()
    for i in sorted(inputs.assignments):
        if i <= 0 or i >= f:
            raise DomainError(f"part assignment on frame {i} outside 1..{f - 1}")
        parts_i = inputs.parts_by_frame.get(i, [])
        sl = slice(i * hw, (i + 1) * hw)
        out[sl] = ptcm_forward(
            x[sl], x0, parts_i, inputs.parts0, inputs.assignments[i], weights
        )
    return out


# --------------------------------------------------------------------------
# Blocks and the full model
# --------------------------------------------------------------------------


def dit_block_forward(
    tokens: np.ndarray,
    cond_tokens: np.ndarray,
    weights: BlockWeights,
    ptcm_inputs: PtcmInputs | None = None,
    grid: tuple[int, int, int] | None = None,
    record: list | None = None,
    block_id: int = 0,
    timestep: float = 0.0,
) -> np.ndarray:
    """One pre-norm transformer block.

    Order: self-attention residual, conditioning cross-attention residual,
    part-aware residual (when inputs are supplied), MLP residual.
    """
    x = np.asarray(tokens)
    if x.ndim != 2:
        raise DimensionError(f"tokens must be 2-D, got {x.shape}")
    d = x.shape[1]
    for name, w in (("self", weights.self_attn), ("cross", weights.cross_attn)):
        if w.w_q.shape != (d, d):
            raise DimensionError(f"{name}-attention weights sized {w.w_q.shape}, want ({d}, {d})")

    h = layer_norm(x)
    sa_out, sa_weights = scaled_dot_attention(
        matmul(h, weights.self_attn.w_q),
        matmul(h, weights.self_attn.w_k),
        matmul(h, weights.self_attn.w_v),
    )
    if record is not None:
        record.append(
            AttentionRecord(block_id=block_id, timestep=timestep, weights=sa_weights[None])
        )
    x = x + matmul(sa_out, weights.self_attn.w_o)

    h = layer_norm(x)
    ca_out, _ = scaled_dot_attention(
        matmul(h, weights.cross_attn.w_q),
        matmul(cond_tokens, weights.cross_attn.w_k),
        matmul(cond_tokens, weights.cross_attn.w_v),
    )
    x = x + matmul(ca_out, weights.cross_attn.w_o)

    if ptcm_inputs is not None and ptcm_inputs.assignments:
        if grid is None:
            raise DomainError("part-aware residual needs the token grid")
        x = _apply_ptcm(x, grid, ptcm_inputs, weights.ptcm)

    h = layer_norm(x)
    x = x + _mlp_apply(h, weights.mlp, activation="gelu")
    return x


@dataclass
class ModelConfig:
    """Shape of the toy denoiser."""

    d: int
    blocks: int
    patch: tuple[int, int, int]
    strategy: str = "channel"
    channels: int = 4
    mlp_hidden: int | None = None
    inject_hidden: int | None = None
    ptcm_blocks: tuple[int, ...] | None = None  # None means every block

    def __post_init__(self) -> None:
        if self.strategy not in ("channel", "mlp", "width"):
            raise DomainError(f"unknown injection strategy {self.strategy!r}")
        if self.d < 1 or self.blocks < 1:
            raise DomainError("model width and depth must be >= 1")
        self.patch = tuple(int(p) for p in self.patch)
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise DomainError(f"patch must be three sizes >= 1, got {self.patch}")

    @property
    def in_channels(self) -> int:
        return 2 * self.channels if self.strategy == "channel" else self.channels

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "blocks": self.blocks,
            "patch": list(self.patch),
            "strategy": self.strategy,
            "channels": self.channels,
            "mlp_hidden": self.mlp_hidden,
            "inject_hidden": self.inject_hidden,
            "ptcm_blocks": list(self.ptcm_blocks) if self.ptcm_blocks is not None else None,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ModelConfig":
        try:
            return cls(
                d=int(doc["d"]),
                blocks=int(doc["blocks"]),
                patch=tuple(doc["patch"]),
                strategy=doc.get("strategy", "channel"),
                channels=int(doc.get("channels", 4)),
                mlp_hidden=doc.get("mlp_hidden"),
                inject_hidden=doc.get("inject_hidden"),
                ptcm_blocks=tuple(doc["ptcm_blocks"]) if doc.get("ptcm_blocks") else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad model config: {exc}") from exc


def init_weights(
    config: ModelConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    zero_residual: bool = False,
) -> DitWeights:
    """Seeded random weights; zero_residual zeroes every residual-branch
    output projection, which makes the whole model the identity map."""
    d = config.d
    sd = 1.0 / np.sqrt(d)

    def mat(rows, cols, scale=sd):
        return (rng.standard_normal((rows, cols)) * scale).astype(dtype)

    def attn():
        w_o = np.zeros((d, d), dtype=dtype) if zero_residual else mat(d, d)
        return AttentionWeights(w_q=mat(d, d), w_k=mat(d, d), w_v=mat(d, d), w_o=w_o)

    hidden = config.mlp_hidden or 4 * d
    voxels = config.patch[0] * config.patch[1] * config.patch[2]
    blocks = []
    for _ in range(config.blocks):
        w2 = np.zeros((hidden, d), dtype=dtype) if zero_residual else mat(hidden, d)
        mlp = MlpWeights(
            w1=mat(d, hidden),
            b1=np.zeros(hidden, dtype=dtype),
            w2=w2,
            b2=np.zeros(d, dtype=dtype),
        )
        blocks.append(
            BlockWeights(self_attn=attn(), cross_attn=attn(), ptcm=attn(), mlp=mlp)
        )
    inject = None
    if config.strategy == "mlp":
        ih = config.inject_hidden or config.channels
        inject = MlpWeights(
            w1=mat(config.channels, ih, scale=1.0 / np.sqrt(config.channels)),
            b1=np.zeros(ih, dtype=dtype),
            w2=np.zeros((ih, config.channels), dtype=dtype),
            b2=np.zeros(config.channels, dtype=dtype),
        )
    return DitWeights(
        patch_proj=mat(voxels * config.in_channels, d, scale=1.0 / np.sqrt(voxels * config.in_channels)),
        out_proj=mat(d, voxels * config.channels),
        blocks=blocks,
        inject_mlp=inject,
    )


class DitModel:
    """Token transformer over injected latents, predicting latent noise."""

    def __init__(self, config: ModelConfig, weights: DitWeights):
        if len(weights.blocks) != config.blocks:
            raise DimensionError(
                f"{len(weights.blocks)} block weight sets for depth {config.blocks}"
            )
        if config.strategy == "mlp" and weights.inject_mlp is None:
            raise DomainError("mlp strategy requires injection MLP weights")
        self.config = config
        self.weights = weights
        self._patch_cfg = PatchifyConfig(
            p_f=config.patch[0],
            p_h=config.patch[1],
            p_w=config.patch[2],
            width=config.d,
            weight=weights.patch_proj,
        )

    def _ptcm_block_ids(self) -> set[int]:
        if self.config.ptcm_blocks is None:
            return set(range(self.config.blocks))
        return set(self.config.ptcm_blocks)

    def inject(self, z: VideoLatent, cond: VideoLatent | None) -> VideoLatent:
        """Merge the condition into the latent per the configured strategy."""
        if cond is None:
            cond = VideoLatent(np.zeros_like(z.data))
        cond = align_condition_frames(cond, z.frames)
        if self.config.strategy == "channel":
            return inject_channel_concat(z, cond)
        if self.config.strategy == "mlp":
            return inject_mlp_add(z, cond, self.weights.inject_mlp)
        return inject_width_concat(z, cond)

    def forward_tokens(
        self,
        z_in: VideoLatent,
        ptcm_inputs: PtcmInputs | None = None,
        record: list | None = None,
        timestep: float = 0.0,
        cond_tokens: np.ndarray | None = None,
    ) -> tuple[np.ndarray, tuple[int, int, int]]:
        tokens, grid = patchify(z_in, self._patch_cfg)
        if cond_tokens is None:
            cond_tokens = np.zeros((1, self.config.d), dtype=tokens.dtype)
        ptcm_ids = self._ptcm_block_ids()
        for b, bw in enumerate(self.weights.blocks):
            tokens = dit_block_forward(
                tokens,
                cond_tokens,
                bw,
                ptcm_inputs=ptcm_inputs if b in ptcm_ids else None,
                grid=grid,
                record=record,
                block_id=b,
                timestep=timestep,
            )
        return tokens, grid

    def epsilon(
        self,
        z: VideoLatent,
        timestep: float = 0.0,
        cond: VideoLatent | None = None,
        ptcm_inputs: PtcmInputs | None = None,
        record: list | None = None,
    ) -> VideoLatent:
        """Noise prediction with the same shape as the input latent."""
        z_in = self.inject(z, cond)
        tokens, grid = self.forward_tokens(
            z_in, ptcm_inputs=ptcm_inputs, record=record, timestep=timestep
        )
        vox = matmul(tokens, self.weights.out_proj)
        padded_shape = (z_in.frames, z_in.height, z_in.width, self.config.channels)
        eps = unpatchify(vox, grid, self.config.patch, padded_shape)
        if self.config.strategy == "width":
            eps = VideoLatent(eps.data[:, :, : z.width, :])
        require_finite("noise prediction", eps.data)
        return eps


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def ptcm_gradient_check(
    seed: int,
    d: int = 8,
    n_parts: int = 2,
    tokens_per_frame: int = 16,
    eps: float = 1e-4,
    include_inputs: bool = False,
) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients.

    Builds a seeded float64 fixture (two token frames, disjoint part
    footprints, a random part assignment, a random upstream direction),
    runs the hand-written backward, and compares each projection matrix
    against the finite-difference oracle. Returns a name -> relative
    error map; errors are Frobenius-normalized.
    """
    from .rng import make_rng
    from .tensorops import finite_diff_grad

    rng = make_rng(seed, stream=17)
    x = rng.standard_normal((tokens_per_frame, d))
    x0 = rng.standard_normal((tokens_per_frame, d))
    perm = rng.permutation(tokens_per_frame)
    chunks = np.array_split(perm, n_parts)
    parts_i = [np.sort(c) for c in chunks]
    perm0 = rng.permutation(tokens_per_frame)
    parts0 = [np.sort(c) for c in np.array_split(perm0, n_parts)]
    assignment = {j: int(p) for j, p in enumerate(rng.permutation(n_parts))}
    weights = AttentionWeights(
        w_q=rng.standard_normal((d, d)) / np.sqrt(d),
        w_k=rng.standard_normal((d, d)) / np.sqrt(d),
        w_v=rng.standard_normal((d, d)) / np.sqrt(d),
        w_o=rng.standard_normal((d, d)) / np.sqrt(d),
    )
    upstream = rng.standard_normal((tokens_per_frame, d))

    def loss_with(**overrides) -> float:
        w = AttentionWeights(
            w_q=overrides.get("w_q", weights.w_q),
            w_k=overrides.get("w_k", weights.w_k),
            w_v=overrides.get("w_v", weights.w_v),
            w_o=overrides.get("w_o", weights.w_o),
        )
        out = ptcm_forward(
            overrides.get("x", x), overrides.get("x0", x0),
            parts_i, parts0, assignment, w,
        )
        return float((out * upstream).sum())

    _, cache = ptcm_forward(x, x0, parts_i, parts0, assignment, weights, return_cache=True)
    grads = ptcm_backward(upstream, cache)

    def rel(analytic: np.ndarray, name: str) -> float:
        numeric = finite_diff_grad(
            lambda w: loss_with(**{name: w}), getattr(weights, name), eps
        )
        denom = max(float(np.linalg.norm(numeric)), 1e-12)
        return float(np.linalg.norm(analytic - numeric) / denom)

    report = {
        "w_q": rel(grads.w_q, "w_q"),
        "w_k": rel(grads.w_k, "w_k"),
        "w_v": rel(grads.w_v, "w_v"),
        "w_o": rel(grads.w_o, "w_o"),
    }
    if include_inputs:
        # The residual identity path contributes upstream directly to dx.
        numeric_x = finite_diff_grad(lambda a: loss_with(x=a), x, eps)
        numeric_x0 = finite_diff_grad(lambda a: loss_with(x0=a), x0, eps)
        report["x"] = float(
            np.linalg.norm(grads.x - numeric_x) / max(np.linalg.norm(numeric_x), 1e-12)
        )
        report["x0"] = float(
            np.linalg.norm(grads.x0 - numeric_x0) / max(np.linalg.norm(numeric_x0), 1e-12)
        )
    return report


# --------------------------------------------------------------------------
# Checkpoints: a directory of tensor files plus a JSON index
# --------------------------------------------------------------------------


def _named_tensors(weights: DitWeights) -> dict[str, np.ndarray]:
    out = {"patch_proj": weights.patch_proj, "out_proj": weights.out_proj}
    if weights.inject_mlp is not None:
        for k in ("w1", "b1", "w2", "b2"):
            out[f"inject.{k}"] = getattr(weights.inject_mlp, k)
    for i, bw in enumerate(weights.blocks):
        for group, aw in (("self_attn", bw.self_attn), ("cross_attn", bw.cross_attn), ("ptcm", bw.ptcm)):
            for k in ("w_q", "w_k", "w_v", "w_o"):
                out[f"block{i:03d}.{group}.{k}"] = getattr(aw, k)
        for k in ("w1", "b1", "w2", "b2"):
            out[f"block{i:03d}.mlp.{k}"] = getattr(bw.mlp, k)
    return out


def save_checkpoint(directory: str | Path, config: ModelConfig, weights: DitWeights) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = _named_tensors(weights)
    index = {"config": config.to_json_dict(), "tensors": {}}
    for name, arr in tensors.items():
        fname = name.replace(".", "_") + ".patn"
        save_tensor(directory / fname, arr)
        index["tensors"][name] = fname
    (directory / "index.json").write_text(json.dumps(index, indent=2), encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[ModelConfig, DitWeights]:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory}: unreadable checkpoint index") from exc
    config = ModelConfig.from_json_dict(index["config"])
    files = index["tensors"]

    def get(name):
        try:
            return load_tensor(directory / files[name])
        except KeyError as exc:
            raise FormatError(f"{directory}: checkpoint missing tensor {name}") from exc

    inject = None
    if config.strategy == "mlp":
        inject = MlpWeights(
            w1=get("inject.w1"), b1=get("inject.b1"),
            w2=get("inject.w2"), b2=get("inject.b2"),
        )
    blocks = []
    for i in range(config.blocks):
        prefix = f"block{i:03d}"
        groups = {}
        for group in ("self_attn", "cross_attn", "ptcm"):
            groups[group] = AttentionWeights(
                w_q=get(f"{prefix}.{group}.w_q"),
                w_k=get(f"{prefix}.{group}.w_k"),
                w_v=get(f"{prefix}.{group}.w_v"),
                w_o=get(f"{prefix}.{group}.w_o"),
            )
        mlp = MlpWeights(
            w1=get(f"{prefix}.mlp.w1"), b1=get(f"{prefix}.mlp.b1"),
            w2=get(f"{prefix}.mlp.w2"), b2=get(f"{prefix}.mlp.b2"),
        )
        blocks.append(BlockWeights(self_attn=groups["self_attn"],
                                   cross_attn=groups["cross_attn"],
                                   ptcm=groups["ptcm"], mlp=mlp))
    weights = DitWeights(
        patch_proj=get("patch_proj"), out_proj=get("out_proj"),
        blocks=blocks, inject_mlp=inject,
    )
    return config, weights
