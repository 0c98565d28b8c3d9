"""Batch command-line interface.

One subcommand per capability: curate, partmask, match, sample,
sparsemask, eval, gradcheck, stats. Exit codes: 0 success, 1 domain or
I/O error, 2 usage error. Diagnostics go to stderr; data goes to files
and stdout. Every result file echoes the seed it was produced with
(null when the command is deterministic without one), and any
subcommand with --seed is byte-reproducible.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import curation, guidance, maskgeom, matching, metrics
from .dit import DitModel, ModelConfig, VideoLatent, init_weights, load_checkpoint, ptcm_gradient_check
from .errors import DomainError, FormatError, PosekitError
from .rng import make_rng
from .tensorops import load_tensor, save_tensor


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posekit",
        description="Pose-conditioned video diffusion mechanisms: curation, part masks, matching, sampling, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="run the three-stage dataset curation pipeline")
    p.add_argument("--manifest", required=True, help="input JSONL of video records")
    p.add_argument("--out", required=True, help="output JSONL of decisions")
    p.add_argument("--lo", type=float, default=0.2)
    p.add_argument("--hi", type=float, default=0.8)
    p.add_argument("--skel-threshold", type=float, default=0.8)
    p.add_argument("--require-tag", action="append", default=[], metavar="TAG")
    p.add_argument("--forbid-tag", action="append", default=[], metavar="TAG")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("partmask", help="grow per-part masks from a skeleton and subject mask")
    p.add_argument("--skeleton", required=True)
    p.add_argument("--subject", required=True, help="subject mask PGM")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha-cap", type=int, default=100)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--element", choices=["square", "disk"], default="square")

    p = sub.add_parser("match", help="match parts by aggregated attention")
    p.add_argument("--attn", required=True, help="attention weights tensor file")
    p.add_argument("--parts0", required=True, help="JSON list of first-frame token index lists")
    p.add_argument("--partsi", required=True, help="JSON list of current-frame token index lists")
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int, default=1)

    p = sub.add_parser("sample", help="run the guided denoising loop")
    p.add_argument("--config", required=True, help="sampler config JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output latent tensor file")
    p.add_argument("--camera-dir", choices=["left", "right", "up", "down"], default=None)
    p.add_argument("--camera-speed", type=float, default=None)
    p.add_argument("--checkpoint", default=None, help="load model weights instead of seeding them")

    p = sub.add_parser("sparsemask", help="draw a sparse pose-injection mask")
    p.add_argument("--frames", type=int, default=81)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None, help="write the draw to a JSON file instead of stdout only")

    p = sub.add_parser("eval", help="frame metrics between two directories of PGM frames")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metrics", default="psnr,ssim,l1")
    p.add_argument("--out", required=True)
    p.add_argument("--max-value", type=float, default=None, help="override the dynamic range")

    p = sub.add_parser("gradcheck", help="verify part-attention gradients against finite differences")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--parts", type=int, default=2)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default=None)

    p = sub.add_parser("stats", help="segment-count histogram over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    return parser


# --------------------------------------------------------------------------
# Subcommand implementations
# --------------------------------------------------------------------------


def _emit(doc: dict, out: str | None = None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out is not None:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _cmd_curate(args) -> int:
    manifest = Path(args.manifest)
    records = curation.read_records(manifest)
    config = curation.CurationConfig(
        lo=args.lo,
        hi=args.hi,
        skeleton_threshold=args.skel_threshold,
        required_tags=tuple(args.require_tag),
        forbidden_tags=tuple(args.forbid_tag),
        base_dir=manifest.parent,
        workers=args.workers,
    )
    result = curation.run_pipeline(records, config)
    curation.write_decisions(args.out, result.decisions)
    retained = len(result.retained_ids())
    _emit(
        {
            "seed": None,
            "total": len(result.decisions),
            "retained": retained,
            "rejected": len(result.decisions) - retained,
            "segment_histogram": {str(k): v for k, v in sorted(result.segment_histogram.items())},
            "out": str(args.out),
        }
    )
    return 0


def _cmd_partmask(args) -> int:
    subject = maskgeom.read_pgm(args.subject)
    skeletons = maskgeom.load_skeletons(args.skeleton)
    if args.frame < 0 or args.frame >= len(skeletons.frames):
        raise DomainError(f"frame {args.frame} outside the skeleton sequence")
    segments = skeletons.frames[args.frame].segments
    if not segments:
        raise DomainError(f"frame {args.frame} has no segments")
    cfg = maskgeom.PartMaskConfig(
        alpha_cap=args.alpha_cap, coverage_tau=args.tau, structuring_element=args.element
    )
    masks, alphas = maskgeom.part_masks_for_frame(subject, segments, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for j, mask in enumerate(masks):
        fname = f"part_{j:03d}.pgm"
        maskgeom.write_pgm(out_dir / fname, mask)
        files.append(fname)
    _emit(
        {"seed": None, "frame": args.frame, "alphas": alphas, "files": files},
        out=out_dir / "parts.json",
    )
    return 0


def _load_token_sets(path: str) -> list[np.ndarray]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise FormatError(f"{path}: expected a JSON array of token index lists")
    return [np.asarray(entry, dtype=np.int64) for entry in doc]


def _cmd_match(args) -> int:
    raw = load_tensor(args.attn).astype(np.float64)
    if raw.ndim == 3:  # head-stacked weights: average them
        raw = raw.mean(axis=0)
    if raw.ndim != 2:
        raise FormatError(f"{args.attn}: attention tensor must be 2-D or 3-D")
    sums = raw.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise DomainError("attention rows must have positive mass")
    attn = matching.AttentionMap(weights=raw / sums, key_frame=args.frame)
    parts0 = _load_token_sets(args.parts0)
    parts_i = _load_token_sets(args.partsi)
    matches = matching.match_parts(attn, parts0, parts_i)
    assignment = matching.PartAssignment(frames={args.frame: matches})
    matching.save_assignment(args.out, assignment, seed=None)
    _emit(
        {
            "seed": None,
            "frame": args.frame,
            "matches": [
                {"j": m.j, "j_prime": m.j_prime, "confidence": m.confidence}
                for m in matches
            ],
            "out": str(args.out),
        }
    )
    return 0


def _anchor_from_descriptor(desc, base: Path, pose_grid, latent_frames):
    if desc is None:
        return None
    if "skeleton_file" in desc:
        seq = maskgeom.load_skeletons(base / desc["skeleton_file"])
        if desc.get("static"):
            seq = guidance.build_static_pose_anchor(seq)
        return seq
    if "direction" in desc:
        rect = desc.get("rect")
        if rect is None:
            gh, gw = pose_grid
            rect = [gh // 4, gw // 4, max(gh // 2, 1), max(gw // 2, 1)]
        return guidance.build_camera_anchor(
            desc["direction"],
            float(desc.get("speed", 1.0)),
            tuple(int(v) for v in rect),
            latent_frames,
            pose_grid[0],
            pose_grid[1],
        )
    raise FormatError(f"unrecognized anchor descriptor: {desc}")


def _cmd_sample(args) -> int:
    config_path = Path(args.config)
    try:
        doc = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{config_path}: invalid JSON") from exc
    base = config_path.parent

    latent_doc = doc.get("latent", {})
    frames = int(latent_doc.get("frames", 81))
    height = int(latent_doc.get("height", 8))
    width = int(latent_doc.get("width", 8))
    channels = int(latent_doc.get("channels", 4))

    model_doc = dict(doc.get("model", {}))
    model_doc.setdefault("channels", channels)
    model_config = ModelConfig.from_json_dict(model_doc)
    if model_config.channels != channels:
        raise DomainError("model channels must match latent channels")

    if args.checkpoint:
        model_config, weights = load_checkpoint(args.checkpoint)
    else:
        weights = init_weights(model_config, make_rng(args.seed, stream=0), dtype=np.float32)
    model = DitModel(model_config, weights)

    pose_grid = tuple(int(v) for v in doc.get("pose_grid", [height * 8, width * 8]))
    if pose_grid[0] % height or pose_grid[1] % width:
        raise DomainError("pose grid must be an integer multiple of the latent grid")
    stride = pose_grid[0] // height
    if pose_grid[1] // width != stride:
        raise DomainError("pose grid must scale both axes by the same stride")

    g_doc = dict(doc.get("guidance", {}))
    subject = _anchor_from_descriptor(g_doc.get("subject_anchor"), base, pose_grid, frames)
    camera_desc = g_doc.get("camera_anchor")
    if args.camera_dir is not None:
        camera_desc = dict(camera_desc or {})
        camera_desc.pop("skeleton_file", None)
        camera_desc["direction"] = args.camera_dir
        if args.camera_speed is not None:
            camera_desc["speed"] = args.camera_speed
    elif args.camera_speed is not None:
        if camera_desc is None or "direction" not in camera_desc:
            raise DomainError("--camera-speed needs a camera direction")
        camera_desc = dict(camera_desc)
        camera_desc["speed"] = args.camera_speed
    camera = _anchor_from_descriptor(camera_desc, base, pose_grid, frames)

    g_config = guidance.GuidanceConfig(
        mode=g_doc.get("mode", "additive"),
        s=float(g_doc.get("s", 1.0)),
        s_s=float(g_doc.get("s_s", 1.0)),
        s_c=float(g_doc.get("s_c", 0.0)),
        steps=int(g_doc.get("steps", 0)),
        seed=args.seed,
        step_size=g_doc.get("step_size"),
        subject_anchor=subject,
        camera_anchor=camera,
    )

    noise = make_rng(args.seed, stream=1).standard_normal(
        (frames, height, width, channels)
    ).astype(np.float32)
    z_init = VideoLatent(noise)
    denoiser = guidance.SkeletonConditionedModel(model, pose_grid, stride)
    z_final = guidance.denoise_loop(denoiser, z_init, g_config)
    save_tensor(args.out, z_final.data)
    _emit(
        {
            "seed": args.seed,
            "out": str(args.out),
            "steps": g_config.steps,
            "mode": g_config.mode,
            "shape": list(z_final.data.shape),
        }
    )
    return 0


def _cmd_sparsemask(args) -> int:
    policy = guidance.SparsePolicy(total_frames=args.frames)
    draw = guidance.draw_sparse_pose_mask(args.frames, policy, make_rng(args.seed))
    _emit(
        {
            "seed": args.seed,
            "total_frames": args.frames,
            "bucket": draw.bucket,
            "keep_count": draw.keep_count,
            "scheme": draw.scheme,
            "kept": list(draw.kept),
        },
        out=args.out,
    )
    return 0


_UNAVAILABLE = {
    "lpips": "requires a pretrained perceptual network",
    "fvd": "requires a pretrained video feature network",
}

_FRAME_METRICS = {"psnr": metrics.psnr, "ssim": metrics.ssim, "l1": metrics.l1}


def _cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    ref_dir = Path(args.ref)
    pred_files = sorted(pred_dir.glob("*.pgm"))
    ref_files = sorted(ref_dir.glob("*.pgm"))
    if not pred_files:
        raise DomainError(f"{pred_dir}: no PGM frames found")
    if [p.name for p in pred_files] != [p.name for p in ref_files]:
        raise DomainError("prediction and reference directories must hold the same frame names")

    requested = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unavailable = {}
    active = []
    for name in requested:
        if name in _FRAME_METRICS:
            active.append(name)
        elif name in _UNAVAILABLE:
            unavailable[name] = _UNAVAILABLE[name]
            print(f"metric {name} unavailable: {_UNAVAILABLE[name]}", file=sys.stderr)
        else:
            raise DomainError(f"unknown metric {name!r}")

    pairs = []
    for pf, rf in zip(pred_files, ref_files):
        pred, maxval_p = maskgeom.read_gray_pgm(pf)
        ref, maxval_r = maskgeom.read_gray_pgm(rf)
        maxval = args.max_value if args.max_value is not None else float(max(maxval_p, maxval_r))
        pairs.append(metrics.FramePair(pred, ref, max_value=maxval))

    per_frame = {name: [_FRAME_METRICS[name](p) for p in pairs] for name in active}
    video = {name: metrics.video_metric(pairs, _FRAME_METRICS[name]) for name in active}
    _emit(
        {
            "seed": None,
            "frames": len(pairs),
            "metrics": video,
            "per_frame": per_frame,
            "unavailable": unavailable,
        },
        out=args.out,
    )
    return 0


def _cmd_gradcheck(args) -> int:
    reports = []
    worst = 0.0
    for seed in range(args.seeds):
        rel = ptcm_gradient_check(
            seed, d=args.d, n_parts=args.parts, tokens_per_frame=args.tokens, eps=args.eps
        )
        worst = max(worst, max(rel.values()))
        reports.append({"seed": seed, "relative_errors": rel})
    passed = worst <= args.tol
    _emit(
        {
            "seed": None,
            "seeds": args.seeds,
            "tolerance": args.tol,
            "max_relative_error": worst,
            "passed": passed,
            "reports": reports,
        },
        out=args.out,
    )
    return 0 if passed else 1


def _cmd_stats(args) -> int:
    manifest = Path(args.manifest)
    records = curation.read_records(manifest)
    histogram = curation.segment_count_histogram(records, base_dir=manifest.parent)
    _emit(
        {
            "seed": None,
            "videos": len(records),
            "segment_histogram": {str(k): v for k, v in sorted(histogram.items())},
        },
        out=args.out,
    )
    return 0


_COMMANDS = {
    "curate": _cmd_curate,
    "partmask": _cmd_partmask,
    "match": _cmd_match,
    "sample": _cmd_sample,
    "sparsemask": _cmd_sparsemask,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "stats": _cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (PosekitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
