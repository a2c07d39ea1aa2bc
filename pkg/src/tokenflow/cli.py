"""Command-line surface for reproducible runs.

Every command validates its flags, writes under --out, prints exactly one
machine-parseable summary line of space-separated key=value pairs on
success, and exits 0. On failure it removes whatever it created under
--out, prints a one-line diagnostic to stderr, and exits 1. Commands are
idempotent: identical flags and inputs rewrite byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from typing import Optional

import numpy as np

from . import evalkit
from .correspondence import nn_field_blocked, save_nn_field
from .pipeline import (
    DEFAULT_GUIDANCE_INVERT,
    DEFAULT_GUIDANCE_SAMPLE,
    DEFAULT_INTERVAL,
    EditSession,
    PipelineError,
    VideoManifest,
    edit_video,
    load_tokens,
    preprocess,
)
from .diffusion import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS
from .tensors import load_tensor, save_tensor


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on bad usage (no files touched yet)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _summary(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _fmt(x: float) -> str:
    return f"{x:.4f}"


class _OutDir:
    """Snapshot of --out before the command, so failures remove only new files."""

    def __init__(self, path: str):
        self.path = path
        self.existed = os.path.isdir(path)
        self.before = self._walk() if self.existed else set()
        os.makedirs(path, exist_ok=True)

    def _walk(self) -> set[str]:
        seen = set()
        for root, dirs, files in os.walk(self.path):
            for name in dirs + files:
                seen.add(os.path.relpath(os.path.join(root, name), self.path))
        return seen

    def cleanup(self):
        if not self.existed:
            shutil.rmtree(self.path, ignore_errors=True)
            return
        fresh = sorted(self._walk() - self.before, reverse=True)
        for rel in fresh:
            full = os.path.join(self.path, rel)
            if os.path.isdir(full):
                shutil.rmtree(full, ignore_errors=True)
            elif os.path.exists(full):
                os.remove(full)


def _positive(kind):
    def check(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return check


def _load_frames(path: str) -> list[np.ndarray]:
    frames_dir = os.path.join(path, "frames") if os.path.isdir(os.path.join(path, "frames")) else path
    names = sorted(
        (f for f in os.listdir(frames_dir) if f.endswith(".tft")),
        key=lambda name: int("".join(ch for ch in name if ch.isdigit()) or 0),
    )
    if not names:
        raise FileNotFoundError(f"no .tft frames under {frames_dir}")
    return [load_tensor(os.path.join(frames_dir, name)) for name in names]


def _save_edited(latents, outdir) -> None:
    os.makedirs(os.path.join(outdir, "edited"), exist_ok=True)
    for i, lat in enumerate(latents):
        save_tensor(lat, os.path.join(outdir, "edited", f"f{i}.tft"))


def cmd_synth(args) -> None:
    video = evalkit.make_synthetic(args.kind, args.n, args.height, args.width, args.seed, patch=args.patch)
    evalkit.save_synthetic(video, args.out)
    _summary(cmd="synth", status="ok", kind=args.kind, n=args.n, h=args.height, w=args.width,
             seed=args.seed, out=args.out)


def cmd_invert(args) -> None:
    if args.guidance_invert != 1.0:
        raise ValueError("inversion is defined at guidance 1.0; other scales are not supported")
    frames = _load_frames(args.frames)
    manifest = preprocess(
        frames,
        args.out,
        seed=args.seed,
        source_prompt=args.source_prompt,
        steps=args.steps,
        beta_start=args.beta_start,
        beta_end=args.beta_end,
        patch=args.patch,
        dim=args.dim,
        layers=args.layers,
        keyframe_interval=args.interval,
        guidance_sample=args.guidance_sample,
        token_hook=args.token_hook,
        threads=args.threads,
    )
    _summary(cmd="invert", status="ok", n=manifest.n_frames, steps=manifest.steps,
             layers=manifest.layers, seed=args.seed, out=args.out)


def _run_edit(args, target_prompt: Optional[str], command: str) -> None:
    manifest = VideoManifest.load(args.manifest)
    session = EditSession(
        manifest,
        args.manifest,
        target_prompt=target_prompt,
        guidance=args.guidance_sample,
        interval=args.interval,
        seed=args.seed,
        mode="per-frame" if getattr(args, "per_frame", False) else "tokenflow",
        threads=args.threads,
        nn_cache=getattr(args, "nn_cache", False),
    )
    latents = edit_video(session)
    _save_edited(latents, args.out)
    originals = [load_tensor(manifest.frame_path(args.manifest, i)) for i in range(manifest.n_frames)]
    mean_psnr = float(np.mean([min(evalkit.psnr(a, b), 1e9) for a, b in zip(latents, originals)]))
    _summary(cmd=command, status="ok", n=manifest.n_frames, steps=manifest.steps,
             seed=session.seed, mode=session.mode, guidance=_fmt(session.guidance),
             interval=session.interval, psnr=_fmt(mean_psnr), out=args.out)


def cmd_edit(args) -> None:
    _run_edit(args, args.target_prompt, "edit")


def cmd_reconstruct(args) -> None:
    _run_edit(args, None, "reconstruct")


def cmd_nnfield(args) -> None:
    manifest = VideoManifest.load(args.manifest)
    src = load_tokens(manifest, args.manifest, args.t, args.layer, args.frame)
    key = load_tokens(manifest, args.manifest, args.t, args.layer, args.keyframe)
    field = nn_field_blocked(src, key)
    base = os.path.join(args.out, f"nnfield_f{args.frame}_k{args.keyframe}_t{args.t}_l{args.layer}")
    entry = save_nn_field(field, base)
    import json

    with open(os.path.join(args.out, "nnfields.json"), "w") as f:
        json.dump({"format": "tokenflow-nnfields", "fields": [entry]}, f, indent=1, sort_keys=True)
        f.write("\n")
    self_match = float(np.mean(field.indices == np.arange(field.indices.size)))
    _summary(cmd="nnfield", status="ok", frame=args.frame, keyframe=args.keyframe,
             t=args.t, layer=args.layer, self_match=_fmt(self_match),
             mean_distance=_fmt(float(field.distances.mean())), out=args.out)


def cmd_pca(args) -> None:
    manifest = VideoManifest.load(args.manifest)
    grids = [
        load_tokens(manifest, args.manifest, args.t, args.layer, i)
        for i in range(manifest.n_frames)
    ]
    result = evalkit.pca_tokens(grids, k=3)
    for i, img in enumerate(result.images):
        evalkit.write_ppm(os.path.join(args.out, f"pca_f{i}.ppm"), img)
    row = args.slice_row if args.slice_row is not None else grids[0].h // 2
    evalkit.write_ppm(os.path.join(args.out, "pca_slice.ppm"), evalkit.pca_slice(result.images, row))
    _summary(cmd="pca", status="ok", frames=manifest.n_frames, t=args.t, layer=args.layer,
             components=result.n_components, slice_row=row, out=args.out)


def cmd_eval(args) -> None:
    manifest = VideoManifest.load(args.manifest)
    edited = _load_frames(os.path.join(args.edited, "edited"))
    if len(edited) != manifest.n_frames:
        raise ValueError(f"edited frame count {len(edited)} != manifest n_frames {manifest.n_frames}")
    originals = [load_tensor(manifest.frame_path(args.manifest, i)) for i in range(manifest.n_frames)]
    rows = []
    values = []
    for i, (a, b) in enumerate(zip(edited, originals)):
        v = evalkit.psnr(a, b)
        rows.append((i, "psnr", v))
        values.append(min(v, 1e9))
    mean_psnr = float(np.mean(values))
    rows.append(("all", "mean_psnr", mean_psnr))
    variance = None
    if args.synth:
        video = evalkit.load_synthetic(args.synth)
        maps, valid = video.trajectories()
        grids = [evalkit.frame_tokens(frame, video.patch, index=i) for i, frame in enumerate(edited)]
        variance = evalkit.token_trajectory_variance(grids, maps, valid)
        rows.append(("all", "trajectory_variance", variance))
    evalkit.write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    kv = dict(cmd="eval", status="ok", frames=manifest.n_frames, mean_psnr=_fmt(mean_psnr))
    if variance is not None:
        kv["trajectory_variance"] = f"{variance:.6e}"
    kv["out"] = args.out
    _summary(**kv)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def out_flag(p):
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic test video")
    p.add_argument("--kind", choices=sorted(evalkit.KINDS), required=True)
    p.add_argument("--n", type=_positive(int), default=8)
    p.add_argument("--height", type=_positive(int), default=16)
    p.add_argument("--width", type=_positive(int), default=16)
    p.add_argument("--patch", type=_positive(int), default=4)
    p.add_argument("--seed", type=int, default=0)
    out_flag(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("invert", help="preprocess: invert frames, extract tokens")
    p.add_argument("--frames", required=True, help="synth dir or directory of .tft frames")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=_positive(int), default=DEFAULT_STEPS)
    p.add_argument("--beta-start", type=_positive(float), default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=_positive(float), default=DEFAULT_BETA_END)
    p.add_argument("--patch", type=_positive(int), default=4)
    p.add_argument("--dim", type=_positive(int), default=16)
    p.add_argument("--layers", type=_positive(int), default=2)
    p.add_argument("--interval", type=_positive(int), default=DEFAULT_INTERVAL)
    p.add_argument("--guidance-invert", type=_positive(float), default=DEFAULT_GUIDANCE_INVERT,
                   help="accepted for symmetry; inversion always runs at 1.0")
    p.add_argument("--guidance-sample", type=_positive(float), default=DEFAULT_GUIDANCE_SAMPLE)
    p.add_argument("--source-prompt", default="")
    p.add_argument("--token-hook", choices=("output", "input"), default="output")
    p.add_argument("--threads", type=_positive(int), default=1)
    out_flag(p)
    p.set_defaults(func=cmd_invert)

    def edit_common(p, with_target: bool):
        p.add_argument("--manifest", required=True, help="directory holding manifest.json")
        if with_target:
            p.add_argument("--target-prompt", required=True)
        p.add_argument("--seed", type=int, default=None, help="defaults to the manifest seed")
        p.add_argument("--guidance-sample", type=_positive(float), default=None,
                       help="defaults to the manifest value")
        p.add_argument("--interval", type=_positive(int), default=None,
                       help="defaults to the manifest value")
        p.add_argument("--per-frame", action="store_true",
                       help="independent per-frame editing (consistency baseline)")
        p.add_argument("--nn-cache", action="store_true",
                       help="reuse layer-0 correspondence fields for all layers (approximation)")
        p.add_argument("--threads", type=_positive(int), default=1)
        out_flag(p)

    p = sub.add_parser("edit", help="edit a preprocessed video")
    edit_common(p, with_target=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("reconstruct",
                       help="edit with the source prompt (reconstruction)")
    edit_common(p, with_target=False)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("nnfield", help="correspondence field between two frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--keyframe", type=int, required=True)
    p.add_argument("--t", type=_positive(int), required=True)
    p.add_argument("--layer", type=int, default=0)
    out_flag(p)
    p.set_defaults(func=cmd_nnfield)

    p = sub.add_parser("pca", help="principal-component token images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--t", type=_positive(int), required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--slice-row", type=int, default=None, help="row for the time-slice image")
    out_flag(p)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("eval", help="PSNR and consistency metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--edited", required=True, help="output dir of edit/reconstruct")
    p.add_argument("--synth", default=None, help="synthetic dir for trajectory variance")
    out_flag(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    outdir = _OutDir(args.out)
    try:
        args.func(args)
        return 0
    except PipelineError as e:
        outdir.cleanup()
        print(f"{args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        outdir.cleanup()
        print(f"{args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
