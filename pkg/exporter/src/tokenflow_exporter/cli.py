"""Command-line front end mirroring ExportConfig."""

from __future__ import annotations

import argparse
import sys

from .export import DEFAULT_BETA_END, DEFAULT_BETA_START, ExportConfig, export_features
from .models import DEFAULT_LAYER_PATTERN


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tokenflow-export",
        description="Dump a diffusion model's self-attention tokens during DDIM "
        "inversion, in the engine's TFT1 + manifest format.",
    )
    p.add_argument("--model", default="builtin:tiny",
                   help="builtin:tiny or diffusers:<repo-id>")
    p.add_argument("--frames", nargs="+", required=True,
                   help="frame files in order (.png/.jpg images or .tft latents)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--source-prompt", default="")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--layers", nargs="+", default=[DEFAULT_LAYER_PATTERN],
                   help="fnmatch patterns over module names selecting attention layers")
    p.add_argument("--latent-size", type=int, nargs=2, default=(32, 32),
                   metavar=("H", "W"))
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-tokens", action="store_true",
                   help="also dump attention input tokens plus manifest_input.json")
    p.add_argument("--interval", type=int, default=8)
    p.add_argument("--guidance-sample", type=float, default=7.5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExportConfig(
            model=args.model,
            frames=list(args.frames),
            output=args.out,
            source_prompt=args.source_prompt,
            steps=args.steps,
            layer_patterns=list(args.layers),
            latent_size=tuple(args.latent_size),
            beta_start=args.beta_start,
            beta_end=args.beta_end,
            seed=args.seed,
            input_tokens=args.input_tokens,
            keyframe_interval=args.interval,
            guidance_sample=args.guidance_sample,
        )
        manifest = export_features(cfg)
    except Exception as e:
        print(f"tokenflow-export: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(
        f"cmd=export status=ok model={cfg.model} n={manifest['n_frames']} "
        f"steps={manifest['steps']} layers={manifest['layers']} out={cfg.output}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
