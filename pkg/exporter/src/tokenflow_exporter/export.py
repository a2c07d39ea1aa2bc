"""DDIM inversion with attention hooks, dumping engine-compatible artifacts.

The exporter inverts each frame at guidance 1, saving every intermediate
latent, then re-feeds each recorded latent and captures the selected
self-attention modules' tokens. Outputs follow the engine's directory
layout and manifest schema exactly:

    manifest.json                       token_hook = "output"
    manifest_input.json                 written with --input-tokens
    frames/f{frame}.tft                 clean latents (c, h, w)
    latents/f{frame}/t{t}.tft           t = 1..steps
    tokens/t{t}/l{layer}/f{frame}.tft   post-projection tokens (n, d)
    tokens_in/t{t}/l{layer}/f{frame}.tft  input tokens (behind the flag)

Images are mapped to latents by a documented stand-in (resize, grayscale
to [-1, 1], replicated over the latent channels); a real deployment feeds
pre-encoded latents (.tft) since the autoencoder is out of scope. Tokens
are written as float32 regardless of the model's compute precision.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .models import DEFAULT_LAYER_PATTERN, load_model, resolve_attention_layers
from .tft import save_tensor

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass
class ExportConfig:
    model: str
    frames: list[str]
    output: str
    source_prompt: str = ""
    steps: int = 10
    layer_patterns: list[str] = field(default_factory=lambda: [DEFAULT_LAYER_PATTERN])
    latent_size: tuple[int, int] = (32, 32)
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    seed: int = 0
    input_tokens: bool = False
    keyframe_interval: int = 8
    guidance_sample: float = 7.5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if len(self.frames) < 2:
            raise ValueError("need at least 2 frames")


def linear_alphas_bar(steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def ddim_forward(x, eps, ab_from: float, ab_to: float):
    x0 = (x - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0 + math.sqrt(1.0 - ab_to) * eps


def load_frame(path: str, latent_size, channels: int) -> torch.Tensor:
    """Read one frame as a (c, h, w) latent; .tft passes through unchanged."""
    h, w = latent_size
    if path.endswith(".tft"):
        from .tft import load_tensor

        arr = load_tensor(path)
        if arr.shape != (channels, h, w):
            raise ValueError(f"{path}: expected latent shape {(channels, h, w)}, got {arr.shape}")
        return torch.from_numpy(arr.copy())
    from PIL import Image

    img = Image.open(path).convert("L").resize((w, h), Image.BILINEAR)
    plane = np.asarray(img, dtype=np.float32) / 255.0 * 2.0 - 1.0
    return torch.from_numpy(np.repeat(plane[None], channels, axis=0))


def prompt_embedding(prompt: str, dim: int, seed: int) -> torch.Tensor | None:
    """Deterministic stand-in for a text encoder (hash-seeded unit vector)."""
    if not prompt:
        return None
    digest = hashlib.sha256(f"{seed}/{prompt}".encode()).digest()
    gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
    v = torch.randn(dim, generator=gen)
    return v / v.norm()


def _infer_grid(n_tokens: int, h: int, w: int) -> tuple[int, int]:
    for s in range(0, 8):
        gh, gw = h >> s, w >> s
        if gh == 0 or gw == 0:
            break
        if gh * gw == n_tokens:
            return gh, gw
    raise ValueError(f"cannot infer a token grid for {n_tokens} tokens over {h}x{w} latents")


class TokenCatcher:
    """Forward hooks capturing each selected module's input and output."""

    def __init__(self, layers):
        self.layers = layers
        self.inputs: dict[int, np.ndarray] = {}
        self.outputs: dict[int, np.ndarray] = {}
        self._handles = []

    def __enter__(self):
        for idx, (_, module) in enumerate(self.layers):
            self._handles.append(module.register_forward_hook(self._hook(idx)))
        return self

    def _hook(self, idx):
        def capture(module, args, output):
            tokens_in = args[0].detach()
            tokens_out = output.detach()
            self.inputs[idx] = tokens_in.squeeze(0).to(torch.float32).numpy()
            self.outputs[idx] = tokens_out.squeeze(0).to(torch.float32).numpy()

        return capture

    def __exit__(self, *exc):
        for handle in self._handles:
            handle.remove()
        return False


def export_features(cfg: ExportConfig) -> dict:
    """Run per-frame DDIM inversion, dump latents + tokens, write manifests.

    Returns the (output-token) manifest dictionary.
    """
    torch.set_num_threads(1)  # bitwise reproducibility of the export
    model = load_model(cfg.model, seed=cfg.seed)
    layers = resolve_attention_layers(model, cfg.layer_patterns)
    channels = getattr(model, "latent_channels", 4)
    frames = [load_frame(p, cfg.latent_size, channels) for p in cfg.frames]
    h, w = cfg.latent_size
    n = len(frames)
    ab = linear_alphas_bar(cfg.steps, cfg.beta_start, cfg.beta_end)
    cond = prompt_embedding(cfg.source_prompt, getattr(model, "channels", 32), cfg.seed)

    root = cfg.output
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    grid = None
    token_dim = None

    with torch.no_grad():
        for i, x0 in enumerate(frames):
            save_tensor(x0.numpy(), os.path.join(root, "frames", f"f{i}.tft"))
            x = x0[None]
            lat_dir = os.path.join(root, "latents", f"f{i}")
            os.makedirs(lat_dir, exist_ok=True)
            trajectory = []
            for t in range(cfg.steps):
                eps = model(x, t, cond)
                x = ddim_forward(x, eps, float(ab[t]), float(ab[t + 1]))
                if not torch.isfinite(x).all():
                    raise FloatingPointError(f"frame {i}: non-finite latent at step {t + 1}")
                trajectory.append(x)
                save_tensor(x[0].numpy(), os.path.join(lat_dir, f"t{t + 1}.tft"))
            for t, x_t in enumerate(trajectory, start=1):
                with TokenCatcher(layers) as catcher:
                    model(x_t, t, cond)
                for idx in range(len(layers)):
                    out_tokens = catcher.outputs[idx]
                    if out_tokens.ndim != 2:
                        raise ValueError(
                            f"layer {layers[idx][0]} emitted {out_tokens.shape}; "
                            "expected (tokens, dim)"
                        )
                    if grid is None:
                        grid = _infer_grid(out_tokens.shape[0], h, w)
                        token_dim = out_tokens.shape[1]
                    if out_tokens.shape != (grid[0] * grid[1], token_dim):
                        raise ValueError(
                            f"layer {layers[idx][0]} token shape {out_tokens.shape} differs "
                            f"from {(grid[0] * grid[1], token_dim)}; select layers of one "
                            "resolution per manifest"
                        )
                    for subdir, tokens in (
                        ("tokens", out_tokens),
                        ("tokens_in", catcher.inputs[idx]),
                    ):
                        if subdir == "tokens_in" and not cfg.input_tokens:
                            continue
                        tdir = os.path.join(root, subdir, f"t{t}", f"l{idx}")
                        os.makedirs(tdir, exist_ok=True)
                        save_tensor(tokens, os.path.join(tdir, f"f{i}.tft"))

    manifest = {
        "format": "tokenflow-manifest",
        "version": 1,
        "n_frames": n,
        "latent_shape": [channels, h, w],
        "steps": cfg.steps,
        "layers": len(layers),
        "token_grid": list(grid),
        "token_dim": token_dim,
        "seed": cfg.seed,
        "keyframe_interval": cfg.keyframe_interval,
        "guidance_invert": 1.0,
        "guidance_sample": cfg.guidance_sample,
        "source_prompt": cfg.source_prompt,
        "edit_prompt": None,
        "token_hook": "output",
        "schedule": {
            "steps": cfg.steps,
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
        },
        "denoiser": None,
        "paths": {
            "frames": "frames/f{frame}.tft",
            "latents": "latents/f{frame}/t{t}.tft",
            "tokens": "tokens/t{t}/l{layer}/f{frame}.tft",
        },
        "exporter": {
            "model": cfg.model,
            "layer_patterns": cfg.layer_patterns,
            "layer_names": [name for name, _ in layers],
        },
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    if cfg.input_tokens:
        alt = dict(manifest)
        alt["token_hook"] = "input"
        alt["paths"] = dict(manifest["paths"], tokens="tokens_in/t{t}/l{layer}/f{frame}.tft")
        with open(os.path.join(root, "manifest_input.json"), "w") as f:
            json.dump(alt, f, indent=1, sort_keys=True)
            f.write("\n")
    return manifest
