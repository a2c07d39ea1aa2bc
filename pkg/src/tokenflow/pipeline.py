"""End-to-end orchestration: preprocess, keyframe editing, propagation.

Preprocessing inverts every frame at guidance 1 and stores the latent
trajectories plus the per-(timestep, layer) original-video tokens on disk,
described by a JSON manifest. Editing then walks the denoising steps: at
each step it samples keyframes, jointly denoises them with extended
attention under the editing technique (harvesting their post-projection
tokens), computes nearest-neighbor fields from the *original* tokens, and
re-denoises every frame while substituting the propagated tokens at every
attention block.

Directory layout, relative to the manifest:

    manifest.json
    frames/f{frame}.tft
    latents/f{frame}/t{t}.tft      t = 1..steps
    tokens/t{t}/l{layer}/f{frame}.tft
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .attention import BlockHooks, TokenGrid
from .correspondence import NNField, nn_field_blocked
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_STEPS,
    Schedule,
    ToyDenoiser,
    ddim_step,
    invert,
)
from .propagation import BlendWeights, TBase, tokenflow_propagate
from .tensors import Rng, as_f32, load_tensor, save_tensor

DEFAULT_INTERVAL = 8
DEFAULT_GUIDANCE_INVERT = 1.0
DEFAULT_GUIDANCE_SAMPLE = 7.5

MANIFEST_NAME = "manifest.json"
FRAME_PATH = "frames/f{frame}.tft"
LATENT_PATH = "latents/f{frame}/t{t}.tft"
TOKEN_PATH = "tokens/t{t}/l{layer}/f{frame}.tft"


class ManifestError(ValueError):
    """Manifest file missing, malformed, or inconsistent with its tree."""


class PipelineError(RuntimeError):
    """Failure during an edit step, tagged with (t, frame, layer) context."""

    def __init__(self, message, t=None, frame=None, layer=None):
        ctx = ", ".join(
            f"{k}={v}" for k, v in (("t", t), ("frame", frame), ("layer", layer)) if v is not None
        )
        super().__init__(f"{message} [{ctx}]" if ctx else message)
        self.t = t
        self.frame = frame
        self.layer = layer


@dataclass
class VideoManifest:
    """On-disk description of a preprocessed video."""

    n_frames: int
    latent_shape: list[int]
    steps: int
    layers: int
    token_grid: list[int]
    token_dim: int
    seed: int
    keyframe_interval: int = DEFAULT_INTERVAL
    guidance_invert: float = DEFAULT_GUIDANCE_INVERT
    guidance_sample: float = DEFAULT_GUIDANCE_SAMPLE
    source_prompt: str = ""
    edit_prompt: Optional[str] = None
    token_hook: str = "output"
    schedule: dict = dc_field(
        default_factory=lambda: {
            "steps": DEFAULT_STEPS,
            "beta_start": DEFAULT_BETA_START,
            "beta_end": DEFAULT_BETA_END,
        }
    )
    denoiser: Optional[dict] = None
    paths: dict = dc_field(
        default_factory=lambda: {
            "frames": FRAME_PATH,
            "latents": LATENT_PATH,
            "tokens": TOKEN_PATH,
        }
    )

    def __post_init__(self):
        if self.token_hook not in ("output", "input"):
            raise ManifestError(f"token_hook must be 'output' or 'input', got {self.token_hook!r}")
        for key in ("frames", "latents", "tokens"):
            if key not in self.paths:
                raise ManifestError(f"manifest paths missing {key!r} template")

    def frame_path(self, root, frame: int) -> str:
        return os.path.join(root, self.paths["frames"].format(frame=frame))

    def latent_path(self, root, frame: int, t: int) -> str:
        return os.path.join(root, self.paths["latents"].format(frame=frame, t=t))

    def token_path(self, root, t: int, layer: int, frame: int) -> str:
        return os.path.join(root, self.paths["tokens"].format(t=t, layer=layer, frame=frame))

    def make_schedule(self) -> Schedule:
        return Schedule.linear(
            self.schedule["steps"], self.schedule["beta_start"], self.schedule["beta_end"]
        )

    def make_denoiser(self) -> ToyDenoiser:
        if self.denoiser is None:
            raise ManifestError("manifest has no denoiser config (analysis-only manifest)")
        return ToyDenoiser.from_config(self.denoiser)

    def to_dict(self) -> dict:
        return {
            "format": "tokenflow-manifest",
            "version": 1,
            "n_frames": self.n_frames,
            "latent_shape": list(self.latent_shape),
            "steps": self.steps,
            "layers": self.layers,
            "token_grid": list(self.token_grid),
            "token_dim": self.token_dim,
            "seed": self.seed,
            "keyframe_interval": self.keyframe_interval,
            "guidance_invert": self.guidance_invert,
            "guidance_sample": self.guidance_sample,
            "source_prompt": self.source_prompt,
            "edit_prompt": self.edit_prompt,
            "token_hook": self.token_hook,
            "schedule": self.schedule,
            "denoiser": self.denoiser,
            "paths": dict(self.paths),
        }

    def save(self, root) -> str:
        path = os.path.join(root, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "VideoManifest":
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(path) as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ManifestError(f"manifest not found: {path}")
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest {path} is not valid JSON: {e}")
        if raw.get("format") != "tokenflow-manifest":
            raise ManifestError(f"{path}: not a tokenflow manifest")
        keys = (
            "n_frames latent_shape steps layers token_grid token_dim seed "
            "keyframe_interval guidance_invert guidance_sample source_prompt "
            "edit_prompt token_hook schedule denoiser paths"
        ).split()
        try:
            return cls(**{k: raw[k] for k in keys})
        except KeyError as e:
            raise ManifestError(f"{path}: missing manifest field {e}")

    def validate(self, root) -> None:
        """Check every referenced tensor exists, parses, and has the right shape."""
        latent_shape = tuple(self.latent_shape)
        grid_rows = self.token_grid[0] * self.token_grid[1]
        for i in range(self.n_frames):
            self._check(self.frame_path(root, i), latent_shape)
            for t in range(1, self.steps + 1):
                self._check(self.latent_path(root, i, t), latent_shape)
        for t in range(1, self.steps + 1):
            for layer in range(self.layers):
                for i in range(self.n_frames):
                    self._check(
                        self.token_path(root, t, layer, i), (grid_rows, self.token_dim)
                    )

    @staticmethod
    def _check(path, shape):
        try:
            arr = load_tensor(path)
        except FileNotFoundError:
            raise ManifestError(f"referenced file missing: {path}")
        except ValueError as e:
            raise ManifestError(f"referenced file unreadable: {path}: {e}")
        if arr.shape != tuple(shape):
            raise ManifestError(f"{path}: expected shape {tuple(shape)}, found {arr.shape}")


def load_tokens(manifest: VideoManifest, root, t: int, layer: int, frame: int) -> TokenGrid:
    gh, gw = manifest.token_grid
    tokens = load_tensor(manifest.token_path(root, t, layer, frame))
    return TokenGrid(frame, layer, t, gh, gw, tokens)


def sample_keyframes(rng: Rng, n: int, interval: int) -> list[int]:
    """Fixed-interval keyframe indices at a fresh uniform offset."""
    if not 1 <= interval <= n:
        raise ValueError(f"interval must be in [1, {n}], got {interval}")
    r = rng.randint(interval)
    return list(range(r, n, interval))


def _extraction_hooks(point: str, sink: Callable[[TokenGrid, np.ndarray], None]) -> BlockHooks:
    if point == "input":
        return BlockHooks(on_input=sink)
    return BlockHooks(on_output=sink)


def preprocess(
    frames: Sequence[np.ndarray],
    outdir,
    *,
    seed: int,
    source_prompt: str = "",
    steps: int = DEFAULT_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    denoiser: Optional[ToyDenoiser] = None,
    patch: int = 4,
    dim: int = 16,
    layers: int = 2,
    keyframe_interval: int = DEFAULT_INTERVAL,
    guidance_sample: float = DEFAULT_GUIDANCE_SAMPLE,
    token_hook: str = "output",
    threads: int = 1,
) -> VideoManifest:
    """Invert every frame, record trajectories and original-video tokens.

    Inversion runs at guidance 1 with the source prompt. Tokens are
    extracted by re-feeding each recorded latent x_t and observing every
    attention block at the configured hook point.
    """
    n = len(frames)
    if n < 2:
        raise ValueError("preprocess needs at least 2 frames")
    frames = [as_f32(f) for f in frames]
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("all frames must share one shape")
    if denoiser is None:
        denoiser = ToyDenoiser(
            patch=patch, dim=dim, layers=layers, seed=Rng(seed).derive("denoiser").seed
        )
    schedule = Schedule.linear(steps, beta_start, beta_end)
    gh, gw = denoiser.grid_shape(shape)
    cond = denoiser.embedder.embed(source_prompt)

    manifest = VideoManifest(
        n_frames=n,
        latent_shape=list(shape),
        steps=steps,
        layers=denoiser.layers,
        token_grid=[gh, gw],
        token_dim=denoiser.dim,
        seed=seed,
        keyframe_interval=keyframe_interval,
        guidance_sample=guidance_sample,
        source_prompt=source_prompt,
        token_hook=token_hook,
        schedule={"steps": steps, "beta_start": beta_start, "beta_end": beta_end},
        denoiser=denoiser.config(),
    )

    os.makedirs(outdir, exist_ok=True)

    def run_frame(i: int) -> None:
        x0 = frames[i]
        if not np.isfinite(x0).all():
            raise PipelineError("non-finite input frame", frame=i)
        path = manifest.frame_path(outdir, i)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_tensor(x0, path)
        try:
            traj = invert(x0, denoiser, schedule, cond, frame=i)
        except FloatingPointError as e:
            raise PipelineError(str(e), frame=i)
        for t, x_t in enumerate(traj.latents, start=1):
            path = manifest.latent_path(outdir, i, t)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            save_tensor(x_t, path)
            grabbed: dict[int, np.ndarray] = {}
            denoiser.eps(
                x_t,
                t,
                cond,
                hooks=_extraction_hooks(
                    token_hook, lambda meta, tok: grabbed.__setitem__(meta.layer, tok)
                ),
                frame=i,
            )
            for layer in range(denoiser.layers):
                tpath = manifest.token_path(outdir, t, layer, i)
                os.makedirs(os.path.dirname(tpath), exist_ok=True)
                save_tensor(grabbed[layer], tpath)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_frame, range(n)))
    else:
        for i in range(n):
            run_frame(i)

    manifest.save(outdir)
    return manifest


@dataclass
class StepContext:
    """Everything an editing technique needs to produce eps at one step."""

    denoiser: ToyDenoiser
    schedule: Schedule
    t: int
    cond_source: np.ndarray
    cond_target: np.ndarray
    scale: float


class EditingTechnique(Protocol):
    """Pluggable per-step noise predictor (the image-editing hook).

    Must be deterministic given its inputs. Hooks and joint attention apply
    to the conditional branch only; the unconditional branch runs plain.
    """

    def eps(
        self,
        ctx: StepContext,
        xs: Sequence[np.ndarray],
        frame_ids: Sequence[int],
        hooks_by_frame: Optional[dict[int, BlockHooks]],
        joint: bool,
    ) -> list[np.ndarray]: ...


class PromptSwapEditor:
    """Default technique: plain conditional denoising on the target prompt."""

    def eps(self, ctx, xs, frame_ids, hooks_by_frame, joint):
        cond = ctx.denoiser.eps_joint(
            xs, frame_ids, ctx.t, ctx.cond_target, hooks_by_frame, joint=joint
        )
        if ctx.scale == 1.0:
            return cond
        uncond = ctx.denoiser.eps_joint(xs, frame_ids, ctx.t, None, None, joint=False)
        return [
            as_f32(u.astype(np.float64) + ctx.scale * (c.astype(np.float64) - u.astype(np.float64)))
            for c, u in zip(cond, uncond)
        ]


class EditSession:
    """Resolved configuration and state for one editing run."""

    def __init__(
        self,
        manifest: VideoManifest,
        root,
        *,
        target_prompt: Optional[str] = None,
        guidance: Optional[float] = None,
        interval: Optional[int] = None,
        seed: Optional[int] = None,
        editor: Optional[EditingTechnique] = None,
        mode: str = "tokenflow",
        threads: int = 1,
        nn_cache: bool = False,
        collect_tokens: bool = False,
    ):
        if mode not in ("tokenflow", "per-frame"):
            raise ValueError(f"mode must be 'tokenflow' or 'per-frame', got {mode!r}")
        self.manifest = manifest
        self.root = root
        self.denoiser = manifest.make_denoiser()
        self.schedule = manifest.make_schedule()
        self.target_prompt = manifest.source_prompt if target_prompt is None else target_prompt
        self.guidance = manifest.guidance_sample if guidance is None else guidance
        interval = manifest.keyframe_interval if interval is None else interval
        if interval < 1:
            raise ValueError(f"keyframe interval must be >= 1, got {interval}")
        # an interval beyond the clip length degenerates to one keyframe per step
        self.interval = min(interval, manifest.n_frames)
        self.seed = manifest.seed if seed is None else seed
        self.editor = editor if editor is not None else PromptSwapEditor()
        self.mode = mode
        self.threads = max(1, threads)
        self.nn_cache = nn_cache
        self.rng = Rng(self.seed).derive("edit")
        self.kappa_history: list[list[int]] = []
        self.collect_tokens = collect_tokens
        # final-step (t=1) post-projection tokens per frame and layer, i.e.
        # what the edited video's attention blocks actually emitted
        self.final_tokens: list[Optional[dict[int, np.ndarray]]] = [None] * manifest.n_frames
        if self.schedule.steps != manifest.steps:
            raise ManifestError("schedule steps disagree with manifest steps")


def _harvest_tbase(session: EditSession, J, kappa, t) -> list[TBase]:
    """Joint keyframe pass; returns the edited tokens per layer."""
    man = session.manifest
    gh, gw = man.token_grid
    harvested: dict[int, dict[int, np.ndarray]] = {l: {} for l in range(man.layers)}

    def recorder(meta: TokenGrid, tokens: np.ndarray) -> None:
        harvested[meta.layer][meta.frame] = tokens

    hooks = {k: BlockHooks(on_output=recorder) for k in kappa}
    ctx = _context(session, t)
    session.editor.eps(ctx, [J[k] for k in kappa], list(kappa), hooks, joint=True)
    return [
        TBase(
            layer,
            t,
            list(kappa),
            [TokenGrid(k, layer, t, gh, gw, harvested[layer][k]) for k in kappa],
        )
        for layer in range(man.layers)
    ]


def _context(session: EditSession, t: int) -> StepContext:
    den = session.denoiser
    return StepContext(
        denoiser=den,
        schedule=session.schedule,
        t=t,
        cond_source=den.embedder.embed(session.manifest.source_prompt),
        cond_target=den.embedder.embed(session.target_prompt),
        scale=session.guidance,
    )


def _fields_for_frame(
    session: EditSession, t: int, frame: int, weights: BlendWeights
) -> dict[int, tuple[Optional[NNField], Optional[NNField]]]:
    """NN fields per layer from the original video tokens at step t."""
    man = session.manifest
    layers = range(1) if session.nn_cache else range(man.layers)
    out = {}
    for layer in layers:
        try:
            src = load_tokens(man, session.root, t, layer, frame)
            plus = minus = None
            if weights.weight_plus > 0.0:
                key = load_tokens(man, session.root, t, layer, weights.i_plus)
                plus = nn_field_blocked(src, key)
            if weights.weight_plus < 1.0:
                key = load_tokens(man, session.root, t, layer, weights.i_minus)
                minus = nn_field_blocked(src, key)
        except Exception as e:
            raise PipelineError(f"correspondence failed: {e}", t=t, frame=frame, layer=layer) from e
        out[layer] = (plus, minus)
    if session.nn_cache:
        for layer in range(1, man.layers):
            out[layer] = out[0]
    return out


def edit_video(session: EditSession) -> list[np.ndarray]:
    """Run the full editing loop and return the final clean latents."""
    man = session.manifest
    n = man.n_frames
    T = man.steps
    J = [load_tensor(man.latent_path(session.root, i, T)) for i in range(n)]

    for t in range(T, 0, -1):
        ctx = _context(session, t)
        if session.mode == "tokenflow":
            kappa = sample_keyframes(session.rng, n, session.interval)
            session.kappa_history.append(kappa)
            try:
                tbase = _harvest_tbase(session, J, kappa, t)
            except Exception as e:
                raise PipelineError(f"keyframe pass failed: {e}", t=t) from e
            propagated: list[dict[int, np.ndarray]] = [None] * n
            for i in range(n):
                try:
                    weights = BlendWeights.for_frame(i, kappa)
                    fields = _fields_for_frame(session, t, i, weights)
                except PipelineError:
                    raise
                except Exception as e:
                    raise PipelineError(f"correspondence failed: {e}", t=t, frame=i) from e
                propagated[i] = {}
                for layer in range(man.layers):
                    try:
                        propagated[i][layer] = tokenflow_propagate(
                            tbase[layer], fields[layer][0], fields[layer][1], weights, i
                        ).tokens
                    except Exception as e:
                        raise PipelineError(
                            f"propagation failed: {e}", t=t, frame=i, layer=layer
                        ) from e

            def denoise_one(i: int) -> np.ndarray:
                def replace(meta: TokenGrid, tokens: np.ndarray) -> np.ndarray:
                    return propagated[i][meta.layer]

                if session.collect_tokens and t == 1:
                    session.final_tokens[i] = propagated[i]
                hooks = {i: BlockHooks(replace=replace)}
                eps = session.editor.eps(ctx, [J[i]], [i], hooks, joint=False)[0]
                return ddim_step(J[i], eps, t, session.schedule, "backward")

        else:

            def denoise_one(i: int) -> np.ndarray:
                hooks = None
                if session.collect_tokens and t == 1:
                    grabbed: dict[int, np.ndarray] = {}
                    session.final_tokens[i] = grabbed
                    hooks = {
                        i: BlockHooks(on_output=lambda m, tok: grabbed.__setitem__(m.layer, tok))
                    }
                eps = session.editor.eps(ctx, [J[i]], [i], hooks, joint=False)[0]
                return ddim_step(J[i], eps, t, session.schedule, "backward")

        try:
            if session.threads > 1:
                with ThreadPoolExecutor(max_workers=session.threads) as pool:
                    J = list(pool.map(denoise_one, range(n)))
            else:
                J = [denoise_one(i) for i in range(n)]
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(f"denoising pass failed: {e}", t=t) from e
    return J
