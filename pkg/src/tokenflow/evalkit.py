"""Desk-scale analysis tools: PCA views, swap/warp reconstruction, metrics.

Synthetic videos come with exact ground-truth correspondence maps at token
resolution, which makes nearest-neighbor recovery and trajectory-variance
claims checkable. PSNR uses the peak-1.0 convention for latents normalized
to [0, 1]; identical inputs return +inf. Images are emitted as binary PPM
(P6) so outputs stay dependency-free and byte-checkable.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import BlockHooks, TokenGrid
from .correspondence import nn_field_blocked
from .diffusion import ddim_step
from .pipeline import VideoManifest, load_tokens
from .tensors import Rng, ShapeError, as_f32, load_tensor

KINDS = ("static", "translating", "two_region")
STATIC_JITTER = 0.001


def frame_tokens(frame: np.ndarray, patch: int, index: int = 0, layer: int = 0, timestep: int = 0) -> TokenGrid:
    """Patchify a frame into a TokenGrid of raw pixel-patch tokens."""
    h, w = frame.shape
    if h % patch or w % patch:
        raise ShapeError(f"frame {frame.shape} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    toks = frame.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)
    return TokenGrid(index, layer, timestep, gh, gw, as_f32(toks))


@dataclass
class SyntheticVideo:
    """Deterministic frames plus exact token-level correspondence maps."""

    kind: str
    n: int
    h: int
    w: int
    patch: int
    seed: int
    frames: list[np.ndarray]
    shifts: Optional[list[int]] = None  # per-frame window offset (translating)
    block: Optional[tuple[int, int, int]] = None  # (row0, bh, bw) in cells
    block_x: Optional[list[int]] = None  # per-frame block column (two_region)

    @property
    def grid(self) -> tuple[int, int]:
        return self.h // self.patch, self.w // self.patch

    def _flat(self, r: int, c: int) -> int:
        return r * (self.w // self.patch) + c

    def gt_map_pair(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Map cells of frame i to their scene-point cells in frame j.

        Returns (indices, valid): invalid positions left the grid or are
        occluded in frame j; their index entries are 0 and must be ignored.
        """
        gh, gw = self.grid
        indices = np.zeros(gh * gw, dtype=np.int64)
        valid = np.zeros(gh * gw, dtype=bool)
        for r in range(gh):
            for c in range(gw):
                p = self._flat(r, c)
                tr, tc, ok = self._track(r, c, i, j)
                if ok and 0 <= tr < gh and 0 <= tc < gw:
                    indices[p] = self._flat(tr, tc)
                    valid[p] = True
        return indices, valid

    def _track(self, r: int, c: int, i: int, j: int) -> tuple[int, int, bool]:
        if self.kind == "static":
            return r, c, True
        if self.kind == "translating":
            return r, c + self.shifts[i] - self.shifts[j], True
        r0, bh, bw = self.block
        xi, xj = self.block_x[i], self.block_x[j]
        if r0 <= r < r0 + bh and xi <= c < xi + bw:
            return r, c - xi + xj, True
        covered = r0 <= r < r0 + bh and xj <= c < xj + bw
        return r, c, not covered

    def trajectories(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked maps from frame 0 into every frame: (n, cells) each."""
        maps, valid = zip(*(self.gt_map_pair(0, j) for j in range(self.n)))
        return np.stack(maps), np.stack(valid)


def make_synthetic(kind: str, n: int, h: int, w: int, seed: int, patch: int = 4) -> SyntheticVideo:
    """Build a deterministic test video of the given kind.

    static      one injective pattern plus small per-frame jitter
                (amplitude 0.001) so frames are distinct but perfectly
                corresponded; ground truth is the identity.
    translating a sliding window over a wide injective pattern, one token
                cell per frame; visible content is copied exactly.
    two_region  a textured block bouncing one cell per frame over a static
                injective background; occlusion handled in the maps.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if n < 2:
        raise ValueError("need at least 2 frames")
    if h % patch or w % patch:
        raise ValueError(f"dims ({h}, {w}) not divisible by patch {patch}")
    rng = Rng(seed).derive("synthetic", kind)
    gh, gw = h // patch, w // patch

    if kind == "static":
        base = rng.uniform_tensor((h, w))
        frames = [
            as_f32(np.clip(base + rng.derive("jitter", j).normal_tensor((h, w), STATIC_JITTER), 0.0, 1.0))
            for j in range(n)
        ]
        return SyntheticVideo(kind, n, h, w, patch, seed, frames)

    if kind == "translating":
        wide = rng.uniform_tensor((h, w + (n - 1) * patch))
        _assert_injective(wide, patch)
        frames = [as_f32(wide[:, j * patch : j * patch + w]) for j in range(n)]
        return SyntheticVideo(kind, n, h, w, patch, seed, frames, shifts=list(range(n)))

    r0, bh, bw = gh // 4, max(1, gh // 2), max(1, gw // 4)
    m = gw - bw
    if m < 1:
        raise ValueError("grid too narrow for the moving block")
    background = rng.uniform_tensor((h, w))
    _assert_injective(background, patch)
    block = rng.uniform_tensor((bh * patch, bw * patch))
    xs = [m - abs(m - (j % (2 * m))) for j in range(n)]
    frames = []
    for x in xs:
        f = background.copy()
        f[r0 * patch : (r0 + bh) * patch, x * patch : (x + bw) * patch] = block
        frames.append(as_f32(f))
    return SyntheticVideo(kind, n, h, w, patch, seed, frames, block=(r0, bh, bw), block_x=xs)


def _assert_injective(pattern: np.ndarray, patch: int) -> None:
    toks = frame_tokens(pattern, patch).tokens
    if np.unique(toks, axis=0).shape[0] != toks.shape[0]:
        raise AssertionError("pattern is not token-injective")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / mse); +inf when the inputs are identical."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes disagree: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def token_trajectory_variance(
    grids: Sequence[TokenGrid], maps: np.ndarray, valid: Optional[np.ndarray] = None
) -> float:
    """Mean per-trajectory token variance along ground-truth paths.

    ``maps[j][p0]`` locates frame-0 cell p0 in frame j; only trajectories
    valid in every frame count. Variance is over frames, averaged over
    dimensions and trajectories; 0 means perfectly consistent tokens.
    """
    n = len(grids)
    maps = np.asarray(maps)
    if maps.shape[0] != n:
        raise ShapeError("one map row per grid required")
    keep = np.ones(maps.shape[1], dtype=bool) if valid is None else np.asarray(valid).all(axis=0)
    if not keep.any():
        raise ValueError("no trajectory is valid across all frames")
    paths = np.stack(
        [grids[j].tokens[maps[j][keep]].astype(np.float64) for j in range(n)]
    )  # (n, trajectories, d)
    return float(paths.var(axis=0).mean())


def pca_tokens(grids: Sequence[TokenGrid], k: int = 3):
    """Project pooled tokens on their top-k principal directions.

    Tokens from all frames are centered together; directions come from a
    deflated power iteration on the d x d covariance. Components are
    sign-fixed (largest-magnitude coefficient positive) and the projections
    are min-max normalized jointly across frames. Rank-deficient directions
    are returned as all-zero images with a warning.
    """
    if not grids:
        raise ValueError("pca_tokens needs at least one grid")
    d = grids[0].dim
    X = np.concatenate([g.tokens.astype(np.float64) for g in grids], axis=0)
    if X.shape[0] < k + 1:
        raise ValueError(f"need at least {k + 1} tokens, got {X.shape[0]}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / X.shape[0]

    components = np.zeros((k, d))
    eigenvalues = np.zeros(k)
    n_valid = 0
    floor = max(np.trace(cov) * 1e-12, 1e-30)
    for j in range(k):
        # Power iteration restricted to the orthogonal complement of the
        # directions found so far (projection deflation).
        prev = components[:j]
        v = Rng(0x50CA).derive("pca-start", j).normals(d)
        v -= prev.T @ (prev @ v)
        start_norm = np.linalg.norm(v)
        lam = 0.0
        if start_norm < 1e-8:  # no orthogonal complement left (j >= dim)
            v = np.zeros(d)
        else:
            v /= start_norm
            for _ in range(10_000):
                w = cov @ v
                w -= prev.T @ (prev @ w)
                norm = np.linalg.norm(w)
                if norm < floor:
                    lam = 0.0
                    break
                w /= norm
                lam_new = float(w @ cov @ w)
                converged = (
                    np.linalg.norm(w - v) < 1e-13
                    or abs(lam_new - lam) < 1e-15 + 1e-12 * abs(lam_new)
                )
                v = w
                lam = lam_new
                if converged:
                    break
        rank_floor = max(floor, eigenvalues[0] * 1e-10) if j else floor
        if lam <= rank_floor:
            warnings.warn(
                f"token covariance rank {j} < requested {k}; trailing components zeroed",
                stacklevel=2,
            )
            break
        idx = int(np.argmax(np.abs(v)))
        if v[idx] < 0:
            v = -v
        components[j] = v
        eigenvalues[j] = lam
        n_valid = j + 1

    scores = [(g.tokens.astype(np.float64) - mean) @ components.T for g in grids]
    lo = np.min([s.min(axis=0) for s in scores], axis=0)
    hi = np.max([s.max(axis=0) for s in scores], axis=0)
    span = hi - lo
    images = []
    for g, s in zip(grids, scores):
        img = np.zeros((g.h * g.w, k))
        for j in range(n_valid):
            if span[j] > 1e-12:
                img[:, j] = (s[:, j] - lo[j]) / span[j]
        images.append(as_f32(img.reshape(g.h, g.w, k)))
    return PcaResult(images, as_f32(components), as_f32(eigenvalues), n_valid)


@dataclass
class PcaResult:
    images: list[np.ndarray]  # per frame, (h, w, k), jointly normalized
    components: np.ndarray  # (k, d); zero rows past n_components
    eigenvalues: np.ndarray  # (k,)
    n_components: int


def pca_slice(images: Sequence[np.ndarray], row: int) -> np.ndarray:
    """Stack one image row across frames into a (frames, w, k) slice."""
    if not 0 <= row < images[0].shape[0]:
        raise ValueError(f"slice row {row} outside [0, {images[0].shape[0]})")
    return as_f32(np.stack([img[row] for img in images]))


def feature_swap_reconstruct(source: int, target: int, manifest: VideoManifest, root) -> np.ndarray:
    """Re-sample the target frame with every attention output swapped.

    The source frame is re-sampled alongside as the donor; at each step and
    layer the target's post-projection tokens are replaced by the donor's
    current tokens, gathered through the nearest-neighbor field computed
    between the *stored* target and source tokens. With source == target
    this reproduces plain DDIM reconstruction bit-exactly.
    """
    den = manifest.make_denoiser()
    schedule = manifest.make_schedule()
    cond = den.embedder.embed(manifest.source_prompt)
    T = manifest.steps
    x_src = load_tensor(manifest.latent_path(root, source, T))
    x_tgt = load_tensor(manifest.latent_path(root, target, T))
    for t in range(T, 0, -1):
        fields = {}
        for layer in range(manifest.layers):
            src_grid = load_tokens(manifest, root, t, layer, target)
            key_grid = load_tokens(manifest, root, t, layer, source)
            fields[layer] = nn_field_blocked(src_grid, key_grid)
        donor: dict[int, np.ndarray] = {}
        eps_src = den.eps(
            x_src,
            t,
            cond,
            hooks=BlockHooks(on_output=lambda meta, tok: donor.__setitem__(meta.layer, tok)),
            frame=source,
        )
        eps_tgt = den.eps(
            x_tgt,
            t,
            cond,
            hooks=BlockHooks(replace=lambda meta, tok: donor[meta.layer][fields[meta.layer].indices]),
            frame=target,
        )
        x_src = ddim_step(x_src, eps_src, t, schedule, "backward")
        x_tgt = ddim_step(x_tgt, eps_tgt, t, schedule, "backward")
    return x_tgt


def rgb_warp(source: np.ndarray, field) -> np.ndarray:
    """Warp source pixels by a token-resolution correspondence field.

    The field is upsampled nearest-neighbor: each pixel keeps its offset
    within its token cell and fetches from the corresponding source cell.
    """
    h, w = source.shape[:2]
    if h % field.h or w % field.w or (h // field.h) != (w // field.w):
        raise ShapeError(f"pixel dims {source.shape[:2]} incompatible with grid ({field.h}, {field.w})")
    p = h // field.h
    cells = field.indices.reshape(field.h, field.w)
    out = np.empty_like(source)
    for r in range(field.h):
        for c in range(field.w):
            sr, sc = divmod(int(cells[r, c]), field.w)
            out[r * p : (r + 1) * p, c * p : (c + 1) * p] = source[
                sr * p : (sr + 1) * p, sc * p : (sc + 1) * p
            ]
    return out


def write_ppm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (grayscale or 3-channel) as binary P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"write_ppm expects (h, w) or (h, w, 3), got {image.shape}")
    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_metrics_csv(path, rows: Sequence[tuple]) -> None:
    """Write (frame, metric, value) rows with the documented header."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "metric", "value"])
        for row in rows:
            writer.writerow(list(row))


def save_synthetic(video: SyntheticVideo, outdir) -> None:
    """Write frames plus the generator parameters needed to rebuild them."""
    import json
    import os

    from .tensors import save_tensor

    os.makedirs(os.path.join(outdir, "frames"), exist_ok=True)
    for i, frame in enumerate(video.frames):
        save_tensor(frame, os.path.join(outdir, "frames", f"f{i}.tft"))
    meta = {
        "format": "tokenflow-synthetic",
        "kind": video.kind,
        "n": video.n,
        "h": video.h,
        "w": video.w,
        "patch": video.patch,
        "seed": video.seed,
    }
    with open(os.path.join(outdir, "synth.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def load_synthetic(path) -> SyntheticVideo:
    """Rebuild a synthetic video from its parameters, verifying the frames."""
    import json
    import os

    if os.path.isdir(path):
        path = os.path.join(path, "synth.json")
    with open(path) as f:
        meta = json.load(f)
    if meta.get("format") != "tokenflow-synthetic":
        raise ValueError(f"{path}: not a synthetic-video description")
    video = make_synthetic(
        meta["kind"], meta["n"], meta["h"], meta["w"], meta["seed"], patch=meta["patch"]
    )
    root = os.path.dirname(path)
    for i in range(video.n):
        stored = load_tensor(os.path.join(root, "frames", f"f{i}.tft"))
        if not np.array_equal(stored, video.frames[i]):
            raise ValueError(f"stored frame {i} disagrees with generator output")
    return video
