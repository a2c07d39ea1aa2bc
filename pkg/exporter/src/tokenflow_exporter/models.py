"""Model loading and self-attention module resolution.

``load_model`` understands two identifier schemes:

    builtin:tiny        a small seeded latent UNet defined below; random
                        weights, deterministic, needs no downloads
    diffusers:<repo>    a pretrained UNet2DConditionModel loaded through
                        the optional ``diffusers`` dependency

Self-attention layers are selected by fnmatch patterns over module names
(default ``*attn1``); every selected module must be attention-shaped, i.e.
map (batch, tokens, channels) to the same shape.
"""

from __future__ import annotations

import fnmatch
import math

import torch
from torch import nn

DEFAULT_LAYER_PATTERN = "*attn1"


class SelfAttention(nn.Module):
    """Plain single-head self-attention over (batch, tokens, channels).

    ``sharpness`` scales the logits; random-weight attention is otherwise
    near-uniform and its outputs collapse to the value mean, which makes
    the exported features useless for matching. Trained models do not need
    this, but the builtin stand-in does.
    """

    def __init__(self, channels: int, sharpness: float = 8.0):
        super().__init__()
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)
        self.scale = channels**-0.5 * sharpness

    def forward(self, hidden_states: torch.Tensor) -> torch.Tensor:
        q = self.to_q(hidden_states)
        k = self.to_k(hidden_states)
        v = self.to_v(hidden_states)
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        return self.to_out(attn @ v)


class TinyBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(4, channels)
        self.attn1 = SelfAttention(channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        x = x + self.attn1(tokens).transpose(1, 2).reshape(b, c, h, w)
        return x + self.conv(x)


class TinyUNet(nn.Module):
    """Deterministic stand-in for a latent-diffusion noise predictor.

    Operates on (batch, 4, h, w) latents at a single token resolution
    (stride ``patch``), with sinusoidal timestep conditioning and an
    additive prompt embedding. Weights come from ``torch.manual_seed``.
    """

    latent_channels = 4

    def __init__(self, channels: int = 32, blocks: int = 2, patch: int = 4, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch = patch
        self.conv_in = nn.Conv2d(self.latent_channels, channels, patch, stride=patch)
        self.blocks = nn.ModuleList(TinyBlock(channels) for _ in range(blocks))
        self.conv_out = nn.ConvTranspose2d(channels, self.latent_channels, patch, stride=patch)
        self.time_proj = nn.Linear(channels, channels, bias=False)
        self.cond_proj = nn.Linear(channels, channels, bias=False)
        with torch.no_grad():
            self.conv_out.weight *= 0.05
        self.channels = channels

    def time_embedding(self, t: int) -> torch.Tensor:
        half = self.channels // 2
        freqs = torch.exp(-math.log(200.0) * torch.arange(half) / max(half - 1, 1))
        angles = freqs * float(t)
        return torch.cat([torch.sin(angles), torch.cos(angles)])

    def forward(self, x: torch.Tensor, t: int, cond: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv_in(x)
        emb = self.time_proj(self.time_embedding(t))
        if cond is not None:
            emb = emb + self.cond_proj(cond)
        h = h + emb[None, :, None, None]
        for block in self.blocks:
            h = block(h)
        return self.conv_out(h)


class DiffusersAdapter(nn.Module):
    """Uniform (x, t, cond) call surface over a diffusers UNet."""

    def __init__(self, unet):
        super().__init__()
        self.unet = unet

    def forward(self, x, t, cond=None):
        if cond is None:
            cond = torch.zeros(1, 8, self.unet.config.cross_attention_dim)
        return self.unet(x, t, encoder_hidden_states=cond).sample


def load_model(identifier: str, seed: int = 0) -> nn.Module:
    scheme, _, name = identifier.partition(":")
    if scheme == "builtin":
        if name != "tiny":
            raise ValueError(f"unknown builtin model {name!r}")
        return TinyUNet(seed=seed).eval()
    if scheme == "diffusers":
        try:
            from diffusers import UNet2DConditionModel
        except ImportError as e:
            raise ImportError(
                "install the 'diffusers' extra to load pretrained UNets"
            ) from e
        unet = UNet2DConditionModel.from_pretrained(name, subfolder="unet")
        return DiffusersAdapter(unet.eval())
    raise ValueError(f"model identifier must be builtin:... or diffusers:..., got {identifier!r}")


def resolve_attention_layers(model: nn.Module, patterns: list[str]) -> list[tuple[str, nn.Module]]:
    """Named modules matching the patterns, validated and name-ordered."""
    matches = [
        (name, module)
        for name, module in model.named_modules()
        if any(fnmatch.fnmatch(name, pat) for pat in patterns)
    ]
    if not matches:
        raise ValueError(f"no modules match layer patterns {patterns}")
    for name, module in matches:
        if not callable(module):
            raise ValueError(f"selected layer {name} is not callable")
    return sorted(matches, key=lambda kv: kv[0])
