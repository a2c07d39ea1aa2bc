import hashlib
import json
import os

import numpy as np
import pytest

import tokenflow  # the engine: consumed through its public file contracts
from tokenflow_exporter import (
    ExportConfig,
    TinyUNet,
    export_features,
    load_model,
    resolve_attention_layers,
)
from tokenflow_exporter.cli import main as export_main
from tokenflow_exporter.tft import load_tensor as exporter_load


def render_clip(path, n=8, size=64, shift=2, seed=0):
    """A short smooth clip: a panning low-frequency scene plus a moving blob."""
    from PIL import Image

    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.1, 0.9, size=(size // 8, (size + n * shift) // 8 + 1))
    wide = np.asarray(
        Image.fromarray((coarse * 255).astype(np.uint8), mode="L").resize(
            ((size + n * shift), size), Image.BICUBIC
        ),
        dtype=np.float32,
    ) / 255.0
    paths = []
    for i in range(n):
        frame = wide[:, i * shift : i * shift + size].copy()
        cy, cx = size // 2, size // 4 + i * shift
        yy, xx = np.mgrid[0:size, 0:size]
        blob = 0.7 * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / 60.0))
        frame = np.clip(frame + blob, 0.0, 1.0)
        img = Image.fromarray((frame * 255).astype(np.uint8), mode="L")
        p = os.path.join(path, f"frame{i:03d}.png")
        img.save(p)
        paths.append(p)
    return paths


def tree_digest(root):
    h = hashlib.sha256()
    for base, dirs, files in sorted(os.walk(root)):
        dirs.sort()
        for name in sorted(files):
            p = os.path.join(base, name)
            h.update(os.path.relpath(p, root).encode())
            h.update(open(p, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def clip(tmp_path_factory):
    d = tmp_path_factory.mktemp("clip")
    return render_clip(str(d))


@pytest.fixture(scope="module")
def exported(tmp_path_factory, clip):
    out = str(tmp_path_factory.mktemp("export"))
    cfg = ExportConfig(
        model="builtin:tiny",
        frames=clip,
        output=out,
        source_prompt="a moving blob",
        steps=4,
        latent_size=(32, 32),
        seed=3,
        input_tokens=True,
    )
    manifest = export_features(cfg)
    return out, manifest


def test_file_counts_match_manifest(tmp_path, clip):
    out = str(tmp_path / "small")
    cfg = ExportConfig(
        model="builtin:tiny", frames=clip[:2], output=out, steps=2, latent_size=(32, 32)
    )
    manifest = export_features(cfg)
    n, steps, layers = manifest["n_frames"], manifest["steps"], manifest["layers"]
    assert (n, steps, layers) == (2, 2, 2)
    latents = [f for _, _, fs in os.walk(os.path.join(out, "latents")) for f in fs]
    assert len(latents) == n * steps
    tokens = [f for _, _, fs in os.walk(os.path.join(out, "tokens")) for f in fs]
    assert len(tokens) == n * steps * layers


def test_exported_tensors_load_in_engine_bit_exact(exported):
    out, manifest = exported
    token_path = os.path.join(out, "tokens", "t1", "l0", "f0.tft")
    via_engine = tokenflow.load_tensor(token_path)
    via_exporter = exporter_load(token_path)
    assert via_engine.tobytes() == via_exporter.tobytes()
    assert via_engine.shape == (
        manifest["token_grid"][0] * manifest["token_grid"][1],
        manifest["token_dim"],
    )
    latent = tokenflow.load_tensor(os.path.join(out, "frames", "f0.tft"))
    assert latent.shape == tuple(manifest["latent_shape"])


def test_manifest_accepted_and_validated_by_engine(exported):
    out, _ = exported
    manifest = tokenflow.VideoManifest.load(out)
    manifest.validate(out)
    grid = tokenflow.load_tokens(manifest, out, 1, 0, 0)
    assert grid.tokens.shape[0] == grid.h * grid.w


def test_input_token_manifest_accepted_by_engine(exported):
    out, _ = exported
    manifest = tokenflow.VideoManifest.load(os.path.join(out, "manifest_input.json"))
    assert manifest.token_hook == "input"
    manifest.validate(out)
    a = tokenflow.load_tokens(manifest, out, 1, 0, 0).tokens
    b = tokenflow.load_tokens(tokenflow.VideoManifest.load(out), out, 1, 0, 0).tokens
    assert a.shape == b.shape
    assert not np.array_equal(a, b)


def test_export_is_deterministic(tmp_path, clip):
    outs = []
    for run in ("a", "b"):
        out = str(tmp_path / run)
        export_features(
            ExportConfig(
                model="builtin:tiny", frames=clip[:3], output=out, steps=2,
                latent_size=(32, 32), seed=11,
            )
        )
        outs.append(tree_digest(out))
    assert outs[0] == outs[1]


def self_match_rate(manifest, root, i, j, t, layer):
    src = tokenflow.load_tokens(manifest, root, t, layer, i)
    key = tokenflow.load_tokens(manifest, root, t, layer, j)
    field = tokenflow.nn_field_blocked(src, key)
    return float(np.mean(field.indices == np.arange(field.indices.size)))


def test_adjacent_self_match_beats_shuffled(exported):
    """Deepest-layer features of neighboring frames correspond in place."""
    out, _ = exported
    manifest = tokenflow.VideoManifest.load(out)
    n = manifest.n_frames
    layer = manifest.layers - 1
    steps = range(1, manifest.steps + 1)
    adjacent = np.mean(
        [self_match_rate(manifest, out, i, i + 1, t, layer) for t in steps for i in range(n - 1)]
    )
    shuffled = np.mean(
        [self_match_rate(manifest, out, i, (i + n // 2) % n, t, layer) for t in steps for i in range(n)]
    )
    assert adjacent > shuffled, f"adjacent {adjacent:.3f} vs shuffled {shuffled:.3f}"


def test_engine_cli_reads_exported_manifest(exported, tmp_path):
    import subprocess
    import sys

    out, _ = exported
    nn_dir = str(tmp_path / "nn")
    proc = subprocess.run(
        [sys.executable, "-m", "tokenflow", "nnfield", "--manifest", out,
         "--frame", "0", "--keyframe", "1", "--t", "1", "--out", nn_dir],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "status=ok" in proc.stdout
    pca_dir = str(tmp_path / "pca")
    proc = subprocess.run(
        [sys.executable, "-m", "tokenflow", "pca", "--manifest", out,
         "--t", "1", "--out", pca_dir],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert os.path.exists(os.path.join(pca_dir, "pca_f0.ppm"))


def test_layer_pattern_resolution():
    model = load_model("builtin:tiny")
    layers = resolve_attention_layers(model, ["*attn1"])
    assert [name for name, _ in layers] == ["blocks.0.attn1", "blocks.1.attn1"]
    with pytest.raises(ValueError):
        resolve_attention_layers(model, ["*nothing*"])


def test_single_layer_selection(tmp_path, clip):
    out = str(tmp_path / "one")
    manifest = export_features(
        ExportConfig(
            model="builtin:tiny", frames=clip[:2], output=out, steps=2,
            latent_size=(32, 32), layer_patterns=["blocks.0.attn1"],
        )
    )
    assert manifest["layers"] == 1
    tokenflow.VideoManifest.load(out).validate(out)


def test_tiny_unet_shapes_and_determinism():
    model_a = TinyUNet(seed=5).eval()
    model_b = TinyUNet(seed=5).eval()
    import torch

    x = torch.full((1, 4, 32, 32), 0.25)
    with torch.no_grad():
        out_a = model_a(x, 3)
        out_b = model_b(x, 3)
    assert out_a.shape == x.shape
    assert torch.equal(out_a, out_b)


def test_tft_latent_frames_accepted(tmp_path, exported):
    out, manifest = exported
    reuse = [os.path.join(out, "frames", f"f{i}.tft") for i in range(2)]
    alt = str(tmp_path / "relatent")
    export_features(
        ExportConfig(model="builtin:tiny", frames=reuse, output=alt, steps=2,
                     latent_size=(32, 32))
    )
    a = tokenflow.load_tensor(os.path.join(alt, "frames", "f0.tft"))
    b = tokenflow.load_tensor(reuse[0])
    assert np.array_equal(a, b)


def test_model_identifier_validation():
    with pytest.raises(ValueError):
        load_model("builtin:enormous")
    with pytest.raises(ValueError):
        load_model("magic")


def test_cli_smoke(tmp_path, clip, capsys):
    out = str(tmp_path / "cli")
    code = export_main([
        "--frames", *clip[:2], "--out", out, "--steps", "2", "--seed", "1",
    ])
    captured = capsys.readouterr()
    assert code == 0
    assert "status=ok" in captured.out
    assert os.path.exists(os.path.join(out, "manifest.json"))


def test_cli_reports_errors(tmp_path, capsys):
    code = export_main([
        "--frames", "a.png", "--out", str(tmp_path / "x"),
    ])
    captured = capsys.readouterr()
    assert code == 1
    assert "error" in captured.err
