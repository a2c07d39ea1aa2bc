"""Consistent video editing on diffusion latents.

The engine inverts every frame of a video with deterministic DDIM, computes
inter-frame nearest-neighbor correspondences between the self-attention
tokens of the original video, jointly edits a sampled set of keyframes with
extended attention, and propagates the edited tokens to all frames so the
edit stays temporally consistent. A seeded toy transformer denoiser makes
the whole loop runnable without pretrained weights; real diffusion features
can be ingested through the TFT1 + manifest interface.
"""

from .tensors import (
    Rng,
    ShapeError,
    TensorFormatError,
    as_f32,
    load_tensor,
    matmul,
    save_tensor,
    softmax_rows,
)
from .attention import (
    AttentionInputs,
    AttentionWeights,
    BlockHooks,
    TokenGrid,
    attend,
    attention_block,
    extended_attention,
    self_attention,
)
from .correspondence import (
    NNField,
    adjacent_keyframes,
    cosine_distance,
    load_nn_field,
    nn_field_blocked,
    nn_field_bruteforce,
    save_nn_field,
)
from .propagation import BlendWeights, TBase, blend_weight, tokenflow_propagate
from .diffusion import (
    DiffusionTrajectory,
    PromptEmbedder,
    Schedule,
    ToyDenoiser,
    cfg_eps,
    ddim_step,
    ddim_update,
    invert,
    sample,
)
from .pipeline import (
    EditSession,
    ManifestError,
    PipelineError,
    PromptSwapEditor,
    VideoManifest,
    edit_video,
    load_tokens,
    preprocess,
    sample_keyframes,
)
from .evalkit import (
    SyntheticVideo,
    feature_swap_reconstruct,
    frame_tokens,
    load_synthetic,
    make_synthetic,
    pca_slice,
    pca_tokens,
    psnr,
    rgb_warp,
    save_synthetic,
    token_trajectory_variance,
    write_metrics_csv,
    write_ppm,
)

__version__ = "0.1.0"
