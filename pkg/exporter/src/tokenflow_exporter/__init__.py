"""Export real diffusion-model features into the engine's file formats."""

from .export import ExportConfig, export_features, linear_alphas_bar, prompt_embedding
from .models import TinyUNet, load_model, resolve_attention_layers
from .tft import load_tensor, save_tensor

__version__ = "0.1.0"
