"""Two-stage parameter-efficient fine-tuning on a toy decoder-only
transformer: a shared knowledge-aggregating adapter trained alongside a
routed noise-absorbing mixture, stripped after stage one, then aligned under
an orthogonality penalty and merged back into the base weights."""

from .tensor import Tensor, GradTape, Rng, tape, no_grad, backward, finite_diff_grad
from .model import ModelConfig, Model, init_base
from .adapters import (AdapterConfig, LoraAdapter, MoLoraAdapter, lora_init,
                       strip_na, merge_attention_lora, merge_final)
from .training import TrainConfig, run_pretrain, run_mka, run_da
from .checkpoint import save_checkpoint, load_checkpoint

__version__ = "0.1.0"
