from .autodiff import GradCheckReport, Tape, TapeConsumedError, backward, finite_difference_check
from .checkpoint import load_checkpoint, save_checkpoint
from .ops import (
    LN_EPS,
    MLP,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    fourier_positional_embedding,
    kl_standard_normal,
    layer_norm,
    linear,
    mask_bias,
    masked_multihead_attention,
    masked_softmax_attention,
    mlp_block,
    reparameterize,
    rope_temporal,
)
from .optim import ParameterSet, adamw_step, cosine_lr
