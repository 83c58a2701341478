"""Layer-wise visual token compression for a small ViT encoder.

A pixel-shuffle patch merger with a parameter-free average-pooling residual
can be inserted after any block of a pre-norm ViT. The package also ships an
analytic FLOP model, a latency harness, and a frozen-encoder training loop
for the merger.
"""

from .cost import CostReport, LatencyStats, LayerCost, bench, estimate_flops, measure_latency, sweep
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encode,
    encoder_block,
    init_encoder_params,
    patch_embed,
    resolve_k,
    shape_trace,
)
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DivisibilityError,
    EvaluationError,
    LayerCompError,
)
from .experiments import Projector, TrainConfig, TrainLog, synth_batch, train_stage1
from .grid import (
    TokenGrid,
    avg_pool2d,
    avg_pool_oracle,
    channel_average,
    pixel_shuffle,
    pixel_unshuffle,
    residual_shortcut,
)
from .pml import MergerVariant, PMLParams, init_params, load_params, merge_forward, pml_forward, save_params
from .tensor import GradTape, Tensor, backward, gelu, gradient_check, layer_norm, matmul, softmax_last_axis

__version__ = "0.1.0"
