"""adafuse: multimodal segmentation by stitching frozen transformer
encoders together with cross-modal bottleneck adapters."""

from .tensor import (Tensor, Tape, ShapeError, active_tape, backward, no_grad,
                     add, sub, mul, matmul, gelu, softmax, log_softmax,
                     layer_norm, dropout, drop_path, tsum, tmean, reshape,
                     transpose, concat, texp, tlog, extract_patches,
                     upsample_bilinear)
from .gradcheck import grad_check, grad_check_params, relative_error
from .encoder import Encoder, EncoderConfig, TransformerBlock, tokens_to_map, map_to_tokens
from .adapters import (AdapterBank, CrossModalAdapter, Density, DensityConfig,
                       build_adapter_bank, check_density_equivalence,
                       fused_block_forward, fused_encode, routes_for)
from .heads import Decoder, FeatureFusion, modal_merge
from .model import FusionModel, ModelConfig, build_model
from .budget import (CountSpec, adapter_param_count, analytic_count,
                     budget_report, empirical_count, route_multiplier)
from .data import (IGNORE_INDEX, DatasetError, MultimodalSample, SceneDataset,
                   batch_iter, generate_synthetic, load_dataset, save_dataset,
                   stack_batch)
from .training import (AdamW, CheckpointError, ConfusionMatrix, TrainConfig,
                       TrainingError, cross_entropy, evaluate, fit,
                       format_metrics, load_adapter_checkpoint,
                       load_checkpoint, lr_at, save_checkpoint, train_step)

__version__ = "0.1.0"
