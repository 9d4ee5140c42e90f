"""Feature-map upsampling with JBU stacks, tile mosaics and a windowed-attention refinement block."""

from .downsample import DownsamplerParams, attention_downsample
from .featurizer import (
    DebiasBuffer,
    DistributionStats,
    Featurizer,
    FeaturizerSpec,
    debias_apply,
    featurize,
    phi_s_apply,
    phi_s_fit,
    phi_s_invert,
)
from .jbu import JbuParams, JbuStack, build_stack, jbu_stack_upsample, jbu_upsample
from .metrics import (
    MetricsReport,
    cost_model,
    cost_proof_check,
    crf_loss,
    fidelity,
    median_gamma,
    mmd2_unbiased,
    tiling_error,
    tv_loss,
)
from .numerics import ViewTransform, backward, bilinear_resample, warp_apply
from .sharpen import SharpenParams, featsharp_combine, local_attention
from .tiler import TileGrid, make_tiles, s2_combine, stitch, tile_upsample
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
