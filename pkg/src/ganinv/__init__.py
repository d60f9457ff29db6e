"""Invert images into the latent spaces of frozen generators.

The package trains adaptive encoders against three generator families
(style-modulated, progressive, class-conditional) using a multi-metric
similarity loss over three attention views of each image, then uses
those encoders for single-pass inversion, per-image fine-tuning, direct
latent optimization, and latent-direction editing, with an evaluation
harness for PSNR/SSIM/MSE/LPIPS/CS reporting.
"""

from .attention import (
    AttentionConfig,
    TripleScaleViews,
    centre_views,
    gradcam_heatmap,
    gradcam_views,
    make_views,
    render_heatmap,
    views_like,
)
from .backbones import FeatureBackbone, TinyBackbone, Vgg16Backbone, load_backbone
from .encoder import (
    EncoderBlockSpec,
    EncoderSpec,
    EqualizedConv2d,
    EqualizedLinear,
    build_encoder,
    conv_plan,
    encode,
    equalized_scale,
    load_encoder,
    save_encoder,
)
from .errors import ConfigurationError, ContractViolation, InvalidInputError, NonFiniteLossError
from .evalharness import MetricReport, emit_grid, evaluate_pairs, load_image, pair_metrics, psnr, save_image
from .generators import (
    GeneratorSpec,
    LatentBundle,
    build_mapping,
    build_toy_generator,
    channel_schedule_for,
    load_pretrained,
    parameter_checksum,
    sample_latents,
    save_generator,
    synthesize,
)
from .inversion import (
    EditRequest,
    InversionResult,
    edit,
    finetune_encoder,
    invert_batch,
    load_direction,
    optimize_w_direct,
    save_direction,
)
from .similarity import (
    LossBreakdown,
    LossWeights,
    MetricOptions,
    cos_loss,
    image_loss,
    kl_softmax_loss,
    latent_loss,
    lpips_distance,
    mse_loss,
    ssim,
    total_loss,
)
from .training import TrainConfig, TrainHistory, apply_strategy_gating, full_scale_batch_size, train_encoder

__version__ = "0.1.0"
