"""Desk-scale cascaded text-to-video diffusion.

Continuous-time variance-preserving diffusion with a cosine schedule,
velocity-parameterized space-time-separable denoisers, guided ancestral and
DDIM samplers, a base / temporal-SR / spatial-SR cascade with conditioning
augmentation, joint image-video training, and two-stage progressive
distillation, all verified against closed-form oracles on a synthetic
corpus.
"""

from .cascade import (
    AugmentationPolicy,
    PipelineSpec,
    StageSpec,
    augment_condition,
    derive_stage_example,
    prepare_condition,
    run_pipeline,
)
from .dataset import (
    DatasetManifest,
    SceneParams,
    classify_clip,
    gen_dataset,
    load_clip,
    load_dataset,
    render_clip,
    save_clip,
)
from .denoiser import (
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    FrameMask,
    StageKind,
    TemporalMixer,
    build_denoiser,
    bundle_from_texts,
    denoise,
    pack_image_batch,
    parameter_count,
    unpack_image_batch,
)
from .diffusion import (
    COSINE,
    NoiseSchedule,
    PredictionSpace,
    convert_prediction,
    posterior,
    q_sample,
    schedule_at,
    snr_to_alpha_sigma,
    t_from_log_snr,
    transition,
)
from .distill import DistillConfig, Student, distill_guidance, distill_stage, distill_to_steps, halve_steps
from .graph import Graph, GraphBuilder, GraphError, eval_and_grad, eval_graph, finite_diff_check
from .sampling import (
    ClipMode,
    GuidanceSchedule,
    SamplerConfig,
    SamplerKind,
    ancestral_sample,
    clip_xhat,
    ddim_sample,
    distilled_sample,
    guidance_weight_at,
    guided_prediction,
)
from .tensor import Tensor, TensorError, bilinear_resize, temporal_upsample, tensor
from .textenc import TextEmbedding, embed_text, null_embedding
from .training import TrainConfig, TrainState, diffusion_loss, psnr, train_stage, train_step

__version__ = "0.1.0"
