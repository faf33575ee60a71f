"""Face personalization for frozen text-to-image diffusion stacks.

Multi-scale identity encoding, expression-guided conditioning with a
learnable unconditional vector, class-guided denoising regularization,
a guided ancestral sampler with delayed-subject-conditioning and
expression-conditional variants, and the six-metric identity/text
evaluation protocol.
"""

from .diffusion import (
    FrozenStack,
    LossReport,
    NoiseScheduler,
    NoisyLatent,
    SegmentationMask,
    TrainState,
    TrainStepConfig,
    add_noise,
    cgdr_loss,
    downsample_mask,
    masked_reconstruction_loss,
    reconstruction_loss,
    train_mapper,
    training_step,
)
from .encoder import (
    EncoderConfig,
    MarginHead,
    MultiScaleIdentityEncoder,
    MultiScaleIdentityFeature,
    PretrainConfig,
    SimilarityDistribution,
    extract_multiscale_identity,
    multiscale_arcface_loss,
    pretrain_identity_encoder,
    roc_auc,
    similarity_distribution,
)
from .evaluation import (
    SampleReport,
    UpperBoundCurve,
    clip_score,
    dclip_score,
    frechet_distance,
    id_text_aggregate,
    identity_similarity,
    siglip_score,
    summarize_reports,
    upper_bound_curve,
)
from .expression import (
    ConditionVector,
    ExpressionFeature,
    UnconditionalExpressionVector,
    compose_condition,
    extract_expression,
)
from .experiment import ExperimentConfig, load_manifest, load_prompt_set, run_experiment
from .mapper import (
    FaceMapper,
    IdentifierEmbedding,
    MapperConfig,
    PromptTemplate,
    inject_identifier,
    map_to_identifier,
)
from .sampler import (
    InferenceConfig,
    cfg_noise,
    dsc_generate,
    expression_conditional_generate,
    generate,
)

__all__ = [
    "EncoderConfig",
    "ExperimentConfig",
    "FaceMapper",
    "FrozenStack",
    "IdentifierEmbedding",
    "InferenceConfig",
    "LossReport",
    "MapperConfig",
    "MarginHead",
    "MultiScaleIdentityEncoder",
    "MultiScaleIdentityFeature",
    "NoiseScheduler",
    "NoisyLatent",
    "PretrainConfig",
    "PromptTemplate",
    "SampleReport",
    "SegmentationMask",
    "SimilarityDistribution",
    "TrainState",
    "TrainStepConfig",
    "UnconditionalExpressionVector",
    "UpperBoundCurve",
    "ConditionVector",
    "ExpressionFeature",
    "add_noise",
    "cfg_noise",
    "cgdr_loss",
    "clip_score",
    "compose_condition",
    "dclip_score",
    "downsample_mask",
    "dsc_generate",
    "expression_conditional_generate",
    "extract_expression",
    "extract_multiscale_identity",
    "frechet_distance",
    "generate",
    "id_text_aggregate",
    "identity_similarity",
    "inject_identifier",
    "load_manifest",
    "load_prompt_set",
    "map_to_identifier",
    "masked_reconstruction_loss",
    "multiscale_arcface_loss",
    "pretrain_identity_encoder",
    "reconstruction_loss",
    "roc_auc",
    "run_experiment",
    "siglip_score",
    "similarity_distribution",
    "summarize_reports",
    "train_mapper",
    "training_step",
    "upper_bound_curve",
]
