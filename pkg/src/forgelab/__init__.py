"""forgelab: desk-scale face-forgery detection with knowledge-injection
attention, coarse forgery localization, activation regularizers, and a
self-blending training-data factory."""

from .backbone import (
    ForwardOutput,
    InjectionViT,
    ParameterPartition,
    PatchFeatures,
    load_checkpoint,
    parameter_partition,
    save_checkpoint,
)
from .config import (
    BackboneConfig,
    RegularizerConfig,
    TrainingConfig,
    config_hash,
    format_config,
    parse_config_file,
)
from .degradations import DEGRADATION_KINDS, degrade
from .evaluation import (
    ActivationReport,
    EvalRecord,
    FrameScore,
    auc,
    evaluate_samples,
    final_layer_features,
    layerwise_activation_report,
    pca_features,
    pca_project,
    robustness_sweep,
    roc_auc,
    score_samples,
    video_level_record,
    video_score,
)
from .injection import (
    AuthenticityCorrelation,
    InjectionAttention,
    authenticity_correlation,
    gradient_symmetry_probe,
    injected_attention_head,
    knowledge_query,
    symmetry_disruption_probe,
)
from .localization import (
    LocalizationBranch,
    LocalizationFeatures,
    PatchLabelMap,
    coarse_patch_labels,
    dice_loss,
    update_localization_features,
)
from .regularizers import (
    ActivationProfile,
    activation_profile,
    activation_value,
    contrast_loss,
    regularizer_gradients,
    suppression_loss,
)
from .synthesis import (
    BlendRecipe,
    DegenerateRecipeError,
    ImageSample,
    augment,
    build_blend_mask,
    load_manifest_dataset,
    load_real_dataset,
    self_blend,
    toy_face_dataset,
    write_manifest_dataset,
)
from .training import (
    ConvergenceReport,
    EarlyStopper,
    LossBreakdown,
    TrainingResult,
    best_model,
    convergence_report,
    load_metrics_log,
    lr_at,
    total_loss,
    train,
)

__version__ = "0.1.0"
