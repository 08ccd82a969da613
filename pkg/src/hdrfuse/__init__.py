"""HDR fusion toolkit: synthetic dynamic-scene data, a compact fusion
network, two-branch sim-to-real adapters with lossless merging, and
single-pass test-time adaptation."""

from .adapter import (
    AdapterBranch,
    AdapterTrainer,
    InjectionPlan,
    S2RAdapter,
    adapt_supervised,
    inject,
    merge_model,
    model_from_checkpoint,
)
from .bracket import BracketConfig, LdrBracket, add_gaussian_noise, ldr_to_linear, synth_bracket
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    HdrfuseError,
    NumericContractError,
    PlanError,
    ValidationError,
)
from .imageio import (
    HdrImage,
    LdrImage,
    ToneMapParams,
    apply_exposure,
    luminance,
    mu_law,
    normalize_frames,
    read_pfm,
    robust_max,
    write_pfm,
)
from .metrics import (
    FeatureVector,
    MetricsReport,
    Pca2D,
    analyze,
    analyze_images,
    embed_2d,
    feature_vector,
    warp_error,
)
from .model import Checkpoint, FusionNet, FusionNetConfig, FusionTrainer, finetune, train
from .quality import EvalReport, evaluate, psnr, ssim
from .scene import (
    SceneSequence,
    SceneSpec,
    ShakeSpec,
    SpriteSpec,
    export_sequence,
    generate_sequence,
    load_sequence,
    perlin_shake,
)
from .tta import (
    AugmentationSpec,
    TtaEngine,
    TtaState,
    UncertaintyEstimate,
    calibrate_uncertainty,
    ema_update,
    estimate_uncertainty,
    scales_from_uncertainty,
)

__version__ = "0.1.0"
