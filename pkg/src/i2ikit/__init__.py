"""Desk-scale transfer learning pipeline for unpaired image translation."""

from .checkpoint import Checkpoint, load_checkpoint, make_checkpoint, save_checkpoint
from .config import StageConfig, load_config
from .data import Corpus, load_image_folder, synthetic_shapes
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    I2IKitError,
    NumericalError,
    SealedDataError,
    ShapeError,
    UsageError,
)
from .i2i import (
    ConditionalInit,
    I2ISystem,
    TwoClassInit,
    build_system,
    fisher_diagonal,
    i2i_train_step,
    reconstruction_loss,
    run_i2i_stage,
    translate,
    weight_fluctuation,
    weight_fluctuation_probe,
)
from .metrics import (
    FeatureExtractor,
    FeatureSet,
    MetricReport,
    build_feature_extractor,
    fid,
    fid_from_moments,
    kid,
    mean_class_metrics,
    rc_fc,
)
from .nets import (
    Adaptor,
    ArchitectureSpec,
    Discriminator,
    Generator,
    SharingPlan,
    build_networks,
    default_injection_weights,
    share_deep_layers,
)
from .pretrain import (
    finetune_conditional,
    finetune_source_target,
    gan_loss,
    train_base_gan,
)
from .selfinit import alignment_loss, reconstruction_probe, self_initialize_adaptor

__version__ = "0.1.0"
