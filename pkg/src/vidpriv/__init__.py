"""vidpriv: adversarial training and evaluation of privacy-preserving video
anonymization transforms, with a resampled-attacker trade-off protocol."""

from .baselines import (
    FixedTransform,
    ObfuscationSpec,
    downsample,
    downsample_transform,
    identity_transform,
    obfuscate,
    obfuscation_transform,
    parse_obfuscation_code,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AnnotatedClip,
    Dataset,
    DatasetSplits,
    PrivacyAttributeFrameLabel,
    action_attribute_correlation,
    action_distribution,
    binarize_attributes,
    crop_clip,
    generate_toy_dataset,
    load_clip_directory,
    load_privacy_annotations,
    split_dataset,
)
from .evaluation import (
    EvalSettings,
    TradeoffPoint,
    accuracy,
    append_tradeoff_row,
    cmap,
    evaluate_two_step,
    prf1_report,
    read_tradeoff_table,
    run_baseline_point,
    write_tradeoff_table,
)
from .losses import (
    LossValue,
    cross_entropy,
    hybrid_loss,
    negative_budget_xent,
    prediction_entropy,
)
from .models import (
    ArchSpec,
    ParameterSet,
    anonymize,
    budget_family,
    init_params,
    params_hash,
    predict_budget,
    predict_target,
)
from .optimizers import (
    EnsembleState,
    NumericError,
    TrainConfig,
    TrainTrace,
    adam_update,
    restart_members,
    train_entropy,
    train_grl,
    train_kbeam,
)

__version__ = "0.1.0"
