"""Contrastive pre-training and label-efficient fine-tuning for ultrasound
lesion segmentation."""

from .data import (
    ImageSample,
    PretrainCorpus,
    Source,
    SplitSpec,
    bus_only_corpus,
    load_manifest,
    make_bus_split,
    make_multiorgan_corpus,
    mix_with_natural,
    resize,
    subset_labels,
)
from .errors import (
    ConfigurationError,
    IngestionError,
    TrainingDivergedError,
    TransferError,
    UltrasegError,
    ValidationError,
)
from .finetune import FinetuneConfig, RunResult, dice, finetune, repeat_experiment
from .losses import (
    LossValue,
    QueueState,
    info_nce,
    momentum_update,
    neg_cosine,
    nt_xent,
    queue_push,
    simsiam_loss,
)
from .models import (
    Arch,
    Checkpoint,
    HeadKind,
    Method,
    NetworkSpec,
    TransferScope,
    build_segmentation_network,
    build_ssl_network,
    load_checkpoint,
    save_checkpoint,
    transfer_weights,
)
from .pretrain import PretrainConfig, SSLTrainer, TrainTrace, collapse_metric, run_pretraining
from .report import ResultsTable, aggregate, dataset_mean_table, export_mask_panels
from .smoke import SmokeReport, SmokeSettings, run_smoke
from .synthetic import make_synthetic_corpus

__version__ = "0.1.0"
