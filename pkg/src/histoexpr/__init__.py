"""Joint image/expression embedding with k-NN retrieval imputation."""

from .contrastive import LossConfig, contrastive_loss, similarities, smoothed_targets
from .data import GeneSet, PairedDataset, load_dataset, save_dataset
from .errors import (
    FormatError,
    HistoexprError,
    NumericalError,
    ShapeError,
    UsageError,
    ValidationError,
)
from .metrics import build_report, cluster_agreement, kmeans, pearson_per_gene, set_average
from .model import EncoderSpec, ModelCheckpoint, TrainConfig, encode_expression, encode_image
from .model import load_checkpoint, save_checkpoint, train
from .preprocess import hvg_union, normalize, select_heg, select_hvg
from .refindex import ImputationConfig, ReferenceIndex, build_index, impute, knn
from .refindex import load_index, save_index
from .synthgen import GroundTruth, SynthConfig, generate, oracle_ceiling

__version__ = "0.1.0"
