"""Change detection trained from unpaired single-temporal labels.

Builds pseudo bitemporal pairs inside each mini-batch, trains a Siamese
detector whose change head is symmetric in time, and evaluates binary,
object, and semantic change with confusion-matrix metrics. A synthetic
shape world makes everything runnable on CPU without external data.
"""

from .core import (
    IGNORE_VALUE,
    BinaryChangeMask,
    ImageTile,
    PredictionBundle,
    Provenance,
    PseudoPair,
    SemanticMask,
    ValidationError,
    validate,
)
from .pairing import PairingConfig, assign_change, build_pseudo_pairs, color_jitter, permute_batch
from .heads import ChangeHead, HeadConfig, temporal_difference, temporal_swap
from .model import ChangeDetector, TinyBackbone, build_backbone, register_backbone
from .losses import LossConfig, dice_loss, symmetry_change_loss, total_loss
from .metrics import ConfusionMatrix, binary_scores, dynamicearthnet_scores, error_map, second_scores
from .data import AugmentConfig, SyntheticWorldConfig, augment_train, gen_bitemporal_eval, gen_single_temporal
from .harness import TrainConfig, evaluate, poly_lr, predict, report, train

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
