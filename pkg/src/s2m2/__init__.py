"""Few-shot learning with Manifold Mixup and self-supervision (S2M2) on a numpy autodiff core."""

from .data import (ImageDataset, RotationConfig, SplitSpec, generate_synthetic, load_dataset, load_splits,
                   make_splits, perturb, rotate45, rotate90, save_dataset, save_splits)
from .errors import (ConfigurationError, DimensionError, FormatError, NonFiniteError, UsageError,
                     ValidationError)
from .estimators import CosineFewShotClassifier, FrozenBackbone, S2M2Backbone
from .evaluation import (AdaptConfig, EpisodeSpec, EvalReport, adapt, evaluate, export_features, fgsm_attack,
                         robustness_eval, saliency_mask, sample_episode)
from .losses import (MixupSpec, SelfSupSpec, exemplar_loss, manifold_mixup_loss, mix, phase_loss,
                     rotated_class_loss, rotation_loss, sample_mix_coefficient)
from .model import Backbone, CosineClassifier, FewShotModel, RotationHead, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad
from .training import TrainConfig, run_s2m2

__version__ = "0.1.0"
