"""Face-voice association with projection alignment, gated fusion and orthogonal projection loss."""

from .autograd import Tensor, backward, grad_check
from .data import FeatureStore, PairSampler, SyntheticSpec, Trial, generate_synthetic, load_store, save_store
from .losses import LossWeights, total_loss
from .metrics import EvalMatrix, compute_eer, overall_score, roc_curve, score_trials
from .model import ModelConfig, RFOPParams, forward, init_params, load_checkpoint, save_checkpoint
from .train import TrainPlan, two_phase_train

__version__ = "0.1.0"
