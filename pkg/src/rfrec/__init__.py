"""Simulation of regularized federated matrix factorization with consensus-penalized
local item matrices, its fast random-schedule variant, a clip-and-Laplace upload
perturbation, and an alternating gradient-exchange baseline."""

from .comm import CommEvent, CommLog
from .data import FormatSpec, RatingsDataset, SplitSpec, evaluate, load_tabular, save_internal, split
from .errors import (
    ConvergenceError,
    DataFormatError,
    DegenerateClientError,
    DivergenceError,
    InvalidProbabilityError,
    NoParticipantsError,
    RFRecError,
    ShapeError,
)
from .fcf import FcfState, fcf_round
from .model import (
    GlobalState,
    LocalModel,
    RatingRow,
    TrainConfig,
    aggregate,
    grad_f,
    grad_psi,
    local_loss,
    predict,
    regularizer,
)
from .privacy import PrivacyConfig, budget, perturb
from .trainers import RunResult, StepOutcome, TrainerState, rfrec_step, rfrecf_step, run, stochastic_gradient

__version__ = "0.1.0"
