"""Occupancy-divergence training of autoregressive policies with a backspace action."""

from .divergence import PhiSpec, mixture_regularizer, phi, phi_prime
from .objective import LossBreakdown, ObjectiveConfig, bc_loss, grad_sm_loss, mle_loss, sm_loss, value
from .occupancy import ExactOccupancy, FiniteMDP, FinitePolicy, data_policy, exact_occupancy
from .policy import SampleConfig, TabularPolicy, sample_trajectory, to_finite_policy
from .preprocess import NoiseConfig, PreprocessedBatch, augment_noise, encode_actions, state_views, truncate_to_context
from .seq_mdp import Trajectory, Triple, Vocab, apply_actions, enumerate_states, step
from .trainer import TrainConfig, mixing_beta, sampling_cadence, train

__version__ = "0.1.0"
