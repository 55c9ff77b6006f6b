"""Bayesian clustering of unaligned binary longitudinal time series.

Per-subject dynamic probit state-space models sampled by lookahead
particle filters, coupled through a capped Pitman-Yor prior on the
probabilities of clinically defined trajectory patterns.
"""

from .config import ConfigError, RunConfig, default_state_matrices, load_config
from .events import EventThresholds, MeanLevelEncoder, ThreeEventEncoder, decode, encode
from .model_core import (Dataset, DataError, GlobalParams, ModelConfig, PatientRecord,
                         SubjectState, design_vector, load_dataset, probit_loglik,
                         simulate_prior_trajectory, transition_at, write_dataset)
from .particle_filter import (FilterDegenerateError, PriorPatternTable,
                              estimate_prior_patterns, joint_trajectory_sample,
                              marginal_filter)
from .sampler import ChainAbort, ChainStore, McmcSettings, run_chain, run_chains
from .simulate import ScenarioConfig, TruthRecord, generate_cohort, true_pattern
from .stochastics import (RngStream, TruncRegion, sample_dirichlet, sample_trunc_normal,
                          systematic_resample)

__version__ = "0.1.0"
