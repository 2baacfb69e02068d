"""Canonical dynamic causal modelling.

Block-affine neural dynamics observed through the canonical HRF: forward
simulation, identifiability audits with constructive recovery, NUTS
posterior inference with a multivariate-ESS stopping rule, and a marginal
hierarchical model for group synthesis.
"""

__version__ = "0.1.0"

from .errors import (CDCMError, DegenerateCovarianceError, DegenerateDrawsError,
                     DegenerateSignalError, DesignViolationError, InvalidInputError,
                     NonInjectiveObservationError, NotRealLogIdentifiableError,
                     ParseError, SamplerInitError, TrajectoryDegenerateError)
from .linalg import affine_step, mat_exp, mat_log_real, w_antideriv
from .model import (HRF, CanonicalHRF, Hypothesis, ParamSet, StimulusDesign,
                    assemble_block_system, block_partition, convolve, hrf_eval,
                    hrf_kernel, log_likelihood, log_prior, mean_bold, neural_trajectory)
from .simulate import (SimulationSpec, TrajectoryBundle, benchmark_design, chain_models,
                       rk_trajectory, simple_model_truth, simulate)
from .identify import (AuditReport, audit, check_A3, check_A4, check_design, deconvolve,
                       identify, recover_block, recover_global, recover_initial)
