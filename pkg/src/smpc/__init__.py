"""Stochastic nonlinear model predictive control by deterministic reformulation."""
from .distributions import (Gaussian, JointDistribution, MarginalDistribution, Uniform,
                            joint_from_marginals, sample, stack)
from .transform import (PropagationMethod, PointSet, cholesky_psd, generate_points,
                        propagate, pce_coefficients)
from .chance import z_coeff, tighten, mc_confidence

__all__ = ["Gaussian", "JointDistribution", "MarginalDistribution", "Uniform", "joint_from_marginals",
           "sample", "stack", "PropagationMethod", "PointSet", "cholesky_psd", "generate_points",
           "propagate", "pce_coefficients", "z_coeff", "tighten", "mc_confidence"]

__version__ = "0.1.0"
