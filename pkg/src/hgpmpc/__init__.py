"""Stochastic hybrid MPC with per-mode GP residuals and iterative mode mapping."""
from .controllers import ControllerConfig, MpcController, SolveResult, solve_minlp, solve_ocp_nlp
from .environments import TaskSpec, generate_reference, lti_env, make_env, quad2d_env
from .gp import HybridResidualModel, KernelHyperparams, fit_gp, fit_hybrid, predict
from .harness import run_closed_loop, run_repetitive_experiment
from .modemap import ModeClassifier, PriorDensityStore, TradeoffConfig, iterate
from .uncertainty import precompute_reference_uncertainty, tighten_halfspace

__version__ = "0.1.0"
