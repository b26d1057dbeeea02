"""Finite elements, binomial-tree filtrations and box-constrained optimal
control for the stochastic heat equation ``dy = (Delta y + u) dt + y dW``."""

__version__ = "0.1.0"

from .fem import FemSpace, Mesh1D, build_space, prolong
from .noise import (AdaptedField, BinomialTree, PathEnsemble, TimeGrid, build_tree,
                    coarsen_paths, cond_expect, ito_integral, sample_paths)
from .sources import ClosedFormSource, FieldSource, ModalSource, catalog_source
from .forward import solve_forward_paths, solve_forward_tree
from .backward import (BackwardPair, deterministic_backward_pair, regression_backward,
                       solve_backward_tree)
from .control import (BoxBounds, ControlField, ControlProblem, CostParams, OptimizerConfig,
                      eval_cost, gradient_multiplier, optimize, project_box, vi_check)
from .harness import KINDS, RateReport, StudyConfig, estimate_rate, make_config, run_study

