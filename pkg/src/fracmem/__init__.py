"""Optimal configurations of the fractional composite membrane problem."""
from .eigen import EigenPair, smallest_eigenpair
from .fracop import FracOperator, assemble, kernel_constant
from .grid import Configuration, DomainMask, GridSpec, build_domain
from .optimize import OptimalPair, alpha_bar, best_pair, lambda_opt, optimize, radial_optimize

__version__ = "0.1.0"
