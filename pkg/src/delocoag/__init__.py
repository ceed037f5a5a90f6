"""Solvers for coagulation with delocalised interaction, advection, inception and outflow."""
from .det_solver import (FixedPointConfig, PropagatorSchedule, direct_solve, picard_solve,
                         propagator_apply, psi_apply, tau_M)
from .flowfield import AffineField, BoxDomain, ConstantField, FlowMap, PolynomialField
from .measures import (CellGrid, EnsembleMeasure, GridMeasure, Trajectory, TypeBins, pair,
                       tv_norm)
from .scenario import Scenario, load_scenario, parse_scenario
from .stoch_solver import StochasticSetup, simulate
from .typespace import (CellDelocalisation, InceptionModel, SmoothDelocalisation,
                        capped_product_kernel, constant_kernel)

__version__ = "0.1.0"
