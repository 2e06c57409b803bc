"""Joint fluence-map and fractionation optimization for several radiation modalities."""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateConstraint, DegenerateProx, DimensionError, DomainError,
                     InfeasibleProblem, NumericalFailure, PlanningError, UnboundedProx)
from .model import (ConstraintSpec, FractionationPlan, GeneralizedSystem, ModalityData, Phantom,
                    PlanResult, ProblemSpec, assemble, constraint_be, objective_F, proliferation,
                    tumor_be)
from .nnls import fnnls, nnls
from .prox import project_constraint, prox_neg_quadratic
from .lower import LowerConfig, RelaxationParams, auto_param_solve, bcd_solve
from .phantom import BeamModel, PhantomConfig, ScenarioConfig, build_phantom, expand_margin, scenario
from .upper import (UpperConfig, ValueFunction, ValueSurface, brute_force, optimize_fractionation,
                    value_function)
from .bench import (ComparisonReport, SweepSpec, SWEEPS, avg_be_per_voxel, pobj_metrics,
                    run_baselines, run_sweep)

__all__ = [name for name in dir() if not name.startswith("_")]
