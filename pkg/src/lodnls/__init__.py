"""Multiscale solver for the nonlinear Schrodinger equation with a wave operator.

Builds localized-orthogonal-decomposition coarse spaces over structured
P1 meshes of the unit square and integrates the equation in time with a
conservative Crank-Nicolson scheme. The experiments module reproduces
the convergence and energy studies; the `lodnls` command drives them.
"""

__version__ = "0.1.0"

from .mesh import Mesh, RefinementMap, Patch, build_structured_mesh, refine, element_patch
from .fem import (
    QuadratureRule,
    CoefficientField,
    CoefficientViolation,
    assemble_mass,
    assemble_stiffness,
    prolongation_matrix,
    l2_project,
    prolong,
    norm,
    FineEvaluation,
)
from .lod import BilinearFormSpec, LodBasis, compute_corrector, build_lod_basis, ritz_project, localization_decay_study
from .timestepping import Nonlinearity, DiscreteSpace, SimulationState, StepFailure, f_tilde, starting_step, cn_step, run
from .energy import EnergyRecord, discrete_energy, continuous_energy
from .problems import ProblemSpec, configure_example
from .experiments import ExperimentConfig, ConvergenceReport, reference_solution, convergence_study
