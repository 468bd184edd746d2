"""Numerical holomorphic Morse inequalities on lattice models of magnetic tori."""

from . import gamma_dim, geomodel, harness, lattice_op, morse_bounds, pointspec, spectral_count
from .errors import *  # noqa: F401,F403
from .gamma_dim import gamma_counting, sandwich_check
from .geomodel import build_torus_model, field_from_spec, link_phases_from_curvature
from .harness import ExperimentConfig, RunReport, convergence_table, load_config, run_experiment
from .lattice_op import Bloch, DirichletU, DirichletUs, assemble_dolbeault, assemble_schrodinger
from .morse_bounds import check_inequalities, morse_report
from .pointspec import density, nu_b, nu_b_bar
from .spectral_count import count_below, kernel_dimension

__version__ = "0.1.0"
