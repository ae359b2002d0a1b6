"""Time integration of the coupled system on the torus and the unit square."""

from .checkpoint import load_checkpoint, save_checkpoint
from .initial import (Neutral, SteadyPlusPerturbation, TwoSpeciesPaper, lowest_mode_data,
                      make_initial_data, neutral_means, random_velocity)
from .integrate import Trajectory, integrate, n_steps_for
from .model import (BC, CouplingClock, Model, NoiseSpec, SpeciesParams, SystemState,
                    charge_density, forcing_preset, ionic_flux_divergence,
                    navier_stokes_explicit_rhs, path_rngs, potential, replicate,
                    total_concentration)
from .picard import PicardResult, direct_solution, picard_solve, sup_l2_gap
from .stepper import draw_increments, max_stable_dt, shadow_step, step, step_bounded

__all__ = [
    "BC", "CouplingClock", "Model", "NoiseSpec", "SpeciesParams", "SystemState",
    "Neutral", "SteadyPlusPerturbation", "TwoSpeciesPaper",
    "Trajectory", "PicardResult",
    "charge_density", "total_concentration", "potential", "ionic_flux_divergence",
    "navier_stokes_explicit_rhs", "forcing_preset", "path_rngs", "replicate",
    "make_initial_data", "lowest_mode_data", "neutral_means", "random_velocity",
    "integrate", "n_steps_for", "step", "step_bounded", "shadow_step", "draw_increments",
    "max_stable_dt", "picard_solve", "direct_solution", "sup_l2_gap",
    "save_checkpoint", "load_checkpoint",
]
