"""Joint reconstruction of ballistic object trajectories and human poses
from monocular 2D observations.

The object's free flight is explained by Newtonian dynamics with a known
gravity magnitude, which fixes the metric scale of the scene; human poses
are bound to the trajectory through contact and localisation residuals.
"""

from flightcap.ballistics import (
    BallisticParams,
    ObservationTrack,
    position_at,
    recover_trajectory,
    simulate_track,
    solve_closed_form_6dof,
)
from flightcap.camera import CameraIntrinsics, backproject_ray, project
from flightcap.config import DofMode, SolveConfig, Weights
from flightcap.scene import ContactEvent, Episode, Person, Scene
from flightcap.solver import SolveReport, minimize, solve_scene

__all__ = [
    "BallisticParams",
    "CameraIntrinsics",
    "ContactEvent",
    "DofMode",
    "Episode",
    "ObservationTrack",
    "Person",
    "Scene",
    "SolveConfig",
    "SolveReport",
    "Weights",
    "backproject_ray",
    "minimize",
    "position_at",
    "project",
    "recover_trajectory",
    "simulate_track",
    "solve_closed_form_6dof",
    "solve_scene",
]

__version__ = "0.1.0"
