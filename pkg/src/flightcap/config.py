"""Operational modes, energy weights and solver settings."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace

GRAVITY_MAGNITUDE = 9.81


class DofMode(enum.Enum):
    """Unknown set of the object-trajectory model."""

    SIX = "6dof"  # b0, u
    SEVEN = "7dof"  # b0, u, f
    NINE = "9dof"  # b0, u, gravity direction
    TEN = "10dof"  # b0, u, gravity direction, f

    @property
    def estimates_f(self) -> bool:
        return self in (DofMode.SEVEN, DofMode.TEN)

    @property
    def estimates_g(self) -> bool:
        return self in (DofMode.NINE, DofMode.TEN)

    @property
    def min_observations(self) -> int:
        return {DofMode.SIX: 3, DofMode.SEVEN: 4, DofMode.NINE: 5, DofMode.TEN: 6}[self]

    @classmethod
    def parse(cls, value) -> "DofMode":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if text.isdigit():
            text += "dof"
        for mode in cls:
            if mode.value == text or mode.name.lower() == text:
                return mode
        raise ValueError(f"unknown DoF mode {value!r}; expected one of "
                         f"{', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class Weights:
    """Energy weights. ``p`` is the pose reprojection reference weight (1)."""

    p: float = 1.0
    b: float = 1.0
    c: float = 0.1
    m: float = 0.5
    s: float = 0.01
    co: float = 0.1
    bl: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"weight {f.name} must be non-negative")

    @classmethod
    def parse(cls, text: str | None) -> "Weights":
        """Parse ``"default"`` or ``"b=1,c=0.1,..."`` (``lambda_`` prefixes allowed)."""
        w = cls()
        if text is None or text.strip() in ("", "default"):
            return w
        known = {f.name for f in fields(cls)}
        updates = {}
        for item in text.split(","):
            key, sep, value = item.partition("=")
            key = key.strip().lower().removeprefix("lambda_").removeprefix("l_")
            if not sep or key not in known:
                raise ValueError(f"bad weight spec {item!r}; keys are {sorted(known)}")
            updates[key] = float(value)
        return replace(w, **updates)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SolveConfig:
    mode: DofMode = DofMode.NINE
    weights: Weights = field(default_factory=Weights)
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    seed: int = 0
    # E_m samples per object/torso segment
    m_samples: int = 5
    # initialisation defaults for the trajectory solve
    init_depth: float = 5.0
    f_init: float | None = None
    # relative f-column residual below which the f/Z ambiguity is flagged
    ambiguity_threshold: float = 1e-4
    robust_loss: str | None = None
    robust_scale: float = 5.0
    # meters -> unit of the 3D residuals (contact, continuity, bone terms) in the objective
    metric_unit: float = 1.0
    # E_m samples 3D points at the perspective-correct fraction (False: uniform in 3D)
    m_perspective: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", DofMode.parse(self.mode))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gradient_tolerance <= 0 or self.step_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.initial_damping <= 0 or self.damping_up <= 1 or self.damping_down <= 1:
            raise ValueError("damping must be positive with factors > 1")
        if self.m_samples < 1:
            raise ValueError("m_samples must be >= 1")
        if not self.metric_unit > 0:
            raise ValueError("metric_unit must be positive")
        if self.robust_loss not in (None, "huber"):
            raise ValueError(f"unsupported robust loss {self.robust_loss!r}")

    def with_(self, **changes) -> "SolveConfig":
        return replace(self, **changes)
