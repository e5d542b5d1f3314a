"""Structural parameters shared by the simulator, Green's functions and estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class DiffusionParams:
    """Structural parameters of the reaction-diffusion knowledge model.

    Parameters
    ----------
    delta : float
        Temporal depreciation per period, in (0, 1).
    lam : float
        Spatial decay per km used in the spillover kernel ``exp(-lam * d)``.
        In the continuous Green's function it plays the role of the
        diffusion length, so that the field decays at rate ``sqrt(delta) / lam``.
    kappa : float
        Source intensity added per treated period.
    beta : float
        Production coefficient mapping knowledge into outcomes.
    allow_growth : bool
        Permit ``delta`` in (-1, 0] to generate growth dynamics. Only used to
        exercise the decay-violation diagnostic.
    """

    delta: float = 0.15
    lam: float = 0.01
    kappa: float = 2.0
    beta: float = 1.0
    allow_growth: bool = False

    def __post_init__(self):
        for name in ("delta", "lam", "kappa", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v}")
        lo = -1.0 if self.allow_growth else 0.0
        if not lo < self.delta < 1.0:
            raise ValidationError(f"delta must lie in ({lo:g}, 1), got {self.delta}")
        if self.lam <= 0:
            raise ValidationError(f"lam must be positive, got {self.lam}")
        if self.kappa <= 0:
            raise ValidationError(f"kappa must be positive, got {self.kappa}")
        if self.beta <= 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")

    @property
    def kappa_s(self) -> float:
        """Field decay rate ``sqrt(delta / lam**2)`` implied by the continuous model."""
        if self.delta <= 0:
            raise ValidationError("kappa_s requires delta > 0")
        return math.sqrt(self.delta) / self.lam
