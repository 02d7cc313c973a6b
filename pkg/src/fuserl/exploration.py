"""Exploration policies around a baseline action and box bookkeeping.

The bounded-uniform policy perturbs every action dimension of the baseline
policy by an independent ``U(lower, upper)`` offset, so logged actions fill
the per-state box ``[baseline + lower, baseline + upper]``.  The Gaussian
policy adds ``N(mean, std**2)`` noise instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractViolation

LEGAL_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class ExplorationBounds:
    """Exploration box around one or many baseline actions.

    ``baseline`` is ``(A,)`` or ``(B, A)``; ``lower``/``upper`` are scalars or
    ``(B,)`` arrays broadcast over the action dimensions.
    """

    baseline: np.ndarray
    lower: float | np.ndarray = -0.15
    upper: float | np.ndarray = 0.15

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        base = np.asarray(self.baseline, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.ndim:
            lo, hi = lo[..., None], hi[..., None]
        return base + lo, base + hi

    @property
    def width(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float) - np.asarray(self.lower, dtype=float)


@dataclass(frozen=True)
class GaussianExplorationConfig:
    mean: float = 0.0
    std: float = 0.2

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigError("exploration.gauss_std", "std must be > 0")


@dataclass(frozen=True)
class ExplorationSpec:
    """Which exploration policy to serve with and its parameters."""

    variant: str = "bounded"
    lower: float = -0.15
    upper: float = 0.15
    gauss_mean: float = 0.0
    gauss_std: float = 0.2
    action_low: float = LEGAL_RANGE[0]
    action_high: float = LEGAL_RANGE[1]

    def validate(self, path: str = "exploration") -> None:
        if self.variant not in ("bounded", "gaussian", "none"):
            raise ConfigError(f"{path}.variant", "must be 'bounded', 'gaussian' or 'none'")
        if not self.lower < self.upper:
            raise ConfigError(f"{path}.lower", f"lower ({self.lower}) must be < upper ({self.upper})")
        if not self.action_low < self.action_high:
            raise ConfigError(f"{path}.action_low", "action_low must be < action_high")
        if not self.gauss_std > 0:
            raise ConfigError(f"{path}.gauss_std", "gauss_std must be > 0")

    @property
    def legal_range(self) -> tuple[float, float]:
        return (self.action_low, self.action_high)

    def check_box(self, baseline: np.ndarray) -> None:
        """Raise unless the box around ``baseline`` meets the legal range."""
        lo = np.maximum(baseline + self.lower, self.action_low)
        hi = np.minimum(baseline + self.upper, self.action_high)
        if np.any(lo > hi):
            raise ContractViolation("exploration box does not intersect the legal action range")


def explore_bounded(
    bounds: ExplorationBounds,
    rng: np.random.Generator,
    legal_range: tuple[float, float] = LEGAL_RANGE,
) -> np.ndarray:
    base = np.asarray(bounds.baseline, dtype=float)
    lo, hi = np.broadcast_to(bounds.lower, base.shape[:-1]), np.broadcast_to(bounds.upper, base.shape[:-1])
    if np.any(lo > hi):
        raise ContractViolation("lower offset exceeds upper offset")
    eps = rng.uniform(size=base.shape)
    if base.ndim > 1:
        lo, hi = np.asarray(lo)[..., None], np.asarray(hi)[..., None]
    action = base + lo + (hi - lo) * eps
    return np.clip(action, *legal_range)


def explore_gaussian(
    baseline: np.ndarray,
    config: GaussianExplorationConfig,
    rng: np.random.Generator,
    legal_range: tuple[float, float] = LEGAL_RANGE,
) -> np.ndarray:
    base = np.asarray(baseline, dtype=float)
    noise = rng.normal(config.mean, config.std, size=base.shape)
    return np.clip(base + noise, *legal_range)


def explore(spec: ExplorationSpec, baseline: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if spec.variant == "bounded":
        return explore_bounded(ExplorationBounds(baseline, spec.lower, spec.upper), rng, spec.legal_range)
    if spec.variant == "gaussian":
        cfg = GaussianExplorationConfig(spec.gauss_mean, spec.gauss_std)
        return explore_gaussian(baseline, cfg, rng, spec.legal_range)
    return np.clip(np.asarray(baseline, dtype=float), *spec.legal_range)


def containment_stats(samples: np.ndarray, bounds: ExplorationBounds) -> tuple[np.ndarray, float]:
    """Per-dimension and joint fraction of samples inside the closed box."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ContractViolation("containment_stats needs at least one sample")
    lo, hi = bounds.edges()
    inside = (samples >= lo) & (samples <= hi)
    return inside.mean(axis=0), float(inside.all(axis=1).mean())


def gaussian_containment(std: float, lower: float, upper: float, mean: float = 0.0) -> float:
    """Probability that ``N(mean, std**2)`` noise lands in ``[lower, upper]``."""
    s = std * math.sqrt(2.0)
    return 0.5 * (math.erf((upper - mean) / s) - math.erf((lower - mean) / s))


def efficiency_ratio(std: float, lower: float, upper: float, dims: int) -> dict[str, float]:
    """Joint-containment advantage of the bounded policy over Gaussian noise.

    The bounded policy always lands in the box; the Gaussian one does so with
    probability ``p**dims``.  ``nominal`` is the ``2**dims`` rule of thumb that
    assumes ``p = 1/2``.
    """
    p = gaussian_containment(std, lower, upper)
    return {"per_dim": p, "joint": p**dims, "measured_ratio": p**-dims, "nominal_ratio": 2.0**dims}


class BoxDeviation(NamedTuple):
    """Non-negative distance past the nearer violated edge, and which side.

    ``side`` is +1 for at-or-above the upper edge, -1 for at-or-below the
    lower edge, 0 strictly inside.
    """

    deviation: np.ndarray
    side: np.ndarray


def penalty_distance(action: np.ndarray, bounds: ExplorationBounds) -> BoxDeviation:
    action = np.asarray(action, dtype=float)
    lo, hi = bounds.edges()
    try:
        agree = np.broadcast_shapes(action.shape, lo.shape) == action.shape
    except ValueError:
        agree = False
    if not agree:
        raise ContractViolation("action and bounds dimensions disagree")
    above = action >= hi
    below = (action <= lo) & ~above
    side = above.astype(int) - below.astype(int)
    deviation = np.where(above, action - hi, np.where(below, lo - action, 0.0))
    return BoxDeviation(deviation, side)
