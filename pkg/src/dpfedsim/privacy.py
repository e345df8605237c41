"""Clipping, Gaussian noise, and budget-to-variance calibration.

The noise variance needed for an (epsilon, delta) guarantee over an expected
p*T communications with per-update sensitivity C is

    sigma^2 = v * C^2 * p * T * ln(1/delta) / epsilon^2,

taken with equality (the minimal variance satisfying the sufficient
condition).  The accountant constants v and u are configuration inputs; the
epsilon-regime check epsilon <= u*p*T is advisory and disabled unless u is
given.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import streams
from ._backend import impl

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) differential privacy target."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class MechanismParams:
    """Clipping threshold, accountant constants, and calibrated variance."""

    clip_threshold: float
    v: float = 2.0
    u: Optional[float] = None
    sigma2: float = 0.0

    def __post_init__(self):
        if not self.clip_threshold > 0.0:
            raise ValueError("clip threshold must be positive")
        if not self.v > 0.0:
            raise ValueError("accountant constant v must be positive")
        if self.u is not None and not self.u > 0.0:
            raise ValueError("accountant constant u must be positive when set")
        if not self.sigma2 >= 0.0 or not np.isfinite(self.sigma2):
            raise ValueError("sigma2 must be finite and nonnegative")


def clip(x: np.ndarray, threshold: float) -> Tuple[np.ndarray, bool]:
    """Scale x onto the ball of radius `threshold` if it lies outside.

    Returns (min(1, threshold/||x||) * x, was_clipped).  The zero vector is
    a fixed point; the output norm never exceeds the threshold.
    """
    if not threshold > 0.0:
        raise ValueError("clip threshold must be positive")
    x = np.asarray(x, dtype=np.float64)
    norm = math.sqrt(impl.sq_norm(x))
    if norm > threshold:
        out = x * (threshold / norm)
        # rounding can leave the scaled norm an ulp above the threshold,
        # which would break idempotence; nudge inside the ball
        while math.sqrt(impl.sq_norm(out)) > threshold:
            out = out * (1.0 - 2.0**-52)
        return out, True
    return x, False


def calibrate_sigma2(
    budget: PrivacyBudget,
    clip_threshold: float,
    p: float,
    rounds: int,
    v: float = 2.0,
) -> float:
    """Minimal per-coordinate noise variance for the given budget.

    Monotone nondecreasing in rounds, clip threshold, v, and p; monotone
    nonincreasing in epsilon.
    """
    if not clip_threshold > 0.0 or not np.isfinite(clip_threshold):
        raise ValueError("clip threshold must be positive and finite")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"communication probability must be in (0, 1], got {p}")
    if rounds < 1:
        raise ValueError(f"round count must be >= 1, got {rounds}")
    if not v > 0.0:
        raise ValueError("accountant constant v must be positive")
    sigma2 = (
        v
        * clip_threshold
        * clip_threshold
        * p
        * rounds
        * math.log(1.0 / budget.delta)
        / (budget.epsilon * budget.epsilon)
    )
    if not np.isfinite(sigma2):
        raise ValueError("calibration produced a non-finite variance")
    return sigma2


def check_epsilon_regime(
    budget: PrivacyBudget, u: Optional[float], p: float, rounds: int
) -> str:
    """Advisory check that epsilon <= u * p * rounds ('ok' or 'warning')."""
    if u is None:
        return "ok"
    if not u > 0.0:
        raise ValueError("accountant constant u must be positive when set")
    limit = u * p * rounds
    if budget.epsilon > limit:
        logger.warning(
            "epsilon=%g exceeds the calibrated regime bound u*p*T=%g",
            budget.epsilon,
            limit,
        )
        return "warning"
    return "ok"


def noise_stream(seed: int, client: int, round_index: int) -> streams.StreamKey:
    """Stream for the noise of one client in one round."""
    return streams.stream_key(seed, streams.DOMAIN_NOISE, client, round_index)


def gaussian_noise(dim: int, sigma2: float, stream: streams.StreamKey) -> np.ndarray:
    """`dim` independent N(0, sigma2) draws from a deterministic stream.

    A zero variance yields the zero vector, but the stream is advanced by
    the same number of raw draws either way so traces stay aligned.
    """
    if sigma2 < 0.0:
        raise ValueError("variance must be nonnegative")
    draws = streams.normals(stream, dim)
    if sigma2 == 0.0:
        return np.zeros(dim)
    return draws * math.sqrt(sigma2)
