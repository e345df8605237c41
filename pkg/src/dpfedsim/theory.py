"""Potential function, convergence bound, and closed-form tuning.

For mu-strongly convex, L-smooth clients, step size eta <= 1/L and
communication probability p, the expected potential after T rounds obeys

    E[psi_T] <= theta^T psi_0 + (2 p^2 / (1 - theta)) * v C^2 T ln(1/delta) / eps^2

with theta = max(1 - mu*eta, 1 - p^2) and
psi_t = sum_i ||x_t^i - x*||^2 + (eta/p)^2 sum_i ||h_t^i - h*_i||^2.

The bound is minimized by eta* = 1/L, p* = sqrt(mu/L), and

    T* = ln( psi_0 eps^2 ln([1-mu/L]^-1) / (2 v C^2 ln(1/delta)) )
         / ln( [1-mu/L]^-1 ),

so the best expected local-step count is 1/p* and the best expected number
of communications is p* T*.  This module evaluates those closed forms and
provides a brute-force grid oracle over integer T for cross-validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .privacy import PrivacyBudget


@dataclass(frozen=True)
class BoundInputs:
    """Everything the utility bound depends on."""

    mu: float
    ell: float
    eta: float
    p: float
    rounds: float
    psi0: float
    budget: PrivacyBudget
    clip_threshold: float
    v: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.mu <= self.ell:
            raise ValueError(f"need 0 < mu <= ell, got ({self.mu}, {self.ell})")
        if not 0.0 < self.eta <= 1.0 / self.ell:
            raise ValueError(f"step size must lie in (0, 1/L], got {self.eta}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"probability must lie in (0, 1], got {self.p}")
        if not self.rounds >= 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if not self.psi0 >= 0.0:
            raise ValueError("initial potential must be nonnegative")
        if not self.clip_threshold > 0.0:
            raise ValueError("clip threshold must be positive")
        if not self.v > 0.0:
            raise ValueError("accountant constant v must be positive")


@dataclass(frozen=True)
class OptimalParams:
    """Bound-minimizing step size, probability, and horizon."""

    eta_star: float
    p_star: float
    t_star_real: float
    t_star: int
    expected_local_steps: float
    expected_comm_rounds: float


def lyapunov(
    client_x: np.ndarray,
    client_h: Optional[np.ndarray],
    x_star: np.ndarray,
    h_star: Optional[np.ndarray],
    eta: float,
    p: float,
) -> float:
    """Stacked squared distance of models and controls to their optima."""
    if x_star is None:
        raise ValueError("potential requires a known optimum")
    client_x = np.asarray(client_x, dtype=np.float64)
    if client_x.ndim != 2:
        raise ValueError("client states must form an (N, d) array")
    n = client_x.shape[0]
    acc_x = 0.0
    for i in range(n):
        diff = client_x[i] - x_star
        acc_x += float(np.dot(diff, diff))
    acc_h = 0.0
    if h_star is not None:
        h_star = np.asarray(h_star, dtype=np.float64)
        if client_h is None:
            ch = np.zeros_like(h_star)
        else:
            ch = np.asarray(client_h, dtype=np.float64)
        for i in range(n):
            diff = ch[i] - h_star[i]
            acc_h += float(np.dot(diff, diff))
    ratio = eta / p
    return acc_x + (ratio * ratio) * acc_h


def contraction_factor(mu: float, eta: float, p: float) -> float:
    """theta = max(1 - mu*eta, 1 - p^2); below 1 iff both terms contract."""
    return max(1.0 - mu * eta, 1.0 - p * p)


def utility_bound(inp: BoundInputs) -> float:
    """Bound on E[psi_T]: decay term plus privacy-noise residual."""
    theta = contraction_factor(inp.mu, inp.eta, inp.p)
    if theta >= 1.0:
        raise ValueError(f"no contraction: theta={theta} >= 1")
    budget = inp.budget
    noise_rate = (
        inp.v
        * inp.clip_threshold
        * inp.clip_threshold
        * math.log(1.0 / budget.delta)
        / (budget.epsilon * budget.epsilon)
    )
    residual = (2.0 * inp.p * inp.p / (1.0 - theta)) * noise_rate * inp.rounds
    return math.pow(theta, inp.rounds) * inp.psi0 + residual


def bound_derivatives(inp: BoundInputs) -> Tuple[float, float]:
    """First and second derivative of the bound in a real-valued horizon.

    Requires mu < ell so that theta is strictly inside (0, 1); the second
    derivative is then strictly positive, making the bound convex in T.
    """
    if inp.mu >= inp.ell:
        raise ValueError("derivatives are undefined at mu == ell")
    theta = contraction_factor(inp.mu, inp.eta, inp.p)
    if not 0.0 < theta < 1.0:
        raise ValueError(f"need theta in (0, 1), got {theta}")
    budget = inp.budget
    slope = (
        (2.0 * inp.p * inp.p / (1.0 - theta))
        * inp.v
        * inp.clip_threshold
        * inp.clip_threshold
        * math.log(1.0 / budget.delta)
        / (budget.epsilon * budget.epsilon)
    )
    decay = math.pow(theta, inp.rounds) * inp.psi0
    log_theta = math.log(theta)
    return decay * log_theta + slope, decay * log_theta * log_theta


def optimal_params(
    mu: float,
    ell: float,
    psi0: float,
    budget: PrivacyBudget,
    clip_threshold: float,
    v: float = 2.0,
) -> OptimalParams:
    """Closed-form bound minimizers eta*, p*, T*.

    The integer horizon is whichever neighbor of the real root gives the
    smaller bound (convexity makes the two neighbors sufficient; ties break
    toward fewer rounds).  When mu == ell the decay term vanishes in one
    round and the bound grows linearly afterwards, so T* = 1.
    """
    if not 0.0 < mu <= ell:
        raise ValueError(f"need 0 < mu <= ell, got ({mu}, {ell})")
    if not psi0 >= 0.0:
        raise ValueError("initial potential must be nonnegative")
    eta_star = 1.0 / ell
    p_star = math.sqrt(mu / ell)
    if mu == ell:
        return OptimalParams(
            eta_star=eta_star,
            p_star=1.0,
            t_star_real=1.0,
            t_star=1,
            expected_local_steps=1.0,
            expected_comm_rounds=1.0,
        )
    ratio = 1.0 - mu / ell
    log_inv = math.log(1.0 / ratio)
    noise_rate = (
        2.0
        * v
        * clip_threshold
        * clip_threshold
        * math.log(1.0 / budget.delta)
        / (budget.epsilon * budget.epsilon)
    )
    argument = psi0 * log_inv / noise_rate
    if argument <= 1.0:
        t_real = 1.0
        t_int = 1
    else:
        t_real = math.log(argument) / log_inv
        lo = max(1, math.floor(t_real))
        hi = math.ceil(t_real)
        candidates = sorted({lo, max(1, hi)})
        t_int = min(
            candidates,
            key=lambda t: (_bound_at(mu, ell, psi0, budget, clip_threshold, v, t), t),
        )
        t_real = max(t_real, 1.0)
    return OptimalParams(
        eta_star=eta_star,
        p_star=p_star,
        t_star_real=t_real,
        t_star=t_int,
        expected_local_steps=1.0 / p_star,
        expected_comm_rounds=p_star * t_real,
    )


def _bound_at(
    mu: float,
    ell: float,
    psi0: float,
    budget: PrivacyBudget,
    clip_threshold: float,
    v: float,
    rounds: float,
) -> float:
    return utility_bound(
        BoundInputs(
            mu=mu,
            ell=ell,
            eta=1.0 / ell,
            p=math.sqrt(mu / ell),
            rounds=rounds,
            psi0=psi0,
            budget=budget,
            clip_threshold=clip_threshold,
            v=v,
        )
    )


def grid_argmin_rounds(inp: BoundInputs, t_max: int) -> int:
    """Exhaustive argmin of the bound over integer horizons 1..t_max.

    Ties break toward the smallest horizon (fewer rounds means less privacy
    spend at equal bound value).  A vectorized pass locates the basin; the
    winner within a small window is then re-evaluated with the scalar bound
    so the oracle agrees exactly with utility_bound.
    """
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    theta = contraction_factor(inp.mu, inp.eta, inp.p)
    if theta >= 1.0:
        raise ValueError(f"no contraction: theta={theta} >= 1")
    budget = inp.budget
    slope = (
        (2.0 * inp.p * inp.p / (1.0 - theta))
        * inp.v
        * inp.clip_threshold
        * inp.clip_threshold
        * math.log(1.0 / budget.delta)
        / (budget.epsilon * budget.epsilon)
    )
    ts = np.arange(1, t_max + 1, dtype=np.float64)
    if theta == 0.0:
        values = slope * ts
    else:
        values = np.exp(ts * math.log(theta)) * inp.psi0 + slope * ts
    coarse = int(ts[int(np.argmin(values))])
    lo = max(1, coarse - 2)
    hi = min(t_max, coarse + 2)
    best_t = lo
    best_v = utility_bound(replace(inp, rounds=float(lo)))
    for t in range(lo + 1, hi + 1):
        value = utility_bound(replace(inp, rounds=float(t)))
        if value < best_v:
            best_v = value
            best_t = t
    return best_t
