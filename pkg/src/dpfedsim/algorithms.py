"""Round engines for private federated averaging and its drift-corrected twin.

Two algorithms share one execution model:

* ``fedavg``: every round, each client runs ``tau`` local gradient steps
  from the global model, clips the resulting update to norm ``C``, adds
  Gaussian noise, and the server applies the client average.  Noise is
  injected per client before aggregation, so the global model receives an
  effective per-coordinate variance of sigma^2 / N per round.
* ``scaffnew``: every iteration, each client takes one corrected step
  ``x - eta*(g - h)``; a shared coin decides whether this iteration
  communicates.  On communication the clients send clipped, noised deltas,
  adopt the new global model, and update their control variates ``h``; the
  controls sum to zero and cancel client drift.

Determinism contract: every random quantity is keyed by (seed, client,
round) counter streams, so a run is a pure function of (federation, config,
seed) regardless of scheduling.  On the compiled backend, whole-run kernels
replay the exact floating-point sequence of these Python round functions;
``run`` is bit-identical to stepping manually.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from . import problems, streams
from ._backend import impl
from .privacy import MechanismParams, PrivacyBudget, noise_stream

DIVERGENCE_GUARD = 1e12

_MAX_ROUNDS = 1 << 30  # round index doubles as a stream coordinate


@dataclass(frozen=True)
class FedAvgConfig:
    """Inputs of the local-step algorithm."""

    eta: float
    tau: int
    rounds: int
    mechanism: MechanismParams
    budget: Optional[PrivacyBudget] = None
    batch_size: Union[int, str] = "full"

    def __post_init__(self):
        if not self.eta > 0.0:
            raise ValueError("step size must be positive")
        if self.tau < 1:
            raise ValueError("local step count must be >= 1")
        if not 1 <= self.rounds < _MAX_ROUNDS:
            raise ValueError(f"round count must be in [1, 2^30), got {self.rounds}")
        if self.batch_size != "full":
            if not isinstance(self.batch_size, (int, np.integer)) or self.batch_size < 1:
                raise ValueError("batch size must be 'full' or a positive integer")


@dataclass(frozen=True)
class ScaffNewConfig:
    """Inputs of the drift-corrected algorithm."""

    eta: float
    p: float
    iterations: int
    mechanism: MechanismParams
    budget: Optional[PrivacyBudget] = None
    initial_controls: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.eta > 0.0:
            raise ValueError("step size must be positive")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"communication probability must be in (0, 1], got {self.p}")
        if not 1 <= self.iterations < _MAX_ROUNDS:
            raise ValueError(f"iteration count must be in [1, 2^30), got {self.iterations}")
        if self.initial_controls is not None:
            h0 = np.asarray(self.initial_controls, dtype=np.float64)
            if h0.ndim != 2:
                raise ValueError("initial controls must form an (N, d) array")
            if np.linalg.norm(h0.sum(axis=0)) > 1e-12:
                raise ValueError("initial controls must sum to the zero vector")
            object.__setattr__(self, "initial_controls", h0)


@dataclass
class RunState:
    """Mutable trajectory state: global model, per-client models/controls."""

    global_x: np.ndarray
    client_x: np.ndarray
    client_h: Optional[np.ndarray]
    round_index: int
    comm_rounds: int
    seed: int


@dataclass(frozen=True)
class RoundRecord:
    """Metrics observed after one round's update."""

    round: int
    communicated: bool
    psi: float
    global_loss: float
    dist_opt: float
    max_update_norm: float
    clip_count: int
    sigma2: float
    status: str = "ok"


def init_state(
    fed: problems.Federation,
    algorithm: str,
    cfg: Union[FedAvgConfig, ScaffNewConfig],
    seed: int,
    x0: Optional[np.ndarray] = None,
) -> RunState:
    """Fresh state with all clients synchronized at the start point."""
    d = fed.dim
    n = fed.n_clients
    if x0 is None:
        x = np.zeros(d)
    else:
        x = np.array(x0, dtype=np.float64)
        if x.shape != (d,):
            raise ValueError(f"start point has shape {x.shape}, expected ({d},)")
    if algorithm == "scaffnew":
        if cfg.initial_controls is None:
            h = np.zeros((n, d))
        else:
            if cfg.initial_controls.shape != (n, d):
                raise ValueError("initial controls do not match the federation shape")
            h = cfg.initial_controls.copy()
    else:
        h = None
    return RunState(
        global_x=x,
        client_x=np.repeat(x[None, :], n, axis=0),
        client_h=h,
        round_index=0,
        comm_rounds=0,
        seed=streams.mask64(seed),
    )


def _metrics_known(fed: problems.Federation) -> bool:
    return fed.optimum is not None and fed.star_controls is not None


def _exact_gradient(client: problems.ClientObjective, x: np.ndarray) -> np.ndarray:
    if client.kind == "quadratic":
        return impl.quad_gradient(client.a_mat, client.b_vec, x)
    return problems.gradient(client, x)


def _client_loss(client: problems.ClientObjective, x: np.ndarray) -> float:
    if client.kind == "quadratic":
        return impl.quad_value(client.a_mat, client.b_vec, client.loss_offset, x)
    return problems.loss(client, x)


def _round_noise(seed: int, client: int, round_index: int, dim: int, sigma2: float, sigma: float) -> np.ndarray:
    if sigma2 == 0.0:
        return np.zeros(dim)
    return streams.normals(noise_stream(seed, client, round_index), dim) * sigma


def _state_bad(client_x: np.ndarray) -> bool:
    return (not np.isfinite(client_x).all()) or np.abs(client_x).max() > DIVERGENCE_GUARD


def _shared_metrics(
    fed: problems.Federation,
    client_x: np.ndarray,
    client_h: Optional[np.ndarray],
    global_x: np.ndarray,
    psi_weight: float,
) -> Tuple[float, float, float]:
    """(psi, loss, dist) after an update; mirrors the compiled kernels."""
    n = fed.n_clients
    if _metrics_known(fed):
        x_star = fed.optimum
        h_star = fed.star_controls
        acc1 = 0.0
        for i in range(n):
            diff = client_x[i] - x_star
            acc1 = acc1 + impl.sq_norm(diff)
        acc2 = 0.0
        for i in range(n):
            if client_h is None:
                diff = h_star[i]
            else:
                diff = client_h[i] - h_star[i]
            acc2 = acc2 + impl.sq_norm(diff)
        psi = acc1 + psi_weight * acc2
        dist = math.sqrt(impl.sq_norm(global_x - x_star))
    else:
        psi = math.nan
        dist = math.nan
    accl = 0.0
    for i in range(n):
        accl = accl + _client_loss(fed.clients[i], global_x)
    return psi, accl * (1.0 / n), dist


def fedavg_round(
    state: RunState, fed: problems.Federation, cfg: FedAvgConfig
) -> Tuple[RunState, RoundRecord]:
    """One communication round: tau local steps per client, clip, noise, average.

    Deltas are accumulated in ascending client order so the reduction is
    bitwise deterministic.  The recorded potential uses the monitoring
    convention of zero control variates measured against the optimal ones,
    with the control weight read as eta*tau; it tracks progress but is not
    the quantity the convergence guarantee bounds.
    """
    n, d = fed.n_clients, fed.dim
    x_t = state.global_x
    eta = cfg.eta
    sigma2 = cfg.mechanism.sigma2
    sigma = math.sqrt(sigma2)
    clip_c = cfg.mechanism.clip_threshold
    t = state.round_index

    acc = np.zeros(d)
    max_u = 0.0
    clip_count = 0
    for i in range(n):
        client = fed.clients[i]
        x_loc = x_t.copy()
        for j in range(cfg.tau):
            if cfg.batch_size == "full" or client.kind == "quadratic":
                g = _exact_gradient(client, x_loc)
            else:
                rng = streams.stream_key(
                    state.seed, streams.DOMAIN_BATCH, i, t * cfg.tau + j
                )
                g = problems.minibatch_gradient(client, x_loc, int(cfg.batch_size), rng)
            t1 = eta * g
            x_loc = x_loc - t1
        u = x_loc - x_t
        norm = math.sqrt(impl.sq_norm(u))
        if norm > max_u:
            max_u = norm
        if norm > clip_c:
            clip_count += 1
            sent = u * (clip_c / norm)
        else:
            sent = u
        noise = _round_noise(state.seed, i, t, d, sigma2, sigma)
        acc = acc + (sent + noise)
    x_new = x_t + acc * (1.0 / n)
    new_cx = np.repeat(x_new[None, :], n, axis=0)

    r = eta * cfg.tau
    psi, loss_v, dist = _shared_metrics(fed, new_cx, None, x_new, r * r)
    status = "diverged" if _state_bad(new_cx) else "ok"
    new_state = RunState(
        global_x=x_new,
        client_x=new_cx,
        client_h=None,
        round_index=t + 1,
        comm_rounds=state.comm_rounds + 1,
        seed=state.seed,
    )
    record = RoundRecord(
        round=t,
        communicated=True,
        psi=psi,
        global_loss=loss_v,
        dist_opt=dist,
        max_update_norm=max_u,
        clip_count=clip_count,
        sigma2=sigma2,
        status=status,
    )
    return new_state, record


def scaffnew_step(
    state: RunState, fed: problems.Federation, cfg: ScaffNewConfig, coin: int
) -> Tuple[RunState, RoundRecord]:
    """One iteration driven by an externally supplied coin.

    The coin is shared by all clients (the communication decision has no
    client index); ``run`` draws it from the master stream once per
    iteration.
    """
    n, d = fed.n_clients, fed.dim
    x_t = state.global_x
    cx = state.client_x
    ch = state.client_h
    eta, p = cfg.eta, cfg.p
    sigma2 = cfg.mechanism.sigma2
    sigma = math.sqrt(sigma2)
    clip_c = cfg.mechanism.clip_threshold
    t = state.round_index

    xhat = np.empty((n, d))
    if coin:
        c2 = eta / p
        acc = np.zeros(d)
        max_u = 0.0
        clip_count = 0
        for i in range(n):
            g = _exact_gradient(fed.clients[i], cx[i])
            gh = g - ch[i]
            t1 = eta * gh
            xhat[i] = cx[i] - t1
            # Expanded form of (xhat - (eta/p) h - x_t): when clients are in
            # sync the leading difference is exactly zero, making the
            # N=1, p=1 trajectory bit-equal to plain gradient descent.
            u = (cx[i] - x_t) - t1 - c2 * ch[i]
            norm = math.sqrt(impl.sq_norm(u))
            if norm > max_u:
                max_u = norm
            if norm > clip_c:
                clip_count += 1
                sent = u * (clip_c / norm)
            else:
                sent = u
            noise = _round_noise(state.seed, i, t, d, sigma2, sigma)
            acc = acc + (sent + noise)
        x_new = x_t + acc * (1.0 / n)
        s_ph = p / eta
        new_cx = np.empty((n, d))
        new_ch = np.empty((n, d))
        for i in range(n):
            diff = x_new - xhat[i]
            new_ch[i] = ch[i] + s_ph * diff
            new_cx[i] = x_new
        comm_rounds = state.comm_rounds + 1
        max_norm_rec = max_u
    else:
        for i in range(n):
            g = _exact_gradient(fed.clients[i], cx[i])
            gh = g - ch[i]
            t1 = eta * gh
            xhat[i] = cx[i] - t1
        x_new = x_t
        new_cx = xhat
        new_ch = ch
        comm_rounds = state.comm_rounds
        clip_count = 0
        max_norm_rec = math.nan

    r = eta / p
    psi, loss_v, dist = _shared_metrics(fed, new_cx, new_ch, x_new, r * r)
    status = "diverged" if _state_bad(new_cx) else "ok"
    new_state = RunState(
        global_x=x_new,
        client_x=new_cx,
        client_h=new_ch,
        round_index=t + 1,
        comm_rounds=comm_rounds,
        seed=state.seed,
    )
    record = RoundRecord(
        round=t,
        communicated=bool(coin),
        psi=psi,
        global_loss=loss_v,
        dist_opt=dist,
        max_update_norm=max_norm_rec,
        clip_count=clip_count,
        sigma2=sigma2,
        status=status,
    )
    return new_state, record


def _noise_block(seed: int, n: int, rounds: int, d: int, sigma2: float) -> np.ndarray:
    if sigma2 == 0.0:
        return np.zeros((rounds, n, d))
    return streams.normal_block(seed, n, rounds, d) * math.sqrt(sigma2)


def _records_from_arrays(
    comm, psi, loss, dist, maxu, clipc, sigma2, completed, diverged
) -> List[RoundRecord]:
    records = []
    for t in range(completed):
        status = "diverged" if (diverged and t == completed - 1) else "ok"
        records.append(
            RoundRecord(
                round=t,
                communicated=bool(comm[t]),
                psi=float(psi[t]),
                global_loss=float(loss[t]),
                dist_opt=float(dist[t]),
                max_update_norm=float(maxu[t]),
                clip_count=int(clipc[t]),
                sigma2=sigma2,
                status=status,
            )
        )
    return records


def run(
    algorithm: str,
    fed: problems.Federation,
    cfg: Union[FedAvgConfig, ScaffNewConfig],
    seed: int,
    x0: Optional[np.ndarray] = None,
) -> Tuple[List[RoundRecord], RunState]:
    """Execute the full horizon; deterministic in (federation, cfg, seed).

    Emits one record per completed round; a divergent round is recorded
    with status 'diverged' and ends the run early.  Quadratic federations
    take the compiled fast path when the extension is available.
    """
    if algorithm == "fedavg":
        if not isinstance(cfg, FedAvgConfig):
            raise ValueError("fedavg requires a FedAvgConfig")
        rounds = cfg.rounds
    elif algorithm == "scaffnew":
        if not isinstance(cfg, ScaffNewConfig):
            raise ValueError("scaffnew requires a ScaffNewConfig")
        rounds = cfg.iterations
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")

    seed = streams.mask64(seed)
    state = init_state(fed, algorithm, cfg, seed, x0)
    sigma2 = cfg.mechanism.sigma2
    n, d = fed.n_clients, fed.dim

    fast = fed.all_quadratic and impl.run_scaffnew_quad is not None
    if fast:
        a_mats = np.stack([c.a_mat for c in fed.clients])
        b_vecs = np.stack([c.b_vec for c in fed.clients])
        offsets = np.array([c.loss_offset for c in fed.clients])
        noise = _noise_block(seed, n, rounds, d, sigma2)
        known = _metrics_known(fed)
        x_star = fed.optimum if known else np.zeros(d)
        h_star = fed.star_controls if known else np.zeros((n, d))
        x_star = np.ascontiguousarray(x_star, dtype=np.float64)
        h_star = np.ascontiguousarray(h_star, dtype=np.float64)
        if algorithm == "scaffnew":
            coins = streams.coin_flips(seed, rounds, cfg.p)
            (x, cx, ch, psi, loss, dist, maxu, clipc, comm, completed, diverged,
             comm_total) = impl.run_scaffnew_quad(
                a_mats, b_vecs, offsets, state.global_x, state.client_h,
                cfg.eta, cfg.p, rounds, cfg.mechanism.clip_threshold,
                noise, coins, known, x_star, h_star, DIVERGENCE_GUARD,
            )
            final = RunState(
                global_x=x, client_x=cx, client_h=ch,
                round_index=completed, comm_rounds=comm_total, seed=seed,
            )
        else:
            (x, cx, psi, loss, dist, maxu, clipc, completed, diverged) = (
                impl.run_fedavg_quad(
                    a_mats, b_vecs, offsets, state.global_x,
                    cfg.eta, cfg.tau, rounds, cfg.mechanism.clip_threshold,
                    noise, known, x_star, h_star, DIVERGENCE_GUARD,
                )
            )
            comm = np.ones(completed, dtype=np.uint8)
            final = RunState(
                global_x=x, client_x=cx, client_h=None,
                round_index=completed, comm_rounds=completed, seed=seed,
            )
        records = _records_from_arrays(
            comm, psi, loss, dist, maxu, clipc, sigma2, completed, diverged
        )
        return records, final

    records = []
    if algorithm == "scaffnew":
        coins = streams.coin_flips(seed, rounds, cfg.p)
        for t in range(rounds):
            state, record = scaffnew_step(state, fed, cfg, int(coins[t]))
            records.append(record)
            if record.status != "ok":
                break
    else:
        for t in range(rounds):
            state, record = fedavg_round(state, fed, cfg)
            records.append(record)
            if record.status != "ok":
                break
    return records, state
