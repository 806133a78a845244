"""Hidden chain, observation increments and the Wonham filter.

The chain is simulated exactly (exponential holding times) and read off on
a uniform time grid. The filter is advanced by Euler-Maruyama and projected
back into the interior of the simplex after every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import FLOOR, FilterState, ModelParams, nu_from_pi


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; order of creation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


_CHAIN, _OBS = 0, 1


@dataclass(frozen=True)
class ChainPath:
    times: np.ndarray
    states: np.ndarray  # 0-based state index at each grid time
    jump_times: np.ndarray
    jump_states: np.ndarray  # state entered at each jump; jump_states[0] is Y_0

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True)
class FilterPath:
    times: np.ndarray
    pis: np.ndarray  # (n+1, M)
    nus: np.ndarray
    observations: np.ndarray  # dZ over (t_k, t_{k+1}], length n

    def state(self, k: int) -> FilterState:
        return FilterState.from_pi(self.pis[k], float(self.times[k]))


def _grid(horizon: float, dt: float) -> np.ndarray:
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be positive")
    n = int(round(horizon / dt))
    return dt * np.arange(n + 1)


def simulate_chain(
    params: ModelParams,
    horizon: float,
    dt: float,
    seed: int,
    initial_state: int | None = None,
    path_index: int = 0,
) -> ChainPath:
    """Exact event-time simulation of the chain, sampled on the ``dt`` grid."""
    times = _grid(horizon, dt)
    rng = make_rng(seed, path_index, _CHAIN)
    Q = params.Q
    if initial_state is None:
        state = int(rng.choice(params.M, p=params.p))
    else:
        state = int(initial_state)
    t_end = times[-1]
    jump_times = [0.0]
    jump_states = [state]
    t = 0.0
    while True:
        rate = -Q[state, state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > t_end:
            break
        w = Q[state].copy()
        w[state] = 0.0
        state = int(rng.choice(params.M, p=w / rate))
        jump_times.append(t)
        jump_states.append(state)
    jump_times = np.array(jump_times)
    jump_states = np.array(jump_states, dtype=np.int64)
    idx = np.searchsorted(jump_times, times, side="right") - 1
    return ChainPath(times, jump_states[idx], jump_times, jump_states)


def observe(params: ModelParams, chain: ChainPath, seed: int, path_index: int = 0) -> np.ndarray:
    """Observation increments ``dZ = mu(y_t) dt + sigma sqrt(dt) b_t``, one per step."""
    rng = make_rng(seed, path_index, _OBS)
    dt = chain.dt
    n = chain.times.size - 1
    drift = params.mu[chain.states[:-1]]
    return drift * dt + params.sigma * np.sqrt(dt) * rng.standard_normal(n)


@njit(cache=True, nogil=True)
def project_simplex(pi, floor):
    """Clamp into ``[floor, 1-floor]`` and renormalize in place; last entry is derived."""
    M = pi.shape[0]
    excess = 0.0
    for i in range(M):
        if pi[i] < floor:
            pi[i] = floor
        excess += pi[i] - floor
    scale = (1.0 - M * floor) / excess
    head = 0.0
    for i in range(M - 1):
        pi[i] = floor + (pi[i] - floor) * scale
        head += pi[i]
    pi[M - 1] = 1.0 - head


@njit(cache=True, nogil=True)
def wonham_kernel(pi, scratch, Q, mu, sigma, dW, dt, floor):
    """One Euler-Maruyama step of the filter driven by the innovation increment ``dW``.

    ``pi`` (full length-M vector) is updated in place; ``scratch`` is a work
    buffer of the same length.
    """
    M = pi.shape[0]
    nu = 0.0
    for i in range(M):
        nu += mu[i] * pi[i]
    for i in range(M):
        drift = 0.0
        for j in range(M):
            drift += Q[j, i] * pi[j]
        scratch[i] = pi[i] + drift * dt + pi[i] * (mu[i] - nu) / sigma * dW
    project_simplex(scratch, floor)
    for i in range(M):
        pi[i] = scratch[i]


@njit(cache=True, nogil=True, inline="always")
def wonham_step_two(p1, q11, q21, mu1, mu2, sigma, dW, dt, floor):
    """Scalar form of ``wonham_kernel`` for M=2; returns the new ``pi_1``.

    The unprojected update keeps ``pi_1 + pi_2 = 1``, so the simplex
    projection reduces to clipping ``pi_1``.
    """
    nu = mu2 + (mu1 - mu2) * p1
    p1 = p1 + (q21 + (q11 - q21) * p1) * dt + p1 * (mu1 - nu) * (dW / sigma)
    if p1 < floor:
        return floor
    if p1 > 1.0 - floor:
        return 1.0 - floor
    return p1


@njit(cache=True)
def _filter_path_kernel(pi0, Q, mu, sigma, dZ, dt, floor):
    n = dZ.shape[0]
    M = pi0.shape[0]
    out = np.empty((n + 1, M))
    pi = pi0.copy()
    scratch = np.empty(M)
    out[0] = pi
    for k in range(n):
        nu = 0.0
        for i in range(M):
            nu += mu[i] * pi[i]
        dW = (dZ[k] - nu * dt) / sigma
        if M == 2:
            pi[0] = wonham_step_two(pi[0], Q[0, 0], Q[1, 0], mu[0], mu[1], sigma, dW, dt, floor)
            pi[1] = 1.0 - pi[0]
        else:
            wonham_kernel(pi, scratch, Q, mu, sigma, dW, dt, floor)
        out[k + 1] = pi
    return out


def wonham_step(params: ModelParams, pi: FilterState, dZ: float, dt: float, floor: float = FLOOR) -> FilterState:
    """Advance the filter by one observation increment ``dZ``."""
    full = pi.pi.copy()
    nu = float(params.mu @ full)
    dW = (dZ - nu * dt) / params.sigma
    wonham_kernel(full, np.empty_like(full), params.Q, params.mu, params.sigma, dW, dt, floor)
    return FilterState.from_pi(full, pi.time + dt)


def run_filter(
    params: ModelParams,
    dZ: np.ndarray,
    dt: float,
    pi0=None,
    floor: float = FLOOR,
) -> FilterPath:
    """Run the filter over an externally supplied sequence of increments."""
    dZ = np.ascontiguousarray(dZ, dtype=float)
    if pi0 is None:
        start = params.p.copy()
    elif isinstance(pi0, FilterState):
        start = pi0.pi
    else:
        start = np.asarray(pi0, dtype=float).copy()
    pis = _filter_path_kernel(start, params.Q, params.mu, params.sigma, dZ, dt, floor)
    times = dt * np.arange(dZ.size + 1)
    return FilterPath(times, pis, pis @ params.mu, dZ)


def innovation_increments(params: ModelParams, path: FilterPath) -> np.ndarray:
    """``dW = (dZ - nu dt) / sigma`` using the filter's own estimate at the step start."""
    dt = path.times[1] - path.times[0]
    return (path.observations - path.nus[:-1] * dt) / params.sigma


def simulate_filter_path(
    params: ModelParams,
    horizon: float = 50.0,
    dt: float = 1e-3,
    seed: int = 0,
    pi0=None,
    initial_state: int | None = None,
    path_index: int = 0,
) -> tuple[ChainPath, FilterPath]:
    """Jointly simulate chain, observations and filter for one path."""
    chain = simulate_chain(params, horizon, dt, seed, initial_state=initial_state, path_index=path_index)
    dZ = observe(params, chain, seed, path_index=path_index)
    return chain, run_filter(params, dZ, dt, pi0=pi0)


def filter_ensemble(
    params: ModelParams,
    n_paths: int,
    sample_times,
    dt: float,
    seed: int,
) -> np.ndarray:
    """Filter probabilities at ``sample_times`` for ``n_paths`` independent paths.

    Returns an array of shape ``(n_paths, len(sample_times), M)``.
    """
    sample_times = np.asarray(sample_times, dtype=float)
    horizon = float(sample_times.max())
    idx = np.rint(sample_times / dt).astype(int)
    out = np.empty((n_paths, idx.size, params.M))
    for k in range(n_paths):
        _, path = simulate_filter_path(params, horizon, dt, seed, path_index=k)
        out[k] = path.pis[idx]
    return out


@njit(cache=True)
def _nu_step_kernel(nu, dZ, dt, mu1, mu2, q11, q21, sigma, floor):
    spread = (nu - mu2) * (mu1 - nu)
    drift = q11 * (nu - mu2) + q21 * (mu1 - nu) - spread * nu / sigma**2
    nu = nu + drift * dt + spread / sigma**2 * dZ
    lo = mu2 + floor * (mu1 - mu2)
    hi = mu1 - floor * (mu1 - mu2)
    return min(max(nu, lo), hi)


def nu_step(params: ModelParams, nu: float, dZ: float, dt: float, floor: float = FLOOR) -> float:
    """Euler step of the drift-estimate SDE (M=2) driven by ``dZ``."""
    if params.M != 2:
        raise ValueError("nu_step requires M=2")
    (mu1, mu2), Q = params.mu, params.Q
    return float(_nu_step_kernel(float(nu), float(dZ), dt, mu1, mu2, Q[0, 0], Q[1, 0], params.sigma, floor))


def run_nu_filter(params: ModelParams, dZ: np.ndarray, dt: float, nu0: float | None = None) -> np.ndarray:
    """Path of the drift estimate computed directly in the ``nu`` coordinate."""
    nu = params.upsilon0 if nu0 is None else float(nu0)
    out = np.empty(len(dZ) + 1)
    out[0] = nu
    for k, dz in enumerate(dZ):
        nu = nu_step(params, nu, dz, dt)
        out[k + 1] = nu
    return out


def filter_path_rows(params: ModelParams, chain: ChainPath, path: FilterPath):
    """Header and row tuples for the filter-path CSV (1-based state labels)."""
    header = ["t", "state", "mu_true", "nu"] + [f"pi_{i + 1}" for i in range(params.M - 1)] + ["dZ"]
    dZ = np.concatenate([[0.0], path.observations])
    rows = []
    for k, t in enumerate(path.times):
        s = int(chain.states[k])
        rows.append([t, s + 1, params.mu[s], path.nus[k], *path.pis[k, :-1], dZ[k]])
    return header, rows


__all__ = [
    "ChainPath",
    "FilterPath",
    "filter_ensemble",
    "filter_path_rows",
    "innovation_increments",
    "make_rng",
    "nu_from_pi",
    "nu_step",
    "observe",
    "project_simplex",
    "run_filter",
    "run_nu_filter",
    "simulate_chain",
    "simulate_filter_path",
    "wonham_kernel",
    "wonham_step",
    "wonham_step_two",
]
