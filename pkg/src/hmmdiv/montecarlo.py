"""Monte-Carlo evaluation of threshold dividend strategies.

The controlled state ``(X, pi)`` is advanced by Euler-Maruyama with one
shared innovation increment per step. Dividends ``K 1{X >= b(nu)}`` are
paid until ruin or the horizon. Within a step, ruin is detected both when
``X`` ends at or below zero (crossing time by linear interpolation) and,
for paths that end positive, by the Brownian-bridge crossing probability
``exp(-2 X_k X_{k+1} / (sigma^2 dt))``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .filter import wonham_kernel, wonham_step_two
from .hjb import ThresholdCurve
from .model import FLOOR, FilterState, ModelParams

_NEVER = 1e12


@dataclass(frozen=True)
class StrategyEvaluation:
    estimate: float
    std_error: float
    n_paths: int
    ruin_fraction: float
    horizon: float
    truncation_bias: float  # upper bound exp(-delta T) K/delta
    payouts: np.ndarray | None = None
    ruin_times: np.ndarray | None = None


@dataclass(frozen=True)
class RuinStatistics:
    ruin_fraction: float
    std_error: float
    n_paths: int
    quantiles: dict  # level -> ruin time among ruined paths
    mean_ruin_time: float


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Generator owning the noise of one path; independent of every other path."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(path_index),)))


@njit(cache=True, nogil=True, inline="always")
def _interp(x, xp, fp):
    n = xp.shape[0]
    if x <= xp[0]:
        return fp[0]
    if x >= xp[n - 1]:
        return fp[n - 1]
    lo, hi = 0, n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if xp[mid] <= x:
            lo = mid
        else:
            hi = mid
    w = (x - xp[lo]) / (xp[hi] - xp[lo])
    return fp[lo] + w * (fp[hi] - fp[lo])


# bridge crossing probabilities below exp(-_BRIDGE_CUT) are treated as zero
_BRIDGE_CUT = 40.0

# slots of the per-path state vector
_X, _PAID, _DISC, _STEP = 0, 1, 2, 3


@njit(cache=True, nogil=True)
def _advance(state, pi, scratch, z, uu, mu, Q, sigma, delta, K, ups, bs, dt, n_steps, bridge, floor):
    """Consume one chunk of normals ``z`` (and uniforms ``uu``).

    Returns the ruin time, -1.0 if the chunk ran out, -2.0 at the horizon.
    """
    M = pi.shape[0]
    x = state[_X]
    paid = state[_PAID]
    discount = state[_DISC]
    k = int(state[_STEP])
    sq = math.sqrt(dt)
    decay = math.exp(-delta * dt)
    step_factor = (1.0 - decay) / delta
    bridge_scale = 2.0 / (sigma * sigma * dt)
    two = M == 2
    q11, q21 = Q[0, 0], Q[M - 1, 0]
    mu1, mu2 = mu[0], mu[M - 1]
    out = -1.0
    for n in range(z.shape[0]):
        if k >= n_steps:
            out = -2.0
            break
        nu = 0.0
        for i in range(M):
            nu += mu[i] * pi[i]
        u = K if x >= _interp(nu, ups, bs) else 0.0
        dW = sq * z[n]
        x_new = x + (nu - u) * dt + sigma * dW
        pay = discount * u * step_factor
        if x_new <= 0.0:
            frac = x / (x - x_new)
            paid += pay * frac
            out = (k + frac) * dt
            break
        if bridge:
            arg = bridge_scale * x * x_new
            if arg < _BRIDGE_CUT and uu[n] < math.exp(-arg):
                # crossing time approximated by the linear path reflected at zero
                frac = x / (x + x_new)
                paid += pay * frac
                out = (k + frac) * dt
                break
        paid += pay
        discount *= decay
        x = x_new
        k += 1
        if two:
            pi[0] = wonham_step_two(pi[0], q11, q21, mu1, mu2, sigma, dW, dt, floor)
            pi[1] = 1.0 - pi[0]
        else:
            wonham_kernel(pi, scratch, Q, mu, sigma, dW, dt, floor)
    else:
        if k >= n_steps:
            out = -2.0
    state[_X] = x
    state[_PAID] = paid
    state[_DISC] = discount
    state[_STEP] = k
    return out


_CHUNK = 8192


def _one_path(ctx, path_index):
    """Discounted payout and ruin time (-1 if none) of one path."""
    (x0, pi0, mu, Q, sigma, delta, K, ups, bs, dt, n_steps, seed, bridge, floor) = ctx
    if x0 <= 0.0:
        return 0.0, 0.0
    rng = path_rng(seed, path_index)
    state = np.array([x0, 0.0, 1.0, 0.0])
    pi = pi0.copy()
    scratch = np.empty_like(pi)
    while True:
        size = min(_CHUNK, n_steps - int(state[_STEP]) + 1)
        z = rng.standard_normal(size)
        uu = rng.random(size) if bridge else z
        out = _advance(state, pi, scratch, z, uu, mu, Q, sigma, delta, K, ups, bs, dt, n_steps, bridge, floor)
        if out >= 0:
            return state[_PAID], out
        if out == -2.0:
            return state[_PAID], -1.0


def _curve_arrays(threshold):
    if isinstance(threshold, ThresholdCurve):
        ups, b = threshold.upsilon, threshold.b
    else:
        ups, b = threshold
    ups = np.ascontiguousarray(ups, dtype=float)
    b = np.where(np.isfinite(b), np.asarray(b, dtype=float), _NEVER)
    return ups, np.ascontiguousarray(b)


def constant_threshold(params: ModelParams, level: float) -> ThresholdCurve:
    """Flat curve ``b = level`` (``inf`` for never-pay, 0 for always-pay)."""
    ups = np.array([params.mu_min, params.mu_max])
    return ThresholdCurve(ups, np.full(2, float(level)), np.ones(2, dtype=bool))


def _prior(params, p0):
    if p0 is None:
        return params.p.copy()
    if isinstance(p0, FilterState):
        return p0.pi
    p0 = np.asarray(p0, dtype=float).ravel()
    if p0.size == params.M - 1:
        p0 = np.append(p0, 1.0 - p0.sum())
    if p0.size != params.M:
        raise ValueError("p0 has the wrong length")
    return p0


def _run(params, threshold, x0, p0, n_paths, dt, horizon, seed, bridge, floor, first_path=0, threads=1):
    ups, bs = _curve_arrays(threshold)
    n_steps = int(math.ceil(horizon / dt - 1e-9))
    ctx = (
        float(x0), _prior(params, p0), params.mu, params.Q, params.sigma, params.delta, params.K,
        ups, bs, float(dt), n_steps, int(seed), bool(bridge), float(floor),
    )
    payouts = np.empty(n_paths)
    ruin = np.empty(n_paths)

    def block(lo, hi):
        for p in range(lo, hi):
            payouts[p], ruin[p] = _one_path(ctx, first_path + p)

    threads = max(1, int(threads or 1))
    if threads == 1:
        block(0, n_paths)
    else:
        edges = np.linspace(0, n_paths, 4 * threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(block, edges[:-1], edges[1:]))
    return payouts, ruin


def simulate_controlled_path(
    params: ModelParams,
    threshold,
    x0: float,
    p0=None,
    dt: float = 1e-3,
    horizon: float = 40.0,
    seed: int = 0,
    path_index: int = 0,
    bridge: bool = True,
    floor: float = FLOOR,
) -> tuple[float, float | None]:
    """Discounted dividends of one path and its ruin time (``None`` if it survives)."""
    pay, ruin = _run(params, threshold, x0, p0, 1, dt, horizon, seed, bridge, floor, first_path=path_index)
    return float(pay[0]), (None if ruin[0] < 0 else float(ruin[0]))


def default_horizon(params: ModelParams, rel_bias: float = 1e-4) -> float:
    """Smallest horizon with ``exp(-delta T) <= rel_bias``."""
    return math.log(1.0 / rel_bias) / params.delta


def evaluate_strategy(
    params: ModelParams,
    threshold,
    x0: float,
    p0=None,
    n_paths: int = 10_000,
    dt: float = 1e-3,
    horizon: float | None = None,
    seed: int = 0,
    bridge: bool = True,
    keep_paths: bool = False,
    threads: int = 1,
) -> StrategyEvaluation:
    """Mean discounted dividends over independent paths.

    Each path draws from its own generator, so results do not depend on
    ``threads``.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be at least 100")
    if horizon is None:
        horizon = default_horizon(params)
    pay, ruin = _run(params, threshold, x0, p0, n_paths, dt, horizon, seed, bridge, FLOOR, threads=threads)
    return StrategyEvaluation(
        estimate=float(pay.mean()),
        std_error=float(pay.std(ddof=1) / math.sqrt(n_paths)),
        n_paths=n_paths,
        ruin_fraction=float(np.mean(ruin >= 0)),
        horizon=float(horizon),
        truncation_bias=float(math.exp(-params.delta * horizon) * params.v_max),
        payouts=pay if keep_paths else None,
        ruin_times=np.where(ruin >= 0, ruin, np.nan) if keep_paths else None,
    )


def ruin_statistics(
    params: ModelParams,
    threshold,
    x0: float,
    p0=None,
    n_paths: int = 10_000,
    dt: float = 1e-3,
    horizon: float = 40.0,
    seed: int = 0,
    levels=(0.1, 0.25, 0.5, 0.75, 0.9),
    bridge: bool = True,
    threads: int = 1,
) -> RuinStatistics:
    """Share of paths ruined before the horizon and quantiles of the ruin time."""
    _, ruin = _run(params, threshold, x0, p0, n_paths, dt, horizon, seed, bridge, FLOOR, threads=threads)
    hit = ruin >= 0
    frac = float(hit.mean())
    times = ruin[hit]
    q = {float(lv): (float(np.quantile(times, lv)) if times.size else math.nan) for lv in levels}
    return RuinStatistics(
        ruin_fraction=frac,
        std_error=math.sqrt(frac * (1 - frac) / n_paths),
        n_paths=n_paths,
        quantiles=q,
        mean_ruin_time=float(times.mean()) if times.size else math.nan,
    )
