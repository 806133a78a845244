"""Reference solutions and comparison runs.

``single_regime_threshold`` solves the classical bounded-rate dividend
problem for a Brownian surplus with constant drift. Below the threshold
``b`` the value is ``A (exp(r1 x) - exp(r2 x))``; above it
``K/delta + exp(theta (x - b)) / theta`` with ``theta < 0``. Smooth fit
``V'(b) = 1`` from both sides pins down ``b``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect

from . import hjb
from .model import ModelParams


class BracketError(RuntimeError):
    pass


def _roots(a2, a1, a0):
    """Real roots (lo, hi) of ``a2 r^2 + a1 r + a0``; assumes a2 > 0 and a0 < 0."""
    disc = np.sqrt(a1 * a1 - 4 * a2 * a0)
    return (-a1 - disc) / (2 * a2), (-a1 + disc) / (2 * a2)


@dataclass(frozen=True)
class SingleRegimeSolution:
    mu: float
    sigma: float
    delta: float
    K: float
    threshold: float
    r1: float
    r2: float
    theta: float

    @property
    def amplitude(self) -> float:
        b = self.threshold
        return 1.0 / (self.r1 * np.exp(self.r1 * b) - self.r2 * np.exp(self.r2 * b))

    def value(self, x, order: int = 0):
        """``V`` or its ``order``-th derivative (order <= 2)."""
        x = np.asarray(x, dtype=float)
        b, r1, r2, th = self.threshold, self.r1, self.r2, self.theta
        with np.errstate(over="ignore"):
            below = self.amplitude * (r1**order * np.exp(r1 * x) - r2**order * np.exp(r2 * x))
        if b == 0:
            # pay from the start: V = K/delta (1 - exp(theta x))
            above = (self.K / self.delta) * ((1.0 if order == 0 else 0.0) - th**order * np.exp(th * x))
        else:
            above = th ** (order - 1) * np.exp(th * (x - b)) + (self.K / self.delta if order == 0 else 0.0)
        out = np.where(x < b, below, above)
        out = np.where(x <= 0, 0.0, out) if order == 0 else out
        return float(out) if out.ndim == 0 else out

    __call__ = value


def single_regime_threshold(
    mu: float,
    sigma: float,
    delta: float,
    K: float,
    upper: float = 10.0,
    xtol: float = 1e-10,
) -> SingleRegimeSolution:
    """Optimal threshold and value of the constant-drift bounded-rate problem.

    Returns threshold 0 when paying at full rate from the start already has
    ``V'(0) <= 1``.
    """
    if sigma <= 0 or delta <= 0 or K <= 0:
        raise ValueError("need sigma, delta, K > 0")
    s2 = sigma**2 / 2
    r2, r1 = _roots(s2, mu, -delta)
    theta, _ = _roots(s2, mu - K, -delta)
    target = K / delta + 1.0 / theta  # V(b) when V'(b) = 1 from above

    def mismatch(b):
        e = np.exp((r2 - r1) * b)
        return (1.0 - e) / (r1 - r2 * e) - target

    if target <= 0:
        b = 0.0
    else:
        lo, hi = mismatch(0.0), mismatch(upper)
        if not (lo < 0 < hi):
            raise BracketError(f"smooth-fit equation not bracketed on [0, {upper}] (values {lo:.3g}, {hi:.3g})")
        b = bisect(mismatch, 0.0, upper, xtol=xtol, maxiter=500)
    return SingleRegimeSolution(float(mu), float(sigma), float(delta), float(K), float(b), r1, r2, theta)


def bayesian_case(params: ModelParams, mesh: hjb.Mesh | None = None, eps_prof=None, **solve_kw) -> hjb.HJBSolution:
    """Same problem with the drift frozen (``Q = 0``)."""
    frozen = params.with_(Q=np.zeros_like(params.Q))
    if mesh is None:
        return hjb.solve_hjb(frozen, **solve_kw)
    if eps_prof is None:
        eps_prof = hjb.epsilon_profile(frozen, solve_kw.pop("eps", hjb.DEFAULT_EPS), solve_kw.pop("zeta", None), mesh)
    b1, b2 = hjb.reference_thresholds(frozen, mesh.H)
    initial = hjb.threshold_policy(frozen, mesh, hjb.initial_threshold(frozen, b1, b2))
    return hjb.policy_iteration(frozen, mesh, eps_prof, initial, **solve_kw)


def sweep_mesh(params: ModelParams, K_list, H=hjb.DEFAULT_H, n_x=hjb.DEFAULT_NX, n_u=hjb.DEFAULT_NU,
               refine_factor=hjb.DEFAULT_REFINE) -> hjb.Mesh:
    """One mesh refined around the seed thresholds of every ``K`` in the sweep."""
    levels = [b for K in K_list for b in hjb.reference_thresholds(params.with_(K=float(K)), H)]
    return hjb.default_mesh(params, H, n_x, n_u, refine_factor, bbar=levels)


def k_sweep(
    params: ModelParams,
    mesh: hjb.Mesh | None,
    K_list,
    threads: int = 1,
    upper_bc: str = "asymptotic",
    **solve_kw,
) -> list[hjb.HJBSolution]:
    """Solves for each dividend cap on a common mesh, returned in input order.

    ``mesh=None`` builds ``sweep_mesh`` from the solver settings in ``solve_kw``.
    The asymptotic condition at ``x = H`` is the default here because ``K/delta``
    overstates ``V(H, .)`` badly once ``K`` is large.
    """
    K_list = [float(k) for k in K_list]
    if any(k <= 0 for k in K_list) or any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ValueError("K_list must be positive and increasing")
    if mesh is None:
        mesh_kw = {k: solve_kw[k] for k in ("H", "n_x", "n_u", "refine_factor") if k in solve_kw}
        mesh = sweep_mesh(params, K_list, **mesh_kw)
    solve_kw = {k: v for k, v in solve_kw.items() if k not in ("H", "n_x", "n_u", "refine_factor")}

    def run(K):
        return hjb.solve_hjb(params.with_(K=K), mesh=mesh, upper_bc=upper_bc, **solve_kw)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, K_list))
    return [run(K) for K in K_list]
