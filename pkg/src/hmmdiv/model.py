"""Problem definition for dividend maximization under a hidden Markov drift.

The surplus is a Brownian motion with volatility ``sigma`` whose drift
``mu[Y_t]`` follows an unobserved continuous-time Markov chain ``Y`` with
generator ``Q``. Everything downstream works with the conditional state
probabilities ``pi`` and the drift estimate ``nu = sum_i mu_i pi_i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Interior clamp for the filter probabilities.
FLOOR = 1e-10

_SUM_TOL = 1e-12


class ParameterError(ValueError):
    """Raised when a ModelParams invariant is violated."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelParams:
    """All problem constants. Arrays are stored as read-only numpy arrays."""

    mu: np.ndarray
    sigma: float
    Q: np.ndarray
    delta: float
    K: float
    p: np.ndarray
    M: int = field(default=0)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).ravel()
        Q = np.array(self.Q, dtype=float)
        p = np.array(self.p, dtype=float).ravel()
        for arr in (mu, Q, p):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "K", float(self.K))
        if not self.M:
            object.__setattr__(self, "M", int(mu.size))

    def with_(self, **changes) -> "ModelParams":
        """Copy with some fields replaced (``M`` is re-derived unless given)."""
        changes.setdefault("M", 0)
        return validate(replace(self, **changes))

    @property
    def mu_max(self) -> float:
        return float(self.mu[0])

    @property
    def mu_min(self) -> float:
        return float(self.mu[-1])

    @property
    def v_max(self) -> float:
        """Upper bound ``K/delta`` of every value function."""
        return self.K / self.delta

    @property
    def upsilon0(self) -> float:
        """Drift estimate at time zero."""
        return float(self.mu @ self.p)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "mu": self.mu.tolist(),
            "sigma": self.sigma,
            "Q": self.Q.tolist(),
            "delta": self.delta,
            "K": self.K,
            "p": self.p.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        expected = {"M", "mu", "sigma", "Q", "delta", "K", "p"}
        unknown = set(doc) - expected
        if unknown:
            raise ParameterError(sorted(unknown)[0], "unknown parameter key")
        missing = expected - {"M"} - set(doc)
        if missing:
            raise ParameterError(sorted(missing)[0], "missing parameter key")
        params = cls(
            mu=doc["mu"],
            sigma=doc["sigma"],
            Q=doc["Q"],
            delta=doc["delta"],
            K=doc["K"],
            p=doc["p"],
            M=int(doc.get("M", 0)),
        )
        return validate(params)

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def validate(params: ModelParams) -> ModelParams:
    """Return ``params`` unchanged if every invariant holds.

    Raises:
        ParameterError: naming the first violated field.
    """
    M = params.M
    mu, Q, p = params.mu, params.Q, params.p
    if M < 2:
        raise ParameterError("M", "need at least 2 chain states")
    if mu.shape != (M,):
        raise ParameterError("mu", f"expected {M} drifts, got {mu.size}")
    if not np.all(np.isfinite(mu)):
        raise ParameterError("mu", "non-finite drift")
    if np.any(np.diff(mu) >= 0):
        raise ParameterError("mu", "mu not strictly decreasing")
    if not (np.isfinite(params.sigma) and params.sigma > 0):
        raise ParameterError("sigma", "sigma must be positive")
    if Q.shape != (M, M):
        raise ParameterError("Q", f"expected {M}x{M} generator")
    off = Q[~np.eye(M, dtype=bool)]
    if not np.all(np.isfinite(Q)) or np.any(off < 0) or np.any(np.abs(Q.sum(axis=1)) > _SUM_TOL):
        raise ParameterError("Q", "Q not a generator")
    if not (np.isfinite(params.delta) and params.delta > 0):
        raise ParameterError("delta", "delta must be positive")
    if not (np.isfinite(params.K) and params.K > 0):
        raise ParameterError("K", "K must be positive")
    if p.shape != (M,):
        raise ParameterError("p", f"expected {M} prior probabilities")
    if np.any(p <= 0):
        raise ParameterError("p", "prior must be strictly positive")
    if abs(p.sum() - 1.0) > _SUM_TOL:
        raise ParameterError("p", "prior does not sum to 1")
    return params


def two_state(mu1, mu2, sigma, delta, K, q11, q21, p1=0.5) -> ModelParams:
    """Convenience constructor for the M=2 case, ``Q = [[q11, -q11], [q21, -q21]]``."""
    return validate(
        ModelParams(
            mu=[mu1, mu2],
            sigma=sigma,
            Q=[[q11, -q11], [q21, -q21]],
            delta=delta,
            K=K,
            p=[p1, 1.0 - p1],
        )
    )


def paper_params(K: float = 1.8) -> ModelParams:
    """Reference parameter set: sigma=1, mu=(2,1), delta=0.5, q11=-0.25, q21=0.5."""
    return two_state(2.0, 1.0, 1.0, 0.5, K, -0.25, 0.5)


@dataclass(frozen=True)
class FilterState:
    """Point on the probability simplex.

    Only the first ``M-1`` coordinates are stored; the last one is derived
    so the sum constraint holds exactly.
    """

    coords: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        c = np.array(self.coords, dtype=float).ravel()
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @classmethod
    def from_pi(cls, pi, time: float = 0.0) -> "FilterState":
        pi = np.asarray(pi, dtype=float).ravel()
        return cls(pi[:-1], time)

    @property
    def M(self) -> int:
        return self.coords.size + 1

    @property
    def pi(self) -> np.ndarray:
        return np.append(self.coords, 1.0 - self.coords.sum())


def nu_from_pi(params: ModelParams, pi) -> float | np.ndarray:
    """Drift estimate ``mu_M + sum_{j<M} (mu_j - mu_M) pi_j``.

    ``pi`` may be a FilterState, a full probability vector, or a stacked
    array of either shape ``(..., M)`` or ``(..., M-1)``.
    """
    coords = pi.coords if isinstance(pi, FilterState) else np.asarray(pi, dtype=float)
    if coords.shape[-1] == params.M:
        coords = coords[..., :-1]
    mu = params.mu
    out = mu[-1] + coords @ (mu[:-1] - mu[-1])
    return float(out) if np.ndim(out) == 0 else out


def pi_from_nu(params: ModelParams, nu: float) -> FilterState:
    if params.M != 2:
        raise ValueError("pi_from_nu is only defined for M=2")
    mu1, mu2 = params.mu
    if not (mu2 <= nu <= mu1):
        raise ValueError(f"nu={nu} outside [{mu2}, {mu1}]")
    return FilterState([(nu - mu2) / (mu1 - mu2)])
