"""Finite-difference solver for the two-state HJB equation in (x, upsilon).

The unknown is ``V(x, upsilon)`` on ``[0, H] x [mu_2, mu_1]``, where upsilon
is the drift estimate. For a fixed dividend policy ``u`` the discretized
equation

    upsilon V_x + a V_u + c V_xu + (c^2/(2 sigma^2) + eps) V_uu
        + sigma^2/2 V_xx - delta V + u (1 - V_x) = 0

with ``a = q21 (mu_1 - u) + q11 (u - mu_2)`` and ``c = (mu_1 - u)(u - mu_2)``
is assembled as a sparse matrix whose off-diagonal entries are all
nonnegative (a monotone scheme). Policy iteration alternates linear solves
with a greedy update of ``u`` in ``{0, K}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .model import ModelParams

log = logging.getLogger(__name__)

DEFAULT_H = 10.0
DEFAULT_NX = 200
DEFAULT_NU = None  # derived from the x-spacing, see auto_n_u
DEFAULT_EPS = 1e-3
DEFAULT_REFINE = 2.0
DEFAULT_PAD = 0.5  # refinement band reaches this far beyond the seed thresholds

_COEF_TOL = 1e-12


class PositivityError(RuntimeError):
    def __init__(self, violations):
        self.violations = violations
        i, j, where, coef = violations[0]
        super().__init__(
            f"{len(violations)} negative off-diagonal coefficient(s); first at node (i={i}, j={j}) "
            f"neighbour {where}: {coef:.3e}"
        )


class LinearSolveError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, nodes, log_rows):
        super().__init__(message)
        self.nodes = nodes
        self.log = log_rows


def _require_two_states(params: ModelParams):
    if params.M != 2:
        raise ValueError("the HJB solver handles M=2 only")


# ---------------------------------------------------------------- mesh


@dataclass(frozen=True)
class Mesh:
    xs: np.ndarray
    us: np.ndarray
    band: tuple[float, float] = (0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.xs.size, self.us.size

    @property
    def n_x(self) -> int:
        return self.xs.size - 1

    @property
    def n_u(self) -> int:
        return self.us.size - 1

    @property
    def H(self) -> float:
        return float(self.xs[-1])

    def x_spacing(self) -> np.ndarray:
        return np.diff(self.xs)

    def spacing_at(self, x: float) -> float:
        """Width of the x-cell containing ``x``."""
        k = int(np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, self.n_x - 1))
        return float(self.xs[k + 1] - self.xs[k])


def auto_n_u(params: ModelParams, h_max: float, margin: float = 1.2) -> int:
    """Upsilon interval count keeping the x-neighbour weights of the cross stencil positive.

    The 7-point stencil needs ``k / h >= c / sigma^2`` with ``c`` up to
    ``(mu_1 - mu_2)^2 / 4``; any larger ratio has to be paid for with extra
    upsilon diffusion, so ``k`` is taken just above that bound.
    """
    mu1, mu2 = params.mu[0], params.mu[-1]
    c_max = (mu1 - mu2) ** 2 / 4
    k = margin * c_max * h_max / params.sigma**2
    return max(8, int(np.floor((mu1 - mu2) / k)))


def build_mesh(
    params: ModelParams,
    H: float = DEFAULT_H,
    n_x: int = DEFAULT_NX,
    n_u: int | None = DEFAULT_NU,
    band: tuple[float, float] | None = None,
    refine_factor: float = DEFAULT_REFINE,
) -> Mesh:
    """Piecewise-uniform x-grid refined by ``refine_factor`` on ``band``; uniform upsilon-grid.

    ``n_x`` and ``n_u`` count intervals, so the mesh has ``(n_x+1) x (n_u+1)`` nodes.
    ``n_u=None`` picks the count from the coarsest x-spacing (``auto_n_u``).
    """
    _require_two_states(params)
    if H <= 0:
        raise ValueError("H must be positive")
    if n_x < 16 or (n_u is not None and n_u < 8):
        raise ValueError("need n_x >= 16 and n_u >= 8")
    if refine_factor < 1:
        raise ValueError("refine_factor must be >= 1")
    lo, hi = (0.0, 0.0) if band is None else (float(band[0]), float(band[1]))
    if lo > hi:
        lo, hi = hi, lo
    if lo < 0 or hi > H:
        raise ValueError(f"band [{lo}, {hi}] outside [0, {H}]")

    width = hi - lo
    if width <= 0 or refine_factor == 1:
        xs = np.linspace(0.0, H, n_x + 1)
    else:
        h0 = (H - width + refine_factor * width) / n_x
        # outer pieces shorter than one coarse step are folded into the band
        if lo < h0:
            lo = 0.0
        if H - hi < h0:
            hi = H
        h0 = (H - (hi - lo) + refine_factor * (hi - lo)) / n_x
        n_lo = int(np.floor(lo / h0 + 1e-9))
        n_hi = int(np.floor((H - hi) / h0 + 1e-9))
        if lo > 0:
            n_lo = max(n_lo, 1)
        if hi < H:
            n_hi = max(n_hi, 1)
        n_in = n_x - n_lo - n_hi
        if n_in < 1:
            raise ValueError("n_x too small for the requested refinement")
        parts = []
        if n_lo:
            parts.append(np.linspace(0.0, lo, n_lo + 1)[:-1])
        parts.append(np.linspace(lo, hi, n_in + 1))
        if n_hi:
            parts.append(np.linspace(hi, H, n_hi + 1)[1:])
        xs = np.concatenate(parts)
    xs[0], xs[-1] = 0.0, H
    mu1, mu2 = params.mu
    if n_u is None:
        n_u = auto_n_u(params, float(np.diff(xs).max()))
    us = np.linspace(mu2, mu1, n_u + 1)
    us[0], us[-1] = mu2, mu1
    return Mesh(xs, us, (lo, hi))


# ------------------------------------------------------------ grid types


@dataclass(frozen=True)
class ValueGrid:
    values: np.ndarray  # (n_x+1, n_u+1)
    mesh: Mesh

    def __call__(self, x, upsilon):
        """Bilinear interpolation of the grid values."""
        interp = RegularGridInterpolator((self.mesh.xs, self.mesh.us), self.values)
        x, upsilon = np.broadcast_arrays(np.asarray(x, float), np.asarray(upsilon, float))
        out = interp(np.stack([x.ravel(), upsilon.ravel()], axis=-1)).reshape(x.shape)
        return float(out) if out.ndim == 0 else out

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def forward_dx(self) -> np.ndarray:
        return np.diff(self.values, axis=0) / np.diff(self.mesh.xs)[:, None]


@dataclass(frozen=True)
class PolicyGrid:
    rates: np.ndarray  # entries in {0, K}
    K: float

    def pays(self) -> np.ndarray:
        return self.rates > 0


@dataclass(frozen=True)
class ThresholdCurve:
    upsilon: np.ndarray
    b: np.ndarray  # np.inf where a column never pays
    flag: np.ndarray  # True where the column is of pure threshold type

    @property
    def is_threshold(self) -> bool:
        return bool(np.all(self.flag))

    def __call__(self, upsilon):
        """Linear interpolation in upsilon, nearest endpoint outside the grid."""
        b = np.where(np.isfinite(self.b), self.b, 1e12)
        return np.interp(upsilon, self.upsilon, b)


@dataclass(frozen=True)
class EpsilonProfile:
    eps: float
    zeta: float
    values: np.ndarray  # per upsilon node

    @staticmethod
    def shape_function(dist, zeta):
        """Smoothstep ramp in the distance to the nearest endpoint; C^1, 0 at 0, 1 beyond zeta."""
        t = np.clip(np.asarray(dist, dtype=float) / zeta, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)


def initial_threshold(params: ModelParams, b1_bar: float, b2_bar: float, upsilon=None) -> ThresholdCurve:
    """Affine interpolation between the per-state thresholds (b1 at mu_1, b2 at mu_2)."""
    if b1_bar < 0 or b2_bar < 0:
        raise ValueError("thresholds must be nonnegative")
    mu1, mu2 = params.mu[0], params.mu[-1]
    ups = np.linspace(mu2, mu1, 2) if upsilon is None else np.asarray(upsilon, dtype=float)
    b = (mu1 - ups) / (mu1 - mu2) * b2_bar + (ups - mu2) / (mu1 - mu2) * b1_bar
    return ThresholdCurve(ups, b, np.ones(ups.size, dtype=bool))


def threshold_policy(params: ModelParams, mesh: Mesh, curve: ThresholdCurve) -> PolicyGrid:
    """``u = K 1{x >= b(upsilon)}`` on the mesh."""
    b = curve(mesh.us)
    rates = np.where(mesh.xs[:, None] >= b[None, :], params.K, 0.0)
    return PolicyGrid(rates, params.K)


def epsilon_profile(params: ModelParams, eps: float, zeta: float | None, mesh: Mesh) -> EpsilonProfile:
    mu1, mu2 = params.mu
    if zeta is None:
        zeta = (mu1 - mu2) / 10
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if not 0 < zeta < (mu1 - mu2) / 2:
        raise ValueError("need 0 < zeta < (mu_1 - mu_2)/2")
    dist = np.minimum(mesh.us - mu2, mu1 - mesh.us)
    values = eps * EpsilonProfile.shape_function(dist, zeta)
    values[0] = values[-1] = 0.0
    return EpsilonProfile(float(eps), float(zeta), values)


# ------------------------------------------------------------- assembly


@dataclass
class LinearSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    mesh: Mesh
    eps_nodes: np.ndarray  # effective epsilon per node after correction
    raised: np.ndarray  # bool mask of nodes where epsilon was raised
    violations: list = field(default_factory=list)
    dirichlet: np.ndarray | None = None  # flat mask of identity rows

    def residual(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values.ravel() - self.rhs

    def off_diagonal_min(self) -> float:
        A = self.matrix.tocoo()
        off = A.row != A.col
        return float(A.data[off].min()) if off.any() else 0.0


def _x_steps(mesh):
    xs = mesh.xs
    return (xs[1:-1] - xs[:-2])[:, None], (xs[2:] - xs[1:-1])[:, None]


def _cross_weights(params, mesh):
    """Sign-split cross-derivative weights (NE, SW, SE, NW) and ``c`` on interior x-rows."""
    mu1, mu2 = params.mu
    us = mesh.us
    hxm, hxp = _x_steps(mesh)
    kum = np.full(us.size, np.nan)
    kup = np.full(us.size, np.nan)
    kum[1:] = np.diff(us)
    kup[:-1] = np.diff(us)
    kum, kup = kum[None, :], kup[None, :]
    c = (mu1 - us) * (us - mu2)
    c[0] = c[-1] = 0.0
    c = c[None, :]
    cp, cm = np.maximum(c, 0.0), np.maximum(-c, 0.0)
    with np.errstate(invalid="ignore"):
        ne = np.where(c != 0, cp / (2 * hxp * kup), 0.0)
        sw = np.where(c != 0, cp / (2 * hxm * kum), 0.0)
        se = np.where(c != 0, cm / (2 * hxp * kum), 0.0)
        nw = np.where(c != 0, cm / (2 * hxm * kup), 0.0)
    return (ne, sw, se, nw), c, kum, kup


def x_derivative_weights(params: ModelParams, mesh: Mesh, drift: np.ndarray):
    """Weights ``(w_E, w_W)`` with ``D_x V = w_E (V_E - V_P) + w_W (V_W - V_P)``.

    Uses the three-point central difference wherever ``drift * D_x`` keeps
    both x-neighbour weights of the full stencil nonnegative, and the
    upwind difference for the sign of ``drift`` elsewhere. ``drift`` has the
    shape of the interior rows, ``(n_x - 1, n_u + 1)``.
    """
    hxm, hxp = _x_steps(mesh)
    (ne, sw, se, nw), _, _, _ = _cross_weights(params, mesh)
    s2 = params.sigma**2
    base_e = s2 / (hxp * (hxm + hxp)) - ne - se
    base_w = s2 / (hxm * (hxm + hxp)) - sw - nw
    ce = hxm / (hxp * (hxm + hxp))
    cw = -hxp / (hxm * (hxm + hxp))
    central = (base_e + drift * ce >= 0) & (base_w + drift * cw >= 0)
    up_e = np.where(drift >= 0, 1.0 / hxp, 0.0)
    up_w = np.where(drift >= 0, 0.0, -1.0 / hxm)
    return np.where(central, ce, up_e), np.where(central, cw, up_w)


def x_derivative(params: ModelParams, mesh: Mesh, values: np.ndarray, drift: np.ndarray) -> np.ndarray:
    """``D_x V`` on interior rows as used by the scheme for the given drift."""
    we, ww = x_derivative_weights(params, mesh, drift)
    centre = values[1:-1]
    return we * (values[2:] - centre) + ww * (values[:-2] - centre)


def _coefficients(params, mesh, eps_prof, rates, correct):
    """Stencil weights for interior x-rows, each of shape (n_x-1, n_u+1)."""
    mu1, mu2 = params.mu
    sigma = params.sigma
    q11, q21 = params.Q[0, 0], params.Q[1, 0]
    us = mesh.us
    hxm, hxp = _x_steps(mesh)
    (ne, sw, se, nw), c, kum, kup = _cross_weights(params, mesh)

    v = us[None, :]
    g = c**2 / (2 * sigma**2)
    a = q21 * (mu1 - v) + q11 * (v - mu2)
    if a[0, 0] < 0 or a[0, -1] > 0:
        raise ValueError("upsilon drift points outward at a boundary")
    bx = v - rates[1:-1, :]
    we, ww = x_derivative_weights(params, mesh, bx)

    ap, am = np.maximum(a, 0.0), np.maximum(-a, 0.0)
    inner = np.zeros((1, us.size), dtype=bool)
    inner[:, 1:-1] = True

    with np.errstate(invalid="ignore"):
        eps_nodes = np.broadcast_to(eps_prof.values[None, :], bx.shape).copy()
        raised = np.zeros(bx.shape, dtype=bool)
        if correct:
            need_n = (ne + nw - ap / kup) * kup * (kum + kup) / 2
            need_s = (sw + se - am / kum) * kum * (kum + kup) / 2
            need = np.where(inner, np.maximum(need_n, need_s) - g, 0.0) * (1 + 1e-12)
            raised = need > eps_nodes
            eps_nodes = np.maximum(eps_nodes, need)
        d = g + eps_nodes

        east = sigma**2 / (hxp * (hxm + hxp)) + bx * we - ne - se
        west = sigma**2 / (hxm * (hxm + hxp)) + bx * ww - sw - nw
        north = np.where(inner, 2 * d / (kup * (kum + kup)) - ne - nw, 0.0) + np.where(ap > 0, ap / kup, 0.0)
        south = np.where(inner, 2 * d / (kum * (kum + kup)) - sw - se, 0.0) + np.where(am > 0, am / kum, 0.0)
    weights = {"E": east, "W": west, "N": north, "S": south, "NE": ne, "SW": sw, "SE": se, "NW": nw}
    return weights, eps_nodes, raised


def tail_decay(params: ModelParams, upsilon) -> np.ndarray:
    """Negative root of ``sigma^2/2 t^2 + (upsilon - K) t - delta = 0``."""
    b = np.asarray(upsilon, dtype=float) - params.K
    s2 = params.sigma**2
    return (-b - np.sqrt(b * b + 2 * s2 * params.delta)) / s2


_OFFSETS = {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1), "NE": (1, 1), "SW": (-1, -1), "SE": (1, -1), "NW": (-1, 1)}


def assemble_system(
    params: ModelParams,
    mesh: Mesh,
    eps_prof: EpsilonProfile,
    policy: PolicyGrid,
    correct: bool = True,
    strict: bool = False,
    upper_bc: str = "dirichlet",
) -> LinearSystem:
    """Sparse system ``A V = rhs`` for a fixed policy.

    Dirichlet rows carry ``V(0, .) = 0`` and, for ``upper_bc="dirichlet"``,
    ``V(H, .) = K/delta``. ``upper_bc="asymptotic"`` instead imposes
    ``V_x = theta (V - K/delta)`` at ``x = H``, the decay of the full-rate
    tail ``K/delta + C exp(theta x)``; it matters when ``K/delta`` is far
    above the value reached at ``H``. With
    ``correct`` the local epsilon is raised wherever the profile value alone
    would leave a negative upsilon-neighbour weight. Any remaining negative
    off-diagonal weight is recorded in ``violations`` (raised if ``strict``).
    """
    _require_two_states(params)
    if eps_prof.values.shape != mesh.us.shape:
        raise ValueError("epsilon profile and mesh use different upsilon nodes")
    nxp, nup = mesh.shape
    rates = np.asarray(policy.rates, dtype=float)
    weights, eps_int, raised_int = _coefficients(params, mesh, eps_prof, rates, correct)

    node = np.arange(nxp * nup).reshape(nxp, nup)
    I, J = np.meshgrid(np.arange(1, nxp - 1), np.arange(nup), indexing="ij")
    rows, cols, vals = [], [], []
    diag = np.full(I.shape, -params.delta)
    violations = []
    for name, w in weights.items():
        di, dj = _OFFSETS[name]
        jj = J + dj
        valid = (jj >= 0) & (jj < nup) & (w != 0)
        bad = valid & (w < -_COEF_TOL * (1.0 + np.abs(w)))
        w = np.where(valid & (w < 0) & ~bad, 0.0, w)  # cancellation noise
        valid &= w != 0
        for i, j in zip(*np.nonzero(bad)):
            violations.append((int(i + 1), int(j), name, float(w[i, j])))
        rows.append(node[I[valid], J[valid]])
        cols.append(node[I[valid] + di, jj[valid]])
        vals.append(w[valid])
        diag -= np.where(valid, w, 0.0)
    interior = node[I, J].ravel()
    rows.append(interior)
    cols.append(interior)
    vals.append(diag.ravel())
    if upper_bc not in ("dirichlet", "asymptotic"):
        raise ValueError(f"unknown upper boundary condition {upper_bc!r}")
    boundary = np.concatenate([node[0], node[-1]]) if upper_bc == "dirichlet" else node[0]
    rows.append(boundary)
    cols.append(boundary)
    vals.append(np.ones(boundary.size))
    if upper_bc == "asymptotic":
        theta = tail_decay(params, mesh.us)
        h = mesh.xs[-1] - mesh.xs[-2]
        rows += [node[-1], node[-1]]
        cols += [node[-1], node[-2]]
        vals += [-(1.0 / h - theta), np.full(nup, 1.0 / h)]

    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nxp * nup,) * 2
    )
    rhs = np.zeros((nxp, nup))
    rhs[1:-1, :] = -rates[1:-1, :]
    rhs[-1, :] = params.K / params.delta if upper_bc == "dirichlet" else theta * params.K / params.delta

    eps_nodes = np.zeros((nxp, nup))
    eps_nodes[1:-1] = eps_int
    raised = np.zeros((nxp, nup), dtype=bool)
    raised[1:-1] = raised_int
    if raised.any():
        log.debug("epsilon raised at %d nodes (max %.3e)", raised.sum(), eps_nodes[raised].max())
    if violations:
        log.warning("monotonicity fails at %d stencil entries", len(violations))
        if strict:
            raise PositivityError(violations)
    dirichlet = np.zeros((nxp, nup), dtype=bool)
    dirichlet[0, :] = True
    dirichlet[-1, :] = upper_bc == "dirichlet"
    return LinearSystem(A, rhs.ravel(), mesh, eps_nodes, raised, violations, dirichlet.ravel())


def solve_linear_pde(system: LinearSystem, rtol: float = 1e-10) -> ValueGrid:
    """Direct sparse solve; checks the normwise relative residual."""
    A = system.matrix.tocsc()
    d = A.diagonal()
    if not np.all(np.isfinite(A.data)):
        raise LinearSolveError("non-finite matrix entries")
    if np.any(d == 0):
        bad = np.unravel_index(np.nonzero(d == 0)[0][:5], system.mesh.shape)
        raise LinearSolveError(f"zero diagonal at nodes {list(zip(*bad))}")
    try:
        sol = splu(A).solve(system.rhs)
    except RuntimeError as exc:
        raise LinearSolveError(f"factorization failed: {exc}") from exc
    res = system.residual(sol)
    # normwise backward error: the plain ||r|| / ||rhs|| is dominated by rounding
    # once the upsilon weights grow large on strongly graded meshes
    a_norm = float(abs(A).sum(axis=1).max())
    rel = np.abs(res).max() / (a_norm * np.abs(sol).max() + np.abs(system.rhs).max() + 1e-300)
    if not np.isfinite(rel) or rel > rtol:
        worst = np.unravel_index(int(np.nanargmax(np.abs(res))), system.mesh.shape)
        raise LinearSolveError(f"relative residual {rel:.2e} > {rtol:.0e}; worst node {worst}")
    if system.dirichlet is not None:
        # identity rows: take the boundary data verbatim instead of the solver's rounding
        sol[system.dirichlet] = system.rhs[system.dirichlet]
    return ValueGrid(sol.reshape(system.mesh.shape), system.mesh)


# -------------------------------------------------------- policy update


def improve_policy(params: ModelParams, mesh: Mesh, value: ValueGrid) -> PolicyGrid:
    """Greedy bang-bang update.

    At each interior node the rate in ``{0, K}`` maximizing the discrete
    Hamiltonian ``(upsilon - u) D_x V + u`` is chosen, with ``D_x`` the same
    x-difference the assembled scheme uses for drift ``upsilon - u``. When
    both candidates use the same difference this is exactly ``u = K`` iff
    ``D_x V <= 1``. Ties go to ``K``.
    """
    K = params.K
    V = value.values
    v = np.broadcast_to(mesh.us[None, :], (mesh.n_x - 1, mesh.us.size))
    h0 = v * x_derivative(params, mesh, V, v)
    hk = (v - K) * x_derivative(params, mesh, V, v - K) + K
    scale = 1e-12 * (1.0 + np.abs(h0))
    rates = np.empty(mesh.shape)
    rates[1:-1] = np.where(hk >= h0 - scale, K, 0.0)
    rates[0] = rates[1]
    rates[-1] = rates[-2]
    return PolicyGrid(rates, K)


def extract_threshold(policy: PolicyGrid, mesh: Mesh) -> ThresholdCurve:
    """Per column: first paying node ``b`` and whether all nodes above it pay."""
    pays = policy.pays()
    n_cols = pays.shape[1]
    b = np.full(n_cols, np.inf)
    flag = np.ones(n_cols, dtype=bool)
    for j in range(n_cols):
        idx = np.flatnonzero(pays[:, j])
        if idx.size:
            b[j] = mesh.xs[idx[0]]
            flag[j] = bool(pays[idx[0]:, j].all())
    return ThresholdCurve(mesh.us.copy(), b, flag)


# ------------------------------------------------------ policy iteration


@dataclass
class HJBSolution:
    params: ModelParams
    mesh: Mesh
    eps_profile: EpsilonProfile
    value: ValueGrid
    policy: PolicyGrid
    threshold: ThresholdCurve
    log: list  # dicts with k, policy_changes, value_delta, min_increase
    system: LinearSystem

    @property
    def iterations(self) -> int:
        return len(self.log)

    def __iter__(self):
        return iter((self.value, self.policy, self.threshold, self.log))


def policy_iteration(
    params: ModelParams,
    mesh: Mesh,
    eps_prof: EpsilonProfile,
    initial: PolicyGrid,
    max_iter: int = 50,
    tol: int = 0,
    value_tol: float = 1e-9,
    upper_bc: str = "dirichlet",
) -> HJBSolution:
    """Howard iteration: solve for the current policy, then update greedily.

    Stops when at most ``tol`` nodes change or the sup-norm change of the
    value drops below ``value_tol``.
    """
    rates = np.asarray(initial.rates, dtype=float)
    if not np.all((rates == 0) | (rates == params.K)):
        raise ValueError("initial policy must take values in {0, K}")
    policy = PolicyGrid(rates, params.K)
    prev = None
    rows = []
    for k in range(max_iter):
        system = assemble_system(params, mesh, eps_prof, policy, upper_bc=upper_bc)
        value = solve_linear_pde(system)
        delta = np.nan if prev is None else float(np.max(np.abs(value.values - prev.values)))
        min_inc = np.nan if prev is None else float(np.min(value.values - prev.values))
        new_policy = improve_policy(params, mesh, value)
        changed = new_policy.rates != policy.rates
        n_changed = int(changed.sum())
        rows.append({"k": k, "policy_changes": n_changed, "value_delta": delta, "min_increase": min_inc})
        log.info("policy iteration %d: %d changes, value delta %.3e", k, n_changed, delta)
        policy = new_policy
        prev = value
        if n_changed <= tol or (np.isfinite(delta) and delta < value_tol):
            return HJBSolution(
                params, mesh, eps_prof, value, policy, extract_threshold(policy, mesh), rows, system
            )
    nodes = list(zip(*np.nonzero(changed)))
    raise ConvergenceError(f"policy iteration did not converge in {max_iter} steps", nodes, rows)


def reference_thresholds(params: ModelParams, H: float = DEFAULT_H) -> tuple[float, float]:
    """Per-state single-regime thresholds used to seed the iteration."""
    from .benchmark import single_regime_threshold

    mu1, mu2 = params.mu
    b1 = single_regime_threshold(mu1, params.sigma, params.delta, params.K, upper=H).threshold
    b2 = single_regime_threshold(mu2, params.sigma, params.delta, params.K, upper=H).threshold
    return b1, b2


def default_mesh(
    params, H=DEFAULT_H, n_x=DEFAULT_NX, n_u=DEFAULT_NU, refine_factor=DEFAULT_REFINE, bbar=None, pad=DEFAULT_PAD
):
    """Mesh refined around the seed thresholds ``bbar`` (any number of levels)."""
    levels = reference_thresholds(params, H) if bbar is None else bbar
    band = (max(min(levels) - pad, 0.0), min(max(levels) + pad, H))
    return build_mesh(params, H, n_x, n_u, band, refine_factor)


def solve_hjb(
    params: ModelParams,
    H: float = DEFAULT_H,
    n_x: int = DEFAULT_NX,
    n_u: int = DEFAULT_NU,
    eps: float = DEFAULT_EPS,
    zeta: float | None = None,
    refine_factor: float = DEFAULT_REFINE,
    max_iter: int = 50,
    tol: int = 0,
    mesh: Mesh | None = None,
    upper_bc: str = "dirichlet",
) -> HJBSolution:
    """Full pipeline: seed thresholds, graded mesh, epsilon profile, policy iteration."""
    _require_two_states(params)
    b1, b2 = reference_thresholds(params, H if mesh is None else mesh.H)
    if mesh is None:
        mesh = default_mesh(params, H, n_x, n_u, refine_factor, bbar=(b1, b2))
    prof = epsilon_profile(params, eps, zeta, mesh)
    initial = threshold_policy(params, mesh, initial_threshold(params, b1, b2))
    return policy_iteration(params, mesh, prof, initial, max_iter=max_iter, tol=tol, upper_bc=upper_bc)


@dataclass(frozen=True)
class EpsilonStudy:
    eps: np.ndarray
    differences: np.ndarray  # sup |V^{eps_k} - V^{eps_{k+1}}|
    solutions: list

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.differences) < 0))


def epsilon_refinement_study(
    params: ModelParams,
    mesh: Mesh,
    eps_sequence,
    zeta: float | None = None,
    max_iter: int = 50,
    upper_bc: str = "dirichlet",
) -> EpsilonStudy:
    """Solve for each epsilon and report successive sup-norm differences.

    A zero epsilon is only accepted if the uncorrected stencil is already
    monotone; otherwise PositivityError is raised.
    """
    eps_sequence = np.asarray(eps_sequence, dtype=float)
    if np.any(np.diff(eps_sequence) > 0):
        raise ValueError("eps_sequence must be non-increasing")
    b1, b2 = reference_thresholds(params, mesh.H)
    initial = threshold_policy(params, mesh, initial_threshold(params, b1, b2))
    sols = []
    for eps in eps_sequence:
        prof = epsilon_profile(params, eps, zeta, mesh)
        if eps <= 0:
            assemble_system(params, mesh, prof, initial, correct=False, strict=True, upper_bc=upper_bc)
        sols.append(policy_iteration(params, mesh, prof, initial, max_iter=max_iter, upper_bc=upper_bc))
    diffs = np.array(
        [np.max(np.abs(a.value.values - b.value.values)) for a, b in zip(sols[:-1], sols[1:])]
    )
    return EpsilonStudy(eps_sequence, diffs, sols)
