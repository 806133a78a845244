import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hmmdiv import hjb
from hmmdiv.benchmark import single_regime_threshold
from hmmdiv.model import paper_params, two_state

import oracles


# ---------------------------------------------------------------- mesh


def test_uniform_mesh_without_refinement(params):
    m = hjb.build_mesh(params, H=10, n_x=200, n_u=40, band=(1, 3), refine_factor=1)
    assert m.xs.size == 201
    np.testing.assert_allclose(np.diff(m.xs), 0.05)


def test_refined_band_spacing(params):
    m = hjb.build_mesh(params, H=10, n_x=200, n_u=40, band=(1, 3), refine_factor=4)
    h = np.diff(m.xs)
    mid = 0.5 * (m.xs[1:] + m.xs[:-1])
    inside = (mid > 1) & (mid < 3)
    assert h[inside].max() <= h[~inside].max() / 4 + 1e-12
    assert m.xs.size == 201


def test_mesh_endpoints_are_exact(params):
    m = hjb.build_mesh(params, H=7.3, n_x=64, n_u=9, band=(0.2, 1.7), refine_factor=3)
    assert m.xs[0] == 0.0 and m.xs[-1] == 7.3
    assert m.us[0] == 1.0 and m.us[-1] == 2.0
    assert np.all(np.diff(m.xs) > 0) and np.all(np.diff(m.us) > 0)


@pytest.mark.parametrize("kw", [dict(band=(-1, 2)), dict(band=(1, 11)), dict(n_x=8), dict(n_u=4)])
def test_mesh_rejects_bad_input(params, kw):
    args = dict(H=10, n_x=200, n_u=40, band=(1, 3), refine_factor=2)
    args.update(kw)
    with pytest.raises(ValueError):
        hjb.build_mesh(params, **args)


@given(st.floats(0.5, 20), st.integers(16, 300), st.floats(0, 1), st.floats(0, 1), st.floats(1, 10))
@settings(max_examples=100, deadline=None)
def test_mesh_grading_property(H, n_x, a, b, rf):
    lo, hi = sorted((a * H, b * H))
    params = paper_params()
    try:
        m = hjb.build_mesh(params, H, n_x, 10, (lo, hi), rf)
    except ValueError:
        return  # band too narrow or n_x too small for the request
    assert m.xs.size == n_x + 1
    assert m.xs[0] == 0.0 and m.xs[-1] == H
    h = np.diff(m.xs)
    assert np.all(h > 0)
    mid = 0.5 * (m.xs[1:] + m.xs[:-1])
    inside = (mid > lo) & (mid < hi)
    if inside.any() and (~inside).any():
        assert h[inside].max() <= h[~inside].max() * (1 + 1e-9)


def test_auto_upsilon_count_keeps_cross_weights_positive(params):
    m = hjb.build_mesh(params, 10, 200, None, (0.5, 1.5), 2)
    k = m.us[1] - m.us[0]
    assert k >= 0.25 * np.diff(m.xs).max() / params.sigma**2


# ------------------------------------------------------- initial guess


def test_initial_threshold_endpoints_and_midpoint(params):
    c = hjb.initial_threshold(params, b1_bar=0.8, b2_bar=0.4, upsilon=[1.0, 1.5, 2.0])
    np.testing.assert_allclose(c.b, [0.4, 0.6, 0.8])
    flat = hjb.initial_threshold(params, 0.7, 0.7, upsilon=np.linspace(1, 2, 5))
    np.testing.assert_allclose(flat.b, 0.7)
    with pytest.raises(ValueError):
        hjb.initial_threshold(params, -0.1, 0.5)


# ----------------------------------------------------- epsilon profile


def test_epsilon_profile_shape(params):
    m = hjb.build_mesh(params, 10, 32, 40, (1, 2), 1)
    prof = hjb.epsilon_profile(params, 1e-3, 0.1, m)
    assert prof.values[0] == 0.0 and prof.values[-1] == 0.0
    j_mid = np.argmin(np.abs(m.us - 1.5))
    assert prof.values[j_mid] == 1e-3
    assert np.all(prof.values >= 0) and np.all(prof.values <= 1e-3)
    plateau = (m.us >= 1.1) & (m.us <= 1.9)
    np.testing.assert_array_equal(prof.values[plateau], 1e-3)


def test_epsilon_profile_is_c1_at_the_ends():
    d = np.array([0.0, 1e-6, 1.0 - 1e-6, 1.0])
    s = hjb.EpsilonProfile.shape_function(d, 1.0)
    assert s[1] / 1e-6 < 1e-5  # zero slope at the endpoint
    assert (1 - s[2]) / 1e-6 < 1e-5  # zero slope where the plateau starts


@pytest.mark.parametrize("zeta", [0.0, 0.5, 0.7])
def test_epsilon_profile_rejects_wide_zeta(params, zeta):
    m = hjb.build_mesh(params, 10, 32, 10, (1, 2), 1)
    with pytest.raises(ValueError):
        hjb.epsilon_profile(params, 1e-3, zeta, m)


# ------------------------------------------------------------ assembly


def test_zero_policy_no_drift_has_trivial_solution():
    p = two_state(1e-9, 0.0, 1.0, 0.5, 1.0, 0.0, 0.0)
    m = hjb.build_mesh(p, 5, 32, 8, None, 1)
    prof = hjb.epsilon_profile(p, 1e-3, None, m)
    sys = hjb.assemble_system(p, m, prof, hjb.PolicyGrid(np.zeros(m.shape), p.K))
    sys.rhs[:] = 0.0
    V = hjb.solve_linear_pde(sys).values
    assert np.max(np.abs(V)) < 1e-14


def test_constants_are_annihilated(params):
    m = hjb.build_mesh(params, 10, 60, 20, (0.5, 1.5), 2)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    rates = np.where(np.random.default_rng(0).random(m.shape) < 0.5, params.K, 0.0)
    sys = hjb.assemble_system(params, m, prof, hjb.PolicyGrid(rates, params.K))
    c = 1.7
    AV = (sys.matrix @ np.full(sys.rhs.size, c)).reshape(m.shape)
    # A V = rhs encodes L V - delta V + u = 0, so (A c - rhs) = -delta c + u
    resid = AV[1:-1] - sys.rhs.reshape(m.shape)[1:-1]
    np.testing.assert_allclose(resid, -params.delta * c + rates[1:-1], atol=1e-9)


def test_default_mesh_is_monotone(params):
    m = hjb.default_mesh(params, n_x=200, n_u=40)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    b1, b2 = hjb.reference_thresholds(params)
    pol = hjb.threshold_policy(params, m, hjb.initial_threshold(params, b1, b2))
    sys = hjb.assemble_system(params, m, prof, pol)
    assert sys.violations == []
    assert sys.off_diagonal_min() >= 0


def test_strict_assembly_reports_negative_weights(params):
    m = hjb.build_mesh(params, 10, 200, 200, (0.5, 1.5), 4)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    pol = hjb.PolicyGrid(np.zeros(m.shape), params.K)
    with pytest.raises(hjb.PositivityError) as err:
        hjb.assemble_system(params, m, prof, pol, strict=True)
    i, j, where, coef = err.value.violations[0]
    assert coef < 0 and where in {"E", "W", "N", "S"}


def test_epsilon_is_raised_only_where_needed(params):
    m = hjb.default_mesh(params)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    pol = hjb.PolicyGrid(np.zeros(m.shape), params.K)
    sys = hjb.assemble_system(params, m, prof, pol)
    base = np.broadcast_to(prof.values, m.shape)
    interior = np.zeros(m.shape, dtype=bool)
    interior[1:-1] = True
    np.testing.assert_array_equal(sys.eps_nodes[interior & ~sys.raised], base[interior & ~sys.raised])
    assert np.all(sys.eps_nodes[sys.raised] > base[sys.raised])


def test_clamped_upsilon_count_is_reported():
    p = two_state(3.0, 1.0, 0.5, 1.0, 1.0, 0.0, 0.0)
    m = hjb.build_mesh(p, 8.0, 80, None, (0.5, 2.0), 2)
    assert m.us.size == 9
    prof = hjb.epsilon_profile(p, 1e-3, None, m)
    sys = hjb.assemble_system(p, m, prof, hjb.PolicyGrid(np.zeros(m.shape), p.K))
    assert {v[2] for v in sys.violations} <= {"E", "W"} and sys.violations


@st.composite
def two_state_models(draw):
    mu2 = draw(st.floats(0.2, 2.0))
    mu1 = mu2 + draw(st.floats(0.2, 2.0))
    return two_state(
        mu1, mu2,
        sigma=draw(st.floats(0.5, 2.0)),
        delta=draw(st.floats(0.1, 1.0)),
        K=draw(st.floats(0.1, 3.0)),
        q11=-draw(st.floats(0.0, 2.0)),
        q21=draw(st.floats(0.0, 2.0)),
    )


@given(two_state_models(), st.floats(0.5, 6.0), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_monotone_scheme_and_maximum_principle(p, b_level, seed):
    m = hjb.build_mesh(p, 8.0, 80, None, (0.5, 2.0), 2)
    spread = p.mu[0] - p.mu[-1]
    # below 8 intervals the count is clamped and the x-weights can go negative
    assume((spread / (1.2 * spread**2 / 4 * np.diff(m.xs).max() / p.sigma**2)) >= 8)
    prof = hjb.epsilon_profile(p, 1e-3, None, m)
    rng = np.random.default_rng(seed)
    b = b_level * rng.random(m.us.size)
    pol = hjb.threshold_policy(p, m, hjb.ThresholdCurve(m.us, b, np.ones(m.us.size, bool)))
    sys = hjb.assemble_system(p, m, prof, pol)
    assert sys.violations == []
    A = sys.matrix.tocoo()
    interior = np.zeros(m.shape, dtype=bool)
    interior[1:-1] = True
    rows = interior.ravel()[A.row]
    assert np.all(A.data[(A.row != A.col) & rows] >= 0)
    assert np.all(sys.matrix.diagonal()[interior.ravel()] < 0)
    V = hjb.solve_linear_pde(sys).values
    assert V.min() >= -1e-12 and V.max() <= p.v_max + 1e-12


# ------------------------------------------------------------- solving


def test_boundary_rows_reproduced_exactly(solution, params):
    V = solution.value.values
    assert np.all(V[0] == 0.0)
    assert np.all(V[-1] == params.K / params.delta)


def test_always_pay_matches_ruin_laplace_transform(frozen_params):
    p = frozen_params
    m = hjb.build_mesh(p, 10, 400, 10, None, 1)
    prof = hjb.epsilon_profile(p, 1e-3, None, m)
    sys = hjb.assemble_system(p, m, prof, hjb.PolicyGrid(np.full(m.shape, p.K), p.K))
    V = hjb.solve_linear_pde(sys).values[:, -1]
    exact = oracles.always_pay_value(2.0, 1.0, 0.5, 1.8, m.xs)
    assert np.max(np.abs(V - exact)) < 1e-3
    assert V.min() >= 0 and V.max() <= p.v_max


def test_asymptotic_condition_matches_tail(frozen_params):
    p = frozen_params
    m = hjb.build_mesh(p, 4, 400, 10, None, 1)
    prof = hjb.epsilon_profile(p, 1e-3, None, m)
    pol = hjb.PolicyGrid(np.full(m.shape, p.K), p.K)
    V = hjb.solve_linear_pde(hjb.assemble_system(p, m, prof, pol, upper_bc="asymptotic")).values[:, -1]
    # the tail condition is exact for always-pay, so truncating at H=4 costs only discretization error
    exact = oracles.always_pay_value(2.0, 1.0, 0.5, 1.8, m.xs)
    assert np.max(np.abs(V - exact)) < 5e-3


def test_unknown_upper_condition(params):
    m = hjb.build_mesh(params, 10, 32, 8, None, 1)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    with pytest.raises(ValueError):
        hjb.assemble_system(params, m, prof, hjb.PolicyGrid(np.zeros(m.shape), params.K), upper_bc="neumann")


def test_two_state_only():
    from hmmdiv.model import ModelParams

    three = ModelParams(mu=[3.0, 2.0, 1.0], sigma=1, Q=np.zeros((3, 3)), delta=0.5, K=1, p=[0.3, 0.3, 0.4])
    with pytest.raises(ValueError):
        hjb.build_mesh(three)


# -------------------------------------------------------- policy update


def _grid(params, values_fn, n_x=100):
    m = hjb.build_mesh(params, 10, n_x, 10, None, 1)
    V = values_fn(m.xs)[:, None] * np.ones(m.us.size)
    return m, hjb.ValueGrid(V, m)


def test_zero_value_pays_everywhere(params):
    m, V = _grid(params, np.zeros_like)
    assert np.all(hjb.improve_policy(params, m, V).rates == params.K)


def test_steep_value_never_pays(params):
    m, V = _grid(params, lambda x: 2 * x)
    assert np.all(hjb.improve_policy(params, m, V).rates == 0)


def test_kink_value_pays_where_slope_at_most_one(params):
    # V = min(2x, c) with c on a node: slope 2 below the kink, 0 above
    c = 3.0
    m, V = _grid(params, lambda x: np.minimum(2 * x, c))
    rates = hjb.improve_policy(params, m, V).rates
    h = m.xs[1] - m.xs[0]
    below = m.xs < c / 2 - 1.5 * h
    above = m.xs > c / 2 + 1.5 * h
    assert np.all(rates[below] == 0) and np.all(rates[above] == params.K)
    v = np.broadcast_to(m.us, (m.n_x - 1, m.us.size))
    # where K <= upsilon every candidate uses the same difference and the rule is D_x V <= 1
    same = params.K <= m.us
    dx = hjb.x_derivative(params, m, V.values, v)
    expect = np.where(dx <= 1, params.K, 0.0)
    clear = np.abs(dx - 1) > 1e-12  # skip rounding-level ties
    keep = clear & same
    np.testing.assert_array_equal(rates[1:-1][keep], expect[keep])


def test_tie_goes_to_full_rate():
    p = paper_params(0.5)
    m, V = _grid(p, lambda x: x)
    assert np.all(hjb.improve_policy(p, m, V).rates == p.K)


# ------------------------------------------------------ threshold curve


def test_extract_threshold_examples(params):
    m = hjb.build_mesh(params, 4, 16, 8, None, 1)
    all_k = hjb.extract_threshold(hjb.PolicyGrid(np.full(m.shape, params.K), params.K), m)
    assert np.all(all_k.b == 0) and all_k.is_threshold
    none = hjb.extract_threshold(hjb.PolicyGrid(np.zeros(m.shape), params.K), m)
    assert np.all(np.isinf(none.b)) and none.is_threshold

    xs = np.arange(5.0)
    mesh = hjb.Mesh(xs, np.array([1.0, 2.0]))
    col = np.array([[0, 0], [0, 0], [1, 1], [1, 0], [1, 1]], float) * params.K
    c = hjb.extract_threshold(hjb.PolicyGrid(col, params.K), mesh)
    assert c.b[0] == 2.0 and c.flag.tolist() == [True, False]


# ---------------------------------------------------- policy iteration


def test_single_regime_reduction(frozen_params):
    p = frozen_params
    ref = single_regime_threshold(2.0, 1.0, 0.5, 1.8)
    m = hjb.default_mesh(p, n_x=200, n_u=10)
    sol = hjb.solve_hjb(p, mesh=m)
    assert abs(sol.threshold.b[-1] - ref.threshold) <= m.spacing_at(ref.threshold)
    col = sol.value.values[:, -1]
    assert np.max(np.abs(col - ref.value(m.xs))) / 3.6 < 1e-2


def test_default_run_structure(solution, params):
    V = solution.value.values
    assert solution.iterations <= 10
    assert V.min() >= 0 and V.max() <= params.v_max
    assert np.all(np.diff(V, axis=0) >= -1e-8)
    assert solution.threshold.is_threshold
    assert all(np.isnan(r["min_increase"]) or r["min_increase"] >= -1e-8 for r in solution.log)
    assert solution.log[-1]["policy_changes"] == 0 or solution.log[-1]["value_delta"] < 1e-9


def test_complementarity(solution, params):
    m = solution.mesh
    V = solution.value.values
    u = solution.policy.rates[1:-1]
    v = np.broadcast_to(m.us, u.shape)
    dx = hjb.x_derivative(params, m, V, v - u)
    h = np.maximum(np.diff(m.xs)[:-1], np.diff(m.xs)[1:])[:, None] * np.ones(m.us.size)
    pays = u > 0
    assert np.all(dx[pays] <= 1 + 5 * h[pays])
    assert np.all(dx[~pays] >= 1 - 5 * h[~pays])


def test_policy_iteration_reports_non_convergence(params):
    m = hjb.default_mesh(params)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    start = hjb.PolicyGrid(np.zeros(m.shape), params.K)
    with pytest.raises(hjb.ConvergenceError) as err:
        hjb.policy_iteration(params, m, prof, start, max_iter=1)
    assert len(err.value.nodes) > 0
    assert len(err.value.log) == 1


def test_rejects_non_bang_bang_start(params):
    m = hjb.default_mesh(params)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    with pytest.raises(ValueError):
        hjb.policy_iteration(params, m, prof, hjb.PolicyGrid(np.full(m.shape, 0.5), params.K))


def test_fixed_point_independent_of_start(params):
    m = hjb.default_mesh(params)
    prof = hjb.epsilon_profile(params, 1e-3, None, m)
    a = hjb.policy_iteration(params, m, prof, hjb.PolicyGrid(np.zeros(m.shape), params.K))
    b = hjb.policy_iteration(params, m, prof, hjb.PolicyGrid(np.full(m.shape, params.K), params.K))
    np.testing.assert_array_equal(a.policy.rates, b.policy.rates)
    np.testing.assert_allclose(a.value.values, b.value.values, atol=1e-9)


def test_grid_refinement_in_x(params):
    sols = []
    for n_x in (50, 100, 200, 400):
        m = hjb.build_mesh(params, 10, n_x, 20, None, 1)
        sols.append(hjb.solve_hjb(params, mesh=m))
    diffs = [np.max(np.abs(b.value.values[:: 2] - a.value.values)) for a, b in zip(sols, sols[1:])]
    assert diffs[0] > diffs[1] > diffs[2]


def test_value_grid_interpolation(solution):
    m = solution.mesh
    V = solution.value
    assert V(m.xs[5], m.us[3]) == pytest.approx(V.values[5, 3])
    out = V(np.array([1.0, 2.0]), 1.5)
    assert out.shape == (2,)


# ---------------------------------------------------------- eps study


def test_same_eps_twice_gives_zero_difference(params):
    m = hjb.default_mesh(params, n_x=64)
    study = hjb.epsilon_refinement_study(params, m, [1e-3, 1e-3])
    assert study.differences.tolist() == [0.0]


def test_zero_eps_rejected_when_stencil_needs_correction(params):
    m = hjb.default_mesh(params, n_x=64)
    with pytest.raises(hjb.PositivityError):
        hjb.epsilon_refinement_study(params, m, [1e-3, 0.0])


def test_eps_sequence_must_decrease(params):
    m = hjb.default_mesh(params, n_x=64)
    with pytest.raises(ValueError):
        hjb.epsilon_refinement_study(params, m, [1e-3, 1e-2])
