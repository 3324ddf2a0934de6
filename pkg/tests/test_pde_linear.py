import numpy as np
import pytest

from nash_horizon.holder import SpatialGrid
from nash_horizon.pde_linear import (
    CFLError,
    DiffusionSpec,
    DriftSpec,
    LinearProblem,
    SourceSpec,
    SpecError,
    TerminalSpec,
    fpk_gradient_mass,
    solve_fpk_grid,
    solve_grid,
    solve_mc,
    verify_decay,
)
from nash_horizon.weights import build_weight

BETA = build_weight("polynomial", {"a": 3}, 32)


def heat_problem(N, T=0.25, a=0.5):
    diff = DiffusionSpec.isotropic(N, a)
    term = TerminalSpec(lambda X: np.exp(-sum(x ** 2 for x in X) / 2))
    return LinearProblem(diff, None, None, term, 0.0, T)


def gaussian_exact(X, s, T, a=0.5):
    # heat semigroup applied to exp(-|x|^2/2): variance grows by 2a(T-s)
    v = 1.0 + 2 * a * (T - s)
    N = X.shape[0]
    return v ** (-N / 2) * np.exp(-sum(x ** 2 for x in X) / (2 * v))


def cfl_dt(grid, N, a):
    return 0.9 * grid.h ** 2 / (2 * N * a)


def test_heat_kernel_oracle_2d():
    # A = 0.5 I, G a standard Gaussian: exact solution is a widening Gaussian
    g = SpatialGrid(2, 6.0, 201)
    p = heat_problem(2)
    w = solve_grid(p, g, cfl_dt(g, 2, 0.5))
    X = g.meshgrid()
    err = np.max(np.abs(w.values[0] - gaussian_exact(X, 0.0, p.T)))
    assert err < 5e-3


def test_heat_kernel_refinement_order():
    errs = []
    for M in (101, 201):
        g = SpatialGrid(2, 6.0, M)
        p = heat_problem(2)
        w = solve_grid(p, g, cfl_dt(g, 2, 0.5))
        X = g.meshgrid()
        errs.append(np.max(np.abs(w.values[0] - gaussian_exact(X, 0.0, p.T))))
    assert np.log2(errs[0] / errs[1]) > 1.8


def test_constant_terminal_no_source():
    # with F = 0 and G = c the solution is identically c
    g = SpatialGrid(2, 2.0, 41)
    diff = DiffusionSpec.isotropic(2, 1.0)
    drift = DriftSpec(lambda t, X: np.stack([np.sin(X[0]), 0 * X[1]]))
    p = LinearProblem(diff, drift, None,
                      TerminalSpec(lambda X: 3.0 + 0 * X[0]), 0.0, 0.1)
    w = solve_grid(p, g, cfl_dt(g, 2, 1.0))
    np.testing.assert_allclose(w.values, 3.0, atol=1e-10)


def test_linearity():
    g = SpatialGrid(1, 3.0, 81)
    diff = DiffusionSpec.isotropic(1, 0.5)

    def solve(gfun, ffun):
        p = LinearProblem(diff, None, SourceSpec(ffun),
                          TerminalSpec(gfun), 0.0, 0.1)
        return solve_grid(p, g, cfl_dt(g, 1, 0.5))

    w1 = solve(lambda X: np.cos(X[0]), lambda t, X: np.sin(X[0]))
    w2 = solve(lambda X: X[0] ** 2, lambda t, X: 1.0 + 0 * X[0])
    w12 = solve(lambda X: np.cos(X[0]) + 2 * X[0] ** 2,
                lambda t, X: np.sin(X[0]) + 2.0)
    np.testing.assert_allclose(w12.values, w1.values + 2 * w2.values,
                               atol=1e-10)


def test_comparison_principle():
    # F >= 0, G >= 0 implies w >= 0 (monotone scheme)
    g = SpatialGrid(2, 2.0, 31)
    diff = DiffusionSpec.isotropic(2, 0.5)
    drift = DriftSpec(lambda t, X: np.stack([np.tanh(X[0]), -np.tanh(X[1])]))
    src = SourceSpec(lambda t, X: np.maximum(np.sin(5 * X[0]), 0.0))
    p = LinearProblem(diff, drift, src,
                      TerminalSpec(lambda X: np.maximum(X[0], 0.0)), 0.0, 0.2)
    w = solve_grid(p, g, cfl_dt(g, 2, 0.5))
    assert w.values.min() >= -1e-12


def test_cfl_violation_raises():
    g = SpatialGrid(2, 2.0, 41)
    with pytest.raises(CFLError):
        solve_grid(heat_problem(2), g, 10 * cfl_dt(g, 2, 0.5))


def test_offdiagonal_diffusion_quadratic():
    # w(t,x) = x0*x1 + 2*A01*(T-t) solves the pure diffusion equation exactly
    g = SpatialGrid(2, 2.0, 41)
    A = np.array([[0.5, 0.2], [0.2, 0.5]])
    diff = DiffusionSpec.constant(A)
    p = LinearProblem(diff, None, None,
                      TerminalSpec(lambda X: X[0] * X[1]), 0.0, 0.1)
    w = solve_grid(p, g, cfl_dt(g, 2, 0.5))
    X = g.meshgrid()
    inner = g.interior(0.2)
    exact = X[0] * X[1] + 2 * 0.2 * p.T
    assert np.max(np.abs(w.values[0][inner] - exact[inner])) < 5e-3


def test_drift_decay_probe():
    ok = DriftSpec(lambda t, X: np.stack(
        [sum(0.5 * BETA.value(j - i) * np.tanh(X[j]) for j in range(3))
         for i in range(3)]), c_B=0.6, beta=BETA)
    assert ok.probe_decay(3, 2.0)
    bad = DriftSpec(lambda t, X: np.stack([np.sin(X[2]), 0 * X[1], 0 * X[2]]),
                    c_B=0.1, beta=BETA)
    assert not bad.probe_decay(3, 2.0)


def test_ellipticity_check():
    diff = DiffusionSpec.constant(np.array([[1.0, 0.2], [0.2, 1.0]]))
    pts = np.random.default_rng(0).uniform(-1, 1, (2, 10))
    lo = diff.check_ellipticity([0.0], pts)
    assert lo == pytest.approx(0.8)
    bad = DiffusionSpec(2, diff.diag, {(0, 1): lambda t: 2.0}, lam=0.5)
    with pytest.raises(SpecError):
        bad.check_ellipticity([0.0], pts)


# ---------------------------------------------------------------------------
# Monte Carlo


def test_mc_constant_terminal():
    p = LinearProblem(DiffusionSpec.isotropic(2, 0.5), None, None,
                      TerminalSpec(lambda X: 5.0 + 0 * X[0]), 0.0, 0.2)
    [(est, ci)] = solve_mc(p, [[0.0, 0.0]], paths=2000, dt=0.01, seed=1)
    assert est == pytest.approx(5.0, abs=1e-12)
    assert ci == pytest.approx(0.0, abs=1e-12)


def test_mc_martingale_linear_payoff():
    # pure diffusion, G(x) = x0: expectation stays at the start point
    p = LinearProblem(DiffusionSpec.isotropic(1, 0.5), None, None,
                      TerminalSpec(lambda X: X[0]), 0.0, 0.25)
    [(est, ci)] = solve_mc(p, [[0.7]], paths=20000, dt=0.01, seed=3)
    assert abs(est - 0.7) < 3 * ci


def test_mc_determinism():
    p = heat_problem(2)
    a = solve_mc(p, [[0.3, -0.2]], paths=1500, dt=0.02, seed=11)
    b = solve_mc(p, [[0.3, -0.2]], paths=1500, dt=0.02, seed=11)
    assert a == b
    c = solve_mc(p, [[0.3, -0.2]], paths=1500, dt=0.02, seed=12)
    assert a != c


def test_mc_matches_grid():
    p = heat_problem(2)
    g = SpatialGrid(2, 6.0, 121)
    w = solve_grid(p, g, cfl_dt(g, 2, 0.5))
    mid = (121 - 1) // 2
    grid_val = w.values[0, mid, mid]
    [(est, ci)] = solve_mc(p, [[0.0, 0.0]], paths=20000, dt=0.005, seed=7)
    assert abs(est - grid_val) < max(3 * ci, 5e-3)


def test_mc_input_validation():
    p = heat_problem(1)
    with pytest.raises(SpecError):
        solve_mc(p, [[0.0]], paths=100, dt=0.01, seed=0)
    with pytest.raises(SpecError):
        solve_mc(p, [[0.0]], paths=2000, dt=1.0, seed=0)


# ---------------------------------------------------------------------------
# Fokker-Planck


def test_fpk_mass_conserved_and_nonnegative():
    g = SpatialGrid(1, 4.0, 161)
    diff = DiffusionSpec.isotropic(1, 0.5)
    drift = DriftSpec(lambda t, X: np.stack([0.5 * np.tanh(X[0])]))
    res = solve_fpk_grid(diff, drift, [0.0], eps=4 * g.h, grid=g,
                         dt=cfl_dt(g, 1, 0.5), T=0.3)
    np.testing.assert_allclose(res.mass, 1.0, atol=1e-12)
    assert res.field.values.min() >= 0.0
    assert res.undershoot < 1e-12


def test_fpk_gaussian_spreading():
    # pure diffusion from a Gaussian: variance grows like 2a(t-s)
    g = SpatialGrid(1, 5.0, 201)
    diff = DiffusionSpec.isotropic(1, 0.5)
    eps = 4 * g.h
    T = 0.5
    res = solve_fpk_grid(diff, None, [0.0], eps, g, cfl_dt(g, 1, 0.5), T)
    x = g.axis
    var = np.sum(x ** 2 * res.field.values[-1]) * g.h
    assert var == pytest.approx(eps ** 2 + 2 * 0.5 * T, rel=0.02)


def test_fpk_mean_transport():
    # constant drift B: density mean moves with velocity -B
    g = SpatialGrid(1, 5.0, 201)
    diff = DiffusionSpec.isotropic(1, 0.5)
    drift = DriftSpec(lambda t, X: np.stack([0.8 + 0 * X[0]]))
    T = 0.5
    res = solve_fpk_grid(diff, drift, [0.0], 4 * g.h, g, cfl_dt(g, 1, 0.5), T)
    mean = np.sum(g.axis * res.field.values[-1]) * g.h
    assert mean == pytest.approx(-0.8 * T, abs=0.02)


def test_fpk_eps_floor():
    g = SpatialGrid(1, 4.0, 81)
    with pytest.raises(SpecError):
        solve_fpk_grid(DiffusionSpec.isotropic(1, 0.5), None, [0.0],
                       eps=g.h, grid=g, dt=1e-4, T=0.1)


def test_fpk_gradient_mass_slope():
    # int |D rho(t)| ~ 1/sqrt(t), so the cumulative integral grows like
    # sqrt(t); the window must be long against eps^2 for the mollifier
    # offset to wash out of the fit
    g = SpatialGrid(1, 6.0, 401)
    diff = DiffusionSpec.isotropic(1, 1.0)
    eps = 4 * g.h
    T = 200 * eps ** 2
    res = solve_fpk_grid(diff, None, [0.0], eps, g, cfl_dt(g, 1, 1.0), T=T)
    rep = fpk_gradient_mass(res)
    assert 0.4 <= rep.slope <= 0.6
    assert rep.cumulative[-1] > 0
    assert rep.times[-1] == pytest.approx(T)


def test_fpk_gradient_mass_needs_nodes():
    g = SpatialGrid(1, 4.0, 81)
    res = solve_fpk_grid(DiffusionSpec.isotropic(1, 0.5), None, [0.0],
                         4 * g.h, g, cfl_dt(g, 1, 0.5), T=0.02)
    with pytest.raises(SpecError):
        fpk_gradient_mass(res, t_min=0.02)


# ---------------------------------------------------------------------------
# decay verification


def decayed_field(N, M=33, L=2.0, n_times=3):
    # w(t, x) = sum_j beta^j sin(x_j + t): |D_j w| <= beta^j by construction
    g = SpatialGrid(N, L, M)

    def f(t, X):
        return sum(BETA.value(j) * np.sin(X[j] + t) for j in range(N))

    from nash_horizon.holder import Field
    return Field.from_function(g, np.linspace(0, 0.2, n_times), f)


def test_verify_decay_separable_field():
    w = decayed_field(3)
    rep = verify_decay(w, BETA, collar=0.1)
    # each K is bounded by ~1 up to discretization error
    assert rep.K1 < 1.05
    assert rep.K2 < 1.05
    assert rep.K3 < 1.1
    # time derivative of D_j w is beta^j cos, so / sqrt(beta^j) stays small
    assert rep.time_lip_grad <= 1.05
    assert rep.time_lip_hess <= 1.05


def test_verify_decay_flags_slow_decay():
    # a field leaning on the last coordinate violates the weighted bounds
    g = SpatialGrid(3, 2.0, 33)
    from nash_horizon.holder import Field
    w = Field.from_function(g, [0.0, 0.1],
                            lambda t, X: np.sin(3 * X[2]))
    rep = verify_decay(w, BETA, collar=0.1)
    assert rep.K1 > 1.0 / BETA.value(2)


def test_verify_decay_collar_excludes_boundary():
    # boundary-localized wiggle is invisible to the interior sup
    g = SpatialGrid(1, 2.0, 81)
    from nash_horizon.holder import Field
    bump = np.zeros((1, 81))
    bump[0, :3] = [0.0, 1.0, 0.0]
    clean = Field(g, [0.0], np.zeros((1, 81)))
    dirty = Field(g, [0.0], bump)
    r_clean = verify_decay(clean, BETA, collar=0.1, third_order=False)
    r_dirty = verify_decay(dirty, BETA, collar=0.1, third_order=False)
    assert r_dirty.K1 == r_clean.K1 == 0.0
