"""Picard fixed-point solver for finite Nash systems.

Each sweep freezes the diagonal gradient vector Du = (D_j u^j)_j, assembles
per-player drifts B^j_i = dH^j/dp^j (with the own slot replaced by the
s-averaged derivative int_0^1 dH^i/dp^i(p^-i, s p^i) ds) and sources
F^i = H^i(t, x, Du^-i, 0), and solves the N decoupled backward linear
equations.  Contraction of the sweep map is measured in the triple norm
combining the C^{2,1}-in-space weighted norm with a time-Lipschitz part.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .holder import Field, SpatialGrid, derivative_family, finite_diff, space_norm
from .oracle_lq import LQGameSpec
from .pde_linear import (
    DiffusionSpec,
    DriftSpec,
    LinearProblem,
    SourceSpec,
    TerminalSpec,
    solve_grid,
    verify_decay,
)
from .weights import shift

__all__ = [
    "HamiltonianFamily",
    "GameSpec",
    "NashSolution",
    "PicardReport",
    "lq_game",
    "assemble_drift",
    "assemble_source",
    "picard_step",
    "picard_solve",
    "triple_norm",
    "contraction_probe",
    "horizon_scan",
    "residual",
    "dimension_stability",
    "uniqueness_probe",
    "probe_fields",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
_GL_S = 0.5 * (_GL_NODES + 1.0)
_GL_W = 0.5 * _GL_WEIGHTS


class NashError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Hamiltonian families


class HamiltonianFamily:
    """H^i(t, x, p) with the diagonal momentum partials dH^j/dp^j.

    Built-in kinds: "lq" with H^i = (1/2)(p^i)^2 - (1/2) x' Q_i x, and
    "saturated" where p^i enters through psi_k(p) = kappa tanh(p/kappa), so
    all p-derivatives stay globally bounded.  "user" takes raw callbacks.
    """

    def __init__(self, kind, N, Q=None, kappa=None, value_fn=None, dpj_fn=None):
        if kind not in ("lq", "saturated", "user"):
            raise NashError(f"unknown Hamiltonian kind {kind!r}")
        self.kind = kind
        self.N = N
        self.Q = None if Q is None else np.asarray(Q, dtype=float)
        self.kappa = kappa
        self.value_fn = value_fn
        self.dpj_fn = dpj_fn

    @staticmethod
    def lq(Q) -> "HamiltonianFamily":
        Q = np.asarray(Q, dtype=float)
        return HamiltonianFamily("lq", Q.shape[0], Q=Q)

    @staticmethod
    def saturated(Q, kappa: float) -> "HamiltonianFamily":
        if kappa <= 0:
            raise NashError("saturation level must be positive")
        Q = np.asarray(Q, dtype=float)
        return HamiltonianFamily("saturated", Q.shape[0], Q=Q, kappa=kappa)

    @staticmethod
    def user(N, value_fn, dpj_fn) -> "HamiltonianFamily":
        return HamiltonianFamily("user", N, value_fn=value_fn, dpj_fn=dpj_fn)

    def _spatial(self, i, X):
        if self.Q is None:
            return 0.0
        return 0.5 * np.einsum("jk,j...,k...->...", self.Q[i], X, X)

    def value(self, i, t, X, p):
        """H^i(t, x, p) with p = (p^0, ..., p^{N-1}) stacked like X."""
        if self.kind == "lq":
            return 0.5 * p[i] ** 2 - self._spatial(i, X)
        if self.kind == "saturated":
            psi = self.kappa * np.tanh(p[i] / self.kappa)
            return 0.5 * psi ** 2 - self._spatial(i, X)
        return np.asarray(self.value_fn(i, t, X, p), dtype=float)

    def dpj(self, j, t, X, p):
        """dH^j/dp^j(t, x, p): the only momentum partials the drift needs."""
        if self.kind == "lq":
            return p[j]
        if self.kind == "saturated":
            z = p[j] / self.kappa
            return self.kappa * np.tanh(z) / np.cosh(z) ** 2
        return np.asarray(self.dpj_fn(j, t, X, p), dtype=float)

    def probe_derivatives(self, n_points: int = 100, seed: int = 0,
                          tol: float = 1e-4, span: float = 2.0) -> float:
        """Max relative error of dpj against central differences of value at
        random (t, x, p); raises above tol.
        """
        rng = np.random.default_rng(seed)
        X = rng.uniform(-span, span, (self.N, n_points))
        p = rng.uniform(-span, span, (self.N, n_points))
        t = float(rng.uniform(0, 1))
        h = 1e-5
        worst = 0.0
        for j in range(self.N):
            e = np.zeros_like(p)
            e[j] = h
            fd = (self.value(j, t, X, p + e) - self.value(j, t, X, p - e)) / (2 * h)
            an = np.broadcast_to(self.dpj(j, t, X, p), fd.shape)
            scale = np.maximum(np.abs(an), 1.0)
            worst = max(worst, float(np.max(np.abs(fd - an) / scale)))
        if worst > tol:
            raise NashError(f"derivative probe failed: rel err {worst:.2e}")
        return worst


# ---------------------------------------------------------------------------
# game specification


@dataclass
class GameSpec:
    N: int
    diffusion: DiffusionSpec
    hamiltonian: HamiltonianFamily
    terminals: list                 # per player, callable X:(N,...) -> array
    T: float
    beta: object                    # WeightSequence
    grid: SpatialGrid
    dt: float                       # requested step; capped by the CFL bound
    R: float | None = None          # soft triple-norm envelope
    Rp: float | None = None
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T <= 0:
            raise NashError("need T > 0")
        if self.grid.N != self.N or self.diffusion.N != self.N:
            raise NashError("dimension mismatch between grid/diffusion/N")
        if len(self.terminals) != self.N:
            raise NashError("need one terminal cost per player")
        X = self.grid.meshgrid()
        supA = self.diffusion.sup_norm((0.0, self.T / 2, self.T), X)
        cfl = self.grid.h ** 2 / (2 * self.N * supA) if supA > 0 else np.inf
        # keep a margin under the diffusion CFL so the upwind transport term
        # added during Picard sweeps stays stable at the shared step
        step = min(self.dt, 0.45 * cfl)
        K = max(2, int(np.ceil(self.T / step - 1e-12)))
        self.times = np.linspace(0.0, self.T, K + 1)

    @property
    def step(self) -> float:
        return self.times[1] - self.times[0]

    def zero_fields(self) -> list:
        z = np.zeros((self.times.size,) + self.grid.shape)
        return [Field(self.grid, self.times, z, player=i) for i in range(self.N)]

    def terminal_field(self, i) -> np.ndarray:
        X = self.grid.meshgrid()
        return np.broadcast_to(np.asarray(self.terminals[i](X), dtype=float),
                               self.grid.shape)

    def player_weight(self, i, sqrt=False):
        w = shift(self.beta, i, self.N)
        return w.power(0.5) if sqrt else w


def lq_game(spec: LQGameSpec, beta, grid: SpatialGrid, dt: float,
            kind: str = "lq", kappa: float | None = None, R=None, Rp=None) -> GameSpec:
    """GameSpec matching an LQ oracle specification."""
    if kind == "lq":
        ham = HamiltonianFamily.lq(spec.Q)
    else:
        ham = HamiltonianFamily.saturated(spec.Q, kappa)
    diffusion = DiffusionSpec.isotropic(spec.N, 0.5 * spec.sigma ** 2)
    terms = [
        (lambda X, G=spec.Gamma[i]: 0.5 * np.einsum("jk,j...,k...->...", G, X, X))
        for i in range(spec.N)
    ]
    return GameSpec(spec.N, diffusion, ham, terms, spec.T, beta, grid, dt,
                    R=R, Rp=Rp)


# ---------------------------------------------------------------------------
# gradient cache and sweep assembly


class GradientCache:
    """Frozen diagonal gradients D_j u^j on the solve grid, interpolated
    linearly in time."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = values            # (N, K+1, M, ..., M)

    @staticmethod
    def from_fields(fields) -> "GradientCache":
        vals = np.stack([finite_diff(f, (j,)).values
                         for j, f in enumerate(fields)])
        return GradientCache(fields[0].times, vals)

    def at(self, t: float) -> np.ndarray:
        ts = self.times
        if ts.size == 1:
            return self.values[:, 0]
        k = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, ts.size - 2))
        w = np.clip((t - ts[k]) / (ts[k + 1] - ts[k]), 0.0, 1.0)
        return (1 - w) * self.values[:, k] + w * self.values[:, k + 1]


def assemble_drift(game: GameSpec, cache: GradientCache, i: int) -> DriftSpec:
    """B^j_i = dH^j/dp^j(Du) for j != i; the own slot is the s-averaged
    derivative int_0^1 dH^i/dp^i(Du^-i, s D_i u^i) ds by 8-node Gauss-Legendre
    quadrature (exact for LQ, where it gives D_i u^i / 2).
    """
    ham = game.hamiltonian

    def b(t, X):
        if X.shape[1:] != game.grid.shape:
            raise NashError("drift cache is grid-aligned; off-grid evaluation "
                            "is not supported")
        Du = cache.at(t)
        out = np.empty((game.N,) + X.shape[1:])
        for j in range(game.N):
            if j != i:
                out[j] = ham.dpj(j, t, X, Du)
        acc = np.zeros(X.shape[1:])
        for s, w in zip(_GL_S, _GL_W):
            ps = Du.copy()
            ps[i] = s * Du[i]
            acc += w * np.asarray(ham.dpj(i, t, X, ps), dtype=float)
        if not np.all(np.isfinite(acc)):
            raise NashError(f"non-finite quadrature integrand for player {i}")
        out[i] = acc
        return out

    return DriftSpec(b)


def assemble_source(game: GameSpec, cache: GradientCache, i: int) -> SourceSpec:
    """F^i(t, x) = H^i(t, x, Du^-i, 0): the own momentum slot zeroed."""
    ham = game.hamiltonian

    def f(t, X):
        p = cache.at(t).copy()
        p[i] = 0.0
        return ham.value(i, t, X, p)

    return SourceSpec(f)


def picard_step(game: GameSpec, fields) -> list:
    """One sweep of the fixed-point map S: all players solved against the
    gradient cache frozen from the incoming iterate.
    """
    cache = GradientCache.from_fields(fields)
    out = []
    for i in range(game.N):
        src = assemble_source(game, cache, i)
        # moving H^i(., Du^-i, 0) to the right-hand side flips its sign
        problem = LinearProblem(
            game.diffusion,
            assemble_drift(game, cache, i),
            SourceSpec(lambda t, X, s=src: -s.eval(t, X)),
            TerminalSpec(lambda X, i=i: game.terminals[i](X)),
            0.0, game.T, player=i)
        try:
            w = solve_grid(problem, game.grid, game.step, strict_dt=True)
        except Exception as e:
            raise NashError(f"linear solve failed for player {i}: {e}") from e
        out.append(w)
    return out


# ---------------------------------------------------------------------------
# triple norm


def _lipschitz_family(fam: dict, times: np.ndarray) -> dict:
    dts = np.diff(times).reshape((-1,) + (1,) * (fam[()].values.ndim - 1))
    out = {}
    for a, f in fam.items():
        quot = np.diff(f.values, axis=0) / dts
        out[a] = Field(f.grid, times[:-1], quot, f.player)
    return out


def triple_norm(game: GameSpec, fields) -> float:
    """Max over players of ||.||_{C^{2,1}_{beta_i}} (sup over time) plus the
    time-Lipschitz part measured in the minus-variant C^2 norm with sqrt(beta_i).
    """
    worst = 0.0
    for i, f in enumerate(fields):
        fam = derivative_family(f, 2)
        total = space_norm(fam, 2, 1.0, game.player_weight(i)).total
        if f.times.size >= 2:
            lip = _lipschitz_family(fam, f.times)
            total += space_norm(lip, 2, 0.0, game.player_weight(i, sqrt=True),
                                minus_variant=True).total
        worst = max(worst, total)
    return worst


def _resample(f: Field, times: np.ndarray) -> Field:
    if f.times.size == times.size and np.allclose(f.times, times):
        return f
    flat = f.values.reshape(f.times.size, -1)
    idx = np.clip(np.searchsorted(f.times, times, side="right") - 1,
                  0, f.times.size - 2)
    w = np.clip((times - f.times[idx]) / (f.times[idx + 1] - f.times[idx]),
                0.0, 1.0)[:, None]
    out = (1 - w) * flat[idx] + w * flat[idx + 1]
    return Field(f.grid, times, out.reshape((times.size,) + f.grid.shape),
                 f.player)


# ---------------------------------------------------------------------------
# Picard driver


@dataclass
class PicardReport:
    increments: list
    ratios: list
    iterations: int
    converged: bool
    diverged: bool
    tol: float
    max_norm: float                 # largest triple norm attained
    envelope_exceeded: bool

    def to_dict(self):
        return {"increments": self.increments, "ratios": self.ratios,
                "iterations": self.iterations, "converged": self.converged,
                "diverged": self.diverged, "tol": self.tol,
                "max_norm": self.max_norm,
                "envelope_exceeded": self.envelope_exceeded}


@dataclass
class NashSolution:
    u: list                         # per-player Fields
    grad_diag: list                 # cached D_i u^i Fields
    decay: list                     # per-player DecayReports
    residuals: list                 # per-player (sup, location)


def picard_solve(game: GameSpec, u0=None, tol: float = 1e-6,
                 max_iter: int = 30, collar: float = 0.1,
                 with_residual: bool = True):
    """Iterate u <- S(u) until the triple-norm increment drops below tol.

    Returns (NashSolution | None, PicardReport); divergence (three
    consecutive growing increments) and non-convergence yield a flagged
    report without a solution.
    """
    if tol <= 0:
        raise NashError("tol must be positive")
    u = game.zero_fields() if u0 is None else [
        _resample(f, game.times) for f in u0]
    increments = []
    max_norm = 0.0
    converged = diverged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = picard_step(game, u)
        inc = triple_norm(game, [a - b for a, b in zip(new, u)])
        increments.append(inc)
        max_norm = max(max_norm, triple_norm(game, new))
        u = new
        if inc < tol:
            converged = True
            break
        if len(increments) >= 4 and all(
                increments[-k] > increments[-k - 1] for k in (1, 2, 3)):
            diverged = True
            break
    ratios = [b / a for a, b in zip(increments, increments[1:]) if a > 0]
    exceeded = game.R is not None and max_norm > game.R
    if exceeded:
        warnings.warn(f"iterates left the (R, R') envelope: {max_norm:.3g} > "
                      f"{game.R:.3g}", stacklevel=2)
    report = PicardReport(increments, ratios, it, converged, diverged, tol,
                          max_norm, exceeded)
    if not converged:
        return None, report
    grad = [finite_diff(f, (i,)) for i, f in enumerate(u)]
    decay = [verify_decay(f, game.player_weight(i), collar=collar,
                          third_order=False) for i, f in enumerate(u)]
    res = residual(game, u, collar=collar) if with_residual else None
    return NashSolution(u, grad, decay, res), report


# ---------------------------------------------------------------------------
# diagnostics


def residual(game: GameSpec, fields, collar: float = 0.1) -> list:
    """Per-player sup of the Nash equation left side over interior nodes,
    with the location of the max."""
    grid = game.grid
    times = fields[0].times
    if times.size < 3:
        raise NashError("need at least 3 time nodes for the d/dt stencil")
    X = grid.meshgrid()
    cache = GradientCache.from_fields(fields)
    inner = grid.interior(collar)
    out = []
    for i, f in enumerate(fields):
        fam = derivative_family(f, 2)
        ut = np.gradient(f.values, times, axis=0, edge_order=2)
        res = -ut
        for k, t in enumerate(times):
            Du = cache.values[:, k]
            diag = game.diffusion.diag_values(t, X)
            acc = np.zeros(grid.shape)
            for c in range(game.N):
                acc += diag[c] * fam[(c, c)].values[k]
            for (a, b) in game.diffusion.offdiag:
                acc += 2 * game.diffusion.offdiag_value(a, b, t) * \
                    fam[tuple(sorted((a, b)))].values[k]
            res[k] -= acc
            res[k] += game.hamiltonian.value(i, t, X, Du)
            for j in range(game.N):
                if j != i:
                    res[k] += game.hamiltonian.dpj(j, t, X, Du) * \
                        fam[(j,)].values[k]
        body = np.abs(res[(slice(None),) + inner])
        flat = int(np.argmax(body))
        loc = np.unravel_index(flat, body.shape)
        out.append((float(body.max()), loc))
    return out


@dataclass
class ProbeResult:
    ratio: float
    numerator: float
    denominator: float
    source_gap: float               # diagnostic: sup difference of sources


def contraction_probe(game: GameSpec, u, v) -> ProbeResult:
    """||S(u) - S(v)|| / ||u - v|| in the triple norm."""
    u = [_resample(f, game.times) for f in u]
    v = [_resample(f, game.times) for f in v]
    den = triple_norm(game, [a - b for a, b in zip(u, v)])
    if den < 1e-10:
        raise NashError("degenerate probe pair: ||u - v|| < 1e-10")
    Su = picard_step(game, u)
    Sv = picard_step(game, v)
    num = triple_norm(game, [a - b for a, b in zip(Su, Sv)])
    cu = GradientCache.from_fields(u)
    cv = GradientCache.from_fields(v)
    X = game.grid.meshgrid()
    gap = 0.0
    for i in range(game.N):
        fu = assemble_source(game, cu, i)
        fv = assemble_source(game, cv, i)
        for t in (0.0, game.T / 2, game.T):
            gap = max(gap, float(np.max(np.abs(fu.eval(t, X) - fv.eval(t, X)))))
    return ProbeResult(num / den, num, den, gap)


def probe_fields(game: GameSpec, seed: int, scale: float = 0.05) -> list:
    """Seeded smooth fields with the per-player decay profile, for probes."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(game.N):
        c = rng.uniform(-1, 1, game.N)
        ph = rng.uniform(0, 2 * np.pi, game.N)
        om = rng.uniform(0.5, 1.5, game.N + 1)
        w = game.player_weight(i)

        def f(t, X, c=c, ph=ph, om=om, w=w):
            return scale * sum(
                c[j] * w.value(j) * np.sin(om[j] * X[j] + ph[j] + om[-1] * t)
                for j in range(game.N))

        out.append(Field.from_function(game.grid, game.times, f, player=i))
    return out


@dataclass
class HorizonRow:
    T: float
    ratios: list
    max_ratio: float
    converged: bool


@dataclass
class HorizonScan:
    rows: list
    spearman: float                 # rank correlation of max ratio vs T
    T_star_low: float | None       # largest T with all ratios < 1 + convergence
    T_fail: float | None           # smallest T with a failure

    def to_csv_rows(self):
        return [(r.T, r.max_ratio, int(r.converged)) + tuple(r.ratios)
                for r in self.rows]


def horizon_scan(make_game, T_list, n_pairs: int = 3, seed: int = 0,
                 tol: float = 1e-6, max_iter: int = 30) -> HorizonScan:
    """Contraction probes and a Picard attempt at each horizon; emits the
    empirical bracket of the short-time threshold."""
    T_list = list(T_list)
    if not T_list:
        raise NashError("empty horizon list")
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise NashError("horizons must be ascending")
    rows = []
    for T in T_list:
        game = make_game(T)
        ratios = []
        for k in range(n_pairs):
            u = probe_fields(game, seed + 2 * k)
            v = probe_fields(game, seed + 2 * k + 1)
            ratios.append(contraction_probe(game, u, v).ratio)
        sol, rep = picard_solve(game, tol=tol, max_iter=max_iter,
                                with_residual=False)
        rows.append(HorizonRow(T, ratios, max(ratios), rep.converged))
    ok = [r for r in rows if r.max_ratio < 1 and r.converged]
    bad = [r for r in rows if not (r.max_ratio < 1 and r.converged)]
    maxima = [r.max_ratio for r in rows]
    if len(rows) > 1 and max(maxima) - min(maxima) > 0:
        corr = spearmanr([r.T for r in rows], maxima).correlation
    else:
        corr = np.nan
    return HorizonScan(rows, float(corr),
                       max((r.T for r in ok), default=None),
                       min((r.T for r in bad), default=None))


@dataclass
class StabilityRow:
    N_small: int
    N_large: int
    diff: float                     # max_i sup |u^i_N - u^i_N'| on shared nodes
    tail: float                     # sum_{j >= N_small} beta^j


@dataclass
class StabilityReport:
    rows: list
    fitted_C: float                 # max diff / tail over pairs

    def to_csv_rows(self):
        return [(r.N_small, r.N_large, r.diff, r.tail) for r in self.rows]


def dimension_stability(make_game, N_list, tol: float = 1e-6,
                        max_iter: int = 30) -> StabilityReport:
    """Solve the same family at each N and compare players' values on the
    shared sub-grid, extra coordinates of the larger system frozen at 0."""
    N_list = list(N_list)
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise NashError("N_list must be ascending")
    sols = {}
    games = {}
    for N in N_list:
        game = make_game(N)
        sol, rep = picard_solve(game, tol=tol, max_iter=max_iter,
                                with_residual=False)
        if sol is None:
            raise NashError(f"Picard failed to converge at N = {N}")
        games[N], sols[N] = game, sol
    rows = []
    # Track the players common to every system: u^i_N for fixed i is the
    # quantity that stabilises as N grows; the newest player always couples
    # at distance one to its neighbour and never settles.
    n_common = N_list[0]
    for a, b in zip(N_list, N_list[1:]):
        ga = games[a]
        center = (ga.grid.M - 1) // 2
        tail = float(sum(ga.beta.value(j)
                         for j in range(a, ga.beta.W + 1)))
        worst = 0.0
        for i in range(n_common):
            fa = sols[a].u[i]
            fb = sols[b].u[i]
            sliced = fb.values[(slice(None),) + (slice(None),) * a
                               + (center,) * (b - a)]
            fb_shared = Field(ga.grid, fb.times, sliced, player=i)
            fa_c = _resample(fa, ga.times)
            fb_c = _resample(fb_shared, ga.times)
            worst = max(worst, float(np.max(np.abs(fa_c.values - fb_c.values))))
        rows.append(StabilityRow(a, b, worst, tail))
    C = max((r.diff / r.tail for r in rows if r.tail > 0), default=0.0)
    return StabilityReport(rows, C)


def uniqueness_probe(game: GameSpec, u0_a, u0_b, tol: float = 1e-6,
                     max_iter: int = 30) -> float:
    """Fixed points from two initial guesses; returns their sup-difference."""
    sol_a, rep_a = picard_solve(game, u0_a, tol=tol, max_iter=max_iter,
                                with_residual=False)
    sol_b, rep_b = picard_solve(game, u0_b, tol=tol, max_iter=max_iter,
                                with_residual=False)
    if sol_a is None or sol_b is None:
        raise NashError("a Picard run failed to converge")
    return max(float(np.max(np.abs(fa.values - fb.values)))
               for fa, fb in zip(sol_a.u, sol_b.u))
