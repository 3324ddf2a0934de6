"""Weighted Hoelder norms and seminorms on gridded functions.

Fields live on uniform tensor grids [-L, L]^N with M (odd) nodes per axis and
carry a time axis.  Derivatives are central second-order differences in the
interior with second-order one-sided stencils at the boundary; Hoelder
quotients are evaluated over axis-aligned node pairs only, matching the
one-coordinate-at-a-time seminorm the weighted spaces are built on.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .weights import MultiIndex, multi_index_weight

__all__ = [
    "SpatialGrid",
    "Field",
    "NormReport",
    "finite_diff",
    "derivative_family",
    "weighted_sup_norm",
    "holder_seminorm",
    "parabolic_seminorm",
    "space_norm",
    "save_field",
    "load_field",
]

# node-count budget guarding against accidental huge tensor grids
MAX_NODES = 2 ** 24
# per-axis node count above which Hoelder pair enumeration switches from all
# O(M^2) pairs to the power-of-two lag ladder
FULL_PAIR_LIMIT = 64


class GridError(ValueError):
    """Invalid grid or field geometry."""


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid on [-L, L]^N with M nodes per axis (M odd)."""

    N: int
    L: float
    M: int

    def __post_init__(self):
        if self.M < 5 or self.M % 2 == 0:
            raise GridError("M must be odd and >= 5")
        if self.L <= 0 or self.N < 1:
            raise GridError("need L > 0 and N >= 1")
        if self.M ** self.N > MAX_NODES:
            raise GridError(f"grid exceeds node budget {MAX_NODES}")

    @property
    def h(self) -> float:
        return 2 * self.L / (self.M - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.M)

    @property
    def shape(self) -> tuple:
        return (self.M,) * self.N

    def meshgrid(self) -> np.ndarray:
        """Coordinates stacked on the leading axis: shape (N, M, ..., M)."""
        axes = np.meshgrid(*([self.axis] * self.N), indexing="ij")
        return np.stack(axes)

    def interior(self, collar: float) -> tuple:
        """Slice tuple excluding a boundary collar (fraction of M per side)."""
        g = int(round(collar * self.M))
        if 2 * g >= self.M:
            raise GridError("collar consumes entire grid")
        sl = slice(g, self.M - g) if g else slice(None)
        return (sl,) * self.N


@dataclass(frozen=True)
class Field:
    """Scalar function of (t, x) sampled on time nodes x tensor grid."""

    grid: SpatialGrid
    times: np.ndarray
    values: np.ndarray = field(repr=False)  # shape (K+1, M, ..., M)
    player: int | None = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if v.shape != (t.size,) + self.grid.shape:
            raise GridError(f"value shape {v.shape} inconsistent with grid")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise GridError("time nodes must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise GridError("field contains non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @staticmethod
    def from_function(grid: SpatialGrid, times, f, player=None) -> "Field":
        """Sample f(t, X) with X of shape (N, M, ..., M) on all time nodes."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        X = grid.meshgrid()
        vals = np.stack([np.broadcast_to(np.asarray(f(t, X), dtype=float),
                                         grid.shape) for t in times])
        return Field(grid, times, vals, player)

    def map(self, fn) -> "Field":
        return Field(self.grid, self.times, fn(self.values), self.player)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.grid, self.times, self.values - other.values,
                     self.player)


def _as_alpha(alpha) -> MultiIndex:
    if isinstance(alpha, MultiIndex):
        return alpha
    if isinstance(alpha, dict):
        return MultiIndex.from_dict(alpha)
    return MultiIndex.from_coords(alpha)


def finite_diff(field: Field, alpha) -> Field:
    """Grid derivative D^alpha, axes applied in ascending coordinate order.

    Second-order central stencils in the interior, second-order one-sided at
    the boundary layers (np.gradient with edge_order=2).
    """
    alpha = _as_alpha(alpha)
    if field.grid.M < 5:
        raise GridError("grid too small for requested stencil")
    out = field.values
    h = field.grid.h
    for c, m in alpha.entries:
        if c >= field.grid.N:
            raise GridError(f"coordinate {c} outside grid dimension")
        if m > 3:
            raise GridError("per-axis multiplicity capped at 3")
        for _ in range(m):
            out = np.gradient(out, h, axis=1 + c, edge_order=2)
    return Field(field.grid, field.times, out, field.player)


def derivative_family(field: Field, m: int) -> dict:
    """All D^alpha fields for |alpha| <= m, keyed by ascending coord tuples."""
    N = field.grid.N
    fam = {(): field}
    for k in range(1, m + 1):
        for coords in itertools.combinations_with_replacement(range(N), k):
            parent = fam[coords[:-1]]
            fam[coords] = finite_diff(parent, (coords[-1],))
    return fam


def weighted_sup_norm(field: Field, beta, alpha) -> float:
    """sup |field| / beta^alpha; the field is D^alpha V (or V for alpha = 0)."""
    return float(np.max(np.abs(field.values))) / multi_index_weight(beta, _as_alpha(alpha))


def _pair_lags(M: int, full: bool):
    if full or M <= FULL_PAIR_LIMIT:
        return range(1, M)
    lags = []
    lag = 1
    while lag < M:
        lags.append(lag)
        lag *= 2
    if lags[-1] != M - 1:
        lags.append(M - 1)
    return lags


def _slice_holder_seminorm(vals: np.ndarray, h: float, gamma: float,
                           full: bool) -> float:
    """[V]_gamma of one spatial slice: sup over axes and axis-aligned pairs."""
    best = 0.0
    M = vals.shape[-1] if vals.ndim else 1
    for ax in range(vals.ndim):
        v = np.moveaxis(vals, ax, -1)
        for lag in _pair_lags(vals.shape[ax], full):
            d = np.max(np.abs(v[..., lag:] - v[..., :-lag]))
            best = max(best, d / (lag * h) ** gamma)
    return best


def holder_seminorm(field: Field, gamma: float, full_pairs: bool = False) -> float:
    """Axis-aligned Hoelder seminorm [V]_gamma of a single time slice."""
    if not 0 <= gamma <= 1:
        raise GridError("gamma must lie in [0, 1]")
    if field.times.size != 1:
        raise GridError("holder_seminorm expects a single time slice")
    if field.grid.M < 2:
        raise GridError("degenerate grid")
    return _slice_holder_seminorm(field.values[0], field.grid.h, gamma,
                                  full_pairs)


def _time_holder(values: np.ndarray, times: np.ndarray, expo: float,
                 full: bool) -> float:
    """sup over time-node pairs of |V(t)-V(s)|_inf / |t-s|^expo."""
    K = times.size
    best = 0.0
    for lag in _pair_lags(K, full):
        d = np.abs(values[lag:] - values[:-lag])
        d = d.reshape(K - lag, -1).max(axis=1)
        dt = (times[lag:] - times[:-lag]) ** expo
        best = max(best, float(np.max(d / dt)))
    return best


def parabolic_seminorm(field: Field, gamma: float, beta, alpha,
                       full_pairs: bool = False) -> float:
    """[V]_{gamma/2,gamma;beta,alpha}: time part over (beta^alpha)^(1/2),
    space part over beta^alpha."""
    if not 0 < gamma < 1:
        raise GridError("gamma must lie in (0, 1)")
    if field.times.size < 2:
        raise GridError("need at least two time nodes")
    w = multi_index_weight(beta, _as_alpha(alpha))
    tpart = _time_holder(field.values, field.times, gamma / 2, full_pairs)
    spart = max(_slice_holder_seminorm(s, field.grid.h, gamma, full_pairs)
                for s in field.values)
    return tpart / np.sqrt(w) + spart / w


@dataclass
class NormReport:
    """Itemized weighted-norm evaluation."""

    entries: dict
    total: float
    boundary_one_sided: dict  # derivative order -> True if one-sided stencils used

    def to_json(self) -> str:
        return json.dumps({"entries": {str(k): v for k, v in self.entries.items()},
                           "total": self.total,
                           "boundary_one_sided": {str(k): v for k, v in
                                                  self.boundary_one_sided.items()}})

    def to_csv_rows(self):
        return [(str(k), v) for k, v in self.entries.items()] + [("total", self.total)]


def _alphas_of_order(N: int, k: int):
    return [MultiIndex.from_coords(c)
            for c in itertools.combinations_with_replacement(range(N), k)]


def space_norm(derivs: dict, m: int, gamma: float, beta,
               minus_variant: bool = False, full_pairs: bool = False) -> NormReport:
    """Assemble ||V||_{m+gamma;beta} (or the minus variant) from a family of
    derivative fields keyed by ascending coordinate tuples (see
    derivative_family).  Sup norms run over all time and space nodes; Hoelder
    seminorms over axis-aligned pairs, slice by slice, max over slices.
    """
    if () not in derivs:
        raise GridError("derivative family must contain the raw field ()")
    base = derivs[()]
    N = base.grid.N
    for k in range(m + 1):
        for a in _alphas_of_order(N, k):
            if a.coords() not in derivs:
                raise GridError(f"missing derivative order {a.coords()}")

    def seminorm(f):
        return max(_slice_holder_seminorm(s, f.grid.h, gamma, full_pairs)
                   for s in f.values)

    entries = {}
    top = m - 1 if minus_variant else m
    total = 0.0
    for k in range(top + 1):
        sup_k = max(weighted_sup_norm(derivs[a.coords()], beta, a)
                    for a in _alphas_of_order(N, k))
        entries[("sup", k)] = sup_k
        total += sup_k
    if not minus_variant:
        semi = max(seminorm(derivs[a.coords()]) / multi_index_weight(beta, a)
                   for a in _alphas_of_order(N, m))
        entries[("holder", m, gamma)] = semi
        total += semi
    else:
        # top-order sup and Hoelder terms weighted by predecessor weights
        # beta^alpha' (the equivalent norm on the minus space; predecessor
        # weights dominate beta^alpha, so the minus norm nests below the
        # full norm)
        best = 0.0
        for a in _alphas_of_order(N, m):
            f = derivs[a.coords()]
            raw_sup = float(np.max(np.abs(f.values)))
            raw_semi = seminorm(f)
            for ap in a.predecessors():
                w = multi_index_weight(beta, ap)
                best = max(best, (raw_sup + raw_semi) / w)
        entries[("minus-top", m, gamma)] = best
        total += best
    flags = {k: k >= 1 for k in range(m + 1)}
    return NormReport(entries, total, flags)


# ---------------------------------------------------------------------------
# binary + sidecar serialization

_HEADER = struct.Struct("<iidi")  # N, M, L, K


def save_field(f: Field, path) -> None:
    """Write header (N, M, L, K) + row-major float64 values, JSON sidecar."""
    path = Path(path)
    K = f.times.size - 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(f.grid.N, f.grid.M, f.grid.L, K))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    sidecar = {"N": f.grid.N, "M": f.grid.M, "L": f.grid.L, "K": K,
               "times": f.times.tolist(), "player": f.player}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_field(path) -> Field:
    path = Path(path)
    with open(path, "rb") as fh:
        N, M, L, K = _HEADER.unpack(fh.read(_HEADER.size))
        vals = np.frombuffer(fh.read(), dtype="<f8").reshape((K + 1,) + (M,) * N)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return Field(SpatialGrid(N, L, M), np.asarray(sidecar["times"]),
                 vals.copy(), sidecar.get("player"))
