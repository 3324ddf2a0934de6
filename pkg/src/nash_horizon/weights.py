"""Self-controlled weight sequences and multi-index weights.

A weight sequence beta is a positive, even, non-increasing sequence on the
integer window |i| <= W, normalized so that beta^0 = 1.  The key property of
interest is c-self-control: (beta * beta)^i <= c beta^i, with * the discrete
self-convolution.  Multi-index weights beta^alpha combine geometric means
with minima over predecessor multi-indices and govern all weighted norms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "WeightSequence",
    "ShiftedWeight",
    "MultiIndex",
    "CscCertificate",
    "build_weight",
    "self_convolve",
    "certify_csc",
    "shift",
    "multi_index_weight",
    "lp_norm",
]

# fraction of the window treated as the edge guard band
EDGE_GUARD_FRACTION = 0.1
# relative tail contribution of sqrt(beta) below which the partial sum is
# considered converged on the window (recorded, not enforced: slowly decaying
# admissible sequences never meet it at desk-scale windows)
TAIL_CONVERGENCE_TOL = 1e-6


class WeightError(ValueError):
    """Invalid weight-sequence parameters or values."""


@dataclass(frozen=True)
class WeightSequence:
    """Even positive sequence beta^i on the window |i| <= W, beta^0 = 1.

    ``values`` stores beta^i for i = -W..W (length 2W+1).
    """

    kind: str
    params: dict
    W: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (2 * self.W + 1,):
            raise WeightError("values must have length 2W+1")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise WeightError("weight values must be positive and finite")
        if not np.allclose(v, v[::-1], rtol=1e-12, atol=0):
            raise WeightError("weight sequence must be even")
        right = v[self.W:]
        if np.any(np.diff(right) > 1e-15):
            raise WeightError("weight values must be non-increasing in |i|")
        object.__setattr__(self, "values", v)

    def value(self, i) -> float:
        """beta^i for |i| <= W."""
        i = np.asarray(i)
        if np.any(np.abs(i) > self.W):
            raise WeightError(f"index outside window |i| <= {self.W}")
        out = self.values[np.abs(i) + self.W]
        return float(out) if out.ndim == 0 else out

    def offsets(self) -> np.ndarray:
        return np.arange(-self.W, self.W + 1)

    @property
    def tail_fraction(self) -> float:
        """Share of sum (beta^i)^(1/2) carried by the outer 10% of the window."""
        half = np.sqrt(self.values)
        guard = max(1, int(round(EDGE_GUARD_FRACTION * self.W)))
        outer = np.abs(self.offsets()) > self.W - guard
        return float(half[outer].sum() / half.sum())

    @property
    def tail_converged(self) -> bool:
        return self.tail_fraction < TAIL_CONVERGENCE_TOL

    def power(self, q: float) -> "WeightSequence":
        """Pointwise power, e.g. sqrt(beta) for q = 1/2 (still beta^0 = 1)."""
        return WeightSequence("table", {"power": q, "of": self.kind},
                              self.W, self.values ** q)

    def to_json(self) -> str:
        doc = {"kind": self.kind, "params": self.params, "W": self.W}
        if self.kind == "table":
            doc["values"] = self.values.tolist()
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "WeightSequence":
        doc = json.loads(text)
        if doc["kind"] == "table":
            return build_weight("table", {"values": doc["values"]}, doc["W"])
        return build_weight(doc["kind"], doc["params"], doc["W"])


class ShiftedWeight:
    """View beta_i with (beta_i)^j = beta^(i-j), for ambient coordinates j.

    Exposes the same ``value``/``power`` interface that the norm machinery
    uses, so shifted sequences can be passed anywhere a WeightSequence can.
    """

    def __init__(self, base: WeightSequence, center: int, q: float = 1.0):
        self.base = base
        self.center = center
        self.q = q

    def value(self, j):
        v = self.base.value(np.asarray(self.center) - np.asarray(j))
        return v ** self.q if self.q != 1.0 else v

    def power(self, q: float) -> "ShiftedWeight":
        return ShiftedWeight(self.base, self.center, self.q * q)


@dataclass(frozen=True)
class MultiIndex:
    """Sparse multi-index alpha: coordinate -> multiplicity, |alpha| <= 3."""

    entries: tuple  # sorted tuple of (coordinate, multiplicity)

    MAX_ORDER = 3

    @staticmethod
    def from_dict(d: dict) -> "MultiIndex":
        items = tuple(sorted((int(c), int(m)) for c, m in d.items() if m))
        return MultiIndex(items)

    @staticmethod
    def from_coords(coords) -> "MultiIndex":
        """Build from a sequence of coordinates with repetition, e.g. (0,0,1)."""
        d = {}
        for c in coords:
            d[int(c)] = d.get(int(c), 0) + 1
        return MultiIndex.from_dict(d)

    def __post_init__(self):
        if any(m < 1 for _, m in self.entries):
            raise WeightError("multiplicities must be >= 1")
        if self.order > self.MAX_ORDER:
            raise WeightError(f"|alpha| = {self.order} exceeds {self.MAX_ORDER}")

    @property
    def order(self) -> int:
        return sum(m for _, m in self.entries)

    def coords(self) -> tuple:
        """Coordinates with repetition, ascending."""
        out = []
        for c, m in self.entries:
            out.extend([c] * m)
        return tuple(out)

    def predecessors(self):
        """All alpha - e_k with alpha^k >= 1 (componentwise decrement)."""
        out = []
        for c, m in self.entries:
            d = dict(self.entries)
            if m == 1:
                del d[c]
            else:
                d[c] = m - 1
            out.append(MultiIndex.from_dict(d))
        return out

    def __le__(self, other: "MultiIndex") -> bool:
        d = dict(other.entries)
        return all(d.get(c, 0) >= m for c, m in self.entries)


def build_weight(kind: str, params: dict, W: int) -> WeightSequence:
    """Construct a normalized weight sequence.

    kinds: "polynomial" (exponent a > 2, beta^i = (1+|i|)^-a),
    "geometric-polynomial" (ratio r in (0,1), exponent a > 1,
    beta^i = r^|i| (1+|i|)^-a), "table" (explicit even positive values).
    """
    if W < 8:
        raise WeightError("window half-width W must be >= 8")
    i = np.abs(np.arange(-W, W + 1))
    if kind == "polynomial":
        a = float(params["a"])
        if a <= 2:
            raise WeightError("polynomial exponent must satisfy a > 2 "
                              "(square-root summability fails otherwise)")
        vals = (1.0 + i) ** (-a)
    elif kind == "geometric-polynomial":
        r, a = float(params["r"]), float(params["a"])
        if not 0 < r < 1:
            raise WeightError("geometric ratio must lie in (0,1)")
        if a <= 1:
            raise WeightError("geometric-polynomial exponent must satisfy a > 1")
        vals = r ** i * (1.0 + i) ** (-a)
    elif kind == "table":
        vals = np.asarray(params["values"], dtype=float)
        if vals.shape != (2 * W + 1,):
            raise WeightError("table values must have length 2W+1")
    else:
        raise WeightError(f"unknown weight kind {kind!r}")
    vals = vals / vals[W]
    stored = {} if kind == "table" else dict(params)
    return WeightSequence(kind, stored, W, vals)


def self_convolve(beta: WeightSequence) -> np.ndarray:
    """(beta * beta)^i for |i| <= W, by direct summation over the window."""
    full = np.convolve(beta.values, beta.values)
    return full[beta.W:3 * beta.W + 1]


@dataclass(frozen=True)
class CscCertificate:
    """Outcome of the self-convolution control check beta*beta <= c beta."""

    c: float
    W: int
    edge_contaminated: bool
    certified: bool
    ratios: np.ndarray = field(repr=False)  # ratio at i = 0..W

    @property
    def lower_bound(self) -> float:
        """(beta*beta)^0 / beta^0, a floor for any admissible c."""
        return float(self.ratios[0])


def certify_csc(beta: WeightSequence) -> CscCertificate:
    """Estimate c = max_i (beta*beta)^i / beta^i and flag edge pathologies.

    Certification fails (``certified`` False, no exception) when the ratio
    grows monotonically toward the window edge without stabilizing, which
    signals that beta is not c-self-controlled.
    """
    conv = self_convolve(beta)
    ratios = (conv / beta.values)[beta.W:]  # i = 0..W by evenness
    W = beta.W
    guard = max(1, int(round(EDGE_GUARD_FRACTION * W)))
    interior_max = float(ratios[:W - guard + 1].max())
    edge = float(ratios[-1])
    edge_flag = edge > 1.05 * interior_max
    # monotone growth over the outer quarter of the window, edge on top
    tail = ratios[3 * W // 4:]
    monotone_growth = bool(np.all(np.diff(tail) > 0)) and edge >= ratios.max()
    certified = not (edge_flag and monotone_growth)
    return CscCertificate(
        c=float(ratios.max()),
        W=W,
        edge_contaminated=edge_flag,
        certified=certified,
        ratios=ratios,
    )


def shift(beta: WeightSequence, i: int, N: int | None = None) -> ShiftedWeight:
    """The sequence beta_i with (beta_i)^j = beta^(i-j) on ambient coordinates.

    When N is given, checks that the window covers [i-(N-1), i].
    """
    if i < 0:
        raise WeightError("shift center must be >= 0")
    if N is not None:
        if not 0 <= i <= N - 1:
            raise WeightError("shift center must lie in [0, N-1]")
        if max(i, (N - 1) - i) > beta.W:
            raise WeightError("window too small for requested ambient dimension")
    return ShiftedWeight(beta, i)


def multi_index_weight(beta, alpha) -> float:
    """The multi-index weight beta^alpha.

    beta^alpha = 1 for |alpha| = 0; for |alpha| >= 1 it is the geometric mean
    (prod (beta^i)^(alpha^i))^(1/|alpha|) capped by the minimum of beta^alpha'
    over predecessors alpha' = alpha - e_k.  ``beta`` may be a WeightSequence
    or a ShiftedWeight; ``alpha`` a MultiIndex or a mapping coord -> mult.
    """
    if not isinstance(alpha, MultiIndex):
        alpha = MultiIndex.from_dict(dict(alpha))
    k = alpha.order
    if k == 0:
        return 1.0
    logs = sum(m * np.log(beta.value(c)) for c, m in alpha.entries)
    geo = float(np.exp(logs / k))
    pred = min(multi_index_weight(beta, a) for a in alpha.predecessors())
    return min(geo, pred)


def lp_norm(beta: WeightSequence, p: float) -> float:
    """Plain sum over the window of (beta^i)^p, for p in {1/2, 1}."""
    if p not in (0.5, 1.0, 1):
        raise WeightError("supported exponents are p = 1/2 and p = 1")
    return float(np.sum(beta.values ** p))
