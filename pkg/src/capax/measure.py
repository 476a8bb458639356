"""Finitely supported input measures and moment constraints.

The optimizer works exclusively with atomic probability measures: finitely
many locations in R^d carrying nonnegative weights that sum to one. This
module provides the measure type, the moment functionals that define the
feasible set, and the support-maintenance helpers (mixing, pruning,
merging) the solver relies on.

All operations are pure; measures are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

WEIGHT_ATOL = 1e-12
DEFAULT_WEIGHT_FLOOR = 1e-9
DEFAULT_MERGE_RADIUS = 1e-6

FEASIBILITY_ATOL = 1e-12


class DegenerateMeasureError(ValueError):
    """Raised when an operation would leave a measure with no atoms."""


def _as_locations(locations) -> np.ndarray:
    """Coerce input to a (n, d) float array of atom locations."""
    arr = np.asarray(locations, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"locations must be (n,) or (n, d), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise DegenerateMeasureError("a measure needs at least one atom")
    if not np.all(np.isfinite(arr)):
        raise ValueError("atom locations must be finite")
    return arr


@dataclass(frozen=True)
class AtomicMeasure:
    """Probability measure with finite support on R^d.

    Parameters
    ----------
    locations : array-like, shape (n, d) or (n,)
        Atom locations. A 1-d array is treated as n points in R^1.
    weights : array-like, shape (n,)
        Nonnegative atom weights summing to one (within 1e-12).

    Weights are validated, not renormalized; use :meth:`normalized` to
    build a measure from unnormalized mass. Atom locations must be
    pairwise distinct; tolerance-based separation is maintained by
    :func:`prune`.
    """

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        locs = _as_locations(self.locations)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != locs.shape[0]:
            raise ValueError(
                f"{locs.shape[0]} locations but {w.shape[0]} weights"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        total = float(np.sum(w))
        if abs(total - 1.0) > WEIGHT_ATOL:
            raise ValueError(f"weights must sum to 1 within {WEIGHT_ATOL}, got {total!r}")
        # Exact-duplicate check via lexicographic sort of rows.
        order = np.lexsort(locs.T[::-1])
        sorted_locs = locs[order]
        if locs.shape[0] > 1 and np.any(
            np.all(sorted_locs[1:] == sorted_locs[:-1], axis=1)
        ):
            raise ValueError("atom locations must be pairwise distinct")
        locs = locs.copy()
        w = w.copy()
        locs.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "weights", w)

    # -- constructors ---------------------------------------------------
    @classmethod
    def dirac(cls, location) -> "AtomicMeasure":
        """Point mass at a single location."""
        locs = _as_locations(location if np.ndim(location) else [location])
        return cls(locs, np.ones(1))

    @classmethod
    def uniform(cls, locations) -> "AtomicMeasure":
        """Equal weights on the given locations."""
        locs = _as_locations(locations)
        n = locs.shape[0]
        return cls(locs, np.full(n, 1.0 / n))

    @classmethod
    def normalized(cls, locations, weights) -> "AtomicMeasure":
        """Build a measure from nonnegative mass, rescaled to sum to one."""
        w = np.asarray(weights, dtype=float).reshape(-1)
        total = float(np.sum(w))
        if not np.isfinite(total) or total <= 0.0:
            raise DegenerateMeasureError("total mass must be positive and finite")
        return cls(locations, w / total)

    # -- views ----------------------------------------------------------
    @property
    def n_atoms(self) -> int:
        return self.locations.shape[0]

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def coords(self) -> np.ndarray:
        """Locations as a flat (n,) array; only valid for d = 1."""
        if self.dim != 1:
            raise ValueError(f"coords requires d=1 measures, got d={self.dim}")
        return self.locations[:, 0]

    def atoms(self) -> list[tuple[np.ndarray, float]]:
        """List of (location, weight) pairs."""
        return [(self.locations[j], float(self.weights[j])) for j in range(self.n_atoms)]


@dataclass(frozen=True)
class ConstraintFunction:
    """Nonnegative moment functional g on the input alphabet.

    `evaluate` maps an (n, d) array of locations to an (n,) array of
    nonnegative values; `gradient`, when present, returns the (n, d)
    spatial gradient. `even` marks invariance under x -> -x, which the
    solver uses to decide whether symmetric initialization is sound.
    """

    kind: str
    evaluate: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    even: bool = True
    params: dict = field(default_factory=dict)

    def __call__(self, locations) -> np.ndarray:
        locs = _as_locations(locations)
        vals = np.asarray(self.evaluate(locs), dtype=float).reshape(-1)
        if np.any(vals < 0.0):
            raise ValueError(f"constraint function {self.kind!r} returned a negative value")
        return vals


def average_power() -> ConstraintFunction:
    """Squared Euclidean norm, the second-moment constraint function."""
    return ConstraintFunction(
        kind="average_power",
        evaluate=lambda locs: np.sum(locs * locs, axis=1),
        gradient=lambda locs: 2.0 * locs,
        even=True,
    )


def peak_indicator(limit: float) -> ConstraintFunction:
    """Indicator-style peak constraint: 0 inside the ball |x| <= limit, +inf outside.

    The solver treats peak constraints as a hard domain restriction; this
    functional exists so feasibility checks and reports stay uniform.
    """
    if limit <= 0:
        raise ValueError("peak limit must be positive")

    def _eval(locs):
        norms = np.sqrt(np.sum(locs * locs, axis=1))
        return np.where(norms <= limit, 0.0, np.inf)

    return ConstraintFunction(
        kind="peak_indicator",
        evaluate=_eval,
        gradient=lambda locs: np.zeros_like(locs),
        even=True,
        params={"limit": float(limit)},
    )


def custom_moment(exponent: float) -> ConstraintFunction:
    """|x|^exponent moment constraint function."""
    if exponent <= 0:
        raise ValueError("moment exponent must be positive")

    def _eval(locs):
        norms = np.sqrt(np.sum(locs * locs, axis=1))
        return norms ** exponent

    def _grad(locs):
        norms = np.sqrt(np.sum(locs * locs, axis=1))
        safe = np.where(norms > 0, norms, 1.0)
        return exponent * (safe ** (exponent - 2.0))[:, None] * locs

    return ConstraintFunction(
        kind="custom_moment",
        evaluate=_eval,
        gradient=_grad,
        even=True,
        params={"exponent": float(exponent)},
    )


@dataclass(frozen=True)
class ConstraintSpec:
    """A list of moment constraints ∫ g_i dP <= Γ_i with positive bounds."""

    functions: tuple[ConstraintFunction, ...]
    bounds: np.ndarray

    def __post_init__(self):
        funcs = tuple(self.functions)
        bounds = np.asarray(self.bounds, dtype=float).reshape(-1)
        if len(funcs) != bounds.shape[0]:
            raise ValueError(
                f"{len(funcs)} constraint functions but {bounds.shape[0]} bounds"
            )
        if np.any(~np.isfinite(bounds)) or np.any(bounds <= 0.0):
            raise ValueError("constraint bounds must be positive and finite")
        bounds = bounds.copy()
        bounds.setflags(write=False)
        object.__setattr__(self, "functions", funcs)
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def empty(cls) -> "ConstraintSpec":
        return cls((), np.zeros(0))

    @property
    def n_constraints(self) -> int:
        return len(self.functions)

    def moments(self, P: AtomicMeasure) -> np.ndarray:
        return np.array([moment(P, g) for g in self.functions])

    def peak_limit(self) -> float | None:
        """Smallest peak-indicator limit, or None when no peak constraint exists."""
        limits = [g.params["limit"] for g in self.functions if g.kind == "peak_indicator"]
        return min(limits) if limits else None

    def moment_indices(self) -> list[int]:
        """Indices of constraints handled through Lagrange multipliers."""
        return [i for i, g in enumerate(self.functions) if g.kind != "peak_indicator"]


def moment(P: AtomicMeasure, g: ConstraintFunction) -> float:
    """Exact finite sum Σ_j p_j g(x_j)."""
    return float(np.sum(P.weights * g(P.locations)))


def is_feasible(P: AtomicMeasure, spec: ConstraintSpec) -> tuple[bool, np.ndarray]:
    """Check membership in the constraint set; returns (feasible, slacks Γ_i - ∫g_i dP)."""
    moments = spec.moments(P)
    slacks = spec.bounds - moments
    ok = bool(np.all(moments <= spec.bounds + FEASIBILITY_ATOL))
    return ok, slacks


def mix(P1: AtomicMeasure, P2: AtomicMeasure, alpha: float) -> AtomicMeasure:
    """Convex combination alpha*P1 + (1-alpha)*P2 with coincident atoms merged."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie strictly in (0, 1), got {alpha!r}")
    if P1.dim != P2.dim:
        raise ValueError(f"dimension mismatch: {P1.dim} vs {P2.dim}")
    locs: list[np.ndarray] = []
    mass: list[float] = []
    index: dict[bytes, int] = {}
    for P, scale in ((P1, alpha), (P2, 1.0 - alpha)):
        for j in range(P.n_atoms):
            key = P.locations[j].tobytes()
            if key in index:
                mass[index[key]] += scale * P.weights[j]
            else:
                index[key] = len(locs)
                locs.append(P.locations[j])
                mass.append(scale * P.weights[j])
    return AtomicMeasure.normalized(np.vstack(locs), np.array(mass))


def _merge_clusters(locations: np.ndarray, weights: np.ndarray, radius: float):
    """Greedy single-linkage merge of atoms within `radius` (mass-weighted centroids)."""
    n = locations.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    # Sort by first coordinate so d=1 clustering is a linear scan; the
    # pairwise check below keeps d>1 correct.
    order = np.lexsort(locations.T[::-1])
    for ii in range(n):
        for jj in range(ii + 1, n):
            a, b = order[ii], order[jj]
            if locations[b, 0] - locations[a, 0] > radius:
                break
            if np.linalg.norm(locations[a] - locations[b]) <= radius:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[rb] = ra
    groups: dict[int, list[int]] = {}
    for a in range(n):
        groups.setdefault(find(a), []).append(a)
    new_locs = []
    new_w = []
    # Deterministic output order: by first member's sorted position.
    ordered = sorted(groups.values(), key=lambda idxs: min(np.where(order == i)[0][0] for i in idxs))
    for idxs in ordered:
        idxs_sorted = sorted(idxs, key=lambda i: tuple(locations[i]))
        w = weights[idxs_sorted]
        total = float(np.sum(w))
        centroid = np.einsum("j,jd->d", w, locations[idxs_sorted]) / total
        new_locs.append(centroid)
        new_w.append(total)
    return np.vstack(new_locs), np.array(new_w)


def prune(
    P: AtomicMeasure,
    weight_floor: float = DEFAULT_WEIGHT_FLOOR,
    merge_radius: float = DEFAULT_MERGE_RADIUS,
) -> AtomicMeasure:
    """Drop atoms below `weight_floor`, merge atoms within `merge_radius`, renormalize.

    Returns P itself when nothing changes, so the identity case is exact.
    """
    if not (0.0 <= weight_floor < 1.0):
        raise ValueError("weight_floor must lie in [0, 1)")
    if merge_radius < 0.0:
        raise ValueError("merge_radius must be nonnegative")
    keep = P.weights >= weight_floor
    if not np.any(keep):
        raise DegenerateMeasureError(
            f"pruning at floor {weight_floor} removed every atom"
        )
    locs = P.locations[keep]
    w = P.weights[keep]
    merged = False
    if merge_radius > 0.0 and locs.shape[0] > 1:
        new_locs, new_w = _merge_clusters(locs, w, merge_radius)
        if new_locs.shape[0] != locs.shape[0]:
            locs, w = new_locs, new_w
            merged = True
    if not merged and bool(np.all(keep)):
        return P
    return AtomicMeasure.normalized(locs, w)
