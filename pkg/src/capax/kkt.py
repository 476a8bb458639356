"""Optimality certification for candidate capacity solutions.

A pair (measure, multipliers) is optimal exactly when the residual

    kkt_residual(x) = i(x) - Σ_i γ_i g_i(x) - (C - Σ_i γ_i Γ_i)

is nonpositive everywhere on the input domain and zero on the support of
the measure, where i(x) is the side-information-averaged divergence of
the conditional output law at x from the output law of the measure. The
verifier evaluates that residual on a grid (plus midpoints between atoms
and the atoms themselves) and reports the worst violations; `certified`
is the artifact's only accepted proof of optimality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import info
from .channel import MarginalChannel
from .measure import AtomicMeasure, ConstraintSpec

SLACKNESS_TOL = 1e-6

_ATOM_MATCH_RTOL = 1e-9


@dataclass(frozen=True)
class KktReport:
    """Outcome of a grid verification of the optimality conditions."""

    max_off_support_violation: float
    max_on_support_residual: float
    slackness_residuals: np.ndarray
    grid: tuple[float, float, int]
    certified: bool
    kkt_tol: float
    off_support_points: np.ndarray
    off_support_residuals: np.ndarray
    on_support_residuals: np.ndarray


@dataclass(frozen=True)
class SupportReport:
    """Shape of a solution's support plus a discrete-vs-dense heuristic."""

    atom_count: int
    min_separation: float | None
    classification: str
    near_zero_rho_fraction: float


@dataclass(frozen=True)
class ResidualScan:
    """Residual profile over a probe grid, used to drive support growth."""

    xs: np.ndarray
    residuals: np.ndarray
    atom_residuals: np.ndarray
    max_off: float
    argmax_x: float
    max_on: float


def _constraint_terms(spec: ConstraintSpec, multipliers, xs: np.ndarray) -> np.ndarray:
    """Σ_i γ_i g_i(x) on a flat array of d=1 probe points."""
    gamma = np.asarray(multipliers, dtype=float).reshape(-1)
    if gamma.shape[0] != spec.n_constraints:
        raise ValueError(
            f"{gamma.shape[0]} multipliers for {spec.n_constraints} constraints"
        )
    out = np.zeros(xs.shape[0])
    locs = xs.reshape(-1, 1)
    for gam, g in zip(gamma, spec.functions):
        if gam != 0.0:
            out += gam * g(locs)
    return out


def _offset(spec: ConstraintSpec, multipliers, capacity_bits: float) -> float:
    gamma = np.asarray(multipliers, dtype=float).reshape(-1)
    return capacity_bits - float(np.sum(gamma * spec.bounds)) if gamma.size else capacity_bits


def residual_profile(
    xs,
    P_o: AtomicMeasure,
    multipliers,
    capacity_bits: float,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    schemes,
) -> np.ndarray:
    """kkt_residual evaluated at each probe point, in bits."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    prof = info.information_profile(xs, P_o, ch, r_weights, schemes)
    return prof - _constraint_terms(spec, multipliers, xs) - _offset(spec, multipliers, capacity_bits)


def kkt_residual(
    x,
    P_o: AtomicMeasure,
    multipliers,
    capacity_bits: float,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    schemes,
) -> float:
    """The optimality residual at a single input point, in bits."""
    x = float(np.asarray(x).reshape(-1)[0]) if np.ndim(x) else float(x)
    return float(
        residual_profile(np.array([x]), P_o, multipliers, capacity_bits, ch, r_weights, spec, schemes)[0]
    )


def residual_scan(
    P_o: AtomicMeasure,
    multipliers,
    capacity_bits: float,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    domain: tuple[float, float],
    points: int,
    schemes,
) -> ResidualScan:
    """Residuals on a uniform grid plus inter-atom midpoints, atoms excluded."""
    lo, hi = float(domain[0]), float(domain[1])
    coords = np.sort(P_o.coords)
    xs = np.linspace(lo, hi, int(points))
    if coords.shape[0] > 1:
        xs = np.concatenate([xs, 0.5 * (coords[1:] + coords[:-1])])
    xs = np.unique(xs)
    # Drop probe points that coincide with atoms; those are support points.
    tol = _ATOM_MATCH_RTOL * (1.0 + np.abs(xs))
    near_atom = np.zeros(xs.shape[0], dtype=bool)
    for c in coords:
        near_atom |= np.abs(xs - c) <= tol
    xs = xs[~near_atom]
    all_pts = np.concatenate([xs, coords])
    prof = residual_profile(
        all_pts, P_o, multipliers, capacity_bits, ch, r_weights, spec, schemes
    )
    off = prof[: xs.shape[0]]
    on = prof[xs.shape[0] :]
    if xs.shape[0] == 0:
        max_off, argmax_x = -np.inf, float(coords[0])
    else:
        k = int(np.argmax(off))
        max_off, argmax_x = float(off[k]), float(xs[k])
    return ResidualScan(
        xs=xs,
        residuals=off,
        atom_residuals=on,
        max_off=max_off,
        argmax_x=argmax_x,
        max_on=float(np.max(np.abs(on))),
    )


def verify(
    P_o: AtomicMeasure,
    multipliers,
    capacity_bits: float,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    grid_spec: tuple[float, float, int],
    kkt_tol: float,
    schemes=None,
) -> KktReport:
    """Certify (or refute) optimality of a candidate solution on a grid.

    The grid must cover every atom and carry at least 10 points per atom.
    Certification requires the residual to be at most `kkt_tol` off the
    support, within `kkt_tol` in absolute value on the support, and every
    complementary-slackness product within 1e-6.
    """
    lo, hi, count = float(grid_spec[0]), float(grid_spec[1]), int(grid_spec[2])
    if hi <= lo:
        raise ValueError(f"invalid verification grid ({lo!r}, {hi!r})")
    coords = P_o.coords
    edge = 1e-12 * (1.0 + max(abs(lo), abs(hi)))
    if np.any(coords < lo - edge) or np.any(coords > hi + edge):
        raise ValueError("verification grid does not cover all atoms")
    if count < 10 * P_o.n_atoms:
        raise ValueError(
            f"verification grid too coarse: {count} points for {P_o.n_atoms} atoms"
        )
    if schemes is None:
        from .quadrature import build_output_scheme

        probe = AtomicMeasure.uniform(np.linspace(lo, hi, 17))
        schemes = build_output_scheme(ch, probe)
    scan = residual_scan(
        P_o, multipliers, capacity_bits, ch, r_weights, spec, (lo, hi), count, schemes
    )
    gamma = np.asarray(multipliers, dtype=float).reshape(-1)
    slack = gamma * (spec.moments(P_o) - spec.bounds) if gamma.size else np.zeros(0)
    certified = bool(
        scan.max_off <= kkt_tol
        and scan.max_on <= kkt_tol
        and np.all(np.abs(slack) <= SLACKNESS_TOL)
    )
    return KktReport(
        max_off_support_violation=scan.max_off,
        max_on_support_residual=scan.max_on,
        slackness_residuals=slack,
        grid=(lo, hi, count),
        certified=certified,
        kkt_tol=float(kkt_tol),
        off_support_points=scan.xs,
        off_support_residuals=scan.residuals,
        on_support_residuals=scan.atom_residuals,
    )


def support_report(P_o: AtomicMeasure, verify_output: KktReport) -> SupportReport:
    """Summarize support structure from a verification run on the same measure.

    The classification is a reporting heuristic: when more than half of the
    off-support probes sit within kkt_tol of zero residual, the solution
    behaves like a dense (non-discrete) optimum.
    """
    coords = np.sort(P_o.coords)
    if coords.shape[0] > 1:
        min_sep = float(np.min(np.diff(coords)))
    else:
        min_sep = None
    off = verify_output.off_support_residuals
    if off.shape[0] == 0:
        frac = 0.0
    else:
        frac = float(np.mean(np.abs(off) < verify_output.kkt_tol))
    classification = "dense_suspected" if frac > 0.5 else "discrete"
    return SupportReport(
        atom_count=P_o.n_atoms,
        min_separation=min_sep,
        classification=classification,
        near_zero_rho_fraction=frac,
    )


def uniqueness_diagnostic(
    P1: AtomicMeasure,
    P2: AtomicMeasure,
    ch: MarginalChannel,
    r_weights,
    schemes,
    tol: float = 1e-6,
) -> str:
    """Compare output laws of two measures on the same channel.

    Returns "output_equivalent" when |q1_v(y) - q2_v(y)| stays within
    tol * max(q1, q2, 1e-12) at every quadrature node and every side
    information symbol, else "distinguishable". Two certified solutions
    that are output-equivalent attain the same mutual information, and
    strict concavity fails between them.
    """
    if P1.dim != P2.dim:
        raise ValueError(f"measure dimensions differ: {P1.dim} vs {P2.dim}")
    q1 = info.output_law_tables(P1, ch, schemes)
    q2 = info.output_law_tables(P2, ch, schemes)
    for a, b in zip(q1, q2):
        scale = np.maximum(np.maximum(a, b), 1e-12)
        if np.any(np.abs(a - b) > tol * scale):
            return "distinguishable"
    return "output_equivalent"
