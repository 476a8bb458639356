"""Constrained capacity maximization over atomic input measures.

The solver is a particle method. It keeps a finite set of atom locations,
alternates three moves until the optimality certificate holds:

  * weights: exponential fixed-point updates on the current support, with
    a Lagrange multiplier found by bisection on the converged moment;
  * locations: ascent along the local residual field with backtracking;
  * support: atoms whose residual is clearly below the support level are
    trimmed, and new atoms are inserted where the residual scan finds a
    violation.

Complementary slackness is pinned exactly: the moment is linear in the
weights, so once the weight iteration's moment trajectory crosses the
constraint bound, the convex blend of the two bracketing iterates hits
the bound to machine precision while remaining a valid, near-optimal
measure. Convergence is declared only by the certificate, never by
objective stall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import info, kkt
from .channel import MarginalChannel
from .measure import (
    AtomicMeasure,
    ConstraintSpec,
    DegenerateMeasureError,
    is_feasible,
    moment,
    prune,
)
from .quadrature import QuadratureScheme, build_output_scheme

LN2 = math.log(2.0)


class SolverError(RuntimeError):
    """Raised when the solver cannot make progress (e.g. multiplier bracket exhausted)."""


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for the particle solver.

    `initial_grid` is (lo, hi, count): the uniform starting grid and also
    the solve/verification domain. Peak constraints shrink the domain to
    their box. Everything else has conservative defaults; tolerances are
    in bits.
    """

    initial_grid: tuple[float, float, int]
    kkt_tol: float = 1e-4
    weight_tol: float = 1e-9
    max_outer_iters: int = 40
    max_ba_iters: int = 60000
    multiplier_bracket: tuple[float, float] = (0.0, 64.0)
    location_step: float = 0.25
    seed: int = 0
    quad_points: int = 1025
    tail_sigmas: float = 8.0
    verify_points: int = 2001
    merge_radius: float = 1e-6
    insert_weight: float = 1e-3
    location_passes: int = 3
    decay_beta: float = 12.0
    decay_iters: int = 4000
    symmetrize: bool = True
    grow_support: bool = True
    move_locations: bool = True

    def __post_init__(self):
        lo, hi, count = self.initial_grid
        if not (lo < hi):
            raise ValueError(f"initial grid needs lo < hi, got ({lo!r}, {hi!r})")
        if int(count) < 3:
            raise ValueError(f"initial grid needs at least 3 points, got {count}")
        for name in ("kkt_tol", "weight_tol", "location_step", "insert_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.multiplier_bracket[1] <= self.multiplier_bracket[0]:
            raise ValueError("multiplier bracket must be a nonempty interval")
        object.__setattr__(self, "initial_grid", (float(lo), float(hi), int(count)))


@dataclass
class CapacitySolution:
    """Solver output: the measure, capacity, multipliers, and certificate."""

    measure: AtomicMeasure
    capacity_bits: float
    multipliers: np.ndarray
    kkt: kkt.KktReport
    trace: list[dict]
    support: kkt.SupportReport | None = None

    @property
    def certified(self) -> bool:
        return self.kkt.certified


def _resolve_r(ch: MarginalChannel, r_weights) -> np.ndarray:
    if r_weights is None:
        return ch.r_weights
    r = np.asarray(r_weights, dtype=float).reshape(-1)
    if r.shape[0] != ch.n_side:
        raise ValueError(f"{r.shape[0]} side weights for {ch.n_side} symbols")
    return r


class _SupportTables:
    """Cached per-support density tables on the quadrature nodes.

    Holding F, F*w and the row entropies fixed makes one weight update two
    einsum contractions, which is what keeps the inner iteration cheap.
    """

    def __init__(self, coords: np.ndarray, ch: MarginalChannel, r: np.ndarray, schemes):
        scheme_list = info._as_scheme_list(schemes, ch.n_side)
        self.coords = coords
        self.r = r
        self.F = []
        self.FW = []
        self.c = []
        self.w = []
        for v, scheme in enumerate(scheme_list):
            F = ch.f_v(scheme.nodes[None, :], coords[:, None], v)
            lnF = np.log(np.maximum(F, 1e-300))
            FW = F * scheme.weights[None, :]
            self.F.append(F)
            self.FW.append(FW)
            self.w.append(scheme.weights)
            self.c.append(np.einsum("jy,jy->j", FW, np.where(F > 0, lnF, 0.0)))

    def divergences_bits(self, p: np.ndarray) -> np.ndarray:
        d = np.zeros(self.coords.shape[0])
        for v in range(len(self.F)):
            if self.r[v] == 0.0:
                continue
            q = np.maximum(np.einsum("j,jy->y", p, self.F[v]), 1e-300)
            d += self.r[v] * (self.c[v] - np.einsum("jy,y->j", self.FW[v], np.log(q)))
        return d / LN2


def _ba_run(tables, gdots, p0, gap_tol, iters):
    """Iterate the exponential update until the duality gap closes.

    gdots is Σ_i γ_i g_i at the support atoms (bits per unit weight). The
    gap max_j u_j - Σ_j p_j u_j bounds the remaining improvement on the
    fixed support; iteration stops when it falls below gap_tol.
    """
    p = p0.copy()
    gap = np.inf
    for _ in range(iters):
        d = tables.divergences_bits(p)
        u = d - gdots
        gap = float(np.max(u) - np.sum(p * u))
        if gap <= gap_tol:
            break
        p = p * np.exp2(u - np.max(u))
        p /= np.sum(p)
    d = tables.divergences_bits(p)
    return p, d, gap


def _decay_run(tables, gdots, p0, beta, iters):
    """Over-relaxed updates that drive clearly suboptimal atoms' weights to zero.

    The exponent is scaled by beta > 1, which accelerates the geometric
    decay of atoms sitting well below the support level without changing
    the fixed point. A step that would decrease the objective reverts to
    the plain update, so the ascent property is preserved.
    """
    p = p0.copy()
    d = tables.divergences_bits(p)
    u = d - gdots
    obj = float(np.sum(p * u))
    for _ in range(iters):
        pn = p * np.exp2(np.minimum(beta * (u - np.max(u)), 0.0))
        pn /= np.sum(pn)
        dn = tables.divergences_bits(pn)
        un = dn - gdots
        objn = float(np.sum(pn * un))
        if objn < obj - 1e-13:
            pn = p * np.exp2(u - np.max(u))
            pn /= np.sum(pn)
            dn = tables.divergences_bits(pn)
            un = dn - gdots
            objn = float(np.sum(pn * un))
        p, u, obj = pn, un, objn
        if float(np.max(u)) - obj <= 1e-12:
            break
    return p


def lagrangian(
    P: AtomicMeasure,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    multipliers,
    schemes,
) -> float:
    """I(P) - Σ_i γ_i (∫ g_i dP - Γ_i), in bits."""
    gamma = np.asarray(multipliers, dtype=float).reshape(-1)
    if gamma.shape[0] != spec.n_constraints:
        raise ValueError(
            f"{gamma.shape[0]} multipliers for {spec.n_constraints} constraints"
        )
    if np.any(gamma < 0):
        raise ValueError("multipliers must be nonnegative")
    I = info.mutual_information(P, ch, r_weights, schemes).bits
    penalty = 0.0
    for gam, g, bound in zip(gamma, spec.functions, spec.bounds):
        if gam != 0.0:
            penalty += gam * (moment(P, g) - bound)
    return I - penalty


def ba_weight_update(
    P: AtomicMeasure,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    multipliers,
    schemes,
) -> AtomicMeasure:
    """One exponential weight update p_j <- p_j 2^(i(x_j) - Σ γ_i g_i(x_j)) / Z."""
    r = _resolve_r(ch, r_weights)
    gamma = np.asarray(multipliers, dtype=float).reshape(-1)
    tables = _SupportTables(P.coords, ch, r, schemes)
    gdots = np.zeros(P.n_atoms)
    for gam, g in zip(gamma, spec.functions):
        if gam != 0.0:
            gdots += gam * g(P.locations)
    u = tables.divergences_bits(P.weights) - gdots
    finite = np.isfinite(u)
    if not np.any(finite):
        raise DegenerateMeasureError("weight update is degenerate: no finite exponent")
    shift = np.max(u[finite])
    factors = np.where(finite, np.exp2(np.minimum(u - shift, 0.0)), 0.0)
    return AtomicMeasure.normalized(P.locations, P.weights * factors)


def _land_single_constraint(
    tables, gvals, bound, bracket, cfg, p0, gamma_hint=None, decay=True
):
    """Multiplier bisection plus exact slackness landing for one moment constraint.

    Returns (gamma, weights). The bisection uses the monotonicity of the
    converged moment in gamma; final bisection steps use fully converged
    (decayed) evaluations, and the bracket is tightened until the residual
    tilt gamma-uncertainty can cause stays well inside kkt_tol. The final
    weights come from blending two consecutive iterates across the
    m = bound crossing, which is exact because the moment is linear in
    the weights.
    """
    gap_coarse = max(1e-7, 0.02 * cfg.kkt_tol)
    gap_fine = 0.2 * cfg.kkt_tol
    iters_coarse = min(4000, cfg.max_ba_iters)
    gamma_lo, gamma_max = float(bracket[0]), float(bracket[1])
    # Bracket width at which a gamma error cannot tilt the residual by
    # more than a fraction of the certification tolerance.
    g_spread = float(np.max(np.abs(gvals - bound)))
    eps_gamma = 0.2 * cfg.kkt_tol / max(1.0, g_spread)

    p, d, gap = _ba_run(tables, 0.0 * gvals, p0, gap_coarse, iters_coarse)
    m = float(np.sum(p * gvals))
    if m <= bound:
        if decay:
            p = _decay_run(tables, 0.0 * gvals, p, cfg.decay_beta, cfg.decay_iters)
        p, d, gap = _ba_run(tables, 0.0 * gvals, p, gap_fine, cfg.max_ba_iters)
        if float(np.sum(p * gvals)) <= bound:
            return 0.0, p

    # Bracket: find ghi with coarse converged moment at or below the bound.
    glo = gamma_lo
    if gamma_hint is not None and gamma_hint > 0:
        ghi = max(gamma_hint * 0.75, 1e-6)
    else:
        ghi = max(0.25, gamma_lo * 2)
    while True:
        p, d, gap = _ba_run(tables, ghi * gvals, p, gap_coarse, iters_coarse)
        m = float(np.sum(p * gvals))
        if m <= bound:
            break
        glo = ghi
        ghi *= 2.0
        if ghi > gamma_max:
            raise SolverError(
                f"multiplier bracket exhausted at gamma={ghi:.3g} "
                f"(moment {m:.6g} still above bound {bound:.6g}); raise the bracket"
            )
    # Coarse bisection most of the way down.
    while ghi - glo > max(100.0 * eps_gamma, 1e-8):
        mid = 0.5 * (glo + ghi)
        p, d, gap = _ba_run(tables, mid * gvals, p, gap_coarse, iters_coarse)
        m = float(np.sum(p * gvals))
        if m > bound:
            glo = mid
        else:
            ghi = mid

    # One decay pass to let clearly suboptimal atoms die, then finish the
    # bisection with fully converged evaluations.
    if decay:
        p = _decay_run(tables, ghi * gvals, p, cfg.decay_beta, cfg.decay_iters)

    def deep(gam, pw):
        pw, _, _ = _ba_run(tables, gam * gvals, pw, gap_fine, cfg.max_ba_iters)
        return pw, float(np.sum(pw * gvals))

    p, m = deep(ghi, p)
    expands = 0
    while m > bound:
        glo = ghi
        ghi = min(ghi * 1.05 + 1e-12, gamma_max)
        p, m = deep(ghi, p)
        expands += 1
        if expands > 200 or (ghi >= gamma_max and m > bound):
            raise SolverError("could not reach the feasible side of the constraint")
    while ghi - glo > eps_gamma:
        mid = 0.5 * (glo + ghi)
        p_mid, m_mid = deep(mid, p)
        if m_mid > bound:
            glo = mid
        else:
            ghi = mid
            p = p_mid
    p, m = deep(ghi, p)
    if m > bound:
        raise SolverError("feasible-side evaluation drifted across the bound")

    # Ride the infeasible side's dynamics upward and blend across the bound.
    target = bound * (1.0 - 1e-13)
    if m < target:
        ride_gamma = max(glo, 0.0)
        m_cur = m
        for _ in range(cfg.max_ba_iters):
            d = tables.divergences_bits(p)
            u = d - ride_gamma * gvals
            pn = p * np.exp2(u - np.max(u))
            pn /= np.sum(pn)
            mn = float(np.sum(pn * gvals))
            if mn >= target:
                if mn > m_cur:
                    theta = (mn - target) / (mn - m_cur)
                    p = theta * p + (1.0 - theta) * pn
                    p /= np.sum(p)
                break
            if mn <= m_cur:
                # The ride dynamics cannot reach the bound; the slackness
                # residual stays at gamma*(m - bound), checked by verify.
                p = pn
                break
            p, m_cur = pn, mn
    return ghi, p


def multiplier_search(
    support,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    cfg: SolverConfig,
    schemes=None,
    weights0=None,
    gamma_hint=None,
    decay=True,
) -> tuple[np.ndarray, AtomicMeasure]:
    """Find multipliers and converged weights on a fixed support.

    Returns a multiplier per constraint (zero for inactive and peak
    constraints) and the fitted measure, which is feasible and satisfies
    complementary slackness within 1e-6 by construction.
    """
    coords = np.asarray(support, dtype=float).reshape(-1)
    order = np.argsort(coords)
    coords = coords[order]
    r = _resolve_r(ch, r_weights)
    if schemes is None:
        probe = AtomicMeasure.uniform(coords)
        schemes = build_output_scheme(ch, probe, cfg.tail_sigmas, cfg.quad_points)
    tables = _SupportTables(coords, ch, r, schemes)
    n = coords.shape[0]
    if weights0 is None:
        p0 = np.full(n, 1.0 / n)
    else:
        p0 = np.asarray(weights0, dtype=float)[order]
        p0 = p0 / np.sum(p0)

    gamma = np.zeros(spec.n_constraints)
    active = spec.moment_indices()
    locs = coords.reshape(-1, 1)
    if not active:
        gap_tol = 0.2 * cfg.kkt_tol
        p, d, gap = _ba_run(tables, np.zeros(n), p0, 50.0 * gap_tol, cfg.max_ba_iters)
        if decay:
            p = _decay_run(tables, np.zeros(n), p, cfg.decay_beta, cfg.decay_iters)
        p, d, gap = _ba_run(tables, np.zeros(n), p, gap_tol, cfg.max_ba_iters)
        return gamma, AtomicMeasure.normalized(locs, p)
    if len(active) == 1:
        i = active[0]
        gvals = spec.functions[i](locs)
        hint = None if gamma_hint is None else float(np.asarray(gamma_hint).reshape(-1)[i])
        gam, p = _land_single_constraint(
            tables, gvals, float(spec.bounds[i]), cfg.multiplier_bracket, cfg, p0,
            hint, decay=decay,
        )
        gamma[i] = gam
        return gamma, AtomicMeasure.normalized(locs, p)

    # Multiple moment constraints: round-robin single-constraint passes.
    gmat = np.stack([spec.functions[i](locs) for i in active])
    p = p0
    for _round in range(12):
        for k, i in enumerate(active):
            others = np.einsum(
                "k,kj->j", np.delete(gamma[active], k), np.delete(gmat, k, axis=0)
            )
            shifted = _ShiftedTables(tables, others)
            gam, p = _land_single_constraint(
                shifted, gmat[k], float(spec.bounds[i]), cfg.multiplier_bracket, cfg, p
            )
            gamma[i] = gam
        moments = gmat @ p
        slack = gamma[active] * (moments - spec.bounds[active])
        feas = moments <= spec.bounds[active] + 1e-12
        if np.all(np.abs(slack) <= 1e-6) and np.all(feas):
            return gamma, AtomicMeasure.normalized(locs, p)
    raise SolverError("round-robin multiplier search did not reach joint slackness")


class _ShiftedTables:
    """View of _SupportTables with a fixed penalty folded into the divergences."""

    def __init__(self, tables: _SupportTables, shift_bits: np.ndarray):
        self._tables = tables
        self._shift = shift_bits
        self.coords = tables.coords

    def divergences_bits(self, p):
        return self._tables.divergences_bits(p) - self._shift


def _gamma_dot_g(spec: ConstraintSpec, multipliers, locs: np.ndarray) -> np.ndarray:
    gamma = np.asarray(multipliers, dtype=float).reshape(-1)
    out = np.zeros(locs.shape[0])
    for gam, g in zip(gamma, spec.functions):
        if gam != 0.0:
            out += gam * g(locs)
    return out


def _gamma_dot_dg(spec: ConstraintSpec, multipliers, locs: np.ndarray) -> np.ndarray:
    gamma = np.asarray(multipliers, dtype=float).reshape(-1)
    out = np.zeros_like(locs)
    for gam, g in zip(gamma, spec.functions):
        if gam == 0.0:
            continue
        if g.gradient is None:
            h = 1e-6
            up = g(locs + h)
            dn = g(locs - h)
            out += gam * ((up - dn) / (2 * h))[:, None]
        else:
            out += gam * np.asarray(g.gradient(locs), dtype=float)
    return out


def _residual_fields(P, ch, r, spec, multipliers, schemes) -> np.ndarray:
    """d/dx [i(x) - Σ γ_i g_i(x)] at the atoms (output law held fixed), bits/unit."""
    scheme_list = info._as_scheme_list(schemes, ch.n_side)
    coords = P.coords
    p = P.weights
    field = np.zeros(coords.shape[0])
    for v, scheme in enumerate(scheme_list):
        if r[v] == 0.0:
            continue
        F = ch.f_v(scheme.nodes[None, :], coords[:, None], v)
        DF = ch.f_v_dx(scheme.nodes[None, :], coords[:, None], v)
        q = np.maximum(np.einsum("j,jy->y", p, F), 1e-300)
        lnq = np.log(q)
        lnF = np.log(np.maximum(F, 1e-300))
        integrand = np.where(F > 0, DF * (lnF - lnq[None, :]), 0.0)
        field += r[v] * np.einsum("jy,y->j", integrand, scheme.weights)
    field = field / LN2
    return field - _gamma_dot_dg(spec, multipliers, P.locations)[:, 0]


def location_gradient(
    P: AtomicMeasure,
    j: int,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    multipliers,
    schemes,
) -> np.ndarray:
    """Gradient of the Lagrangian in atom j's location: p_j d/dx [i(x) - Σ γ_i g_i(x)].

    Uses the kernel's analytic d/dx density when available; otherwise
    falls back to central differences of the full Lagrangian.
    """
    if not (0 <= j < P.n_atoms):
        raise ValueError(f"atom index {j} out of range")
    r = _resolve_r(ch, r_weights)
    if ch.kernel.density_dx is None:
        return location_gradient_fd(P, j, ch, r_weights, spec, multipliers, schemes)
    fields = _residual_fields(P, ch, r, spec, multipliers, schemes)
    grad = np.array([P.weights[j] * fields[j]])
    if not np.all(np.isfinite(grad)):
        raise ArithmeticError(f"non-finite location gradient at atom {j}")
    return grad


def _lagrangian_with_atom_at(P, j, x_new, ch, r_weights, spec, multipliers, schemes):
    locs = P.locations.copy()
    locs[j, 0] = x_new
    moved = AtomicMeasure(locs, P.weights)
    return lagrangian(moved, ch, r_weights, spec, multipliers, schemes)


def location_gradient_fd(
    P: AtomicMeasure,
    j: int,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    multipliers,
    schemes,
    step: float | None = None,
) -> np.ndarray:
    """Central finite difference of the full Lagrangian in atom j's location."""
    x = float(P.coords[j])
    h = 1e-4 * (1.0 + abs(x)) if step is None else step
    up = _lagrangian_with_atom_at(P, j, x + h, ch, r_weights, spec, multipliers, schemes)
    dn = _lagrangian_with_atom_at(P, j, x - h, ch, r_weights, spec, multipliers, schemes)
    grad = np.array([(up - dn) / (2.0 * h)])
    if not np.all(np.isfinite(grad)):
        raise ArithmeticError(f"non-finite finite-difference gradient at atom {j}")
    return grad


def gateaux_differential(
    P_o: AtomicMeasure,
    P: AtomicMeasure,
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    multipliers,
    schemes,
) -> float:
    """Directional derivative of the Lagrangian at P_o toward P, in bits.

    Computed as ∫ φ dP - ∫ φ dP_o with φ(x) = i(x) - Σ γ_i g_i(x), where
    the information density i is evaluated against P_o's output law. At an
    optimum this is nonpositive for every feasible P.
    """
    laws = info.output_law_tables(P_o, ch, schemes)
    phi_P = info.information_profile(P.coords, P_o, ch, r_weights, schemes, laws=laws)
    phi_P -= _gamma_dot_g(spec, multipliers, P.locations)
    phi_Po = info.information_profile(P_o.coords, P_o, ch, r_weights, schemes, laws=laws)
    phi_Po -= _gamma_dot_g(spec, multipliers, P_o.locations)
    return float(np.sum(P.weights * phi_P)) - float(np.sum(P_o.weights * phi_Po))


def refine_support(
    P: AtomicMeasure,
    rho_scan: kkt.ResidualScan,
    cfg: SolverConfig,
    mirror: bool = False,
) -> AtomicMeasure:
    """Insert an atom at the scan's worst violation; mirrored when requested.

    No-op when the scan shows no violation beyond kkt_tol. New atoms get
    weight `insert_weight` before renormalization; the result is pruned so
    an insertion at an existing location merges instead of duplicating.
    """
    if rho_scan.max_off <= cfg.kkt_tol:
        return P
    x_new = [rho_scan.argmax_x]
    if mirror and abs(rho_scan.argmax_x) > cfg.merge_radius:
        x_new.append(-rho_scan.argmax_x)
    coords = np.concatenate([P.coords, np.array(x_new)])
    weights = np.concatenate(
        [P.weights * (1.0 - cfg.insert_weight * len(x_new)),
         np.full(len(x_new), cfg.insert_weight)]
    )
    merged = _accumulate_duplicates(coords, weights)
    return prune(merged, cfg.weight_tol, cfg.merge_radius)


def _accumulate_duplicates(coords: np.ndarray, weights: np.ndarray) -> AtomicMeasure:
    """Build a sorted measure from possibly exactly-coincident 1-d atoms."""
    uniq, inv = np.unique(coords, return_inverse=True)
    w = np.zeros(uniq.shape[0])
    np.add.at(w, inv, weights)
    return AtomicMeasure.normalized(uniq.reshape(-1, 1), w)


def _symmetrize(P: AtomicMeasure, merge_radius: float) -> AtomicMeasure:
    """Average a measure with its reflection and merge mirrored pairs."""
    coords = np.concatenate([P.coords, -P.coords])
    weights = np.concatenate([P.weights, P.weights]) * 0.5
    stacked = _accumulate_duplicates(coords, weights)
    return prune(stacked, 0.0, max(merge_radius, 1e-12))


def _clamp_domain(P: AtomicMeasure, lo: float, hi: float) -> AtomicMeasure:
    """Clip atoms into [lo, hi]; merge centroids can overshoot by an ulp."""
    clipped = np.clip(P.coords, lo, hi)
    if np.array_equal(clipped, P.coords):
        return P
    return _accumulate_duplicates(clipped, P.weights)


def _is_symmetric_problem(ch: MarginalChannel, spec: ConstraintSpec, lo, hi) -> bool:
    if not ch.kernel.symmetric:
        return False
    if abs(lo + hi) > 1e-12 * max(1.0, abs(hi)):
        return False
    return all(g.even for g in spec.functions)


def _move_locations(P, ch, r, spec, multipliers, schemes, cfg, lo, hi):
    """Joint field-ascent passes over atom locations with backtracking."""
    coords = P.coords.copy()
    weights = P.weights
    for _ in range(cfg.location_passes):
        P_cur = AtomicMeasure(coords, weights)
        fields = _residual_fields(P_cur, ch, r, spec, multipliers, schemes)
        if not np.all(np.isfinite(fields)) or float(np.max(np.abs(fields))) < 1e-12:
            break
        base = lagrangian(P_cur, ch, r, spec, multipliers, schemes)
        step = cfg.location_step
        moved = False
        for _halving in range(20):
            cand = np.clip(coords + step * fields, lo, hi)
            if np.unique(cand).shape[0] < cand.shape[0]:
                step *= 0.5
                continue
            trial = AtomicMeasure(cand, weights)
            val = lagrangian(trial, ch, r, spec, multipliers, schemes)
            if val >= base - 1e-12:
                moved = val > base
                coords = cand
                break
            step *= 0.5
        if not moved:
            break
    return AtomicMeasure(coords, weights)


def _fuse_close_pairs(P, ch, r, spec, multipliers, schemes, lo, hi):
    """Fuse adjacent atom pairs into their centroid when it does not hurt.

    Gradient moves shrink the gap between two atoms straddling a residual
    maximum only linearly, so a split pair can linger for many passes.
    Replacing such a pair by its mass-weighted centroid is accepted
    whenever the Lagrangian does not decrease; the certificate polices
    any fusion that was too eager.
    """
    max_trials = 6
    changed = True
    while changed and P.n_atoms > 1:
        changed = False
        coords = P.coords
        order = np.argsort(coords)
        seps = np.diff(coords[order])
        for k in np.argsort(seps)[:max_trials]:
            i, j = order[k], order[k + 1]
            w = P.weights
            wij = w[i] + w[j]
            centroid = (w[i] * coords[i] + w[j] * coords[j]) / wij
            new_coords = np.delete(coords, [i, j])
            new_w = np.delete(w, [i, j])
            if np.any(np.abs(new_coords - centroid) < 1e-15):
                continue
            cand = AtomicMeasure.normalized(
                np.append(new_coords, centroid), np.append(new_w, wij)
            )
            base = lagrangian(P, ch, r, spec, multipliers, schemes)
            val = lagrangian(cand, ch, r, spec, multipliers, schemes)
            if val >= base - 1e-12:
                P = cand
                changed = True
                break
    return P


def solve(
    ch: MarginalChannel,
    r_weights,
    spec: ConstraintSpec,
    cfg: SolverConfig,
) -> CapacitySolution:
    """Compute capacity and a certified capacity-achieving measure.

    The outer loop alternates weight fitting (with multiplier search),
    pruning, residual-based trimming, location moves, and residual-driven
    atom insertion, and stops only when the certificate holds or the
    iteration budget runs out. Non-convergence returns the best iterate
    with certified=False in the attached report.
    """
    r = _resolve_r(ch, r_weights)
    lo, hi, count = cfg.initial_grid
    peak = spec.peak_limit()
    if peak is not None:
        lo, hi = max(lo, -peak), min(hi, peak)
        if not lo < hi:
            raise ValueError("peak constraint leaves an empty domain")
    sym = cfg.symmetrize and _is_symmetric_problem(ch, spec, lo, hi)

    coords = np.linspace(lo, hi, count)
    probe = AtomicMeasure.uniform(np.unique(np.concatenate([coords, [lo, hi]])))
    schemes = build_output_scheme(ch, probe, cfg.tail_sigmas, cfg.quad_points)

    weights = None
    gamma = np.zeros(spec.n_constraints)
    trace: list[dict] = []
    best = None
    stall = 0

    def fit(coords, weights0, decay=True):
        return multiplier_search(
            coords, ch, r, spec, cfg,
            schemes=schemes, weights0=weights0, gamma_hint=gamma, decay=decay,
        )

    def make_scan(P, gamma):
        C_est = info.mutual_information(P, ch, r, schemes).bits
        scan = kkt.residual_scan(
            P, gamma, C_est, ch, r, spec, (lo, hi), cfg.verify_points, schemes
        )
        return C_est, scan

    def note(P, gamma, C_est, scan):
        nonlocal best, stall
        worst = max(scan.max_on, scan.max_off)
        slack = gamma * (spec.moments(P) - spec.bounds) if gamma.size else np.zeros(0)
        slack_bad = bool(np.any(np.abs(slack) > kkt.SLACKNESS_TOL))
        key = (slack_bad, worst)
        if best is None or key < best[0]:
            best = (key, P, gamma.copy(), C_est)
            stall = 0
        else:
            stall += 1
        return worst <= cfg.kkt_tol and not slack_bad

    P = None
    for outer in range(cfg.max_outer_iters):
        gamma, P = fit(coords, weights)

        # Weight-floor pruning; refit if it perturbed feasibility.
        pruned = prune(P, cfg.weight_tol, cfg.merge_radius)
        if pruned is not P:
            P = pruned
            ok, _ = is_feasible(P, spec)
            if not ok:
                gamma, P = fit(P.coords, P.weights)
        if sym:
            symd = _symmetrize(P, cfg.merge_radius)
            same = (
                symd.n_atoms == P.n_atoms
                and np.array_equal(symd.coords, P.coords)
                and np.allclose(symd.weights, P.weights, rtol=0.0, atol=1e-7)
            )
            if not same:
                P = _clamp_domain(symd, lo, hi)
                gamma, P = fit(P.coords, P.weights, decay=False)

        C_est, scan = make_scan(P, gamma)
        worst = max(scan.max_on, scan.max_off)
        lag = C_est - float(np.sum(gamma * (spec.moments(P) - spec.bounds))) if gamma.size else C_est
        trace.append(
            {
                "lagrangian_bits": lag,
                "max_residual_bits": worst,
                "atoms": P.n_atoms,
            }
        )
        if note(P, gamma, C_est, scan):
            break
        if stall >= 8:
            break

        # Location refinement and pair fusion, judged by a fresh scan.
        if cfg.move_locations and ch.kernel.density_dx is not None:
            moved = _move_locations(P, ch, r, spec, gamma, schemes, cfg, lo, hi)
            moved = prune(moved, 0.0, cfg.merge_radius)
            moved = _fuse_close_pairs(moved, ch, r, spec, gamma, schemes, lo, hi)
            if sym:
                moved = _symmetrize(moved, cfg.merge_radius)
            moved = _clamp_domain(moved, lo, hi)
            if not np.array_equal(moved.coords, P.coords):
                gamma2, P2 = fit(moved.coords, moved.weights, decay=False)
                C2, scan2 = make_scan(P2, gamma2)
                gamma, P, C_est, scan = gamma2, P2, C2, scan2
                if note(P, gamma, C_est, scan):
                    break

        if not cfg.grow_support:
            break
        grown = refine_support(P, scan, cfg, mirror=sym)
        coords, weights = grown.coords, grown.weights

    _, P, gamma, C_est = best
    capacity = info.mutual_information(P, ch, r, schemes).bits
    report = kkt.verify(
        P, gamma, capacity, ch, r, spec,
        (lo, hi, cfg.verify_points), cfg.kkt_tol, schemes=schemes,
    )
    support = kkt.support_report(P, report)
    return CapacitySolution(
        measure=P,
        capacity_bits=capacity,
        multipliers=gamma,
        kkt=report,
        trace=trace,
        support=support,
    )
