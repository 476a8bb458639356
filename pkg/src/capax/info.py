"""Information functionals: divergence, output laws, information density.

Everything here reduces to integrals of f log(f/q) against the output
reference measure, where f is a conditional channel density and q an
output mixture law. Integrands are computed in nats on quadrature nodes
and converted to bits at return.

Division by the output law is guarded: q is clamped below at 1e-300 so
tails cannot overflow, and an absolute-continuity failure is signalled
only when the conditional density exceeds 1e-12 where the output law is
below 1e-250. Built-in Gaussian-mixture channels are strictly positive on
their spans and never trigger the signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import MarginalChannel
from .measure import AtomicMeasure
from .quadrature import QuadratureScheme

LN2 = math.log(2.0)
SANDWICH_GAP_BITS = 2.0 / (math.e * LN2)

_DENSITY_CLAMP = 1e-300
_SIGNAL_NUM = 1e-12
_SIGNAL_DEN = 1e-250

_CHUNK = 512


class AbsoluteContinuityError(ArithmeticError):
    """Signalled when a conditional density escapes the output law's support."""

    def __init__(self, x, v, y):
        self.x = x
        self.v = v
        self.y = y
        super().__init__(
            f"infinite divergence: conditional density at x={x!r} (side info index {v}) "
            f"is positive where the output law vanishes, near y={y!r}"
        )


@dataclass(frozen=True)
class InfoValue:
    """An information quantity in bits with an explicit finiteness flag."""

    bits: float
    finite: bool = True


def relative_entropy_discrete(p, q) -> InfoValue:
    """Σ p_i log2(p_i / q_i) with 0 log 0 = 0; infinite iff p puts mass where q has none."""
    p = np.asarray(p, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float).reshape(-1)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    for name, arr in (("p", p), ("q", q)):
        if np.any(arr < 0) or abs(float(np.sum(arr)) - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a probability vector")
    if np.any((p > 0) & (q == 0)):
        return InfoValue(bits=math.inf, finite=False)
    mask = p > 0
    ps = p[mask]
    terms = ps * (np.log(ps) - np.log(q[mask]))
    return InfoValue(bits=float(np.sum(terms)) / LN2, finite=True)


def _as_scheme_list(schemes, n_side: int) -> list[QuadratureScheme]:
    if isinstance(schemes, QuadratureScheme):
        return [schemes] * n_side
    schemes = list(schemes)
    if len(schemes) != n_side:
        raise ValueError(
            f"{len(schemes)} schemes for {n_side} side-information symbols"
        )
    return schemes


def _resolve_r(ch: MarginalChannel, r_weights) -> np.ndarray:
    if r_weights is None:
        return ch.r_weights
    r = np.asarray(r_weights, dtype=float).reshape(-1)
    if r.shape[0] != ch.n_side:
        raise ValueError(
            f"{r.shape[0]} side-information weights for {ch.n_side} symbols"
        )
    return r


def output_law_tables(
    P: AtomicMeasure, ch: MarginalChannel, schemes
) -> list[np.ndarray]:
    """Output mixture law q_v evaluated on each scheme's nodes, one array per v."""
    scheme_list = _as_scheme_list(schemes, ch.n_side)
    coords = P.coords
    tables = []
    for v, scheme in enumerate(scheme_list):
        F = ch.f_v(scheme.nodes[None, :], coords[:, None], v)
        tables.append(np.einsum("j,jy->y", P.weights, F))
    return tables


def output_density(P: AtomicMeasure, ch: MarginalChannel, v: int):
    """The output mixture density q_v(y) = Σ_j p_j f_v(y | x_j) as a callable."""
    coords = P.coords
    weights = P.weights

    def q(y):
        y_arr = np.asarray(y, dtype=float)
        flat = np.atleast_1d(y_arr).reshape(-1)
        F = ch.f_v(flat[None, :], coords[:, None], v)
        out = np.einsum("j,jy->y", weights, F)
        return float(out[0]) if y_arr.ndim == 0 else out.reshape(y_arr.shape)

    return q


def _divergence_rows(
    F: np.ndarray, q: np.ndarray, w: np.ndarray, xs, v: int, nodes=None
) -> np.ndarray:
    """Row-wise ∫ f log(f/q) for a stack of conditional densities, in nats."""
    signal = (F > _SIGNAL_NUM) & (q[None, :] < _SIGNAL_DEN)
    if np.any(signal):
        j, k = np.unravel_index(int(np.argmax(signal)), signal.shape)
        x_bad = float(xs[j]) if xs is not None else None
        y_bad = float(nodes[k]) if nodes is not None else None
        raise AbsoluteContinuityError(x=x_bad, v=v, y=y_bad)
    log_q = np.log(np.maximum(q, _DENSITY_CLAMP))
    log_f = np.log(np.maximum(F, _DENSITY_CLAMP))
    terms = np.where(F > 0.0, F * (log_f - log_q[None, :]), 0.0)
    return np.einsum("jy,y->j", terms, w)


def _abs_divergence_rows(F: np.ndarray, q: np.ndarray, w: np.ndarray) -> np.ndarray:
    log_q = np.log(np.maximum(q, _DENSITY_CLAMP))
    log_f = np.log(np.maximum(F, _DENSITY_CLAMP))
    terms = np.where(F > 0.0, F * np.abs(log_f - log_q[None, :]), 0.0)
    return np.einsum("jy,y->j", terms, w)


def information_profile(
    xs,
    P: AtomicMeasure,
    ch: MarginalChannel,
    r_weights=None,
    schemes=None,
    laws: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Information density i(x) = Σ_v R(v) D(f_v(.|x) || q_v) at each probe x, in bits.

    The output law is computed once per side-information symbol and shared
    across probes; probes are evaluated in chunks to bound memory.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    r = _resolve_r(ch, r_weights)
    scheme_list = _as_scheme_list(schemes, ch.n_side)
    if laws is None:
        laws = output_law_tables(P, ch, scheme_list)
    out = np.zeros(xs.shape[0])
    for v, scheme in enumerate(scheme_list):
        if r[v] == 0.0:
            continue
        q = laws[v]
        for start in range(0, xs.shape[0], _CHUNK):
            chunk = xs[start : start + _CHUNK]
            F = ch.f_v(scheme.nodes[None, :], chunk[:, None], v)
            d = _divergence_rows(F, q, scheme.weights, chunk, v, scheme.nodes)
            out[start : start + chunk.shape[0]] += r[v] * d
    return out / LN2


def divergence_at(
    x, P: AtomicMeasure, ch: MarginalChannel, v: int, scheme: QuadratureScheme
) -> float:
    """D(f_v(.|x) || q_v) in bits by quadrature on the given scheme."""
    x = float(np.asarray(x).reshape(-1)[0]) if np.ndim(x) else float(x)
    q = output_law_tables(P, ch, [scheme] * ch.n_side)[v]
    F = ch.f_v(scheme.nodes[None, :], np.array([[x]]), v)
    d = _divergence_rows(F, q, scheme.weights, np.array([x]), v, scheme.nodes)
    return float(d[0]) / LN2


def information_density(
    x, P: AtomicMeasure, ch: MarginalChannel, r_weights=None, schemes=None
) -> float:
    """Side-information average Σ_v R(v) divergence_at(x, ., v), in bits."""
    x = float(np.asarray(x).reshape(-1)[0]) if np.ndim(x) else float(x)
    return float(information_profile(np.array([x]), P, ch, r_weights, schemes)[0])


def mutual_information(
    P: AtomicMeasure, ch: MarginalChannel, r_weights=None, schemes=None
) -> InfoValue:
    """I(P) = Σ_j p_j i(x_j) in bits."""
    profile = information_profile(P.coords, P, ch, r_weights, schemes)
    return InfoValue(bits=float(np.sum(P.weights * profile)), finite=True)


def abs_mutual_information(
    P: AtomicMeasure, ch: MarginalChannel, r_weights=None, schemes=None
) -> float:
    """Same triple integral as mutual information with |log| inside, in bits."""
    r = _resolve_r(ch, r_weights)
    scheme_list = _as_scheme_list(schemes, ch.n_side)
    laws = output_law_tables(P, ch, scheme_list)
    coords = P.coords
    total = 0.0
    for v, scheme in enumerate(scheme_list):
        if r[v] == 0.0:
            continue
        F = ch.f_v(scheme.nodes[None, :], coords[:, None], v)
        d = _abs_divergence_rows(F, laws[v], scheme.weights)
        total += r[v] * float(np.sum(P.weights * d))
    return total / LN2
