"""Output-space integration: composite Simpson rules on truncated spans.

Every information functional reduces to 1-d integrals over the output
alphabet. Conditional densities of the built-in channels are smooth
Gaussian mixtures, so a composite Simpson rule on a tail-truncated
interval integrates them to near machine precision.

Natural logs are used throughout the integrand code; conversion to bits
happens only at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measure import AtomicMeasure
from .channel import MarginalChannel

DEFAULT_POINTS = 1025
DEFAULT_TAIL_SIGMAS = 8.0


class QuadratureError(ArithmeticError):
    """Raised when an integrand is non-finite at a quadrature node."""


@dataclass(frozen=True)
class QuadratureScheme:
    """Nodes, positive weights, and the truncation interval they tile."""

    nodes: np.ndarray
    weights: np.ndarray
    span: tuple[float, float]

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if nodes.shape[0] != weights.shape[0]:
            raise ValueError("nodes and weights must have equal length")
        if nodes.shape[0] < 3:
            raise ValueError("a scheme needs at least 3 nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be positive and finite")
        nodes = nodes.copy()
        weights = weights.copy()
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "span", (float(self.span[0]), float(self.span[1])))

    @property
    def n_points(self) -> int:
        return self.nodes.shape[0]


def simpson_scheme(lo: float, hi: float, points: int = DEFAULT_POINTS) -> QuadratureScheme:
    """Composite Simpson rule on [lo, hi].

    `points` must be at least 16; even counts are rounded up by one so the
    number of subintervals is even, as Simpson's rule requires.
    """
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise ValueError(f"invalid span ({lo!r}, {hi!r})")
    if points < 16:
        raise ValueError(f"points must be >= 16, got {points}")
    n = int(points)
    if n % 2 == 0:
        n += 1
    nodes = np.linspace(lo, hi, n)
    h = (hi - lo) / (n - 1)
    w = np.full(n, 2.0)
    w[1::2] = 4.0
    w[0] = 1.0
    w[-1] = 1.0
    w *= h / 3.0
    return QuadratureScheme(nodes=nodes, weights=w, span=(float(lo), float(hi)))


def build_output_scheme(
    channel: MarginalChannel,
    P: AtomicMeasure,
    tail_sigmas: float = DEFAULT_TAIL_SIGMAS,
    points: int = DEFAULT_POINTS,
) -> QuadratureScheme:
    """Simpson scheme spanning the conditional densities of every atom of P.

    The span is the union over atoms and side-information symbols of the
    kernel-reported covering intervals at `tail_sigmas` tail widths.
    """
    if tail_sigmas < 4:
        raise ValueError(f"tail_sigmas must be >= 4, got {tail_sigmas!r}")
    if P.dim != 1:
        raise ValueError("output schemes are built for scalar input alphabets")
    lo = np.inf
    hi = -np.inf
    for x in P.coords:
        for v in range(channel.n_side):
            a, b = channel.span_v(float(x), v, tail_sigmas)
            lo = min(lo, a)
            hi = max(hi, b)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError(f"non-finite output span ({lo!r}, {hi!r})")
    return simpson_scheme(lo, hi, points)


def integrate(f, scheme: QuadratureScheme) -> float:
    """Σ_k w_k f(y_k). Accepts vectorized or scalar callables."""
    try:
        values = np.asarray(f(scheme.nodes), dtype=float)
    except Exception:
        values = None
    if values is None or values.shape != scheme.nodes.shape:
        values = np.array([float(f(y)) for y in scheme.nodes])
    bad = ~np.isfinite(values)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise QuadratureError(
            f"integrand is {values[k]!r} at node y={scheme.nodes[k]!r} (index {k})"
        )
    return float(np.sum(scheme.weights * values))
