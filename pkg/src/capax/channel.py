"""State-dependent channel kernels and receiver side information.

A channel is specified by a conditional output density density(y | x, s)
with respect to Lebesgue measure on R, a finite law over states s, and a
side-information model assigning to each observable v a conditional state
law. Marginalizing the state kernel through that conditional law yields
the effective channel densities f_v(y | x) the information functionals
integrate against.

All objects are immutable; density evaluation is pure and broadcasts over
numpy arrays of y and x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_ATOL = 1e-12


class ChannelConfigError(ValueError):
    """Raised for structurally invalid channel / side-information models."""


def _gauss(y, mean, var):
    y = np.asarray(y, dtype=float)
    return np.exp(-0.5 * (y - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def _check_distribution(weights: np.ndarray, what: str) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] == 0:
        raise ChannelConfigError(f"{what} must have nonempty support")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ChannelConfigError(f"{what} weights must be finite and nonnegative")
    if abs(float(np.sum(w)) - 1.0) > PROB_ATOL:
        raise ChannelConfigError(f"{what} weights must sum to 1 within {PROB_ATOL}")
    w = w.copy()
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class StateModel:
    """Finite (or externally quadrature-discretized) law of the channel state."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        w = _check_distribution(self.weights, "state")
        if vals.shape[0] != w.shape[0]:
            raise ChannelConfigError("state values and weights must have equal length")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "weights", w)

    @property
    def n_states(self) -> int:
        return self.values.shape[0]


def trivial_state() -> StateModel:
    """Single-state model for channels without a fading state."""
    return StateModel(np.zeros(1), np.ones(1))


@dataclass(frozen=True)
class SideInfoModel:
    """Receiver side information: symbols v, their law R, and per-v state laws Q_v."""

    values: tuple
    r_weights: np.ndarray
    q_given_v: tuple[StateModel, ...]

    def __post_init__(self):
        values = tuple(self.values)
        r = _check_distribution(self.r_weights, "side-information")
        q = tuple(self.q_given_v)
        if not (len(values) == r.shape[0] == len(q)):
            raise ChannelConfigError(
                "side-information values, weights, and conditional laws must align"
            )
        for qv in q:
            if not isinstance(qv, StateModel):
                raise ChannelConfigError("each conditional state law must be a StateModel")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "r_weights", r)
        object.__setattr__(self, "q_given_v", q)

    @property
    def n_side(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ChannelKernel:
    """Conditional output density of the physical channel.

    Fields
    ------
    density : callable (y, x, s) -> array
        Density of the output law given input x and state s, with respect
        to Lebesgue measure on R. Must broadcast over numpy arrays of y
        and x; s is a scalar state value.
    span : callable (x, s, tail_sigmas) -> (lo, hi)
        Interval containing all but a negligible tail of density(.|x, s),
        used to truncate output quadrature.
    density_dx : callable or None
        Partial derivative of density with respect to x, same broadcasting
        contract. Optional; a finite-difference fallback exists.
    symmetric : bool
        True when density(y|x, s) == density(-y|-x, s) for all states, so
        the solver may exploit the x -> -x symmetry.
    """

    density: Callable
    span: Callable
    density_dx: Callable | None = None
    symmetric: bool = False
    reference: str = "lebesgue"
    label: str = "custom"


@dataclass(frozen=True)
class MarginalChannel:
    """State-marginalized channel: f_v(y|x) = Σ_s Q_v(s) density(y|x, s)."""

    kernel: ChannelKernel
    side_info: SideInfoModel

    @property
    def n_side(self) -> int:
        return self.side_info.n_side

    @property
    def r_weights(self) -> np.ndarray:
        return self.side_info.r_weights

    def f_v(self, y, x, v: int):
        """Effective conditional density for side-information index v."""
        qv = self.side_info.q_given_v[v]
        acc = 0.0
        for s_val, s_w in zip(qv.values, qv.weights):
            acc = acc + s_w * self.kernel.density(y, x, s_val)
        return acc

    def f_v_dx(self, y, x, v: int):
        """d/dx of f_v; requires the kernel's analytic derivative."""
        if self.kernel.density_dx is None:
            raise ValueError("kernel has no analytic d/dx density")
        qv = self.side_info.q_given_v[v]
        acc = 0.0
        for s_val, s_w in zip(qv.values, qv.weights):
            acc = acc + s_w * self.kernel.density_dx(y, x, s_val)
        return acc

    def span_v(self, x: float, v: int, tail_sigmas: float) -> tuple[float, float]:
        """Covering interval for f_v(.|x): union of per-state spans."""
        qv = self.side_info.q_given_v[v]
        lows, highs = [], []
        for s_val in qv.values:
            lo, hi = self.kernel.span(float(x), float(s_val), tail_sigmas)
            lows.append(lo)
            highs.append(hi)
        return min(lows), max(highs)


def marginalize(kernel: ChannelKernel, side_info: SideInfoModel) -> MarginalChannel:
    """Bundle a kernel with a side-information model into the effective channel."""
    if side_info.n_side == 0:
        raise ChannelConfigError("side-information model has empty support")
    for qv in side_info.q_given_v:
        if qv.n_states == 0:
            raise ChannelConfigError("a conditional state law has empty support")
    return MarginalChannel(kernel=kernel, side_info=side_info)


# -- built-in channel families -----------------------------------------------

def make_awgn(noise_std: float) -> tuple[ChannelKernel, SideInfoModel]:
    """Additive Gaussian noise channel; the state is ignored."""
    if noise_std <= 0:
        raise ValueError(f"noise_std must be positive, got {noise_std!r}")
    sigma = float(noise_std)
    var = sigma * sigma

    def density(y, x, s):
        return _gauss(y, x, var)

    def density_dx(y, x, s):
        return _gauss(y, x, var) * (np.asarray(y, dtype=float) - x) / var

    def span(x, s, tail_sigmas):
        return (x - tail_sigmas * sigma, x + tail_sigmas * sigma)

    kernel = ChannelKernel(
        density=density,
        span=span,
        density_dx=density_dx,
        symmetric=True,
        label=f"awgn(noise_std={sigma})",
    )
    return kernel, make_side_info("none", trivial_state())


def make_finite_state_fading(
    gains: Sequence[float], probs: Sequence[float], noise_std: float
) -> tuple[ChannelKernel, StateModel]:
    """Gaussian channel with a finite multiplicative fading state: y = s*x + noise."""
    gains_arr = np.asarray(gains, dtype=float).reshape(-1)
    probs_arr = np.asarray(probs, dtype=float).reshape(-1)
    if gains_arr.shape[0] != probs_arr.shape[0]:
        raise ValueError(
            f"{gains_arr.shape[0]} gains but {probs_arr.shape[0]} probabilities"
        )
    if noise_std <= 0:
        raise ValueError(f"noise_std must be positive, got {noise_std!r}")
    state = StateModel(gains_arr, probs_arr)
    sigma = float(noise_std)
    var = sigma * sigma

    def density(y, x, s):
        return _gauss(y, s * x, var)

    def density_dx(y, x, s):
        return _gauss(y, s * x, var) * (np.asarray(y, dtype=float) - s * x) * s / var

    def span(x, s, tail_sigmas):
        m = s * x
        return (m - tail_sigmas * sigma, m + tail_sigmas * sigma)

    kernel = ChannelKernel(
        density=density,
        span=span,
        density_dx=density_dx,
        symmetric=True,
        label=f"finite_state_fading(noise_std={sigma})",
    )
    return kernel, state


def make_rayleigh_surrogate(fade_std: float, noise_std: float) -> ChannelKernel:
    """Real-valued noncoherent-fading surrogate: y ~ N(0, noise_std^2 + x^2 fade_std^2)."""
    if fade_std <= 0 or noise_std <= 0:
        raise ValueError("fade_std and noise_std must both be positive")
    fv = float(fade_std) ** 2
    nv = float(noise_std) ** 2

    def _var(x):
        return nv + fv * np.asarray(x, dtype=float) ** 2

    def density(y, x, s):
        var = _var(x)
        y = np.asarray(y, dtype=float)
        return np.exp(-0.5 * y * y / var) / np.sqrt(2.0 * np.pi * var)

    def density_dx(y, x, s):
        var = _var(x)
        y = np.asarray(y, dtype=float)
        base = np.exp(-0.5 * y * y / var) / np.sqrt(2.0 * np.pi * var)
        return base * (y * y / var - 1.0) * (np.asarray(x, dtype=float) * fv / var)

    def span(x, s, tail_sigmas):
        std = float(np.sqrt(nv + fv * x * x))
        return (-tail_sigmas * std, tail_sigmas * std)

    return ChannelKernel(
        density=density,
        span=span,
        density_dx=density_dx,
        symmetric=True,
        label=f"rayleigh_surrogate(fade_std={fade_std}, noise_std={noise_std})",
    )


def make_side_info(kind: str, state: StateModel, bins: int | None = None) -> SideInfoModel:
    """Build a side-information model over a finite state law.

    kind = "none": a single observable carrying the unconditional state law.
    kind = "full": one observable per state, each with a point-mass state law.
    kind = "quantized": `bins` contiguous cells of the (value-sorted) state
    support; each observable carries the state law conditioned on its cell.
    """
    if kind == "none":
        return SideInfoModel(values=(0,), r_weights=np.ones(1), q_given_v=(state,))
    if kind == "full":
        values = tuple(float(v) for v in state.values)
        qs = tuple(
            StateModel(np.array([v]), np.ones(1)) for v in state.values
        )
        return SideInfoModel(values=values, r_weights=state.weights, q_given_v=qs)
    if kind == "quantized":
        if bins is None or bins < 1:
            raise ChannelConfigError("quantized side information needs bins >= 1")
        if bins == 1:
            return SideInfoModel(values=(0,), r_weights=np.ones(1), q_given_v=(state,))
        order = np.argsort(state.values, kind="stable")
        cells = np.array_split(order, bins)
        if any(len(c) == 0 for c in cells):
            raise ChannelConfigError(
                f"quantized partition with {bins} bins leaves an empty cell "
                f"for {state.n_states} states"
            )
        r = []
        qs = []
        for cell in cells:
            mass = float(np.sum(state.weights[cell]))
            if mass <= 0.0:
                raise ChannelConfigError("quantized partition produced a zero-mass cell")
            r.append(mass)
            qs.append(StateModel(state.values[cell], state.weights[cell] / mass))
        return SideInfoModel(
            values=tuple(range(len(cells))),
            r_weights=np.array(r),
            q_given_v=tuple(qs),
        )
    raise ChannelConfigError(f"unknown side-information kind {kind!r}")
