"""State-space machinery: bilinear discretization, linear and selective scans.

The continuous model h' = A h + B x, y = C h is discretized with the
bilinear (Tustin) transform

    A_bar = (I - dt/2 A)^-1 (I + dt/2 A),
    B_bar = (I - dt/2 A)^-1 dt B,
    C_bar = C,

which maps the left half-plane strictly inside the unit circle and matches
exp(dt A) to third order locally. A may be dense (N, N) or diagonal (N,).
The selective variant recomputes (dt_k, B_k, C_k) from each input through
small projections, with softplus keeping dt_k positive.

Reverse-mode gradients through the recurrence are derived by hand here; the
training pipeline wraps :func:`linear_recurrence` as an autodiff primitive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, PreconditionError, SingularMatrixError


def _as_state_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (1, 2) or (a.ndim == 2 and a.shape[0] != a.shape[1]):
        raise InvalidArgumentError("A must be (N, N) or diagonal (N,)")
    return a


@dataclass(frozen=True)
class SSMParams:
    """Continuous parameters (A, B, C, optional feedthrough) plus step size."""

    A: np.ndarray  # (N, N) dense or (N,) diagonal
    B: np.ndarray  # (N,)
    C: np.ndarray  # (N,)
    delta: float
    feedthrough: float | None = None  # excluded by default

    def __post_init__(self):
        a = _as_state_matrix(self.A)
        b = np.asarray(self.B, dtype=np.float64).ravel()
        c = np.asarray(self.C, dtype=np.float64).ravel()
        n = a.shape[0]
        if b.shape != (n,) or c.shape != (n,):
            raise InvalidArgumentError("B and C must be length-N vectors")
        if not self.delta > 0:
            raise InvalidArgumentError("delta must be > 0")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "C", c)

    @property
    def state_size(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscreteSSM:
    A_bar: np.ndarray  # (N, N) or (N,)
    B_bar: np.ndarray  # (N,)
    C_bar: np.ndarray  # (N,)
    D_bar: float | None = None

    def __post_init__(self):
        for name in ("A_bar", "B_bar", "C_bar"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    @property
    def diagonal(self) -> bool:
        return self.A_bar.ndim == 1

    @property
    def state_size(self) -> int:
        return self.A_bar.shape[0]


def discretize(params: SSMParams) -> DiscreteSSM:
    """Bilinear-transform discretization of the continuous parameters."""
    a, dt = params.A, params.delta
    if a.ndim == 1:
        denom = 1.0 - 0.5 * dt * a
        if np.any(denom == 0.0):
            raise SingularMatrixError("I - dt/2 A is singular")
        a_bar = (1.0 + 0.5 * dt * a) / denom
        b_bar = dt * params.B / denom
    else:
        n = a.shape[0]
        m = np.eye(n) - 0.5 * dt * a
        try:
            a_bar = np.linalg.solve(m, np.eye(n) + 0.5 * dt * a)
            b_bar = np.linalg.solve(m, dt * params.B)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("I - dt/2 A is singular") from exc
    return DiscreteSSM(a_bar, b_bar, params.C.copy(), params.feedthrough)


def _check_inputs(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 1 or xs.shape[0] == 0:
        raise InvalidArgumentError("inputs must be a non-empty 1-D sequence")
    return xs


def _step_state(dssm: DiscreteSSM, h: np.ndarray, x: float) -> np.ndarray:
    if dssm.diagonal:
        return dssm.A_bar * h + dssm.B_bar * x
    return dssm.A_bar @ h + dssm.B_bar * x


def scan(dssm: DiscreteSSM, inputs) -> np.ndarray:
    """Run the discrete recurrence h_k = A_bar h_{k-1} + B_bar x_k from h_0 = 0."""
    ys, _ = scan_with_states(dssm, inputs)
    return ys


def scan_with_states(dssm: DiscreteSSM, inputs):
    """Like :func:`scan` but also returns the state trajectory for the backward pass."""
    xs = _check_inputs(inputs)
    n = dssm.state_size
    states = np.empty((xs.shape[0], n))
    h = np.zeros(n)
    for k, x in enumerate(xs):
        h = _step_state(dssm, h, x)
        states[k] = h
    ys = states @ dssm.C_bar
    if dssm.D_bar is not None:
        ys = ys + dssm.D_bar * xs
    return ys, states


@dataclass(frozen=True)
class ScanGradients:
    a_bar: np.ndarray
    b_bar: np.ndarray
    c_bar: np.ndarray
    inputs: np.ndarray


def scan_backward(dssm: DiscreteSSM, inputs, output_gradients, states) -> ScanGradients:
    """Reverse-mode gradients of a scalar loss through the recurrence.

    ``states`` must come from :func:`scan_with_states` on the same inputs.
    """
    if states is None:
        raise PreconditionError("scan_backward needs the cached forward states")
    xs = _check_inputs(inputs)
    dys = np.asarray(output_gradients, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    n = dssm.state_size
    if dys.shape != xs.shape or states.shape != (xs.shape[0], n):
        raise InvalidArgumentError("gradient/state shapes do not match inputs")

    d_c = dys @ states
    d_a = np.zeros_like(dssm.A_bar)
    d_b = np.zeros(n)
    d_x = np.zeros_like(xs)
    g = np.zeros(n)  # dLoss/dh_k, accumulated backwards
    for k in range(xs.shape[0] - 1, -1, -1):
        g = g + dys[k] * dssm.C_bar
        prev = states[k - 1] if k > 0 else np.zeros(n)
        if dssm.diagonal:
            d_a += g * prev
        else:
            d_a += np.outer(g, prev)
        d_b += g * xs[k]
        d_x[k] = g @ dssm.B_bar
        g = dssm.A_bar * g if dssm.diagonal else dssm.A_bar.T @ g
    if dssm.D_bar is not None:
        d_x = d_x + dssm.D_bar * dys
    return ScanGradients(a_bar=d_a, b_bar=d_b, c_bar=d_c, inputs=d_x)


@dataclass(frozen=True)
class SelectiveParams:
    """Per-step projections from the scalar input to (dt_k, B_k, C_k).

    dt_k = softplus(w_delta x_k + b_delta) stays positive; B_k, C_k are
    affine in x_k. Zero weights reduce the model to the time-invariant scan.
    """

    w_delta: float
    b_delta: float
    w_b: np.ndarray  # (N,)
    b_b: np.ndarray  # (N,)
    w_c: np.ndarray  # (N,)
    b_c: np.ndarray  # (N,)

    def __post_init__(self):
        for name in ("w_b", "b_b", "w_c", "b_c"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            object.__setattr__(self, name, arr)
        n = self.w_b.shape[0]
        if any(getattr(self, f).shape != (n,) for f in ("b_b", "w_c", "b_c")):
            raise InvalidArgumentError("projection vectors must share one length")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def selective_scan(sel: SelectiveParams, A, inputs) -> np.ndarray:
    """Input-dependent scan: rediscretize (A, B_k, dt_k) at every step."""
    xs = _check_inputs(inputs)
    deltas = softplus(sel.w_delta * xs + sel.b_delta)
    bs = xs[:, None] * sel.w_b + sel.b_b
    cs = xs[:, None] * sel.w_c + sel.b_c
    return selective_scan_explicit(A, deltas, bs, cs, xs)


def selective_scan_explicit(A, deltas, b_steps, c_steps, inputs) -> np.ndarray:
    """Selective scan with per-step (dt_k, B_k, C_k) given explicitly."""
    xs = _check_inputs(inputs)
    a = _as_state_matrix(A)
    deltas = np.asarray(deltas, dtype=np.float64)
    b_steps = np.asarray(b_steps, dtype=np.float64)
    c_steps = np.asarray(c_steps, dtype=np.float64)
    n, length = a.shape[0], xs.shape[0]
    if deltas.shape != (length,) or np.any(deltas <= 0):
        raise InvalidArgumentError("need one positive dt per step")
    if b_steps.shape != (length, n) or c_steps.shape != (length, n):
        raise InvalidArgumentError("need one (N,) B and C row per step")
    h = np.zeros(n)
    ys = np.empty(length)
    for k in range(length):
        dssm = discretize(SSMParams(a, b_steps[k], c_steps[k], float(deltas[k])))
        h = _step_state(dssm, h, xs[k])
        ys[k] = dssm.C_bar @ h
    return ys


def linear_recurrence(a_bar: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Elementwise recurrence h_k = a_bar_k * h_{k-1} + u_k along axis 0.

    Both arrays share a shape (L, ...); h_0 is zero. This is the vectorized
    core the pipeline's selective blocks run, with the per-step discretized
    coefficients precomputed outside the loop.
    """
    if a_bar.shape != u.shape or a_bar.shape[0] == 0:
        raise InvalidArgumentError("a_bar and u must share a non-empty leading axis")
    out = np.empty_like(u)
    out[0] = u[0]
    for k in range(1, u.shape[0]):
        np.multiply(a_bar[k], out[k - 1], out=out[k])
        out[k] += u[k]
    return out


def linear_recurrence_backward(a_bar: np.ndarray, states: np.ndarray, d_states: np.ndarray):
    """Gradients of :func:`linear_recurrence` w.r.t. a_bar and u."""
    d_a = np.empty_like(a_bar)
    d_u = np.empty_like(a_bar)
    g = np.zeros(a_bar.shape[1:])
    for k in range(a_bar.shape[0] - 1, 0, -1):
        g += d_states[k]
        d_u[k] = g
        np.multiply(g, states[k - 1], out=d_a[k])
        g *= a_bar[k]
    g += d_states[0]
    d_u[0] = g
    d_a[0] = 0.0
    return d_a, d_u


def selective_channel_scan(dt, b_sel, c_sel, a, xs):
    """Fused selective scan over one token sequence, channels in parallel.

    Per step k and channel d the diagonal state a[d] is rediscretized with
    the bilinear transform at dt[k, d], driven by b_sel[k] and read out by
    c_sel[k]. Shapes: dt, xs (L, D); b_sel, c_sel (L, N); a (D, N), a < 0.
    Returns (y, cache) with y (L, D); the cache feeds the backward pass.
    """
    ha = 0.5 * dt[:, :, None] * a
    inv = 1.0 / (1.0 - ha)
    a_bar = (1.0 + ha) * inv
    t1 = (dt[:, :, None] * inv) * b_sel[:, None, :]
    u = t1 * xs[:, :, None]
    states = linear_recurrence(a_bar, u)
    y = np.einsum("ldn,ln->ld", states, c_sel)
    return y, (ha, inv, a_bar, t1, states)


def selective_channel_scan_backward(dt, b_sel, c_sel, a, xs, cache, d_y):
    """Hand-derived reverse pass of :func:`selective_channel_scan`."""
    ha, inv, a_bar, t1, states = cache
    d_c = np.einsum("ldn,ld->ln", states, d_y)
    d_states = d_y[:, :, None] * c_sel[:, None, :]
    d_abar, d_u = linear_recurrence_backward(a_bar, states, d_states)
    d_xs = np.einsum("ldn,ldn->ld", d_u, t1)
    d_t1 = d_u
    d_t1 *= xs[:, :, None]
    dt_inv = dt[:, :, None] * inv
    d_b = np.einsum("ldn,ldn->ln", d_t1, dt_inv)
    d_dtinv = d_t1
    d_dtinv *= b_sel[:, None, :]
    d_dt = np.einsum("ldn,ldn->ld", d_dtinv, inv)
    d_inv = d_dtinv
    d_inv *= dt[:, :, None]
    # a_bar = (1 + ha) * inv and inv = (1 - ha)^-1
    d_ha = d_abar * inv
    ha += 1.0  # reuse buffer: ha now holds (1 + ha)
    d_inv += d_abar * ha
    d_inv *= inv
    d_inv *= inv
    d_ha += d_inv
    d_dt += 0.5 * np.einsum("ldn,dn->ld", d_ha, a)
    d_a = 0.5 * np.einsum("ldn,ld->dn", d_ha, dt)
    return d_dt, d_b, d_c, d_a, d_xs
