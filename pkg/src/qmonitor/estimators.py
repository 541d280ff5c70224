"""State observers for the monitored qubit.

Three estimators share the measurement record ``dy``:

* :class:`QuantumFilter` integrates the filtering equation driven by the
  innovation ``dy - h(xhat) dt``.
* :class:`ExtendedKalmanFilter` works on the decorrelated form of the SDE,
  where the process noise ``dW - sigma_bar dV`` is uncorrelated with the
  output noise ``dV``, and projects its update onto the Bloch ball.
* :class:`MMAEBank` runs one filter per candidate model and mixes their
  estimates with exponentially reweighted probabilities.

All state arrays carry a leading batch axis so a whole ensemble advances in
one call; rows never interact.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import qcore
from .dynamics import drift_increment

log = logging.getLogger(__name__)

PSD_TOL = 1e-10


def _mm(a, b):
    """Row-wise 3x3 matrix product with a fixed summation order."""
    return (a[..., :, 0, None] * b[..., None, 0, :]
            + a[..., :, 1, None] * b[..., None, 1, :]
            + a[..., :, 2, None] * b[..., None, 2, :])


def _mv(a, x):
    """Row-wise matrix-vector product for per-row matrices ``a`` (..., 3, 3)."""
    return a[..., :, 0] * x[..., 0, None] + a[..., :, 1] * x[..., 1, None] + a[..., :, 2] * x[..., 2, None]


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what}: non-finite estimate")


def _project(raw, what, strict):
    """Bloch projection; with ``strict=False`` non-finite rows pass through unchanged."""
    if strict:
        _check_finite(raw, what)
        return qcore.bloch_project(raw)
    n = qcore.bloch_norm(raw)
    return raw / np.where(n > 1.0, n, 1.0)[..., None]


# -- quantum filter ---------------------------------------------------------

def qf_step(x, dy, omega, p, dt, return_innovation=False, scheme="euler"):
    """Advance the quantum filter by one step.

    ``xhat' = xhat + f(xhat, Omega) dt + g(xhat) (dy - h(xhat) dt)``, clamped to
    the Bloch ball when an Euler step leaves it. ``scheme`` selects the drift
    increment as in :func:`dynamics.em_step`.
    """
    fl = p.fields
    x = np.asarray(x, dtype=float)
    innov = np.asarray(dy, dtype=float) - fl.h(x) * dt
    raw = x + drift_increment(x, omega, p, dt, scheme) + fl.g(x) * innov[..., None]
    out = _project(raw, "quantum filter", True)
    if return_innovation:
        return out, innov
    return out


# -- decorrelated EKF -------------------------------------------------------

def decorrelated_drift(x, omega, dy, p, dt, scheme="euler"):
    """Increment ``fbar dt = f dt - sigma_bar g h dt + sigma_bar g dy``."""
    fl = p.fields
    x = np.asarray(x, dtype=float)
    sb = p.sigma_bar
    g = fl.g(x)
    corr = sb * (np.asarray(dy, dtype=float) - fl.h(x) * dt)
    return drift_increment(x, omega, p, dt, scheme) + g * corr[..., None]


def decorrelated_step(x, omega, dw, dz, p, dt, scheme="euler"):
    """Step of the decorrelated SDE driven by ``dWbar = dW - sigma_bar dV``.

    Given the same ``(dW, dZ)`` this reproduces :func:`dynamics.em_step`
    before projection, which is what makes the transformed model usable.
    """
    fl = p.fields
    x = np.asarray(x, dtype=float)
    dw = np.asarray(dw, dtype=float)
    dv = dw + np.asarray(dz, dtype=float)
    dy = fl.h(x) * dt + dv
    dwbar = dw - p.sigma_bar * dv
    return x + decorrelated_drift(x, omega, dy, p, dt, scheme) + fl.g(x) * dwbar[..., None]


def jacobian_A(x, omega, ydot, p):
    """Analytic Jacobian of ``fbar`` with the measured rate ``ydot`` held fixed.

    ``A = df/dx + sigma_bar [dg/dx (ydot - h) - g C^T]``.
    """
    fl = p.fields
    x = np.asarray(x, dtype=float)
    ydot = np.asarray(ydot, dtype=float)
    jg = fl.g_jacobian(x)
    g = fl.g(x)
    resid = (ydot - fl.h(x))[..., None, None]
    return fl.f_jacobian(omega) + p.sigma_bar * (jg * resid - g[..., :, None] * fl.C[None, :])


@dataclass(frozen=True)
class EKFOptions:
    """Switches for the two places where the EKF can follow the literal source formulas.

    ``paper_literal_qw`` uses ``1 + sigma_bar`` as the process-noise variance
    instead of the variance ``1 - sigma_bar`` of ``dW - sigma_bar dV``.
    ``paper_literal_G`` uses ``G = dg/dx`` in the Riccati diffusion term
    instead of the outer product ``g g^T``.
    """

    paper_literal_qw: bool = False
    paper_literal_G: bool = False

    def process_variance(self, p):
        return 1.0 + p.sigma_bar if self.paper_literal_qw else 1.0 - p.sigma_bar


@dataclass
class EKFState:
    x: np.ndarray
    P: np.ndarray

    @property
    def trace_P(self):
        return self.P[..., 0, 0] + self.P[..., 1, 1] + self.P[..., 2, 2]


def process_noise(x, p, options=EKFOptions()):
    fl = p.fields
    q = options.process_variance(p)
    if options.paper_literal_G:
        jg = fl.g_jacobian(x)
        return q * _mm(jg, np.swapaxes(jg, -1, -2))
    g = fl.g(x)
    return q * g[..., :, None] * g[..., None, :]


def ekf_propagate(state, dy, omega, p, dt, options=EKFOptions(), scheme="euler"):
    """Prediction: ``x- = x + fbar dt``, ``P- = P + (A P + P A^T + Q) dt``."""
    x, P = state.x, state.P
    a = jacobian_A(x, omega, np.asarray(dy, dtype=float) / dt, p)
    ap = _mm(a, P)
    p_new = P + (ap + np.swapaxes(ap, -1, -2) + process_noise(x, p, options)) * dt
    x_new = x + decorrelated_drift(x, omega, dy, p, dt, scheme)
    return EKFState(x_new, 0.5 * (p_new + np.swapaxes(p_new, -1, -2)))


def _clip_psd(P):
    finite = np.all(np.isfinite(P), axis=(-2, -1))
    w = np.linalg.eigvalsh(np.where(finite[..., None, None], P, 0.0))
    bad = finite & (w[..., 0] < -PSD_TOL)
    if not np.any(bad):
        return P
    P = P.copy()
    vals, vecs = np.linalg.eigh(P[bad])
    vals = np.clip(vals, 0.0, None)
    rebuilt = (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    P[bad] = 0.5 * (rebuilt + np.swapaxes(rebuilt, -1, -2))
    return P


def ekf_update(state, dy, p, dt, strict=True):
    """Correction ``x = Proj(x- + K (dy - h(x-) dt))`` with ``K = P- C^T / sigma_v^2``.

    The covariance contraction is scaled by ``dt`` so prediction and update
    together discretise the continuous Riccati equation.
    """
    fl = p.fields
    x, P = state.x, state.P
    pc = _mv(P, np.broadcast_to(fl.C, x.shape))
    gain = pc / p.sigma_v2
    innov = np.asarray(dy, dtype=float) - fl.h(x) * dt
    raw = x + gain * innov[..., None]
    p_new = P - (pc[..., :, None] * pc[..., None, :]) * (dt / p.sigma_v2)
    p_new = 0.5 * (p_new + np.swapaxes(p_new, -1, -2))
    return EKFState(_project(raw, "Kalman filter", strict), _clip_psd(p_new))


def ekf_step(state, dy, omega, p, dt, options=EKFOptions(), strict=True, scheme="euler"):
    return ekf_update(ekf_propagate(state, dy, omega, p, dt, options, scheme), dy, p, dt, strict)


# -- filter objects -----------------------------------------------------------

def _retire(filt, bad):
    """Flag rows that went non-finite and park them at the origin (non-strict mode)."""
    new = bad & ~filt.failed
    if new.any():
        log.warning("%s: %d rows produced non-finite estimates and were retired", filt.kind, int(new.sum()))
    filt.failed |= bad
    if bad.any():
        filt.x[bad] = 0.0
        if hasattr(filt, "state"):
            filt.state.P[bad] = np.eye(3)


class QuantumFilter:
    """Batched quantum filter for one model."""

    kind = "qf"

    def __init__(self, params, x0, n=1, strict=True, scheme="euler"):
        self.params = params
        self.scheme = scheme
        self.x = np.tile(np.asarray(x0, dtype=float), (n, 1))
        self.strict = strict
        self.failed = np.zeros(n, dtype=bool)
        self.clamps = 0

    def step(self, dy, omega, dt):
        """Advance one step; returns the innovation at the pre-step estimate."""
        fl = self.params.fields
        innov = np.asarray(dy, dtype=float) - fl.h(self.x) * dt
        raw = self.x + drift_increment(self.x, omega, self.params, dt, self.scheme) + fl.g(self.x) * innov[..., None]
        hit = qcore.bloch_norm(raw) > 1.0
        if hit.any():
            self.clamps += int(hit.sum())
            log.debug("quantum filter clamp on %d rows", int(hit.sum()))
        self.x = _project(raw, "quantum filter", self.strict)
        _retire(self, ~np.all(np.isfinite(self.x), axis=-1))
        return innov

    @property
    def trace_P(self):
        return None


class ExtendedKalmanFilter:
    """Batched decorrelated EKF with Bloch-ball projection."""

    kind = "ekf"

    def __init__(self, params, x0, P0=None, n=1, options=EKFOptions(), strict=True, scheme="euler"):
        self.params = params
        self.scheme = scheme
        self.options = options
        self.strict = strict
        self.failed = np.zeros(n, dtype=bool)
        P0 = np.eye(3) if P0 is None else np.asarray(P0, dtype=float)
        if P0.shape != (3, 3) or not np.allclose(P0, P0.T):
            raise ValueError("P0 must be a symmetric 3x3 matrix")
        self.state = EKFState(np.tile(np.asarray(x0, dtype=float), (n, 1)), np.tile(P0, (n, 1, 1)))

    @property
    def x(self):
        return self.state.x

    @property
    def P(self):
        return self.state.P

    @property
    def trace_P(self):
        return self.state.trace_P

    def step(self, dy, omega, dt):
        innov = np.asarray(dy, dtype=float) - self.params.fields.h(self.state.x) * dt
        self.state = ekf_step(self.state, dy, omega, self.params, dt, self.options, self.strict, self.scheme)
        bad = ~(np.all(np.isfinite(self.state.x), axis=-1) & np.all(np.isfinite(self.state.P), axis=(-2, -1)))
        _retire(self, bad)
        return innov

    @x.setter
    def x(self, value):
        self.state.x = value


# -- multiple-model adaptive estimation ---------------------------------------

def mmae_update_weights(p, beta, w, floor=0.0):
    """One step of ``p_l <- beta_l exp(-w_l) p_l / sum_j beta_j exp(-w_j) p_j``.

    Works row-wise on ``(..., N)`` arrays. The recursion is invariant under a
    common shift of ``w``, which is used to keep the exponentials in range.
    A positive ``floor`` keeps every model alive; the result is renormalised
    after flooring.
    """
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("error measures must be non-negative")
    if np.any(beta <= 0):
        raise ValueError("beta must be positive")
    shifted = w - w.min(axis=-1, keepdims=True)
    num = beta * np.exp(-shifted) * p
    den = num.sum(axis=-1, keepdims=True)
    if np.any(den <= 0) or not np.all(np.isfinite(den)):
        raise FloatingPointError("MMAE weight normaliser vanished")
    # exp(-w) can underflow for a hopeless model; keep it representable and positive
    out = np.maximum(num / den, np.finfo(float).tiny)
    if floor > 0:
        out = np.maximum(out, floor)
        out = out / out.sum(axis=-1, keepdims=True)
    return out


def error_measure(dy, xhat, p, dt):
    """Windowed innovation energy ``(sum(dy - h(xhat) dt))^2 / (sigma_v^2 n dt)``.

    ``dy`` has shape ``(..., n)`` and ``xhat`` ``(..., n, 3)``: the
    measurement increments of one window and the model's estimates at the
    start of each step. The value is O(1) under a matched model whatever the
    window length or step.
    """
    dy = np.asarray(dy, dtype=float)
    innov = dy - p.fields.h(np.asarray(xhat, dtype=float)) * dt
    n = dy.shape[-1]
    return innov.sum(axis=-1) ** 2 / (p.sigma_v2 * n * dt)


@dataclass
class FilterOutput:
    x: np.ndarray
    rho: np.ndarray
    weights: np.ndarray = None
    trace_P: np.ndarray = None


def mmae_estimate(weights, estimates):
    """Convex combination ``sum_l p_l xhat_l`` of member estimates.

    ``weights`` is ``(..., N)``, ``estimates`` ``(N, ..., 3)``.
    """
    weights = np.asarray(weights, dtype=float)
    x = np.zeros_like(np.asarray(estimates[0], dtype=float))
    for l, xl in enumerate(estimates):
        x = x + weights[..., l, None] * xl
    # convexity keeps x in the ball; the projection only absorbs rounding
    x = qcore.bloch_project(x)
    return FilterOutput(x, qcore.from_coherence(x), weights)


class MMAEBank:
    """Bank of filters, one per candidate model, mixed by adaptive weights.

    Parameters
    ----------
    models : list of ModelParams
        Candidate models; each gets its own filter.
    x0 : array_like
        Common initial estimate.
    kind : {"ekf", "qf"}
        Member filter type.
    beta : array_like, optional
        Positive weighting constants (default all ones).
    cadence : int
        Steps per weight update; the error measure is accumulated over this
        window. Windows longer than one step square a sum of innovations,
        which favours mismatched models whose innovations anti-correlate.
    floor : float
        Optional lower bound on each weight (0 disables it).
    scheme : {"euler", "rk4"}
        Drift increment of the member filters.
    """

    def __init__(self, models, x0, kind="ekf", n=1, beta=None, cadence=1, floor=0.0,
                 P0=None, options=EKFOptions(), strict=True, scheme="euler"):
        if kind not in ("ekf", "qf"):
            raise ValueError(f"unknown member filter kind {kind!r}")
        if cadence < 1:
            raise ValueError("cadence must be a positive number of steps")
        self.models = list(models)
        size = len(self.models)
        if kind == "ekf":
            self.members = [ExtendedKalmanFilter(m, x0, P0, n, options, strict, scheme) for m in self.models]
        else:
            self.members = [QuantumFilter(m, x0, n, strict, scheme) for m in self.models]
        self.beta = np.ones(size) if beta is None else np.asarray(beta, dtype=float)
        if self.beta.shape != (size,) or np.any(self.beta <= 0):
            raise ValueError("beta must hold one positive constant per model")
        self.cadence = int(cadence)
        self.floor = float(floor)
        self.weights = np.full((n, size), 1.0 / size)
        self._innov_sum = np.zeros((n, size))
        self._count = 0
        self.updates = 0

    def step(self, dy, omega, dt):
        for l, member in enumerate(self.members):
            self._innov_sum[:, l] += member.step(dy, omega, dt)
        self._count += 1
        if self._count == self.cadence:
            sv2 = np.array([m.sigma_v2 for m in self.models])
            w = self._innov_sum ** 2 / (sv2 * self._count * dt)
            self.weights = mmae_update_weights(self.weights, self.beta, w, self.floor)
            self._innov_sum[:] = 0.0
            self._count = 0
            self.updates += 1

    @property
    def failed(self):
        out = np.zeros(self.weights.shape[0], dtype=bool)
        for m in self.members:
            out |= m.failed
        return out

    @property
    def estimates(self):
        return [m.x for m in self.members]

    @property
    def x(self):
        return self.output().x

    def output(self):
        return mmae_estimate(self.weights, self.estimates)

    @property
    def trace_P(self):
        return None
