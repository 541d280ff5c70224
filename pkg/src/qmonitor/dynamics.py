"""Coherence-vector SDE of a homodyne-monitored qubit.

The state ``x`` obeys ``dx = f(x, Omega) dt + g(x) dW`` and the detector
records ``dy = h(x) dt + dW + dZ``. The fields are obtained from the
density-operator SME by tracing against the Pauli matrices. Since the
Lindbladian is linear in ``rho`` and ``rho`` is affine in ``x``, ``f`` and
``h`` are affine in ``x`` and ``g`` is quadratic; :class:`Fields` stores the
resulting coefficient arrays so evaluation is cheap and batchable.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import qcore
from .qcore import SIGMA_1, SIGMA_3, SIGMA_MINUS

log = logging.getLogger(__name__)

# default variance of the spectrum-analyser noise dZ (an assumed value)
DEFAULT_SIGMA_Z2 = 0.1


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Physical model of the monitored qubit.

    ``h_d`` defaults to ``(omega_r / 2) sigma_3``; ``h_c`` to ``-sigma_1`` and
    both channel operators to the lowering operator.
    """

    gamma: float = 10.0
    m: float = 1.0
    eta: float = 0.8
    sigma_z2: float = DEFAULT_SIGMA_Z2
    omega_r: float = 50.0
    h_d: np.ndarray = None
    h_c: np.ndarray = field(default_factory=lambda: -SIGMA_1)
    c_d: np.ndarray = field(default_factory=lambda: SIGMA_MINUS.copy())
    c_m: np.ndarray = field(default_factory=lambda: SIGMA_MINUS.copy())

    def __post_init__(self):
        if self.h_d is None:
            object.__setattr__(self, "h_d", 0.5 * self.omega_r * SIGMA_3)
        for name in ("h_d", "h_c", "c_d", "c_m"):
            value = np.asarray(getattr(self, name), dtype=complex)
            if value.shape != (2, 2):
                raise ValueError(f"{name} must be a 2x2 matrix")
            object.__setattr__(self, name, value)
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.m >= 0:
            raise ValueError(f"m must be >= 0, got {self.m}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not self.sigma_z2 >= 0:
            raise ValueError(f"sigma_z2 must be >= 0, got {self.sigma_z2}")
        for name in ("h_d", "h_c"):
            if not qcore.is_hermitian(getattr(self, name), tol=1e-12):
                raise ValueError(f"{name} must be Hermitian")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_drift_scale(self, factor):
        """Copy with ``omega_r`` and ``h_d`` multiplied by ``factor``."""
        return self.replace(omega_r=self.omega_r * factor, h_d=self.h_d * factor)

    @property
    def sigma_bar(self):
        return 1.0 / (1.0 + self.sigma_z2)

    @property
    def sigma_v2(self):
        return 1.0 + self.sigma_z2

    @cached_property
    def fields(self):
        return Fields.from_params(self)


def _affine_coefficients(fn):
    """Recover ``(L, b)`` with ``fn(x) = L x + b`` from 4 evaluations of an affine map."""
    b = np.asarray(fn(np.zeros(3)), dtype=float)
    cols = [np.asarray(fn(e), dtype=float) - b for e in np.eye(3)]
    return np.column_stack(cols), b


def _pauli_trace(mat):
    vals = np.array([qcore.trace_inner(mat, s) for s in (SIGMA_1, qcore.SIGMA_2, SIGMA_3)])
    return vals.real


def _mv(a, x):
    """Row-wise ``a @ x`` for a fixed 3x3 ``a`` and ``x`` of shape (..., 3)."""
    return x[..., 0, None] * a[:, 0] + x[..., 1, None] * a[:, 1] + x[..., 2, None] * a[:, 2]


@dataclass(frozen=True, eq=False)
class Fields:
    """Coefficients of ``f``, ``g`` and ``h`` in Bloch coordinates.

    ``f(x, W) = (drift + W ctrl) x + drift0 + W ctrl0``,
    ``g(x) = s [(meas x + meas0) - (u.x + u0) x]``,
    ``h(x) = s (u.x + u0)``.
    """

    drift: np.ndarray
    drift0: np.ndarray
    ctrl: np.ndarray
    ctrl0: np.ndarray
    meas: np.ndarray
    meas0: np.ndarray
    u: np.ndarray
    u0: float
    s: float

    @classmethod
    def from_params(cls, p):
        def lindblad(x, hamiltonian, with_diss):
            rho = qcore.from_coherence(x)
            out = -1j * qcore.commutator(hamiltonian, rho)
            if with_diss:
                out = out + p.gamma * qcore.dissipator(p.c_d, rho) + p.m * qcore.dissipator(p.c_m, rho)
            return _pauli_trace(out)

        drift, drift0 = _affine_coefficients(lambda x: lindblad(x, p.h_d, True))
        ctrl, ctrl0 = _affine_coefficients(lambda x: lindblad(x, p.h_c, False))
        c, cd = p.c_m, qcore.dagger(p.c_m)
        meas, meas0 = _affine_coefficients(
            lambda x: _pauli_trace(c @ qcore.from_coherence(x) + qcore.from_coherence(x) @ cd)
        )
        quad = c + cd
        u = 0.5 * _pauli_trace(quad)
        u0 = 0.5 * float(np.trace(quad).real)
        return cls(drift, drift0, ctrl, ctrl0, meas, meas0, u, u0, float(np.sqrt(p.eta * p.m)))

    @property
    def C(self):
        """Output row vector: ``h(x) - h(0) = C . x``."""
        return self.s * self.u

    def f(self, x, omega):
        x = np.asarray(x, dtype=float)
        omega = np.asarray(omega, dtype=float)[..., None]
        return _mv(self.drift, x) + self.drift0 + omega * (_mv(self.ctrl, x) + self.ctrl0)

    def expect(self, x):
        """``<c_m + c_m^+>`` at ``x``."""
        x = np.asarray(x, dtype=float)
        u = self.u
        return x[..., 0] * u[0] + x[..., 1] * u[1] + x[..., 2] * u[2] + self.u0

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return self.s * (_mv(self.meas, x) + self.meas0 - self.expect(x)[..., None] * x)

    def h(self, x):
        return self.s * self.expect(x)

    def f_jacobian(self, omega):
        omega = np.asarray(omega, dtype=float)[..., None, None]
        return self.drift + omega * self.ctrl

    def g_jacobian(self, x):
        """``dg/dx`` at ``x``; shape ``x.shape[:-1] + (3, 3)``."""
        x = np.asarray(x, dtype=float)
        e = self.expect(x)[..., None, None]
        outer = x[..., :, None] * self.u[None, :]
        return self.s * (self.meas - e * np.eye(3) - outer)


def drift_f(x, omega, p):
    """Drift ``f(x, Omega)`` of the coherence-vector SDE."""
    return p.fields.f(x, omega)


def diffusion_g(x, p):
    """Diffusion vector ``g(x) = sqrt(eta M) Tr(H[c_m] rho sigma_k)``."""
    return p.fields.g(x)


def output_h(x, p):
    """Homodyne output ``h(x) = sqrt(eta M) <c_m + c_m^+>``."""
    return p.fields.h(x)


def output_matrix_C(p):
    return p.fields.C.copy()


SCHEMES = ("euler", "rk4")


def drift_increment(x, omega, p, dt, scheme="euler"):
    """Deterministic part of one step with ``Omega`` held over the step.

    ``"euler"`` gives ``f dt``. ``"rk4"`` gives the classic Runge-Kutta
    increment; because ``f`` is affine in ``x`` the ensemble mean of a scheme
    built on it follows the RK4 solution of the Lindblad equation.
    """
    fl = p.fields
    x = np.asarray(x, dtype=float)
    if scheme == "euler":
        return fl.f(x, omega) * dt
    if scheme != "rk4":
        raise ValueError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
    k1 = fl.f(x, omega)
    k2 = fl.f(x + 0.5 * dt * k1, omega)
    k3 = fl.f(x + 0.5 * dt * k2, omega)
    k4 = fl.f(x + dt * k3, omega)
    return dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def em_step(x, omega, dw, p, dt, return_flag=False, scheme="euler"):
    """One Euler-Maruyama step followed by projection onto the Bloch ball.

    ``scheme="rk4"`` replaces ``f dt`` by the RK4 drift increment while the
    noise term stays ``g(x) dW``. With ``return_flag`` the boolean mask of
    rows where the projection was active is returned as well.
    """
    x = np.asarray(x, dtype=float)
    raw = x + drift_increment(x, omega, p, dt, scheme) + p.fields.g(x) * np.asarray(dw, dtype=float)[..., None]
    out = qcore.bloch_project(raw)
    if return_flag:
        return out, qcore.bloch_norm(raw) > 1.0
    return out


@dataclass(frozen=True)
class NoiseSpec:
    seed: int = 0
    dt: float = 1e-3
    T: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T >= self.dt:
            raise ValueError(f"T must be >= dt, got T={self.T}, dt={self.dt}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    def grid(self):
        return np.arange(self.n_steps + 1) * self.dt


def noise_increments(seed, index, n_steps, dt, sigma_z2):
    """Wiener increments ``(dW, dZ)`` for trajectory ``index`` of an ensemble.

    Each trajectory owns two Philox streams keyed by ``(seed, index)``, so the
    draws do not depend on which worker or batch produces them.
    """
    w_seq, z_seq = np.random.SeedSequence([int(seed), int(index)]).spawn(2)
    dw = np.random.Generator(np.random.Philox(w_seq)).standard_normal(n_steps) * np.sqrt(dt)
    dz = np.random.Generator(np.random.Philox(z_seq)).standard_normal(n_steps) * np.sqrt(sigma_z2 * dt)
    return dw, dz


class ConstantControl:
    """Open-loop drive ``Omega(t) = value``."""

    def __init__(self, value):
        self.value = float(value)

    def __call__(self, i, t, x):
        return np.full(x.shape[:-1], self.value)


class TrajectoryFailure(RuntimeError):
    pass


@dataclass
class TrajectoryRecord:
    """Synchronised series of one or more trajectories.

    Arrays carry a leading trajectory axis: ``x`` is ``(n, N+1, 3)``; ``dy``,
    ``dw``, ``dz`` and ``omega`` are ``(n, N)`` with ``omega[:, i]`` the control
    held on ``[t_i, t_{i+1})``.
    """

    t: np.ndarray
    x: np.ndarray
    dy: np.ndarray
    omega: np.ndarray
    dw: np.ndarray
    dz: np.ndarray
    projections: np.ndarray
    failed: np.ndarray

    def single(self, k=0):
        return TrajectoryRecord(
            self.t, self.x[k], self.dy[k], self.omega[k], self.dw[k], self.dz[k],
            self.projections[k], self.failed[k],
        )


def simulate_batch(p, dw, dz, x0, dt, controller=None, observer=None, scheme="rk4"):
    """Integrate a batch of trajectories driven by the given noise arrays.

    ``controller(i, t, x)`` returns the control for every row; it may also
    expose ``observe(i, t, dy, omega)`` to receive the measurement increment
    (an estimated-state feedback loop does so). ``observer`` receives the same
    call when given. Rows whose control or state turns non-finite are frozen
    and flagged in ``failed``. ``scheme`` selects the drift increment of
    :func:`em_step`.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
    dw = np.atleast_2d(np.asarray(dw, dtype=float))
    dz = np.atleast_2d(np.asarray(dz, dtype=float))
    n, steps = dw.shape
    fl = p.fields
    x = np.tile(np.asarray(x0, dtype=float), (n, 1))
    xs = np.empty((n, steps + 1, 3))
    dys = np.empty((n, steps))
    omegas = np.zeros((n, steps))
    proj = np.zeros(n, dtype=int)
    failed = np.zeros(n, dtype=bool)
    xs[:, 0] = x
    for i in range(steps):
        t = i * dt
        if controller is None:
            omega = np.zeros(n)
        else:
            omega = np.asarray(controller(i, t, x), dtype=float)
        bad = ~np.isfinite(omega)
        if bad.any():
            for k in np.flatnonzero(bad & ~failed):
                log.warning("trajectory row %d: non-finite control at t=%.6g, aborting", k, t)
            failed |= bad
            omega = np.where(failed, 0.0, omega)
        dy = fl.h(x) * dt + dw[:, i] + dz[:, i]
        for obs in (getattr(controller, "observe", None), getattr(observer, "observe", None)):
            if obs is not None:
                obs(i, t, dy, omega)
        x_new, hit = em_step(x, omega, dw[:, i], p, dt, return_flag=True, scheme=scheme)
        proj += hit
        x = np.where(failed[:, None], x, x_new)
        omegas[:, i] = omega
        dys[:, i] = dy
        xs[:, i + 1] = x
    if proj.any():
        log.info("Bloch projection active on %d of %d steps", int(proj.sum()), n * steps)
    return TrajectoryRecord(np.arange(steps + 1) * dt, xs, dys, omegas, dw, dz, proj, failed)


def simulate_trajectory(p, noise, x0=(0.0, 1.0, 0.0), controller=None, index=0, observer=None,
                        scheme="rk4"):
    """Simulate one trajectory with noise drawn from ``noise.seed`` and ``index``.

    Raises :class:`TrajectoryFailure` if the controller produces a NaN.
    """
    dw, dz = noise_increments(noise.seed, index, noise.n_steps, noise.dt, p.sigma_z2)
    rec = simulate_batch(p, dw[None], dz[None], x0, noise.dt, controller, observer, scheme).single()
    if rec.failed:
        raise TrajectoryFailure(f"trajectory {index} aborted: non-finite control value")
    return rec


def _as_signal(omega):
    if callable(omega):
        return omega
    value = float(omega)
    return lambda t: value


def lindblad_reference(p, omega, x0, dt, T):
    """Deterministic ensemble-mean dynamics ``dx/dt = f(x, Omega(t))`` by classic RK4.

    ``omega`` is a constant or a callable of time; it is sampled at the start
    of each step and held (piecewise constant). Returns ``(t, x)`` with ``x``
    of shape ``(N+1, 3)``.
    """
    signal = _as_signal(omega)
    fl = p.fields
    n = int(round(T / dt))
    xs = np.empty((n + 1, 3))
    x = np.asarray(x0, dtype=float).copy()
    xs[0] = x
    for i in range(n):
        w = signal(i * dt)
        a = fl.drift + w * fl.ctrl
        b = fl.drift0 + w * fl.ctrl0
        k1 = a @ x + b
        k2 = a @ (x + 0.5 * dt * k1) + b
        k3 = a @ (x + 0.5 * dt * k2) + b
        k4 = a @ (x + dt * k3) + b
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs[i + 1] = x
    return np.arange(n + 1) * dt, xs
