"""Switching Lyapunov feedback towards a stationary target state.

With ``Pi = I - rho_f`` and ``V(rho) = Tr(Pi rho)``, the drift of ``V`` under
the SME is ``Omega * upsilon_1 + Upsilon_0 - alpha V`` where
``Tr(Pi [H_c, rho]) = i upsilon_1``. During active phases the controller
applies ``Omega = -Upsilon_0 / upsilon_1`` which makes that drift exactly
``-alpha V``; it idles (``Omega = 0``) while ``|upsilon_1|`` is below a
threshold, and every switch respects a dwell time.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import qcore

log = logging.getLogger(__name__)

COMMUTE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TargetSpec:
    """Target ``rho_f`` (must commute with the drift Hamiltonian) and ``Pi = I - rho_f``."""

    rho_f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho_f", qcore.check_density(self.rho_f, "rho_f"))

    @property
    def pi(self):
        return qcore.IDENTITY - self.rho_f

    def check_stationary(self, h_d):
        err = np.max(np.abs(qcore.commutator(self.rho_f, np.asarray(h_d, dtype=complex))))
        if err > COMMUTE_TOL:
            raise ValueError(f"target does not commute with the drift Hamiltonian (|[rho_f, H_d]| = {err:.3g})")
        return self

    @classmethod
    def named(cls, name):
        """``"ground"``, ``"excited"`` or ``"mixed:<x3>"`` for a diagonal state."""
        if name == "ground":
            return cls(qcore.GROUND)
        if name == "excited":
            return cls(qcore.EXCITED)
        if name.startswith("mixed:"):
            return cls(qcore.from_coherence([0.0, 0.0, float(name.split(":", 1)[1])]))
        raise ValueError(f"unknown target {name!r}; use ground, excited or mixed:<x3>")


@dataclass(frozen=True)
class ControllerParams:
    alpha: float = 1.0
    epsilon: float = 0.01
    dwell_active: float = 0.01
    dwell_idle: float = 0.01
    omega_max: float = 100.0
    # optional second threshold for Idle -> Active; None reuses epsilon
    epsilon_on: float = None

    def __post_init__(self):
        for name in ("alpha", "epsilon", "dwell_active", "dwell_idle", "omega_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epsilon_on is not None and self.epsilon_on < self.epsilon:
            raise ValueError("epsilon_on must not be below epsilon")

    @classmethod
    def defaults(cls, params, dt, **overrides):
        """Defaults tied to the model: dwell of 10 steps, saturation at ``10 gamma``."""
        base = dict(dwell_active=10 * dt, dwell_idle=10 * dt, omega_max=10.0 * params.gamma)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


# -- matrix-form quantities -----------------------------------------------------

def lyapunov_V(rho, target):
    """``V(rho) = Tr(Pi rho)``."""
    return float(qcore.trace_inner(target.pi, rho).real)


def _dissipation_term(rho, target, p):
    pi = target.pi
    return (p.gamma * qcore.trace_inner(pi, qcore.dissipator(p.c_d, rho))
            + p.m * qcore.trace_inner(pi, qcore.dissipator(p.c_m, rho)))


def upsilons(rho, target, p, alpha):
    """Return ``(Upsilon_0, upsilon_1)`` with ``Tr(Pi [H_c, rho]) = i upsilon_1``."""
    rho = np.asarray(rho, dtype=complex)
    ups0 = _dissipation_term(rho, target, p) + alpha * qcore.trace_inner(target.pi, rho)
    ups1 = qcore.trace_inner(target.pi, qcore.commutator(p.h_c, rho))
    return float(ups0.real), float(ups1.imag)


def lyapunov_law(ups0, ups1):
    """Active-phase control ``-i Upsilon_0 / Upsilon_1 = -Upsilon_0 / upsilon_1`` (unsaturated)."""
    return -ups0 / ups1


def generator_LV(rho, omega, target, p):
    """Drift of ``V`` along the SME: ``Tr(Pi L(rho))`` for the Lindbladian at control ``omega``.

    The drift-Hamiltonian commutator is kept; it vanishes when ``rho_f``
    commutes with ``H_d``.
    """
    rho = np.asarray(rho, dtype=complex)
    ham = -1j * qcore.trace_inner(target.pi, qcore.commutator(p.h_d + omega * p.h_c, rho))
    return float((ham + _dissipation_term(rho, target, p)).real)


# -- switching state machine ---------------------------------------------------

@dataclass
class ControllerState:
    """Per-row switching state; starts Active at ``t0``."""

    active: np.ndarray
    t_last: np.ndarray
    switches: np.ndarray

    @classmethod
    def initial(cls, n=1, t0=0.0):
        return cls(np.ones(n, dtype=bool), np.full(n, float(t0)), np.zeros(n, dtype=int))

    @property
    def phase(self):
        return np.where(self.active, "Active", "Idle")


def switch_logic(state, ups1, t, cp):
    """Advance the Active/Idle machine given ``upsilon_1`` at time ``t``."""
    mag = np.abs(np.asarray(ups1, dtype=float))
    elapsed = t - state.t_last
    eps_on = cp.epsilon if cp.epsilon_on is None else cp.epsilon_on
    # small slack so a dwell that is an exact multiple of dt is honoured despite rounding
    slack = 1e-9 * max(cp.dwell_active, cp.dwell_idle)
    to_idle = state.active & (mag <= cp.epsilon) & (elapsed >= cp.dwell_active - slack)
    to_active = ~state.active & (mag >= eps_on) & (elapsed >= cp.dwell_idle - slack)
    flip = to_idle | to_active
    return ControllerState(
        state.active ^ flip,
        np.where(flip, t, state.t_last),
        state.switches + flip,
    )


def control_value(ups0, ups1, state, cp):
    """Saturated control for the current phase (zero while Idle)."""
    ups0 = np.asarray(ups0, dtype=float)
    ups1 = np.asarray(ups1, dtype=float)
    zero = state.active & (ups1 == 0.0)
    if np.any(zero):
        log.info("upsilon_1 vanished in an active phase on %d rows; applying zero control", int(zero.sum()))
    safe = np.where(zero, 1.0, ups1)
    omega = np.where(state.active & ~zero, -ups0 / safe, 0.0)
    return np.clip(omega, -cp.omega_max, cp.omega_max)


# -- Bloch-coordinate form used in simulation loops ----------------------------

def _affine(fn):
    b = float(fn(np.zeros(3)))
    return np.array([float(fn(e)) - b for e in np.eye(3)]), b


@dataclass(frozen=True, eq=False)
class LyapunovForms:
    """``V``, ``Upsilon_0`` and ``upsilon_1`` as affine functions of the Bloch vector."""

    v: np.ndarray
    v0: float
    ups0: np.ndarray
    ups00: float
    ups1: np.ndarray
    ups10: float

    @classmethod
    def build(cls, target, p, alpha):
        v, v0 = _affine(lambda x: lyapunov_V(qcore.from_coherence(x), target))
        u0, u00 = _affine(lambda x: upsilons(qcore.from_coherence(x), target, p, alpha)[0])
        u1, u10 = _affine(lambda x: upsilons(qcore.from_coherence(x), target, p, alpha)[1])
        return cls(v, v0, u0, u00, u1, u10)

    @staticmethod
    def _eval(c, c0, x):
        return x[..., 0] * c[0] + x[..., 1] * c[1] + x[..., 2] * c[2] + c0

    def V(self, x):
        return self._eval(self.v, self.v0, np.asarray(x, dtype=float))

    def upsilons(self, x):
        x = np.asarray(x, dtype=float)
        return self._eval(self.ups0, self.ups00, x), self._eval(self.ups1, self.ups10, x)


class LyapunovController:
    """Batched switching controller fed with a Bloch vector (true or estimated)."""

    def __init__(self, params, target, cp, n=1, t0=0.0):
        target.check_stationary(params.h_d)
        self.params = params
        self.target = target
        self.cp = cp
        self.forms = LyapunovForms.build(target, params, cp.alpha)
        self.state = ControllerState.initial(n, t0)
        self.switch_times = [[] for _ in range(n)]

    def control(self, t, x):
        ups0, ups1 = self.forms.upsilons(x)
        before = self.state.active
        self.state = switch_logic(self.state, ups1, t, self.cp)
        for k in np.flatnonzero(before != self.state.active):
            self.switch_times[k].append(t)
        return control_value(ups0, ups1, self.state, self.cp)
