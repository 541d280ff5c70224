"""Experiment configuration: a nested JSON document mapped onto dataclasses.

Unknown keys are rejected at every level and physical bounds are enforced
when the configuration is built.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from ..control import ControllerParams, TargetSpec
from ..dynamics import DEFAULT_SIGMA_Z2, SCHEMES, ModelParams, NoiseSpec

ESTIMATORS = ("none", "qf", "ekf", "mmae-qf", "mmae-ekf")
CONTROLLERS = ("off", "constant", "lyapunov-true-state", "lyapunov-estimated")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    gamma: float = 10.0
    m: float = 1.0
    eta: float = 0.8
    sigma_z2: float = DEFAULT_SIGMA_Z2
    omega_r: float = 50.0

    def params(self):
        return ModelParams(gamma=self.gamma, m=self.m, eta=self.eta,
                           sigma_z2=self.sigma_z2, omega_r=self.omega_r)


@dataclass
class NoiseConfig:
    seed: int = 0
    dt: float = 1e-3
    T: float = 1.0
    # drift increment of the trajectory integrator: "rk4" or "euler"
    scheme: str = "rk4"

    def spec(self):
        return NoiseSpec(seed=self.seed, dt=self.dt, T=self.T)


@dataclass
class EstimatorConfig:
    kind: str = "none"
    x0: list = field(default_factory=lambda: [1.0, 0.0, 0.0])
    # scalar (times identity) or 3x3 nested list
    P0: object = 1.0
    paper_literal_qw: bool = False
    paper_literal_G: bool = False
    # drift-scale of the single-filter model relative to the truth
    model_multiplier: float = 1.0
    multipliers: list = field(default_factory=lambda: [0.8, 0.9, 1.0, 1.1, 1.2])
    beta: list = None
    cadence: int = 1
    floor: float = 0.0

    def P0_matrix(self):
        P0 = np.asarray(self.P0, dtype=float)
        return P0 * np.eye(3) if P0.ndim == 0 else P0


@dataclass
class ControllerConfig:
    kind: str = "constant"
    # constant drive; None means 3 gamma
    omega: float = None
    alpha: float = 1.0
    epsilon: float = 0.01
    dwell_active: float = None
    dwell_idle: float = None
    omega_max: float = None
    epsilon_on: float = None
    target: str = "ground"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    x0: list = field(default_factory=lambda: [0.0, 1.0, 0.0])
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    realizations: int = 100
    workers: int = 1
    output: str = "runs/out"
    write_trajectories: bool = True
    write_references: bool = False

    # -- derived objects --------------------------------------------------

    def params(self):
        return self.model.params()

    def controller_params(self):
        c = self.controller
        return ControllerParams.defaults(
            self.params(), self.noise.dt, alpha=c.alpha, epsilon=c.epsilon,
            dwell_active=c.dwell_active, dwell_idle=c.dwell_idle,
            omega_max=c.omega_max, epsilon_on=c.epsilon_on,
        )

    def target(self):
        return TargetSpec.named(self.controller.target)

    def constant_omega(self):
        c = self.controller
        return 3.0 * self.model.gamma if c.omega is None else float(c.omega)

    def validate(self):
        """Build every derived object once so bad values fail early."""
        try:
            self.params()
            self.noise.spec()
            if self.noise.scheme not in SCHEMES:
                raise ValueError(f"noise.scheme must be one of {SCHEMES}")
            if self.estimator.kind not in ESTIMATORS:
                raise ValueError(f"estimator.kind must be one of {ESTIMATORS}")
            if self.controller.kind not in CONTROLLERS:
                raise ValueError(f"controller.kind must be one of {CONTROLLERS}")
            if self.controller.kind == "lyapunov-estimated" and self.estimator.kind == "none":
                raise ValueError("lyapunov-estimated feedback needs an estimator")
            for name, vec in (("x0", self.x0), ("estimator.x0", self.estimator.x0)):
                v = np.asarray(vec, dtype=float)
                if v.shape != (3,) or not np.all(np.isfinite(v)) or np.linalg.norm(v) > 1 + 1e-9:
                    raise ValueError(f"{name} must be a Bloch vector with norm <= 1")
            P0 = self.estimator.P0_matrix()
            if P0.shape != (3, 3) or not np.allclose(P0, P0.T) or np.linalg.eigvalsh(P0)[0] < 0:
                raise ValueError("estimator.P0 must be a scalar or a symmetric PSD 3x3 matrix")
            e = self.estimator
            if e.kind.startswith("mmae"):
                if not e.multipliers or any(m <= 0 for m in e.multipliers):
                    raise ValueError("estimator.multipliers must be non-empty and positive")
                if e.beta is not None and (len(e.beta) != len(e.multipliers) or any(b <= 0 for b in e.beta)):
                    raise ValueError("estimator.beta must hold one positive value per model")
                if e.cadence < 1:
                    raise ValueError("estimator.cadence must be >= 1")
                if not 0 <= e.floor < 1.0 / len(e.multipliers):
                    raise ValueError("estimator.floor must lie in [0, 1/N)")
            if self.controller.kind.startswith("lyapunov"):
                self.controller_params()
                self.target().check_stationary(self.params().h_d)
            if self.realizations < 1:
                raise ValueError("realizations must be >= 1")
            if self.workers < 1:
                raise ValueError("workers must be >= 1")
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- (de)serialisation -------------------------------------------------

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self):
        """Hash of the configuration that determines the numerical output."""
        d = self.to_dict()
        for key in ("output", "workers"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "").validate()

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_document(path))

    def merged(self, data):
        """Copy with a (partial) nested dict of overrides applied."""
        base = self.to_dict()
        _deep_update(base, data, "")
        return ExperimentConfig.from_dict(base)


def load_document(path):
    """Read a (possibly partial) configuration document and check its keys."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    _deep_update(ExperimentConfig().to_dict(), data, "")
    return data


def _deep_update(base, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    for key, value in data.items():
        if key not in base:
            raise ConfigError(f"unknown key {where + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_update(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {[where + k for k in unknown]}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}{name}.") if sub else value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "noise"): NoiseConfig,
    (ExperimentConfig, "estimator"): EstimatorConfig,
    (ExperimentConfig, "controller"): ControllerConfig,
}
