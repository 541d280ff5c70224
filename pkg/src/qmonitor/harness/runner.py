"""Seeded Monte Carlo ensembles: truth, observer and controller in one loop."""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import __version__, qcore
from ..control import LyapunovController
from ..dynamics import ConstantControl, lindblad_reference, noise_increments, simulate_batch
from ..estimators import EKFOptions, ExtendedKalmanFilter, MMAEBank, QuantumFilter
from .csvio import write_csv

log = logging.getLogger(__name__)


def build_estimator(cfg, n):
    """Observer for ``n`` trajectories, or None when no estimator is selected."""
    e = cfg.estimator
    p = cfg.params()
    options = EKFOptions(e.paper_literal_qw, e.paper_literal_G)
    scheme = cfg.noise.scheme
    if e.kind == "none":
        return None
    if e.kind == "qf":
        return QuantumFilter(p.with_drift_scale(e.model_multiplier), e.x0, n, strict=False, scheme=scheme)
    if e.kind == "ekf":
        return ExtendedKalmanFilter(p.with_drift_scale(e.model_multiplier), e.x0, e.P0_matrix(), n,
                                    options, strict=False, scheme=scheme)
    models = [p.with_drift_scale(m) for m in e.multipliers]
    return MMAEBank(models, e.x0, kind=e.kind.split("-")[1], n=n, beta=e.beta, cadence=e.cadence,
                    floor=e.floor, P0=e.P0_matrix(), options=options, strict=False, scheme=scheme)


class _Loop:
    """Controller seen by the integrator: records the observer and picks the feedback source."""

    def __init__(self, cfg, n):
        self.dt = cfg.noise.dt
        self.estimator = build_estimator(cfg, n)
        kind = cfg.controller.kind
        self.feedback = None
        if kind == "constant":
            self.policy = ConstantControl(cfg.constant_omega())
        elif kind == "off":
            self.policy = ConstantControl(0.0)
        else:
            self.policy = LyapunovController(cfg.params(), cfg.target(), cfg.controller_params(), n)
            self.feedback = "estimate" if kind == "lyapunov-estimated" else "truth"
        self.xhat, self.trace_p, self.weights, self.omega = [], [], [], []

    def __call__(self, i, t, x):
        est = self.estimator
        if est is not None:
            self.xhat.append(est.x.copy())
            if est.trace_P is not None:
                self.trace_p.append(est.trace_P.copy())
            if isinstance(est, MMAEBank):
                self.weights.append(est.weights.copy())
        if self.feedback is None:
            omega = self.policy(i, t, x)
        else:
            omega = self.policy.control(t, est.x if self.feedback == "estimate" else x)
        self.omega.append(np.asarray(omega, dtype=float).copy())
        return omega

    def observe(self, i, t, dy, omega):
        if self.estimator is not None:
            self.estimator.step(dy, omega, self.dt)


def _simulate_chunk(cfg, indices):
    """Run trajectories ``indices``; returns per-trajectory series keyed by column name."""
    p = cfg.params()
    spec = cfg.noise.spec()
    n, steps = len(indices), spec.n_steps
    dw = np.empty((n, steps))
    dz = np.empty((n, steps))
    for k, idx in enumerate(indices):
        dw[k], dz[k] = noise_increments(spec.seed, idx, steps, spec.dt, p.sigma_z2)
    loop = _Loop(cfg, n)
    rec = simulate_batch(p, dw, dz, cfg.x0, spec.dt, controller=loop, scheme=cfg.noise.scheme)
    # final grid point: record observer and the control that would be applied next
    loop(steps, steps * spec.dt, rec.x[:, -1])

    failed = rec.failed.copy()
    if loop.estimator is not None:
        failed |= loop.estimator.failed

    x = rec.x
    rho = qcore.from_coherence(qcore.bloch_project(x))
    cols = {
        "x1": x[..., 0], "x2": x[..., 1], "x3": x[..., 2],
    }
    if loop.estimator is not None:
        xhat = np.stack(loop.xhat, axis=1)
        cols.update({"xhat1": xhat[..., 0], "xhat2": xhat[..., 1], "xhat3": xhat[..., 2]})
    cols.update({
        "rho00_re": rho[..., 0, 0].real, "rho01_re": rho[..., 0, 1].real,
        "rho01_im": rho[..., 0, 1].imag, "rho11_re": rho[..., 1, 1].real,
    })
    if loop.estimator is not None:
        cols["fidelity_truth_estimate"] = qcore.fidelity_bloch(x, xhat)
    switches = None
    if loop.feedback is not None:
        ctrl = loop.policy
        xf = qcore.to_coherence(ctrl.target.rho_f)
        cols["fidelity_truth_target"] = qcore.fidelity_bloch(x, np.broadcast_to(xf, x.shape))
        cols["V"] = ctrl.forms.V(x)
        switches = [list(map(float, s)) for s in ctrl.switch_times]
    cols["Omega"] = np.stack(loop.omega, axis=1)
    if loop.trace_p:
        cols["traceP"] = np.stack(loop.trace_p, axis=1)
    if loop.weights:
        w = np.stack(loop.weights, axis=1)
        for l in range(w.shape[-1]):
            cols[f"p{l + 1}"] = w[..., l]
    return {
        "indices": list(indices), "columns": cols, "failed": failed,
        "projections": rec.projections, "switches": switches,
        "clamps": getattr(loop.estimator, "clamps", 0),
    }


@dataclass
class EnsembleStats:
    """Per-time mean, standard deviation and standard error of every column."""

    t: np.ndarray
    n: int
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)

    @classmethod
    def from_columns(cls, t, columns, keep):
        n = int(keep.sum())
        stats = cls(t, n)
        for name, arr in columns.items():
            data = arr[keep]
            stats.mean[name] = data.mean(axis=0) if n else np.full(len(t), np.nan)
            sd = data.std(axis=0, ddof=1) if n > 1 else np.zeros(len(t))
            stats.std[name] = sd
            stats.se[name] = sd / np.sqrt(max(n, 1))
        return stats

    def as_series(self):
        out = {"t": self.t}
        for name in self.mean:
            out[f"{name}_mean"] = self.mean[name]
            out[f"{name}_std"] = self.std[name]
            out[f"{name}_se"] = self.se[name]
        return out


@dataclass
class RunResult:
    config: object
    t: np.ndarray
    columns: dict
    failed: np.ndarray
    stats: EnsembleStats
    switch_times: list
    projections: np.ndarray
    meta: dict

    @property
    def exit_code(self):
        return 1 if self.failed.any() else 0

    def trajectory(self, k):
        out = {"t": self.t}
        out.update({name: arr[k] for name, arr in self.columns.items()})
        return out


def _chunks(n, workers):
    bounds = np.linspace(0, n, min(workers, n) + 1).round().astype(int)
    return [list(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def run_experiment(cfg, out_dir=None, workers=None):
    """Run the ensemble described by ``cfg`` and optionally write CSV output.

    Trajectory ``i`` draws its noise from ``(cfg.noise.seed, i)`` and rows never
    interact, so results are identical for any ``workers`` count. Failed
    trajectories (non-finite control or estimate) are excluded from the
    statistics and reported through :attr:`RunResult.exit_code`.
    """
    cfg.validate()
    workers = cfg.workers if workers is None else workers
    chunks = _chunks(cfg.realizations, workers)
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_chunk, [cfg] * len(chunks), chunks))
    else:
        parts = [_simulate_chunk(cfg, c) for c in chunks]

    names = list(parts[0]["columns"])
    columns = {name: np.concatenate([pt["columns"][name] for pt in parts]) for name in names}
    failed = np.concatenate([pt["failed"] for pt in parts])
    projections = np.concatenate([pt["projections"] for pt in parts])
    switch_times = None
    if parts[0]["switches"] is not None:
        switch_times = [s for pt in parts for s in pt["switches"]]
    t = cfg.noise.spec().grid()
    stats = EnsembleStats.from_columns(t, columns, ~failed)
    steps = cfg.noise.spec().n_steps
    meta = {
        "code_version": __version__,
        "config_sha256": cfg.digest(),
        "master_seed": int(cfg.noise.seed),
        "realizations": int(cfg.realizations),
        "failed_trajectories": [int(i) for i in np.flatnonzero(failed)],
        "projection_fraction": float(projections.sum() / (len(projections) * steps)),
        "filter_clamps": int(sum(pt["clamps"] for pt in parts)),
    }
    if switch_times is not None:
        counts = [len(s) for s in switch_times]
        gaps = [b - a for s in switch_times for a, b in zip([0.0] + s[:-1], s)]
        meta["switch_count_max"] = int(max(counts))
        meta["switch_min_interval"] = float(min(gaps)) if gaps else None
    if failed.any():
        log.warning("%d of %d trajectories failed: %s", int(failed.sum()), len(failed),
                    meta["failed_trajectories"])
    result = RunResult(cfg, t, columns, failed, stats, switch_times, projections, meta)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def reference_series(cfg):
    """Deterministic Lindblad and unitary (no decay, no measurement) reference paths."""
    p = cfg.params()
    omega = 0.0 if cfg.controller.kind == "off" else cfg.constant_omega()
    out = {}
    for label, q in (("lindblad", p), ("unitary", p.replace(gamma=0.0, m=0.0))):
        t, x = lindblad_reference(q, omega, cfg.x0, cfg.noise.dt, cfg.noise.T)
        rho = qcore.from_coherence(qcore.bloch_project(x))
        out[label] = {
            "t": t, "x1": x[:, 0], "x2": x[:, 1], "x3": x[:, 2],
            "rho00_re": rho[:, 0, 0].real, "rho01_re": rho[:, 0, 1].real,
            "rho01_im": rho[:, 0, 1].imag, "rho11_re": rho[:, 1, 1].real,
        }
    return out


def write_outputs(result, out_dir):
    """Per-trajectory CSVs, ``_ensemble.csv``, optional references and ``_meta.json``."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.config
    if cfg.write_trajectories:
        for k in range(len(result.failed)):
            suffix = "_failed" if result.failed[k] else ""
            write_csv(result.trajectory(k), os.path.join(out_dir, f"traj_{k:05d}{suffix}.csv"))
    write_csv(result.stats.as_series(), os.path.join(out_dir, "_ensemble.csv"))
    if cfg.write_references:
        for label, series in reference_series(cfg).items():
            write_csv(series, os.path.join(out_dir, f"_reference_{label}.csv"))
    with open(os.path.join(out_dir, "_meta.json"), "w", newline="\n") as fh:
        json.dump({**result.meta, "config": cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
