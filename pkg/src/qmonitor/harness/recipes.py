"""Built-in experiment recipes for the leaky-cavity qubit scenarios.

All recipes share the nominal model: decay rate 10 1/s, detuning
``omega_r = 5 gamma``, measurement strength 1 1/s, detector efficiency 0.8,
``dt = 1 ms`` over one second, a constant drive of ``3 gamma`` where the loop
is open, true initial state ``(0, 1, 0)`` and filters started at ``(1, 0, 0)``.
"""

from .config import ConfigError, ExperimentConfig

GAMMA = 10.0
NOMINAL = {
    "model": {"gamma": GAMMA, "m": 1.0, "eta": 0.8, "omega_r": 5 * GAMMA},
    "noise": {"dt": 1e-3, "T": 1.0},
    "x0": [0.0, 1.0, 0.0],
    "realizations": 100,
}
MMAE_MULTIPLIERS = [0.8, 0.9, 1.0, 1.1, 1.2]


def _cfg(**overrides):
    base = ExperimentConfig().merged(NOMINAL)
    return base.merged(overrides)


def _open_loop():
    return {"kind": "constant", "omega": 3 * GAMMA}


def _filter(kind):
    return {"kind": kind, "x0": [1.0, 0.0, 0.0], "P0": 1.0}


# name -> list of (label, config factory); multi-run recipes share the master
# seed so every variant sees the same truth trajectories
_RECIPES = {
    "fig2-dynamics": lambda: [
        ("", _cfg(controller=_open_loop(), estimator={"kind": "none"}, write_references=True)),
    ],
    "fig3-5-filters": lambda: [
        ("qf", _cfg(controller=_open_loop(), estimator=_filter("qf"))),
        ("ekf", _cfg(controller=_open_loop(), estimator=_filter("ekf"))),
    ],
    "fig6-covariance": lambda: [
        ("", _cfg(controller=_open_loop(), estimator=_filter("ekf"))),
    ],
    "fig7-8-mmae": lambda: [
        ("", _cfg(controller=_open_loop(),
                  estimator={**_filter("mmae-ekf"), "multipliers": list(MMAE_MULTIPLIERS)})),
    ],
    # alpha above the open-loop decay rate gamma + M, otherwise the law slows convergence
    "fig9-control": lambda: [
        ("", _cfg(controller={"kind": "lyapunov-estimated", "alpha": 2 * GAMMA, "target": "ground"},
                  estimator=_filter("ekf"))),
    ],
}


def available_recipes():
    return sorted(_RECIPES)


def recipe_runs(name):
    """All ``(label, config)`` runs of a recipe; labels name output subfolders."""
    try:
        factory = _RECIPES[name]
    except KeyError:
        raise ConfigError(f"unknown recipe {name!r}; available: {', '.join(available_recipes())}") from None
    return factory()


def built_in_recipes(name):
    """Primary configuration of a recipe (the last run for multi-run recipes)."""
    return recipe_runs(name)[-1][1]
