"""Shipped simulation scenario presets: four covariate-shift regimes
crossed with full or reduced external covariates.

The common design: three classes, five covariates (intercept included)
with equicorrelation 0.8, shared slopes with free per-source intercepts,
and a binary external coarsening that merges the reference class with
class 1 and isolates class 2. The external study is twenty times the
primary study and enters only through nearest-neighbour predictions.

The multiplier penalty is quoted against the summed (not averaged)
log-likelihood, hence tau = 0.1 / n on the per-observation scale.
"""

from __future__ import annotations

from .simengine import ScenarioConfig

__all__ = ["PRESET_NAMES", "preset_config", "preset_dict"]

_N_PRIMARY = 500
_BASE = dict(
    n=_N_PRIMARY,
    N=10000,
    p=5,
    n_classes=3,
    theta_true=(0.2, 1, -1, 1, -1, -0.1, -1, 1, 1, 1),
    phi_free_true=(0.35, -0.25),
    groups=((1, 3), (2,)),
    shared="slopes",
    correlation=0.8,
    predictor="knn",
    knn_k=400,
    knn_method="local_quadratic",
    tau=0.1 / _N_PRIMARY,
    B=200,
    reps=200,
    seed=1,
    level=0.95,
    eval_grid_size=2000,
)

_SHIFTS = {
    "noshift": "none",
    "mean": "mean",
    "variance": "variance",
    "meanvar": "mean_and_variance",
}

PRESET_NAMES = tuple(
    f"{shift}-{zmode}" for shift in _SHIFTS for zmode in ("zx", "zdrop")
)


def preset_dict(name: str) -> dict:
    """Plain configuration dict for a named preset."""
    try:
        shift, zmode = name.split("-")
        shift_value = _SHIFTS[shift]
    except (ValueError, KeyError):
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
        ) from None
    if zmode not in ("zx", "zdrop"):
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
        )
    cfg = dict(_BASE)
    cfg["shift"] = shift_value
    cfg["drop_column"] = None if zmode == "zx" else 5
    return cfg


def preset_config(name: str, **overrides) -> ScenarioConfig:
    """ScenarioConfig for a named preset, with field overrides."""
    cfg = preset_dict(name)
    cfg.update(overrides)
    return ScenarioConfig(**cfg)
