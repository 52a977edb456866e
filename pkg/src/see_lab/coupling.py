"""Two-trajectory coupling with shared noise and a low-mode drift steer.

The second trajectory Y gets the extra drift (λ_{N+1}/2) P_N (X − Y), which
in noise space corresponds to the shift

    β(t) = (λ_{N+1}/2) σ(Y)^{-1} P_N (X(t) − Y(t)),

well defined whenever the noise diagonal has a positive floor on the first
N modes.  The distance-like function used to quantify contraction is

    d(x, y) = Ñ |x − y|_H^{2δ/(1+δ)} ∧ 1,  δ ∈ (0, 1), Ñ > 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .coefficients import ModelSpec
from .dynamics import (
    LocalTimeLedger,
    PathSample,
    StepperConfig,
    TrajectoryRecorder,
    _as_batch_x0,
    n_steps_for,
    run_paths,
)
from .errors import ValidationError
from .spectral import StateVector, h_norm_arr, validate_h1

_trapz = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class DistanceParams:
    """Exponent parameter δ and scale Ñ of the distance-like function."""

    n_tilde: float = 1.0
    delta: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValidationError("delta must lie in (0, 1)")
        if self.n_tilde <= 0.0:
            raise ValidationError("n_tilde must be positive")

    @property
    def exponent(self) -> float:
        return 2.0 * self.delta / (1.0 + self.delta)


def d_distance(x, y, p: DistanceParams) -> float:
    """Ñ |x − y|_H^{2δ/(1+δ)} capped at 1; symmetric, zero iff x = y."""
    cx = x.coeffs if isinstance(x, StateVector) else np.asarray(x, dtype=float)
    cy = y.coeffs if isinstance(y, StateVector) else np.asarray(y, dtype=float)
    return float(d_distance_arr(h_norm_arr(cx - cy), p))


def d_distance_arr(gap_h: np.ndarray, p: DistanceParams) -> np.ndarray:
    return np.minimum(p.n_tilde * np.asarray(gap_h) ** p.exponent, 1.0)


def girsanov_shift(model: ModelSpec, x_state, y_state) -> np.ndarray:
    """Noise-space steering vector at a state pair.

    Supported on the first N components; component i is
    (λ_{N+1}/2)(x_i − y_i)/(s_i g(|y|_H)).  Requires a noise map with a
    positive diagonal floor on those modes.
    """
    n = model.coupling_n
    if model.noise.pseudo_inverse_floor(n) is None:
        raise ValidationError(
            "noise map has no pseudo-inverse on the coupled modes"
        )
    cx = x_state.coeffs if isinstance(x_state, StateVector) else np.asarray(x_state)
    cy = y_state.coeffs if isinstance(y_state, StateVector) else np.asarray(y_state)
    if cx.shape != (model.dim,) or cy.shape != (model.dim,):
        raise ValidationError("state length != model dim")
    diag = model.noise.diag_batch(cy[None, :])[0]
    lam_next = float(model.basis.eigenvalues[n])
    out = np.zeros(model.dim)
    out[:n] = 0.5 * lam_next * (cx[:n] - cy[:n]) / diag[:n]
    return out


def shift_bound_constant(model: ModelSpec) -> float:
    """Explicit constant C with ‖β‖_{l²} ≤ C |x − y|_H for the diagonal noise."""
    n = model.coupling_n
    floor = model.noise.pseudo_inverse_floor(n)
    if floor is None:
        raise ValidationError("noise map has no pseudo-inverse on the coupled modes")
    return float(model.basis.eigenvalues[n]) / (2.0 * floor)


def select_delta(model: ModelSpec, grid=None) -> tuple[float, float]:
    """Grid-search δ ∈ (0,1) minimizing the combined contraction exponent

        [8δ|f0|² + (8δ+64δ²)|σ0|² + (64δ²+12δ)C_1 − (3/4)δλ_{N+1}] / (1+δ),

    ties broken toward smaller δ.  Returns (δ, exponent)."""
    if grid is None:
        grid = np.round(np.arange(0.05, 0.951, 0.05), 2)
    lam_next = float(model.basis.eigenvalues[model.coupling_n])
    f0sq = model.f0_vstar**2
    s0sq = model.sigma0_hs**2
    c1 = model.lipschitz_c1
    best = None
    for d in grid:
        e = (
            8.0 * d * f0sq
            + (8.0 * d + 64.0 * d * d) * s0sq
            + (64.0 * d * d + 12.0 * d) * c1
            - 0.75 * d * lam_next
        ) / (1.0 + d)
        if best is None or e < best[1] - 1e-15:
            best = (float(d), float(e))
    return best


@dataclass(frozen=True)
class CoupledPath:
    """Synchronized pair driven by shared noise, with the steering record."""

    x_path: PathSample
    y_path: PathSample
    shift_record: np.ndarray  # (K+1, M) β at every grid point (NaN if no pinv)
    shift_cost: float  # trapezoidal ∫ ‖β‖²_{l²} dt


class _BetaRecorder:
    def __init__(self):
        self.record = None

    def begin(self, rt):
        self.record = np.empty((rt.n_steps + 1, rt.x_new.shape[1]))
        self.record[0] = rt.beta_vec()[0]

    def on_step(self, rt):
        self.record[rt.k + 1] = rt.beta_vec()[0]

    def finish(self, rt):
        pass


def simulate_coupled(
    model: ModelSpec,
    x,
    y,
    t_final: float,
    cfg: StepperConfig,
    seed: int,
    path_index: int = 0,
) -> CoupledPath:
    """Integrate the pair (X, Y) from (x, y) with shared Gaussian increments
    and the P_N drift correction in Y; reflection applied to each system
    independently.  Warns (does not fail) if the spectral-gap condition does
    not hold for the model."""
    x0 = _as_batch_x0(model, x)
    y0 = _as_batch_x0(model, y)
    if not validate_h1(model).passed:
        warnings.warn("spectral-gap condition fails; coupling may not contract")
    n_steps = n_steps_for(t_final, cfg.dt)
    tx, ty = TrajectoryRecorder("x"), TrajectoryRecorder("y")
    recorders = [tx, ty]
    has_pinv = model.noise.pseudo_inverse_floor(model.coupling_n) is not None
    beta_rec = None
    if has_pinv:
        beta_rec = _BetaRecorder()
        recorders.append(beta_rec)
    run_paths(
        model, cfg, x0, n_steps, seed, [path_index], recorders=recorders, y0=y0
    )
    times = np.arange(n_steps + 1) * cfg.dt
    paths = []
    for rec in (tx, ty):
        inc = rec.increments[0]
        paths.append(
            PathSample(
                times=times,
                states=rec.states[0],
                ledger=LocalTimeLedger(inc, float(h_norm_arr(inc).sum())),
                noise_seed=seed,
                path_index=path_index,
                model_id=model.model_id,
            )
        )
    if has_pinv:
        record = beta_rec.record
        bsq = (record * record).sum(axis=1)
        cost = float(_trapz(bsq, dx=cfg.dt))
    else:
        record = np.full((n_steps + 1, model.dim), np.nan)
        cost = float("nan")
        warnings.warn("noise map has no pseudo-inverse; shift record unavailable")
    return CoupledPath(paths[0], paths[1], record, cost)


def dump_coupled_csv(cp: CoupledPath, p: DistanceParams, directory) -> str:
    """Write `coupled_<seed>_<index>.csv` with header t,|x-y|_H,d_N,shift_cost_cum."""
    import os

    times = cp.x_path.times
    gap = h_norm_arr(cp.x_path.states - cp.y_path.states)
    d_vals = d_distance_arr(gap, p)
    bsq = (cp.shift_record * cp.shift_record).sum(axis=1)
    dt = float(times[1] - times[0]) if times.size > 1 else 0.0
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dt * (bsq[1:] + bsq[:-1]))])
    name = f"coupled_{cp.x_path.noise_seed}_{cp.x_path.path_index}.csv"
    full = os.path.join(directory, name)
    with open(full, "w") as fh:
        fh.write("t,|x-y|_H,d_N,shift_cost_cum\n")
        for k in range(times.size):
            fh.write(
                f"{times[k]!r},{float(gap[k])!r},{float(d_vals[k])!r},{float(cum[k])!r}\n"
            )
    return full
