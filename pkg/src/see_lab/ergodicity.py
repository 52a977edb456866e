"""Monte Carlo estimators and verdicts for the quantitative ergodicity bounds.

Each estimator drives a batch of (possibly coupled) paths through the
reflected stepper, reduces per-path functionals online, and compares the
sample mean against the corresponding explicit bound:

  weighted contraction   E[e^{-4∫‖X‖²} |X−Y|²] ≤ e^{(4C₁ − (3/4)λ_{N+1}) t} |x−y|²
  fourth moment          E[e^{-8∫‖X‖²} |X−Y|⁴] locally bounded in t
  exp integrability      E[e^{4δ∫‖X‖²}] ≤ e^{4δ + (8δ|f₀|² + (8δ+64δ²)(|σ₀|²+C₁)) t}
  Lyapunov               E|X(t)|² ≤ |x|² − λ₁∫E|X|² + Kt, K = 2(|f₀|²+|σ₀|²+2C₁)
  Feller modulus         E[sup_{s≤t} e^{-4∫‖X‖²}|X−X'|²] ∝ |v−v'|²
  coupled-pair distance  E d(X(t), Y(t)) as upper proxy for the coupling distance

Verdicts widen by 2 standard errors (≈95% CI) so that inequalities that hold
in expectation do not fail on sampling noise.  Every estimator is a
deterministic function of (plan.base_seed, model): sub-streams are derived
per estimator name, and aggregation is done on per-path arrays assembled in
path-index order.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import ModelSpec
from .coupling import DistanceParams, d_distance_arr, select_delta
from .dynamics import StepperConfig, n_steps_for, run_paths, steps_for_times
from .errors import ValidationError
from .rng import derive_seed
from .spectral import h_norm_arr, validate_h1

# ---------------------------------------------------------------------------
# plans, series, verdicts


@dataclass(frozen=True)
class MonteCarloPlan:
    n_paths: int
    t_grid: np.ndarray
    base_seed: int
    cfg: StepperConfig = field(default_factory=StepperConfig)
    model_id: str = ""  # when set, estimators reject mismatched models

    def __post_init__(self):
        grid = np.asarray(self.t_grid, dtype=float)
        if self.n_paths < 2:
            raise ValidationError("n_paths must be at least 2")
        if grid.size == 0:
            raise ValidationError("t_grid must be nonempty")
        if np.any(np.diff(grid) <= 0.0) or np.any(grid < 0.0):
            raise ValidationError("t_grid must be increasing and nonnegative")
        steps_for_times(grid, self.cfg.dt)  # raises if not dt-divisible
        object.__setattr__(self, "t_grid", grid)

    @property
    def grid_steps(self) -> np.ndarray:
        return steps_for_times(self.t_grid, self.cfg.dt)

    def check_model(self, model):
        if self.model_id and self.model_id != model.model_id:
            raise ValidationError(
                f"plan was built for model {self.model_id}, got {model.model_id}"
            )


@dataclass(frozen=True)
class EstimateSeries:
    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_effective: np.ndarray


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    margin: float
    detail: str


def _series_from_values(t_grid, values) -> EstimateSeries:
    """values: (P, G) per-path samples -> mean/stderr series per grid time.

    An overflowed (infinite) sample poisons the mean to infinity on purpose;
    n_effective counts the finite samples."""
    n_eff = np.isfinite(values).sum(axis=0)
    mean = values.mean(axis=0)
    if values.shape[0] > 1:
        with np.errstate(invalid="ignore"):
            sd = values.std(axis=0, ddof=1)
        stderr = np.where(np.isfinite(sd), sd / np.sqrt(values.shape[0]), np.inf)
    else:
        stderr = np.zeros(values.shape[1])
    return EstimateSeries(np.asarray(t_grid, float), mean, stderr, n_eff)


# ---------------------------------------------------------------------------
# batch capture machinery


class ValueCapture:
    """Record named per-path functionals at grid steps.

    channels: name -> fn(rt) -> (P,), evaluated at each grid step (step 0
    included via begin).  sups: same, but the running max since t = 0 is
    what gets snapshotted at grid steps.
    """

    def __init__(self, grid_steps, channels, sups=None):
        self.cols = {int(s): i for i, s in enumerate(np.asarray(grid_steps))}
        self.n_grid = len(self.cols)
        self.channels = channels
        self.sups = sups or {}
        self.values = {}
        self._running = {}

    def begin(self, rt):
        for name in self.channels:
            self.values[name] = np.empty((rt.p, self.n_grid))
        for name, fn in self.sups.items():
            self.values[name] = np.empty((rt.p, self.n_grid))
            self._running[name] = fn(rt).copy()
        if 0 in self.cols:
            col = self.cols[0]
            for name, fn in self.channels.items():
                self.values[name][:, col] = fn(rt)
            for name in self.sups:
                self.values[name][:, col] = self._running[name]

    def on_step(self, rt):
        for name, fn in self.sups.items():
            np.maximum(self._running[name], fn(rt), out=self._running[name])
        col = self.cols.get(rt.k + 1)
        if col is None:
            return
        for name, fn in self.channels.items():
            self.values[name][:, col] = fn(rt)
        for name in self.sups:
            self.values[name][:, col] = self._running[name]

    def finish(self, rt):
        pass


def _run_captured(
    model,
    plan: MonteCarloPlan,
    x0_rows: np.ndarray,
    seed_tag: str,
    channels,
    sups=None,
    y0_rows=None,
    correction=True,
    extra_steps: int = 0,
    workers: int = 1,
):
    """Run plan.n_paths paths per start row and capture channel values.

    x0_rows may be a single (M,) start (broadcast to all paths) or a (P, M)
    array of per-path starts.  Returns dict name -> (P, G) in path order.
    """
    grid_steps = plan.grid_steps
    n_steps = int(grid_steps.max()) + extra_steps
    plan.check_model(model)
    x0 = np.atleast_2d(np.asarray(x0_rows, dtype=float))
    p = x0.shape[0] if x0.shape[0] > 1 else plan.n_paths
    if x0.shape[0] == 1:
        x0 = np.repeat(x0, p, axis=0)
    y0 = None
    if y0_rows is not None:
        y0 = np.atleast_2d(np.asarray(y0_rows, dtype=float))
        if y0.shape[0] == 1:
            y0 = np.repeat(y0, p, axis=0)
    seed = derive_seed(plan.base_seed, seed_tag)

    workers = max(1, min(int(workers), p))
    bounds = np.linspace(0, p, workers + 1).astype(int)
    chunks = [(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i] < bounds[i + 1]]

    def run_chunk(lo, hi):
        cap = ValueCapture(grid_steps, channels, sups)
        run_paths(
            model,
            plan.cfg,
            x0[lo:hi],
            n_steps,
            seed,
            np.arange(lo, hi),
            recorders=[cap],
            y0=None if y0 is None else y0[lo:hi],
            correction=correction,
        )
        return cap.values

    if len(chunks) == 1:
        results = [run_chunk(*chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(lambda c: run_chunk(*c), chunks))
    names = list(channels) + list(sups or {})
    return {n: np.concatenate([r[n] for r in results], axis=0) for n in names}


# channel builders ----------------------------------------------------------


def _chan_weighted_gap(coef: float, power: int):
    def fn(rt):
        gap = rt.x_new - rt.y_new
        g2 = (gap * gap).sum(axis=1)
        w = np.exp(-coef * rt.vsq_trapz_x)
        return w * g2 ** (power / 2.0)

    return fn


def _chan_exp_vsq(four_delta: float):
    def fn(rt):
        return np.exp(four_delta * rt.vsq_trapz_x)

    return fn


def _chan_d_gap(params: DistanceParams):
    def fn(rt):
        return d_distance_arr(h_norm_arr(rt.x_new - rt.y_new), params)

    return fn


# ---------------------------------------------------------------------------
# estimators


def weighted_contraction_estimate(model: ModelSpec, x, y, plan: MonteCarloPlan):
    """Sample E[exp(−4∫₀ᵗ‖X‖²) |X(t) − Y(t)|²] and compare with
    exp{(4C₁ − (3/4)λ_{N+1}) t} |x−y|² at every grid time."""
    h1 = validate_h1(model)
    if not h1.passed:
        warnings.warn("spectral-gap condition fails; contraction bound may be void")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    vals = _run_captured(
        model, plan, x, "weighted_contraction",
        {"wgap": _chan_weighted_gap(4.0, 2)}, y0_rows=y,
    )
    series = _series_from_values(plan.t_grid, vals["wgap"])
    gap0 = float(h_norm_arr(x - y) ** 2)
    expo = 4.0 * model.lipschitz_c1 - 0.75 * float(
        model.basis.eigenvalues[model.coupling_n]
    )
    bound = np.exp(expo * series.t) * gap0
    ok = series.mean - 2.0 * series.stderr <= bound
    margin = float(np.min(bound - (series.mean - 2.0 * series.stderr)))
    verdict = Verdict(
        name="weighted_contraction",
        passed=bool(ok.all()),
        margin=margin,
        detail=(
            "E[exp(-4*int ||X||^2) |X-Y|^2] - 2se <= "
            f"exp(({expo:.6g})t)|x-y|^2 at all grid t"
        ),
    )
    return series, bound, verdict


def fourth_moment_estimate(model: ModelSpec, x, y, plan: MonteCarloPlan):
    """Sample E[exp(−8∫‖X‖²)|X−Y|⁴]/|x−y|⁴ and check it stays locally
    bounded: max over the grid ≤ 10 × the first grid value."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    vals = _run_captured(
        model, plan, x, "fourth_moment",
        {"wgap4": _chan_weighted_gap(8.0, 4)}, y0_rows=y,
    )
    series = _series_from_values(plan.t_grid, vals["wgap4"])
    gap0_4 = float(h_norm_arr(x - y) ** 4)
    if gap0_4 == 0.0:
        ratio = np.zeros_like(series.mean)  # identical starts: zero series
    else:
        ratio = series.mean / gap0_4
    passed = bool(np.max(ratio) <= 10.0 * ratio[0] + 1e-300)
    verdict = Verdict(
        name="fourth_moment",
        passed=passed,
        margin=float(10.0 * ratio[0] - np.max(ratio)),
        detail="max_t E[exp(-8*int ||X||^2)|X-Y|^4]/|x-y|^4 <= 10x first grid value",
    )
    return series, ratio, verdict


def exp_integrability_bound(model: ModelSpec, delta: float, t: np.ndarray):
    rate = (
        8.0 * delta * model.f0_vstar**2
        + (8.0 * delta + 64.0 * delta**2) * model.sigma0_hs**2
        + (8.0 * delta + 64.0 * delta**2) * model.lipschitz_c1
    )
    return np.exp(4.0 * delta + rate * np.asarray(t))


def exp_integrability_estimate(model: ModelSpec, x, delta: float, plan: MonteCarloPlan):
    """Sample E[exp(4δ∫₀ᵗ‖X‖²)] against its explicit exponential bound."""
    if not 0.0 < delta < 1.0:
        raise ValidationError("delta must lie in (0, 1)")
    vals = _run_captured(
        model, plan, np.asarray(x, dtype=float), "exp_integrability",
        {"expint": _chan_exp_vsq(4.0 * delta)},
    )
    series = _series_from_values(plan.t_grid, vals["expint"])
    bound = exp_integrability_bound(model, delta, series.t)
    if not np.all(np.isfinite(series.mean)):
        verdict = Verdict(
            name="exp_integrability",
            passed=False,
            margin=float("-inf"),
            detail="exponential estimate overflowed to infinity",
        )
        return series, bound, verdict
    rel = np.where(series.mean > 0, series.stderr / series.mean, 0.0)
    ok = series.mean <= bound * (1.0 + 2.0 * rel)
    verdict = Verdict(
        name="exp_integrability",
        passed=bool(ok.all()),
        margin=float(np.min(bound * (1.0 + 2.0 * rel) - series.mean)),
        detail=f"E[exp(4d*int ||X||^2)] <= bound*(1+2 rel se), delta={delta:.4g}",
    )
    return series, bound, verdict


def lyapunov_constants(model: ModelSpec):
    k_const = 2.0 * (model.f0_vstar**2 + model.sigma0_hs**2 + 2.0 * model.lipschitz_c1)
    return float(model.basis.eigenvalues[0]), k_const


def lyapunov_check(model: ModelSpec, x, plan: MonteCarloPlan):
    """Check E|X(t)|² + λ₁ ∫₀ᵗ E|X|² ≤ |x|² + Kt within 5% slack + 2 se."""
    x = np.asarray(x, dtype=float)
    gamma_lyap, k_const = lyapunov_constants(model)

    def chan(rt):
        return rt.hsq_x + gamma_lyap * rt.hsq_trapz_x

    vals = _run_captured(model, plan, x, "lyapunov", {"lhs": chan})
    series = _series_from_values(plan.t_grid, vals["lhs"])
    x_sq = float((x * x).sum())
    rhs = x_sq + k_const * series.t
    allowed = rhs * 1.05 + 2.0 * series.stderr
    ok = series.mean <= allowed
    verdict = Verdict(
        name="lyapunov",
        passed=bool(ok.all()),
        margin=float(np.min(allowed - series.mean)),
        detail=(
            f"E|X(t)|^2 + lambda_1*int E|X|^2 <= |x|^2 + K t (K={k_const:.6g}) "
            "with 5% slack + 2se"
        ),
    )
    return series, verdict, {"gamma": gamma_lyap, "K": k_const}


def feller_modulus_estimate(
    model: ModelSpec, v, v_prime, plan: MonteCarloPlan, scales=(1.0, 0.1, 0.01)
):
    """Synchronous-coupling modulus: mean of sup_{s≤t} e^{-4∫‖X‖²}|X−X'|²
    must scale like |v−v'|² (ratio stable within factor 4 across two decades
    of |v−v'|)."""
    v = np.asarray(v, dtype=float)
    gap = np.asarray(v_prime, dtype=float) - v
    t_max = float(plan.t_grid[-1])
    ratios = []
    for s in scales:
        vp = v + s * gap
        vals = _run_captured(
            model, plan, v, f"feller_scale_{s}",
            {}, sups={"sup": _chan_weighted_gap(4.0, 2)},
            y0_rows=vp, correction=False,
        )
        sup_vals = vals["sup"][:, -1]
        gap_sq = float(h_norm_arr(s * gap) ** 2)
        ratios.append(float(sup_vals.mean()) / gap_sq if gap_sq > 0.0 else 0.0)
    if max(ratios) == 0.0:
        spread = 1.0  # v = v': zero modulus at every scale
    else:
        spread = max(ratios) / max(min(ratios), 1e-300)
    verdict = Verdict(
        name="feller_modulus",
        passed=bool(spread <= 4.0),
        margin=float(4.0 - spread),
        detail=(
            f"sup-modulus/|v-v'|^2 ratios {ratios} at t={t_max:.4g} spread {spread:.3g} <= 4"
        ),
    )
    return ratios, verdict


def coupled_distance_series(
    model: ModelSpec, x, y, plan: MonteCarloPlan, p: DistanceParams, seed_tag=None
) -> EstimateSeries:
    """E d(X(t), Y(t)) over the steered coupling at every grid time."""
    vals = _run_captured(
        model, plan, np.asarray(x, float), seed_tag or "coupled_distance",
        {"d": _chan_d_gap(p)}, y0_rows=np.asarray(y, float),
    )
    return _series_from_values(plan.t_grid, vals["d"])


def wasserstein_upper(
    model: ModelSpec, x, y, t: float, plan: MonteCarloPlan, p: DistanceParams
):
    """Coupled-pair mean distance at time t: an upper proxy for the coupling
    distance between the two time-t laws (the steered pair is one coupling).
    Returns (mean, stderr)."""
    sub = MonteCarloPlan(plan.n_paths, np.array([t]) if t > 0 else np.array([0.0]),
                         plan.base_seed, plan.cfg, plan.model_id)
    series = coupled_distance_series(model, x, y, sub, p, seed_tag="wasserstein_upper")
    return float(series.mean[-1]), float(series.stderr[-1])


def _sample_pairs(rng, n_pairs, m, center_radius, gap_lo, gap_hi):
    from .dynamics import sample_ball

    xs = sample_ball(rng, n_pairs, m, radius=center_radius)
    dirs = rng.standard_normal((n_pairs, m))
    dirs /= np.maximum(h_norm_arr(dirs), 1e-300)[:, None]
    lens = gap_lo + (gap_hi - gap_lo) * rng.random(n_pairs)
    ys = xs + dirs * lens[:, None]
    return xs, ys


def contraction_check(
    model: ModelSpec,
    plan: MonteCarloPlan,
    p: DistanceParams,
    t0_search_grid=None,
    n_pairs: int = 20,
):
    """Find the smallest grid time t0 at which the coupled-pair distance
    ratio (mean + 2se)/d(x,y) is ≤ 2/3 for every sampled pair with d < 1.

    Returns (verdict, t0 or None, alpha) where alpha is the worst ratio at t0.
    """
    grid = np.asarray(t0_search_grid if t0_search_grid is not None else plan.t_grid,
                      dtype=float)
    grid = grid[grid > 0.0]
    if grid.size == 0:
        raise ValidationError("t0 search grid needs positive times")
    rng = np.random.default_rng(derive_seed(plan.base_seed, "contraction_pairs"))
    m = model.dim
    xs, ys = _sample_pairs(rng, n_pairs, m, 0.3, 0.1, 0.6)
    d0 = d_distance_arr(h_norm_arr(xs - ys), p)
    if np.any(d0 >= 1.0) or np.any(d0 <= 0.0):
        raise ValidationError("sampled pairs must have 0 < d(x,y) < 1")

    x_rows = np.repeat(xs, plan.n_paths, axis=0)
    y_rows = np.repeat(ys, plan.n_paths, axis=0)
    sub = MonteCarloPlan(plan.n_paths, grid, plan.base_seed, plan.cfg, plan.model_id)
    vals = _run_captured(
        model, sub, x_rows, "contraction_check", {"d": _chan_d_gap(p)}, y0_rows=y_rows
    )
    per_pair = vals["d"].reshape(n_pairs, plan.n_paths, grid.size)
    mean = per_pair.mean(axis=1)
    se = per_pair.std(axis=1, ddof=1) / np.sqrt(plan.n_paths)
    ratios = (mean + 2.0 * se) / d0[:, None]
    worst = ratios.max(axis=0)  # per grid time
    hits = np.nonzero(worst <= 2.0 / 3.0)[0]
    if hits.size:
        j = int(hits[0])
        t0, alpha = float(grid[j]), float(worst[j])
        verdict = Verdict(
            name="contraction",
            passed=True,
            margin=float(2.0 / 3.0 - alpha),
            detail=f"(mean+2se)/d <= 2/3 for all {n_pairs} pairs at t0={t0:.4g}",
        )
        return verdict, t0, alpha
    verdict = Verdict(
        name="contraction",
        passed=False,
        margin=float(2.0 / 3.0 - worst[-1]),
        detail=f"no grid t0 reached ratio 2/3; ratio at t={grid[-1]:.4g} is {worst[-1]:.4g}",
    )
    return verdict, None, float(worst[-1])


def d_small_check(
    model: ModelSpec,
    plan: MonteCarloPlan,
    p: DistanceParams,
    m_level: float,
    t: float,
    n_pairs: int = 10,
):
    """On {V ≤ M} ∩ ball (V = |·|²_H), estimate sup over sampled pairs of the
    coupled-pair mean distance at time t; report ε = 1 − sup (CI-widened).

    Passes iff ε ≥ 0.05."""
    rng = np.random.default_rng(derive_seed(plan.base_seed, "d_small_pairs"))
    m = model.dim
    radius = min(1.0, float(np.sqrt(max(m_level, 0.0))))
    from .dynamics import sample_ball

    xs = sample_ball(rng, n_pairs, m, radius=radius)
    ys = sample_ball(rng, n_pairs, m, radius=radius)
    x_rows = np.repeat(xs, plan.n_paths, axis=0)
    y_rows = np.repeat(ys, plan.n_paths, axis=0)
    sub = MonteCarloPlan(plan.n_paths, np.array([t]), plan.base_seed, plan.cfg, plan.model_id)
    vals = _run_captured(
        model, sub, x_rows, "d_small_check", {"d": _chan_d_gap(p)}, y0_rows=y_rows
    )
    per_pair = vals["d"].reshape(n_pairs, plan.n_paths)
    mean = per_pair.mean(axis=1)
    se = per_pair.std(axis=1, ddof=1) / np.sqrt(plan.n_paths)
    sup = float(np.max(mean + 2.0 * se))
    eps = 1.0 - sup
    verdict = Verdict(
        name="d_small",
        passed=bool(eps >= 0.05),
        margin=float(eps - 0.05),
        detail=f"sup over {n_pairs} pairs in {{V<={m_level:g}}} of E d(X(t),Y(t)) at t={t:g}",
    )
    return verdict, eps


# ---------------------------------------------------------------------------
# occupation measures and invariance


@dataclass(frozen=True)
class OccupationMeasure:
    states: np.ndarray  # (S, M) thinned snapshots
    weights: np.ndarray  # (S,) equal, sums to 1
    mean_coeffs: np.ndarray  # (M,)
    second_moments: np.ndarray  # (M,) per-mode E[X_i²]
    se_mean: np.ndarray  # batch-means standard errors
    se_second: np.ndarray
    vsq_time_average: float  # (1/T)∫₀ᵀ ‖X‖² ds over the full run
    vsq_bound: float  # 2(|f₀|² + |σ₀|² + 2C₁)
    seed: int


class _SnapshotRecorder:
    def __init__(self, burn_steps, thin, n_snaps, m):
        self.burn = burn_steps
        self.thin = thin
        self.rows = np.empty((n_snaps, m))
        self.count = 0

    def begin(self, rt):
        if self.burn == 0:
            self.rows[self.count] = rt.x_new[0]
            self.count += 1

    def on_step(self, rt):
        k1 = rt.k + 1
        if k1 >= self.burn and (k1 - self.burn) % self.thin == 0:
            if self.count < self.rows.shape[0]:
                self.rows[self.count] = rt.x_new[0]
                self.count += 1

    def finish(self, rt):
        self.final_vsq_trapz = float(rt.vsq_trapz_x[0])


def batch_means_se(samples: np.ndarray, n_batches: int = 20) -> np.ndarray:
    """Standard error of the mean of an autocorrelated series via batch means.

    samples: (S,) or (S, M); returns per-column se."""
    s = np.atleast_2d(samples.T).T
    nb = max(2, min(n_batches, s.shape[0] // 2)) if s.shape[0] >= 4 else 2
    edges = np.linspace(0, s.shape[0], nb + 1).astype(int)
    means = np.stack([s[edges[i]: edges[i + 1]].mean(axis=0) for i in range(nb)])
    return means.std(axis=0, ddof=1) / np.sqrt(nb)


def occupation_sampler(
    model: ModelSpec,
    x,
    t_burn: float,
    t_avg: float,
    thin: int,
    cfg: StepperConfig,
    seed: int,
) -> OccupationMeasure:
    """Trajectory snapshots every `thin` steps on [T_burn, T_burn + T_avg],
    equal weights, plus the running time average of ‖X‖² against its
    Lipschitz-constant bound."""
    from .dynamics import _as_batch_x0

    x0 = _as_batch_x0(model, np.asarray(x, dtype=float))
    burn_steps = n_steps_for(t_burn, cfg.dt)
    avg_steps = n_steps_for(t_avg, cfg.dt)
    n_snaps = avg_steps // thin + 1
    rec = _SnapshotRecorder(burn_steps, thin, n_snaps, model.dim)
    run_paths(model, cfg, x0, burn_steps + avg_steps, seed, [0], recorders=[rec])
    states = rec.rows[: rec.count]
    second = states * states
    _, k_const = lyapunov_constants(model)
    t_total = (burn_steps + avg_steps) * cfg.dt
    return OccupationMeasure(
        states=states,
        weights=np.full(states.shape[0], 1.0 / states.shape[0]),
        mean_coeffs=states.mean(axis=0),
        second_moments=second.mean(axis=0),
        se_mean=batch_means_se(states),
        se_second=batch_means_se(second),
        vsq_time_average=rec.final_vsq_trapz / t_total,
        vsq_bound=k_const,
        seed=seed,
    )


def bounded_test_functions(m: int, n_fns: int):
    """Deterministic bounded-Lipschitz observables: mode-wise sinusoids plus
    the truncated squared norm."""
    fns = []
    j = 0
    while len(fns) < n_fns - 1:
        mode = j % min(m, 4)
        freq = 1.0 + (j // min(m, 4))
        if j % 2 == 0:
            fns.append((f"sin_{freq:g}_u{mode + 1}",
                        lambda u, a=freq, i=mode: np.sin(a * u[..., i])))
        else:
            fns.append((f"cos_{freq:g}_u{mode + 1}",
                        lambda u, a=freq, i=mode: np.cos(a * u[..., i])))
        j += 1
    fns.append(("min_hsq_1", lambda u: np.minimum((u * u).sum(axis=-1), 1.0)))
    return fns


def invariance_residual(
    model: ModelSpec,
    occ: OccupationMeasure,
    test_horizon: float,
    n_test_fns: int,
    plan: MonteCarloPlan,
):
    """Restart paths from occupation samples, evolve the test horizon, and
    compare E_occ[T_Δφ] with E_occ[φ] for each test function.

    Passes iff every |residual| ≤ 3 × (batch-means) stderr of the paired
    differences."""
    starts = occ.states
    n_steps = n_steps_for(test_horizon, plan.cfg.dt)
    seed = derive_seed(plan.base_seed, "invariance_residual")
    finals, _ = run_paths(
        model, plan.cfg, starts.copy(), n_steps, seed, np.arange(starts.shape[0])
    )
    fns = bounded_test_functions(model.dim, n_test_fns)
    rows = []
    all_ok = True
    for name, fn in fns:
        diff = fn(finals) - fn(starts)
        resid = float(np.abs(diff.mean()))
        se = float(batch_means_se(diff)[0])
        ok = resid <= 3.0 * se + 1e-12
        all_ok &= ok
        rows.append((name, resid, se, ok))
    verdict = Verdict(
        name="invariance_residual",
        passed=bool(all_ok),
        margin=float(min(3.0 * se + 1e-12 - r for _, r, se, _ in rows)),
        detail=f"|E_occ[T_dphi] - E_occ[phi]| <= 3se for {len(rows)} test functions",
    )
    return verdict, rows


# ---------------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class RateFit:
    rate: float  # r > 0 means decay e^{-rt}
    prefactor: float  # C
    r_squared: float
    rate_se: float
    log_prefactor_se: float
    n_used: int


def fit_exponential_rate(series: EstimateSeries) -> RateFit:
    """Least-squares fit of log(mean) = log C − r t.

    Nonpositive or nonfinite means are dropped with a warning; at least
    three usable points are required."""
    t = np.asarray(series.t, dtype=float)
    m = np.asarray(series.mean, dtype=float)
    usable = np.isfinite(m) & (m > 0.0)
    if usable.sum() < m.size:
        warnings.warn(f"dropping {int(m.size - usable.sum())} nonpositive mean entries")
    if usable.sum() < 3:
        raise ValidationError("need at least 3 positive mean values to fit a rate")
    t, ym = t[usable], np.log(m[usable])
    n = t.size
    a = np.vstack([t, np.ones(n)]).T
    coef, *_ = np.linalg.lstsq(a, ym, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = ym - a @ coef
    ss_res = float((resid * resid).sum())
    ss_tot = float(((ym - ym.mean()) ** 2).sum())
    r_sq = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    if n > 2:
        s2 = ss_res / (n - 2)
        txx = float(((t - t.mean()) ** 2).sum())
        slope_se = float(np.sqrt(s2 / max(txx, 1e-300)))
        inter_se = float(np.sqrt(s2 * (1.0 / n + t.mean() ** 2 / max(txx, 1e-300))))
    else:
        slope_se = inter_se = float("nan")
    return RateFit(
        rate=-slope,
        prefactor=float(np.exp(intercept)),
        r_squared=r_sq,
        rate_se=slope_se,
        log_prefactor_se=inter_se,
        n_used=n,
    )


# ---------------------------------------------------------------------------
# report assembly and persistence


@dataclass(frozen=True)
class ErgodicityReport:
    fitted_rate: float
    fitted_constant: float
    r_squared: float
    verdicts: list
    lyapunov_gamma: float
    lyapunov_k: float
    distance: DistanceParams
    delta_exponent: float
    shift_cost_mean: float
    notes: tuple = ()

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts)


def run_ergodicity_battery(
    model: ModelSpec,
    plan: MonteCarloPlan,
    dist: DistanceParams | None = None,
    x=None,
    y=None,
    occupation: bool = True,
    workers: int = 1,
) -> tuple[ErgodicityReport, dict]:
    """Full estimator battery; returns (report, series dict for persistence)."""
    m = model.dim
    if x is None:
        x = np.zeros(m)
        x[0] = 0.5
    if y is None:
        y = np.zeros(m)
        y[0] = -0.5
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    delta, expo = select_delta(model)
    if dist is None:
        dist = DistanceParams(n_tilde=1.0, delta=delta)

    verdicts = []
    series_out = {}
    h1 = validate_h1(model)
    verdicts.append(
        Verdict(
            name="h1_spectral_gap",
            passed=h1.passed and h1.pinv_ok,
            margin=h1.lambda_next - h1.threshold,
            detail=(
                f"lambda_(N+1)={h1.lambda_next:g} > threshold={h1.threshold:g} "
                f"and noise invertible on coupled modes: {h1.pinv_ok}"
            ),
        )
    )
    if not h1.passed:
        warnings.warn("spectral-gap condition fails for this model")

    wseries, wbound, v = weighted_contraction_estimate(model, x, y, plan)
    verdicts.append(v)
    series_out["weighted_contraction"] = (wseries, wbound)

    fseries, _, v = fourth_moment_estimate(model, x, y, plan)
    verdicts.append(v)
    series_out["fourth_moment"] = (fseries, None)

    eseries, ebound, v = exp_integrability_estimate(model, x, delta, plan)
    verdicts.append(v)
    series_out["exp_integrability"] = (eseries, ebound)

    lseries, v, lyap = lyapunov_check(model, x, plan)
    verdicts.append(v)
    series_out["lyapunov"] = (lseries, None)

    _, v = feller_modulus_estimate(model, x, y, plan)
    verdicts.append(v)

    v, t0, alpha = contraction_check(model, plan, dist)
    verdicts.append(v)

    v, eps = d_small_check(model, plan, dist, m_level=1.0, t=float(plan.t_grid[-1]))
    verdicts.append(v)

    if occupation:
        occ = occupation_sampler(
            model, np.zeros(m), t_burn=1.0, t_avg=20.0, thin=200,
            cfg=plan.cfg, seed=derive_seed(plan.base_seed, "occupation"),
        )
        v, _ = invariance_residual(model, occ, 0.25, 10, plan)
        verdicts.append(v)
        verdicts.append(
            Verdict(
                name="vsq_time_average",
                passed=bool(occ.vsq_time_average <= occ.vsq_bound),
                margin=float(occ.vsq_bound - occ.vsq_time_average),
                detail="(1/T) int ||X||^2 <= 2(|f0|^2+|s0|^2+2C1)",
            )
        )

    dseries = coupled_distance_series(model, x, y, plan, dist)
    series_out["coupled_distance"] = (dseries, None)
    try:
        fit = fit_exponential_rate(dseries)
        verdicts.append(
            Verdict(
                name="rate_fit",
                passed=fit.rate > 0.0,
                margin=fit.rate,
                detail=f"fitted decay rate r={fit.rate:.6g} > 0 with r^2={fit.r_squared:.4g}",
            )
        )
    except ValidationError as exc:
        fit = RateFit(float("nan"), float("nan"), float("nan"),
                      float("nan"), float("nan"), 0)
        verdicts.append(
            Verdict(name="rate_fit", passed=False, margin=float("-inf"),
                    detail=f"rate fit unavailable: {exc}")
        )

    # shift cost statistic (the coupling-cost proxy reported instead of a
    # total-variation certificate)
    vals = _run_captured(
        model, plan, x, "shift_cost", {"cost": lambda rt: rt.beta_trapz},
        y0_rows=y, workers=workers,
    )
    cost_mean = float(vals["cost"][:, -1].mean())

    lam_next = float(model.basis.eigenvalues[model.coupling_n])
    c1 = model.lipschitz_c1
    notes = (
        f"contraction_bound_exponent = {4.0 * c1 - 0.75 * lam_next:.6g}",
        f"contraction_bound_exponent_alt = {5.0 * c1 - 0.8 * lam_next:.6g}"
        " (alternate constant set, reported for comparison)",
        f"delta grid search: delta={delta:g}, combined exponent={expo:.6g}",
    )
    report = ErgodicityReport(
        fitted_rate=fit.rate,
        fitted_constant=fit.prefactor,
        r_squared=fit.r_squared,
        verdicts=verdicts,
        lyapunov_gamma=lyap["gamma"],
        lyapunov_k=lyap["K"],
        distance=dist,
        delta_exponent=expo,
        shift_cost_mean=cost_mean,
        notes=notes,
    )
    return report, series_out


def write_series_csv(path, series: EstimateSeries, bound=None) -> None:
    """One CSV per estimator: t,mean,stderr,bound,pass."""
    with open(path, "w") as fh:
        fh.write("t,mean,stderr,bound,pass\n")
        for i in range(series.t.size):
            b = "" if bound is None else repr(float(bound[i]))
            ok = "" if bound is None else str(bool(series.mean[i] <= bound[i] + 2 * series.stderr[i])).lower()
            fh.write(
                f"{series.t[i]!r},{float(series.mean[i])!r},"
                f"{float(series.stderr[i])!r},{b},{ok}\n"
            )


def write_report_text(path, report: ErgodicityReport) -> None:
    lines = ["ergodicity report", "=" * 18, ""]
    lines.append(f"fitted_rate r = {report.fitted_rate!r}")
    lines.append(f"fitted_constant C = {report.fitted_constant!r}")
    lines.append(f"fit r_squared = {report.r_squared!r}")
    lines.append(f"distance: n_tilde={report.distance.n_tilde!r} delta={report.distance.delta!r}")
    lines.append(f"lyapunov: gamma={report.lyapunov_gamma!r} K={report.lyapunov_k!r}")
    lines.append(f"girsanov shift cost (mean int ||beta||^2 dt) = {report.shift_cost_mean!r}")
    lines.append("")
    for v in report.verdicts:
        lines.append(f"[{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.detail} (margin {v.margin:.6g})")
    lines.append("")
    for n in report.notes:
        lines.append(n)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_battery_outputs(directory, report: ErgodicityReport, series_out: dict):
    os.makedirs(directory, exist_ok=True)
    written = []
    for name, (series, bound) in series_out.items():
        p = os.path.join(directory, f"{name}.csv")
        write_series_csv(p, series, bound)
        written.append(p)
    p = os.path.join(directory, "summary.txt")
    write_report_text(p, report)
    written.append(p)
    return written
