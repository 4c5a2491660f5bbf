"""Parameter estimation from call records: travel matrix, service rate, and
the spatially lagged arrival-rate regression with its forecasts."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
import scipy.linalg
import scipy.stats

from .geo import CityGraph

SECONDS_PER_HOUR = 3600.0
HOURS_PER_YEAR = 8760.0


@dataclass(frozen=True)
class CallRecord:
    """One processed 911 call.

    Timeline: call -> dispatch (waiting) -> arrive (travel) -> clear
    (on-scene). Response = waiting + travel; service = travel + on-scene.
    """

    call_time: datetime
    dispatch_time: datetime
    arrive_time: datetime
    clear_time: datetime
    origin_beat: str
    incident_beat: str
    priority: str = ""

    def __post_init__(self):
        if not (self.call_time <= self.dispatch_time <= self.arrive_time <= self.clear_time):
            raise ValueError("timeline violation: need call <= dispatch <= arrive <= clear")

    @property
    def waiting_s(self) -> float:
        return (self.dispatch_time - self.call_time).total_seconds()

    @property
    def travel_s(self) -> float:
        return (self.arrive_time - self.dispatch_time).total_seconds()

    @property
    def on_scene_s(self) -> float:
        return (self.clear_time - self.arrive_time).total_seconds()

    @property
    def response_s(self) -> float:
        return self.waiting_s + self.travel_s

    @property
    def service_s(self) -> float:
        return self.travel_s + self.on_scene_s


@dataclass
class TravelMatrixEstimate:
    beats: tuple[str, ...]
    tau: np.ndarray       # seconds, origin x destination
    counts: np.ndarray
    imputed: np.ndarray   # bool mask of cells not backed by observations
    empty_beats: list[str]


def estimate_travel_matrix(records: list[CallRecord], city: CityGraph) -> TravelMatrixEstimate:
    """Mean observed travel seconds per (origin beat, incident beat).

    Unobserved cells are imputed, in order of preference: the reverse
    direction's mean, then the average of the origin-row and destination-column
    means, then the citywide mean. Every imputed cell is flagged.
    """
    if not records:
        raise ValueError("no records to estimate travel times from")
    n = city.n_beats
    sums = np.zeros((n, n))
    counts = np.zeros((n, n))
    for rec in records:
        i, j = city.index(rec.origin_beat), city.index(rec.incident_beat)
        sums[i, j] += rec.travel_s
        counts[i, j] += 1
    with np.errstate(invalid="ignore"):
        tau = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    observed = counts > 0

    empty = [city.beats[i] for i in range(n)
             if counts[i, :].sum() == 0 and counts[:, i].sum() == 0]
    if empty:
        warnings.warn(f"beats with no dispatches in or out: {empty}; rows/columns imputed")

    row_mean = np.array([sums[i, observed[i]].sum() / counts[i, observed[i]].sum()
                         if observed[i].any() else np.nan for i in range(n)])
    col_mean = np.array([sums[observed[:, j], j].sum() / counts[observed[:, j], j].sum()
                         if observed[:, j].any() else np.nan for j in range(n)])
    global_mean = sums[observed].sum() / counts[observed].sum()

    for i in range(n):
        for j in range(n):
            if observed[i, j]:
                continue
            if observed[j, i]:
                tau[i, j] = tau[j, i]
            else:
                parts = [m for m in (row_mean[i], col_mean[j]) if not math.isnan(m)]
                tau[i, j] = float(np.mean(parts)) if parts else global_mean
    return TravelMatrixEstimate(city.beats, tau, counts, ~observed, empty)


@dataclass
class ServiceRateEstimate:
    mu_per_hour: float
    mean_minutes: float
    ks_distance: float
    n_obs: int


def estimate_service_rate(records: list[CallRecord], include_travel: bool = False) -> ServiceRateEstimate:
    """Exponential fit of busy duration: mu = 1/mean.

    By default the duration is on-scene time only; ``include_travel`` switches
    to full service time (travel + on-scene). The KS distance against the
    fitted exponential is reported for diagnostics, never enforced.
    """
    durations = np.array([r.service_s if include_travel else r.on_scene_s for r in records])
    durations = durations[durations > 0]
    if len(durations) < 30:
        raise ValueError(f"need >= 30 positive durations to fit a service rate, got {len(durations)}")
    mean_s = float(durations.mean())
    ks = scipy.stats.kstest(durations, "expon", args=(0.0, mean_s)).statistic
    return ServiceRateEstimate(
        mu_per_hour=SECONDS_PER_HOUR / mean_s,
        mean_minutes=mean_s / 60.0,
        ks_distance=float(ks),
        n_obs=len(durations),
    )


def yearly_rates(records: list[CallRecord], city: CityGraph, years: list[int]) -> np.ndarray:
    """Per-beat arrival rates (calls/hour) from raw calls: yearly count / 8760."""
    out = np.zeros((len(years), city.n_beats))
    year_idx = {y: i for i, y in enumerate(years)}
    for rec in records:
        y = rec.call_time.year
        if y in year_idx:
            out[year_idx[y], city.index(rec.incident_beat)] += 1
    return out / HOURS_PER_YEAR


class RankDeficientError(ValueError):
    def __init__(self, columns: list[str]):
        super().__init__(f"design matrix is rank deficient; collinear columns: {columns}")
        self.columns = columns


@dataclass
class ArrivalModel:
    """Spatially lagged arrival-rate regression.

    Each beat's rate in a year is a linear function of same-year neighbor
    rates (one coefficient per unordered adjacency pair, entering both
    directions), its own previous-year rate, and the covariates of the last
    p+1 years. Residuals share an exponential-kernel spatial covariance
    theta1 * exp(-theta * s_ij).
    """

    beats: tuple[str, ...]
    alpha: dict[tuple[str, str], float]    # keyed (a, b) with a < b
    beta0: float
    beta: np.ndarray               # (p+1, M)
    p: int
    kernel_theta: float
    kernel_theta1: float
    sigma: float
    log_likelihood: float
    ols_log_likelihood: float
    stderr: dict[str, float] = field(default_factory=dict)

    def alpha_matrix(self) -> np.ndarray:
        n = len(self.beats)
        idx = {b: i for i, b in enumerate(self.beats)}
        a = np.zeros((n, n))
        for (i, j), v in self.alpha.items():
            a[idx[i], idx[j]] = v
            a[idx[j], idx[i]] = v
        return a


def _edge_pairs(city: CityGraph) -> list[tuple[str, str]]:
    return sorted(city.adjacency)


def _column_names(city: CityGraph, p: int, n_factors: int) -> list[str]:
    names = [f"alpha[{a}~{b}]" for a, b in _edge_pairs(city)]
    names.append("beta0")
    for t in range(p + 1):
        names += [f"beta[t-{t}][{m}]" for m in range(n_factors)]
    return names


def _build_design(history: np.ndarray, covariates: np.ndarray, city: CityGraph,
                  p: int) -> tuple[np.ndarray, np.ndarray, int]:
    n_years, n_beats = history.shape
    n_factors = covariates.shape[2]
    pairs = _edge_pairs(city)
    pair_col = {pr: c for c, pr in enumerate(pairs)}
    n_params = len(pairs) + 1 + (p + 1) * n_factors
    fit_years = range(p, n_years)
    rows = len(list(fit_years)) * n_beats
    x = np.zeros((rows, n_params))
    y = np.zeros(rows)
    row = 0
    for ell in fit_years:
        for i, beat in enumerate(city.beats):
            y[row] = history[ell, i]
            for nb in city.neighbors(beat):
                edge = (beat, nb) if beat < nb else (nb, beat)
                x[row, pair_col[edge]] = history[ell, city.index(nb)]
            x[row, len(pairs)] = history[ell - 1, i]
            base = len(pairs) + 1
            for t in range(p + 1):
                x[row, base + t * n_factors:base + (t + 1) * n_factors] = covariates[ell - t, i]
            row += 1
    return x, y, len(list(fit_years))


def _kernel(city: CityGraph, theta: float) -> np.ndarray:
    s = np.sqrt(city.centroid_dist_sq)
    return np.exp(-theta * s)


def default_kernel_theta(city: CityGraph) -> float:
    s = np.sqrt(city.centroid_dist_sq)
    off = s[np.triu_indices_from(s, k=1)]
    return 1.0 / float(np.median(off))


def _gaussian_loglik(resid_white: np.ndarray, logdet_r: float, n_year_blocks: int,
                     theta1: float) -> float:
    n = len(resid_white)
    ssr = float(resid_white @ resid_white)
    return -0.5 * (n * math.log(2 * math.pi * theta1)
                   + n_year_blocks * logdet_r + ssr / theta1)


def fit_arrival_model(history: np.ndarray, covariates: np.ndarray, city: CityGraph,
                      p: int = 1, kernel_theta: float | None = None,
                      kernel_theta1: float | None = None) -> ArrivalModel:
    """Maximum-likelihood fit of the arrival regression.

    ``history`` is (years, beats) in city beat order, oldest year first;
    ``covariates`` is (years, beats, factors). With at least p+2 years the
    regression uses years p..L-1 as responses. The kernel parameters are
    pre-specified (defaults: theta = 1/median centroid distance, theta1
    profiled from the residuals); the linear coefficients are the exact
    GLS/ML maximizer given the kernel, so the returned likelihood can never
    fall below the OLS starting point's.
    """
    history = np.asarray(history, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    n_years, n_beats = history.shape
    if n_beats != city.n_beats:
        raise ValueError("history beat dimension does not match city")
    if covariates.shape[:2] != (n_years, n_beats):
        raise ValueError("covariates must align with history by year and beat")
    if n_years < p + 2:
        raise ValueError(f"need at least p+2={p + 2} years of history, got {n_years}")
    if kernel_theta is None:
        kernel_theta = default_kernel_theta(city)
    if kernel_theta <= 0 or (kernel_theta1 is not None and kernel_theta1 <= 0):
        raise ValueError("kernel parameters must be positive")

    x, y, n_blocks = _build_design(history, covariates, city, p)
    names = _column_names(city, p, covariates.shape[2])

    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        _, r_qr, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
        bad = sorted(piv[rank:])
        raise RankDeficientError([names[c] for c in bad])

    r = _kernel(city, kernel_theta)
    try:
        chol = np.linalg.cholesky(r)
    except np.linalg.LinAlgError:
        raise ValueError("exponential kernel matrix is not positive definite "
                         "(duplicate centroids?)") from None
    logdet_r = 2.0 * float(np.log(np.diag(chol)).sum())

    def whiten(v: np.ndarray) -> np.ndarray:
        blocks = v.reshape(n_blocks, n_beats, -1)
        out = np.stack([scipy.linalg.solve_triangular(chol, b, lower=True) for b in blocks])
        return out.reshape(v.shape)

    xw = whiten(x)
    yw = whiten(y[:, None])[:, 0]

    gamma, *_ = np.linalg.lstsq(xw, yw, rcond=None)
    resid_w = yw - xw @ gamma
    n_obs = len(yw)
    theta1 = kernel_theta1 if kernel_theta1 is not None else max(
        float(resid_w @ resid_w) / n_obs, 1e-300)
    loglik = _gaussian_loglik(resid_w, logdet_r, n_blocks, theta1)

    gamma_ols, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid_ols_w = yw - xw @ gamma_ols
    ols_loglik = _gaussian_loglik(resid_ols_w, logdet_r, n_blocks, theta1)

    xtx_inv = np.linalg.inv(xw.T @ xw)
    se = np.sqrt(theta1 * np.diag(xtx_inv))

    pairs = _edge_pairs(city)
    n_factors = covariates.shape[2]
    alpha = {pair: float(gamma[c]) for c, pair in enumerate(pairs)}
    beta0 = float(gamma[len(pairs)])
    beta = gamma[len(pairs) + 1:].reshape(p + 1, n_factors)
    return ArrivalModel(
        beats=city.beats,
        alpha=alpha,
        beta0=beta0,
        beta=beta,
        p=p,
        kernel_theta=kernel_theta,
        kernel_theta1=theta1,
        sigma=math.sqrt(theta1),
        log_likelihood=loglik,
        ols_log_likelihood=ols_loglik,
        stderr=dict(zip(names, se.tolist())),
    )


def predict_rates(model: ArrivalModel, last_rates: np.ndarray, last_covariates: np.ndarray,
                  horizon: int) -> np.ndarray:
    """Recursive per-beat forecasts for ``horizon`` future years.

    Covariates are carried forward from the last observed year; each step
    solves the simultaneous spatial system (I - A) lam = beta0*prev + c*beta.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    a = model.alpha_matrix()
    n = len(model.beats)
    system = np.eye(n) - a
    if abs(np.linalg.det(system)) < 1e-12:
        raise ValueError("(I - A) is singular: spatial feedback too strong to solve")
    cov_term = np.asarray(last_covariates, dtype=float) @ model.beta.sum(axis=0)
    out = np.zeros((horizon, n))
    prev = np.asarray(last_rates, dtype=float)
    for h in range(horizon):
        rhs = model.beta0 * prev + cov_term
        out[h] = np.linalg.solve(system, rhs)
        prev = out[h]
    return out
