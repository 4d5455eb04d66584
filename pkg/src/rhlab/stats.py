"""Streaming Monte Carlo statistics, bootstrap, and power-law regression.

Shared by all experiments.  Accumulators use Welford's single-pass recurrence
and merge with Chan's parallel formula, so per-worker accumulation followed
by an ordered merge reproduces serial accumulation to rounding.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar


class FitDegenerateError(RuntimeError):
    """Fit window too small or values statistically indistinguishable from 0."""


def replica_map(fn, count: int, threads: int = 1):
    """Apply ``fn`` to replica indices 0..count-1, yielding results in order.

    With threads > 1 the work runs on a thread pool but results are still
    consumed in replica order, so reductions are bit-identical regardless of
    worker count.
    """
    if threads <= 1:
        return map(fn, range(count))

    def ordered():
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield from pool.map(fn, range(count))

    return ordered()


class Accumulator:
    """Single-pass mean/variance over scalars or same-shaped arrays."""

    def __init__(self):
        self.count = 0
        self._mean = None
        self._m2 = None

    def add(self, value):
        value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise ValueError("cannot accumulate non-finite values")
        if self.count == 0:
            self._mean = np.zeros_like(value)
            self._m2 = np.zeros_like(value)
        self.count += 1
        delta = value - self._mean
        self._mean = self._mean + delta / self.count
        self._m2 = self._m2 + delta * (value - self._mean)
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        """Combine with another accumulator; equals accumulating the concatenation."""
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self._mean = other._mean.copy()
            self._m2 = other._m2.copy()
            return self
        n = self.count + other.count
        delta = other._mean - self._mean
        self._mean = self._mean + delta * (other.count / n)
        self._m2 = self._m2 + other._m2 + delta**2 * (self.count * other.count / n)
        self.count = n
        return self

    @property
    def mean(self):
        if self.count == 0:
            raise ValueError("empty accumulator")
        return self._mean

    @property
    def variance(self):
        """Sample variance (ddof = 1); zero for a single observation."""
        if self.count == 0:
            raise ValueError("empty accumulator")
        if self.count == 1:
            return np.zeros_like(self._m2)
        return self._m2 / (self.count - 1)

    @property
    def stderr(self):
        return np.sqrt(self.variance / max(self.count, 1))


def accumulate(acc: Accumulator, value) -> Accumulator:
    """Functional alias for :meth:`Accumulator.add`."""
    return acc.add(value)


def bootstrap_ci(samples, statistic, resamples: int = 1000, seed: int = 0):
    """Percentile 95% interval of ``statistic`` over seeded resamples.

    Deterministic given ``seed``.  Percentile (not BCa) on purpose: simple and
    reproducible.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 10:
        raise ValueError(f"need at least 10 samples for a bootstrap interval, got {samples.size}")
    if resamples < 200:
        raise ValueError(f"need at least 200 resamples, got {resamples}")
    rng = np.random.default_rng(seed)
    stats = np.empty(resamples)
    n = samples.size
    for i in range(resamples):
        stats[i] = statistic(samples[rng.integers(0, n, size=n)])
    return float(np.percentile(stats, 2.5)), float(np.percentile(stats, 97.5))


@dataclass
class RateFit:
    """Result of a decay-exponent regression."""

    exponent: float
    ci_low: float
    ci_high: float
    window: tuple
    n_points: int
    residual_norm: float
    excluded: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "exponent": self.exponent,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "window": list(self.window),
            "n_points": self.n_points,
            "residual_norm": self.residual_norm,
            "excluded": self.excluded,
        }
        out.update(self.extra)
        return out


def _select_window(r, value, stderr, window):
    r = np.asarray(r, dtype=float)
    value = np.asarray(value, dtype=float)
    stderr = np.zeros_like(value) if stderr is None else np.asarray(stderr, dtype=float)
    lo, hi = window
    mask = (r >= lo) & (r <= hi)
    if mask.sum() < 5:
        raise FitDegenerateError(f"need at least 5 points in window {window}, have {int(mask.sum())}")
    r, value, stderr = r[mask], value[mask], stderr[mask]
    # points statistically indistinguishable from zero only add folding bias
    keep = value >= 2.0 * stderr
    excluded = int((~keep).sum())
    r, value, stderr = r[keep], value[keep], stderr[keep]
    if r.size < 5:
        raise FitDegenerateError(
            f"only {r.size} points in window {window} remain above 2 sigma; fit is degenerate"
        )
    if np.any(value <= 0):
        raise FitDegenerateError("nonpositive value inside the fit window")
    return r, value, stderr, excluded


def _weighted_line(x, y, w):
    """Weighted least squares y = a + b x; returns (a, b, var_b, wrss)."""
    sw = w.sum()
    xbar = (w * x).sum() / sw
    ybar = (w * y).sum() / sw
    sxx = (w * (x - xbar) ** 2).sum()
    b = (w * (x - xbar) * (y - ybar)).sum() / sxx
    a = ybar - b * xbar
    resid = y - a - b * x
    wrss = float((w * resid**2).sum())
    return a, b, 1.0 / sxx, wrss


def loglog_fit(r, value, stderr=None, window=None) -> RateFit:
    """Inverse-variance-weighted least squares on (log r, log value).

    The slope is the decay exponent.  Log-space sigmas come from the delta
    method, sigma_log = stderr/value.  Points with value below 2 sigma are
    excluded automatically and the exclusion count is reported.
    """
    if window is None:
        r_arr = np.asarray(r, dtype=float)
        window = (float(r_arr.min()), float(r_arr.max()))
    r, value, stderr, excluded = _select_window(r, value, stderr, window)
    x = np.log(r)
    y = np.log(value)
    sig = stderr / value
    if np.all(sig == 0):
        w = np.ones_like(y)
        a, b, inv_sxx, wrss = _weighted_line(x, y, w)
        dof = max(r.size - 2, 1)
        var_b = inv_sxx * wrss / dof
    else:
        sig = np.where(sig == 0, sig[sig > 0].min(), sig)
        w = 1.0 / sig**2
        a, b, var_b, wrss = _weighted_line(x, y, w)
    se = float(np.sqrt(var_b))
    return RateFit(
        exponent=float(b),
        ci_low=float(b - 1.96 * se),
        ci_high=float(b + 1.96 * se),
        window=tuple(window),
        n_points=int(r.size),
        residual_norm=float(np.sqrt(wrss)),
        excluded=excluded,
        extra={"intercept": float(a), "slope_stderr": se},
    )


def fit_power_offset(r, value, stderr=None, window=None, p_bounds=(-6.0, -0.05)) -> RateFit:
    """Weighted fit of value = A * r^p + B, profiling the exponent p.

    On a torus, environments whose samples are exactly mean-zero (zero-mode
    removed) force the two-point profile to integrate to zero, which shows up
    as an additive constant under the power law; fitting without it biases
    the slope steep.  For each p the (A, B) pair is a weighted linear solve,
    and p minimises the weighted residual over ``p_bounds``.
    """
    if window is None:
        r_arr = np.asarray(r, dtype=float)
        window = (float(r_arr.min()), float(r_arr.max()))
    r, value, stderr, excluded = _select_window(r, value, stderr, window)
    w = np.ones_like(value) if np.all(stderr == 0) else 1.0 / np.maximum(stderr, stderr[stderr > 0].min()) ** 2

    def wrss(p):
        X = np.stack([r**p, np.ones_like(r)], axis=1)
        beta, *_ = np.linalg.lstsq(X * np.sqrt(w)[:, None], value * np.sqrt(w), rcond=None)
        resid = value - X @ beta
        return float((w * resid**2).sum())

    res = minimize_scalar(wrss, bounds=p_bounds, method="bounded", options={"xatol": 1e-9})
    p = float(res.x)
    return RateFit(
        exponent=p,
        ci_low=p,
        ci_high=p,
        window=tuple(window),
        n_points=int(r.size),
        residual_norm=float(np.sqrt(res.fun)),
        excluded=excluded,
        extra={"model": "power_plus_offset"},
    )


def parametric_bootstrap_ci(fitter, r, value, stderr, resamples: int = 400, seed: int = 0):
    """95% percentile interval of a fit exponent under Gaussian resampling.

    Resamples each point from N(value, stderr), refits, and takes percentiles.
    Resamples on which the fit degenerates are skipped (counted); if fewer
    than half survive the interval is degenerate and an error is raised.
    """
    rng = np.random.default_rng(seed)
    value = np.asarray(value, dtype=float)
    stderr = np.zeros_like(value) if stderr is None else np.asarray(stderr, dtype=float)
    exps = []
    for _ in range(resamples):
        fake = value + stderr * rng.standard_normal(value.shape)
        try:
            exps.append(fitter(r, fake, stderr).exponent)
        except FitDegenerateError:
            continue
    if len(exps) < resamples // 2:
        raise FitDegenerateError(
            f"only {len(exps)}/{resamples} bootstrap resamples produced a valid fit"
        )
    return float(np.percentile(exps, 2.5)), float(np.percentile(exps, 97.5))
