"""CLI-driven experiments: homogenization rate, Green's-function decay,
correlation decay, and the spectral-gap (Poincare) check.

Every experiment is a pure function of its configuration: sampling streams
are counter-based per replica, reductions happen in replica order, and the
written CSV/JSON outputs are byte-identical for identical (config, seed)
regardless of worker count.  Wall time and worker count are execution
details and go to a separate run log, never into result files.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, io
from .coeffs import CoefficientMap, evaluate_map
from .fields import (EnvironmentSpec, build_kernel, estimate_correlation,
                     replica_rng)
from .greens import (GreenEstimate, averaged_green, continuum_reference,
                     fit_decay, lattice_reference)
from .homogenize import HomogenizedEstimate, estimate_ahom, extrapolate_eta
from .lattice import ScalarField, TorusLattice
from .solver import solve_cg, solve_const
from .stats import (Accumulator, FitDegenerateError, RateFit, loglog_fit,
                    fit_power_offset, parametric_bootstrap_ci, replica_map)

# sampling stream ids; fixed so reruns are reproducible across versions
STREAM_MAIN = 0
STREAM_AHOM = 1
STREAM_RATE_BASE = 16   # + index of epsilon in the sweep
STREAM_POINCARE_COEFF = 5


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


EXPERIMENTS = ("sample-field", "corr-decay", "green-const", "corrector", "ahom",
               "avg-green", "green-rates", "homog-rate", "poincare")


@dataclass
class ExperimentConfig:
    """Resolved experiment parameters (scientific only; no execution knobs)."""

    experiment: str
    dimension: int = 3
    sides: tuple | None = None
    environment: dict = field(default_factory=lambda: {"base": "white_noise"})
    coeff_map: dict = field(default_factory=lambda: {"form": "isotropic_sigmoid",
                                                     "lower": 1.0, "upper": 2.0})
    eta: float | None = None
    eta_sweep: list | None = None
    eps_sweep: list | None = None
    replicas: int = 100
    seed: int = 0
    fit_window: tuple | None = None
    tol: float = 1e-8
    ahom: dict = field(default_factory=dict)
    functional: str = "all"
    matrix: list | None = None        # constant-coefficient commands
    method: str = "cg"                # corrector command
    resamples: int = 400              # bootstrap resamples for rate fits
    cv_replicas: int = 4000           # spectral-only control-variate solves

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        import json

        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose from {EXPERIMENTS}")
        if self.dimension < 1:
            raise ConfigError("dimension must be >= 1")
        if self.sides is not None:
            self.sides = tuple(int(s) for s in self.sides)
            if len(self.sides) != self.dimension:
                raise ConfigError(
                    f"sides {self.sides} inconsistent with dimension {self.dimension}")
            if any(s <= 0 or s % 2 for s in self.sides):
                raise ConfigError("sides must be positive even integers")
        if self.replicas < 2:
            raise ConfigError("replicas must be >= 2")
        if self.eta is not None and self.eta <= 0:
            raise ConfigError("eta must be positive")
        for name, sweep, lo_ok in (("eta_sweep", self.eta_sweep, 0.0),
                                   ("eps_sweep", self.eps_sweep, 0.0)):
            if sweep is not None:
                if len(sweep) == 0:
                    raise ConfigError(f"{name} must be nonempty")
                if any(v <= lo_ok for v in sweep):
                    raise ConfigError(f"{name} entries must be positive")
                if any(b >= a for a, b in zip(sweep, sweep[1:])):
                    raise ConfigError(f"{name} must be strictly decreasing")
        if self.eps_sweep is not None and any(e > 1 for e in self.eps_sweep):
            raise ConfigError("eps_sweep entries must lie in (0, 1]")
        if self.fit_window is not None:
            self.fit_window = (float(self.fit_window[0]), float(self.fit_window[1]))
            if not self.fit_window[0] < self.fit_window[1]:
                raise ConfigError("fit_window must be (low, high) with low < high")
        if not 0 < self.tol < 1:
            raise ConfigError("tol must be in (0, 1)")
        if self.cv_replicas < 0 or self.cv_replicas % 2:
            raise ConfigError("cv_replicas must be an even nonnegative count")
        cm = self.coeff_map
        if not 0 < cm.get("lower", 1.0) <= cm.get("upper", 1.0):
            raise ConfigError("coefficient map needs 0 < lower <= upper")
        if self.functional not in ("all", "linear", "sine", "window_quadratic"):
            raise ConfigError(f"unknown functional {self.functional!r}")

    def echo(self) -> dict:
        """Full resolved scientific config for embedding in result files."""
        out = {
            "experiment": self.experiment,
            "dimension": self.dimension,
            "sides": list(self.sides) if self.sides else None,
            "environment": self.environment,
            "coeff_map": self.coeff_map,
            "eta": self.eta,
            "eta_sweep": self.eta_sweep,
            "eps_sweep": self.eps_sweep,
            "replicas": self.replicas,
            "seed": self.seed,
            "fit_window": list(self.fit_window) if self.fit_window else None,
            "tol": self.tol,
            "ahom": self.ahom,
            "version": __version__,
        }
        if self.experiment == "poincare":
            out["functional"] = self.functional
        if self.experiment == "green-rates":
            out["cv_replicas"] = self.cv_replicas
        if self.matrix is not None:
            out["matrix"] = self.matrix
        return out


def _build_lattice(config: ExperimentConfig, sides=None) -> TorusLattice:
    sides = sides or config.sides
    if sides is None:
        raise ConfigError(f"experiment {config.experiment!r} needs explicit sides")
    return TorusLattice(sides)


def _build_env(config: ExperimentConfig, lattice: TorusLattice) -> EnvironmentSpec:
    env = dict(config.environment)
    kernel_cfg = env.pop("kernel", None)
    kernel = None
    if kernel_cfg is not None:
        kernel = build_kernel(lattice, kernel_cfg["family"],
                              eps=kernel_cfg.get("eps"))
    try:
        return EnvironmentSpec(
            lattice=lattice,
            base=env.get("base", "white_noise"),
            mass_sq=env.get("mass_sq"),
            base_matrix=np.asarray(env["base_matrix"], dtype=float)
            if "base_matrix" in env else None,
            kernel=kernel,
            seed=config.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build_map(config: ExperimentConfig) -> CoefficientMap:
    cm = config.coeff_map
    try:
        return CoefficientMap(cm.get("form", "isotropic_sigmoid"),
                              float(cm.get("lower", 1.0)), float(cm.get("upper", 2.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _estimate_ahom_swept(config: ExperimentConfig, default_sides,
                         default_eta_sweep, threads: int = 1,
                         default_replicas: int = 16) -> HomogenizedEstimate:
    """a_hom with the configured (or default) eta sweep, extrapolated to 0."""
    section = dict(config.ahom)
    sides = tuple(section.get("sides", default_sides))
    replicas = int(section.get("replicas", default_replicas))
    eta_sweep = section.get("eta_sweep", default_eta_sweep)
    method = section.get("method", "cg")
    antithetic = bool(section.get("antithetic", True))
    lattice = TorusLattice(sides)
    spec = _build_env(config, lattice)
    cmap = _build_map(config)
    estimates = [estimate_ahom(spec, cmap, eta, replicas, method=method,
                               tol=config.tol, stream=STREAM_AHOM, threads=threads,
                               antithetic=antithetic)
                 for eta in eta_sweep]
    if len(estimates) >= 3:
        return extrapolate_eta(estimates)
    return estimates[-1]


# -- correlation decay ------------------------------------------------------


@dataclass
class CorrResult:
    profile: object
    fit: RateFit
    fit_model: str
    exponential_decay: bool
    power_residual: float
    exp_residual: float
    window: tuple
    config_echo: dict

    def summary(self) -> dict:
        return {
            "experiment": "corr-decay",
            "config": self.config_echo,
            "fit": self.fit.to_json(),
            "fit_model": self.fit_model,
            "exponential_decay": self.exponential_decay,
            "power_residual": self.power_residual,
            "exp_residual": self.exp_residual,
        }

    def write(self, outdir) -> None:
        outdir = _ensure_dir(outdir)
        self.profile.to_csv(outdir / "profile.csv")
        io.write_dat(outdir / "profile.dat", self.profile.radii, self.profile.means)
        io.write_json(outdir / "fit.json", self.fit.to_json())
        io.write_json(outdir / "summary.json", self.summary())


def _exp_vs_power_residuals(radii, means, stderrs, window):
    """Weighted residuals of log-value against log r (power) and r (exponential)."""
    lo, hi = window[0] - 0.5, window[1] + 0.5   # select bins by rounded label
    mask = (radii >= lo) & (radii <= hi) & (means >= 2 * stderrs) & (means > 0)
    if mask.sum() < 3:
        raise FitDegenerateError("too few positive bins to compare decay shapes")
    r, v, s = radii[mask], means[mask], stderrs[mask]
    y = np.log(v)
    sig = np.where(s > 0, s / v, 1.0)
    w = 1.0 / sig**2

    def wrss(x):
        X = np.stack([np.ones_like(x), x], axis=1)
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        return float((w * (y - X @ beta) ** 2).sum())

    return wrss(np.log(r)), wrss(r)


def run_corr_experiment(config: ExperimentConfig, threads: int = 1) -> CorrResult:
    """Two-point profile of a correlated environment plus its decay-exponent fit.

    Environments whose samples are exactly mean-zero on the torus (massless
    base, or a zero-mode-killing kernel) force the empirical profile to
    integrate to zero; their fit includes the implied additive constant
    (power-plus-offset model).  Others use the plain weighted log-log fit.
    An exponential-vs-power residual comparison flags exponential decay.
    """
    lattice = _build_lattice(config)
    spec = _build_env(config, lattice)
    if spec.base == "white_noise" and spec.kernel is None:
        raise ConfigError("corr-decay needs a correlated environment "
                          "(a kernel or a massive/massless base)")
    profile = estimate_correlation(spec, config.replicas, threads=threads)
    window = config.fit_window or (4.0, min(lattice.sides) / 4.0)

    zero_mode_killed = (spec.base == "massless_gff"
                        or (spec.kernel is not None and spec.kernel.family == "grad_green"))
    if zero_mode_killed:
        fitter, model = fit_power_offset, "power_plus_offset"
    else:
        fitter, model = loglog_fit, "loglog"
    sel = (window[0] - 0.5, window[1] + 0.5)   # select bins by rounded label

    def run_fit(r, v, s):
        fit = fitter(r, v, s, window=sel)
        fit.window = tuple(window)
        return fit

    fit = run_fit(profile.radii, profile.means, profile.stderrs)
    ci = parametric_bootstrap_ci(run_fit,
                                 profile.radii, profile.means, profile.stderrs,
                                 resamples=config.resamples, seed=config.seed)
    fit.ci_low, fit.ci_high = (min(ci[0], fit.exponent), max(ci[1], fit.exponent))
    pow_res, exp_res = _exp_vs_power_residuals(profile.radii, profile.means,
                                               profile.stderrs, window)
    return CorrResult(profile=profile, fit=fit, fit_model=model,
                      exponential_decay=bool(exp_res < pow_res),
                      power_residual=pow_res, exp_residual=exp_res,
                      window=window, config_echo=config.echo())


# -- Poincare / spectral gap check ------------------------------------------


@dataclass
class PoincareResult:
    reports: dict
    config_echo: dict

    def summary(self) -> dict:
        return {"experiment": "poincare", "config": self.config_echo,
                "functionals": self.reports}

    def write(self, outdir) -> None:
        outdir = _ensure_dir(outdir)
        io.write_json(outdir / "poincare.json", self.reports)
        io.write_json(outdir / "summary.json", self.summary())


def _variance_with_error(samples: np.ndarray):
    """Sample variance and the standard error of that variance estimate."""
    n = samples.size
    s2 = float(np.var(samples, ddof=1))
    center = samples - samples.mean()
    m4 = float(np.mean(center**4))
    var_of_var = (m4 - (n - 3) / (n - 1) * s2**2) / n
    return s2, float(np.sqrt(max(var_of_var, 0.0)))


def run_poincare_check(config: ExperimentConfig, threads: int = 1) -> PoincareResult:
    """Monte Carlo check of Var[F] <= (1/m^2) E||grad F||^2 for the massive field.

    Functionals: linear F = sum c(x) phi(x) with a fixed random compactly
    supported c (its variance is also computed exactly from the covariance
    operator), the single-site sine F = sin(phi(0)), and the quadratic window
    average F = mean of phi^2 over the 3^d box at the origin.
    """
    lattice = _build_lattice(config)
    spec = _build_env(config, lattice)
    if spec.base != "massive_gff" or spec.kernel is not None:
        raise ConfigError("the Poincare check applies to the plain massive_gff base")
    m2 = spec.mass_sq
    d = lattice.d
    origin = (0,) * d

    window = tuple(slice(0, 3) for _ in range(d))   # compact support: 3^d box
    nwin = 3**d
    rng = replica_rng(config.seed, 0, STREAM_POINCARE_COEFF)
    cvals = np.zeros(lattice.sides)
    cvals[window] = rng.standard_normal((3,) * d)

    names = (["linear", "sine", "window_quadratic"] if config.functional == "all"
             else [config.functional])

    def evaluate(phi):
        out = {}
        if "linear" in names:
            out["linear"] = (float((cvals * phi).sum()), float((cvals**2).sum()))
        if "sine" in names:
            p0 = phi[origin]
            out["sine"] = (float(np.sin(p0)), float(np.cos(p0) ** 2))
        if "window_quadratic" in names:
            w = phi[window]
            out["window_quadratic"] = (float((w**2).mean()),
                                       float((4.0 * w**2 / nwin**2).sum()))
        return out

    samples = {name: (np.empty(config.replicas), np.empty(config.replicas))
               for name in names}
    for rep, vals in enumerate(replica_map(
            lambda r: evaluate(spec.sample(r, STREAM_MAIN).values),
            config.replicas, threads)):
        for name, (f, gsq) in vals.items():
            samples[name][0][rep] = f
            samples[name][1][rep] = gsq

    reports = {}
    for name in names:
        fvals, gvals = samples[name]
        var, var_se = _variance_with_error(fvals)
        bound = float(gvals.mean()) / m2
        bound_se = float(gvals.std(ddof=1) / np.sqrt(config.replicas)) / m2
        sigma = float(np.sqrt(var_se**2 + bound_se**2))
        report = {
            "variance": var, "variance_stderr": var_se,
            "bound": bound, "bound_stderr": bound_se,
            "passed": bool(var <= bound + 3 * sigma),
            "slack": bound / var if var > 0 else float("inf"),
            "replicas": config.replicas,
        }
        if name == "linear":
            cfield = ScalarField(lattice, cvals)
            gc = solve_const(m2, spec.base_matrix if spec.base_matrix is not None
                             else np.eye(d), cfield)
            report["exact_variance"] = float((cvals * gc.values).sum())
        reports[name] = report
    return PoincareResult(reports=reports, config_echo=config.echo())


# -- Green's function rates ---------------------------------------------------


@dataclass
class GreenRatesResult:
    green: GreenEstimate
    ahom: HomogenizedEstimate
    tables: dict          # kind -> (radii, values, stderrs)
    fits: dict            # kind -> RateFit | None
    degenerate: dict      # kind -> bool
    continuum_fits: dict
    hierarchy: dict
    window: tuple
    config_echo: dict

    def summary(self) -> dict:
        return {
            "experiment": "green-rates",
            "config": self.config_echo,
            "ahom": self.ahom.to_json(),
            "fits": {k: (f.to_json() if f else None) for k, f in self.fits.items()},
            "continuum_fits": {k: (f.to_json() if f else None)
                               for k, f in self.continuum_fits.items()},
            "degenerate": self.degenerate,
            "hierarchy": self.hierarchy,
            "skipped_replicas": self.green.skipped,
        }

    def write(self, outdir) -> None:
        outdir = _ensure_dir(outdir)
        for kind, (r, v, s) in self.tables.items():
            rows = zip(r.tolist(), v.tolist(), s.tolist())
            io.write_csv(outdir / f"diff_{kind}.csv", ["r", "mean", "stderr"], rows)
            io.write_dat(outdir / f"diff_{kind}.dat", r, v)
        io.write_json(outdir / "fits.json",
                      {k: (f.to_json() if f else None) for k, f in self.fits.items()})
        io.write_json(outdir / "summary.json", self.summary())


def run_green_experiment(config: ExperimentConfig, threads: int = 1) -> GreenRatesResult:
    """Averaged-Green vs homogenized-Green difference decay (function, gradient,
    second gradient).

    The primary comparison uses the lattice homogenized reference (same
    discretization and torus, so zero modes and periodization cancel exactly
    in the difference); the continuum reference is fit as well, restricted to
    |x| >= 8.  Default eta = upper/L^2 keeps the exponential factor flat on
    the fit window.
    """
    lattice = _build_lattice(config)
    cmap = _build_map(config)
    eta = config.eta if config.eta is not None else cmap.upper / min(lattice.sides) ** 2
    if eta > cmap.upper:
        raise ConfigError(f"eta = {eta} exceeds the upper coefficient bound "
                          f"{cmap.upper} (the decay estimates need eta <= upper)")
    spec = _build_env(config, lattice)
    base_eta = cmap.upper / min(lattice.sides) ** 2
    ahom = _estimate_ahom_swept(config, lattice.sides,
                                [4 * base_eta, 2 * base_eta, base_eta], threads,
                                default_replicas=48)
    green = averaged_green(spec, cmap, eta, config.replicas, tol=config.tol,
                           stream=STREAM_MAIN, threads=threads,
                           cv_matrix=ahom.matrix if config.cv_replicas else None,
                           cv_replicas=config.cv_replicas)
    window = config.fit_window or (3.0, min(lattice.sides) / 4.0)

    ref = lattice_reference(eta, ahom.matrix, lattice)
    cref = continuum_reference(eta, ahom.matrix, lattice)
    tables, fits, degenerate, cont_fits = {}, {}, {}, {}
    for kind, refv, crefv in (("value", ref[0], cref[0]),
                              ("grad", ref[1], cref[1]),
                              ("grad2", ref[2], cref[2])):
        r, v, s = green.radial_table(reference=refv, kind=kind)
        tables[kind] = (r, v, s)
        try:
            fits[kind] = fit_decay(r, v, s, window, resamples=config.resamples,
                                   seed=config.seed)
            degenerate[kind] = False
        except FitDegenerateError:
            fits[kind] = None
            degenerate[kind] = True
        cwin = (max(8.0, window[0]), window[1])
        try:
            rc, vc, sc = green.radial_table(reference=crefv, kind=kind, r_min=8.0)
            cont_fits[kind] = fit_decay(rc, vc, sc, cwin, resamples=config.resamples,
                                        seed=config.seed)
        except FitDegenerateError:
            cont_fits[kind] = None

    hierarchy = {}
    if not any(degenerate.values()):
        e0, e1, e2 = (fits[k].exponent for k in ("value", "grad", "grad2"))
        hierarchy = {
            "ordered": bool(e2 <= e1 <= e0),
            "spacing_grad": e0 - e1,
            "spacing_grad2": e1 - e2,
        }
    return GreenRatesResult(green=green, ahom=ahom, tables=tables, fits=fits,
                            degenerate=degenerate, continuum_fits=cont_fits,
                            hierarchy=hierarchy, window=window,
                            config_echo=config.echo())


# -- homogenization rate (the scaling experiment) -----------------------------


def _bump(points: np.ndarray) -> np.ndarray:
    """The standard compactly supported bump exp(-1/(1-|x|^2)) on |x| < 1."""
    r2 = (points**2).sum(axis=-1)
    out = np.zeros(r2.shape)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def rate_required_side(eps: float, eta: float) -> int:
    """Minimum even torus side: bump support 1/eps plus margin 6/sqrt(eps^2 eta)."""
    radius = (1.0 + 6.0 / np.sqrt(eta)) / eps
    return 2 * int(np.ceil(radius))


def _continuum_hom_nodes(matrix, eta: float, eps: float, side: int, refine: int = 4):
    """Solve the homogenized continuum equation spectrally on the physical torus.

    The box has physical side eps*side; the grid has refine*side nodes per
    dimension (spacing eps/refine), so the lattice comparison points are
    exact grid nodes.  Returns the solution restricted to those nodes.
    """
    matrix = np.asarray(matrix, dtype=float)
    d = matrix.shape[0]
    n = refine * side
    h = eps / refine
    axes = []
    for _ in range(d):
        idx = np.arange(n)
        axes.append(np.where(idx <= n // 2, idx, idx - n) * h)
    grids = np.meshgrid(*axes, indexing="ij")
    points = np.stack(grids, axis=-1)
    fvals = _bump(points)
    spec = np.fft.rfftn(fvals, axes=tuple(range(d)))
    ks = []
    for j in range(d):
        m = (np.arange(n // 2 + 1) if j == d - 1 else np.fft.fftfreq(n) * n)
        shape = [1] * d
        shape[j] = m.size
        ks.append((2 * np.pi * m / (n * h)).reshape(shape))
    symbol = eta + sum(matrix[i, j] * ks[i] * ks[j]
                       for i in range(d) for j in range(d))
    u = np.fft.irfftn(spec / symbol, s=(n,) * d, axes=tuple(range(d)))
    return u[tuple(slice(None, None, refine) for _ in range(d))]


@dataclass
class RateResult:
    eps: np.ndarray
    errors: np.ndarray          # sup_x of the mean-square difference
    stderrs: np.ndarray         # Monte Carlo error at the argmax site
    sides: list
    interp_errors: np.ndarray   # continuum-solve refinement increments
    alpha: float
    ci_low: float
    ci_high: float
    monotone_decreasing: bool
    ahom: HomogenizedEstimate
    config_echo: dict

    def summary(self) -> dict:
        return {
            "experiment": "homog-rate",
            "config": self.config_echo,
            "eps": self.eps.tolist(),
            "errors": self.errors.tolist(),
            "stderrs": self.stderrs.tolist(),
            "sides": self.sides,
            "interp_errors": self.interp_errors.tolist(),
            "alpha": self.alpha,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "monotone_decreasing": self.monotone_decreasing,
            "ahom": self.ahom.to_json(),
        }

    def write(self, outdir) -> None:
        outdir = _ensure_dir(outdir)
        rows = zip(self.eps.tolist(), self.errors.tolist(), self.stderrs.tolist(),
                   self.sides, self.interp_errors.tolist())
        io.write_csv(outdir / "rate.csv",
                     ["eps", "sup_mean_sq_error", "stderr", "side", "interp_error"],
                     rows)
        io.write_dat(outdir / "rate.dat", self.eps, self.errors)
        io.write_json(outdir / "fit.json",
                      {"alpha": self.alpha, "ci_low": self.ci_low,
                       "ci_high": self.ci_high,
                       "monotone_decreasing": self.monotone_decreasing})
        io.write_json(outdir / "summary.json", self.summary())


def _slope_fit(x, y):
    """Unweighted least-squares slope of log y against log x (few points)."""
    lx, ly = np.log(x), np.log(y)
    return float(np.polyfit(lx, ly, 1)[0])


def run_rate_experiment(config: ExperimentConfig, threads: int = 1) -> RateResult:
    """The scaling experiment behind the rate-of-convergence statement.

    For each eps: solve the random equation with right side eps^2 f(eps x)
    and mass eps^2 eta on a torus sized to hold the bump support plus a
    decay margin of 6 lattice decay lengths; compare against the homogenized
    continuum solution evaluated at the lattice points; record the sup over
    sites of the Monte Carlo mean-square difference.  The eps exponent is
    fit from the sweep with a parametric bootstrap interval.
    """
    if config.eps_sweep is None:
        raise ConfigError("homog-rate needs eps_sweep")
    d = config.dimension
    eta = config.eta if config.eta is not None else 16.0
    cmap = _build_map(config)

    sides_used, required = [], []
    for eps in config.eps_sweep:
        need = rate_required_side(eps, eta)
        required.append(need)
        if config.sides is not None:
            side = min(config.sides)
            if side < need:
                raise ConfigError(
                    f"torus side {side} too small for eps={eps}, eta={eta}: "
                    f"need at least {need}")
            sides_used.append(side)
        else:
            sides_used.append(need)

    ahom_sides = tuple(config.ahom.get("sides", (32,) * d))
    base_eta = 1.0 / min(ahom_sides) ** 2
    ahom = _estimate_ahom_swept(config, ahom_sides,
                                [4 * base_eta, 2 * base_eta, base_eta], threads)

    errors, stderrs, interp = [], [], []
    for i_eps, eps in enumerate(config.eps_sweep):
        side = sides_used[i_eps]
        lattice = TorusLattice((side,) * d)
        spec = _build_env(config, lattice)
        u_hom = _continuum_hom_nodes(ahom.matrix, eta, eps, side, refine=4)
        u_coarse = _continuum_hom_nodes(ahom.matrix, eta, eps, side, refine=2)
        interp.append(float(np.abs(u_hom - u_coarse).max()))

        offsets = np.stack([np.broadcast_to(lattice.axis_offsets(j), lattice.sides)
                            for j in range(d)], axis=-1)
        h = ScalarField(lattice, eps**2 * _bump(eps * offsets))
        eta_eff = eps**2 * eta
        stream = STREAM_RATE_BASE + i_eps

        def one(rep, spec=spec, h=h, eta_eff=eta_eff, stream=stream, u_hom=u_hom):
            omega = spec.sample(rep, stream)
            a = evaluate_map(cmap, omega)
            u, _ = solve_cg(eta_eff, a, h, tol=config.tol)
            return (u.values - u_hom) ** 2

        acc = Accumulator()
        for sq in replica_map(one, config.replicas, threads):
            acc.add(sq)
        mean_sq = np.asarray(acc.mean)
        argmax = np.unravel_index(np.argmax(mean_sq), mean_sq.shape)
        errors.append(float(mean_sq[argmax]))
        stderrs.append(float(np.asarray(acc.stderr)[argmax]))

    eps_arr = np.array(config.eps_sweep, dtype=float)
    err_arr = np.array(errors)
    se_arr = np.array(stderrs)
    alpha = _slope_fit(eps_arr, err_arr)
    rng = np.random.default_rng(config.seed)
    boots = []
    for _ in range(config.resamples):
        fake = err_arr + se_arr * rng.standard_normal(err_arr.shape)
        if np.any(fake <= 0):
            continue
        boots.append(_slope_fit(eps_arr, fake))
    if len(boots) < config.resamples // 2:
        raise FitDegenerateError("rate-table errors are statistically indistinguishable "
                                 "from zero; cannot fit an exponent")
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5)))
    monotone = bool(np.all(np.diff(err_arr) < 0))
    return RateResult(eps=eps_arr, errors=err_arr, stderrs=se_arr,
                      sides=sides_used, interp_errors=np.array(interp),
                      alpha=alpha, ci_low=ci[0], ci_high=ci[1],
                      monotone_decreasing=monotone, ahom=ahom,
                      config_echo=config.echo())


def _ensure_dir(outdir):
    from pathlib import Path

    p = Path(outdir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_runlog(outdir, threads: int, wall_time: float) -> None:
    """Execution details; kept out of the deterministic result files."""
    io.write_json(_ensure_dir(outdir) / "runlog.json",
                  {"threads": threads, "wall_time_s": wall_time,
                   "version": __version__})


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
