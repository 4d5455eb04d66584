"""Averaged Green's functions, homogenized references, and decay-exponent fits.

The averaged Green's function is the Monte Carlo mean over environments of
the solution to eta*G + div(a grad G) = delta_0 on the torus.  It is compared
against two homogenized references: the exact periodic lattice Green's
function with constant coefficients a_hom (same discretization and torus, so
zero modes and image sums cancel exactly in the difference), and the
continuum Green's function of the homogenized equation, restricted to
|x| >= 8 where the lattice-continuum discrepancy is subdominant.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import kv

from .coeffs import CoefficientMap, evaluate_map
from .fields import EnvironmentSpec
from .lattice import (ScalarField, TorusLattice, delta_field, div_values,
                      grad_values)
from .solver import ConvergenceError, _const_inverse, solve_cg, solve_const
from .stats import (Accumulator, FitDegenerateError, RateFit, loglog_fit,
                    parametric_bootstrap_ci, replica_map)


def lattice_green(eta: float, matrix, lattice: TorusLattice) -> ScalarField:
    """Exact periodic lattice Green's function of eta + div(A grad .).

    Computed as the spectral inverse applied to the unit mass at the origin;
    satisfies the sum rule eta * sum_x G = 1 exactly.
    """
    if eta <= 0:
        raise ValueError("lattice_green requires eta > 0")
    return solve_const(eta, matrix, delta_field(lattice))


def hom_green_continuum(matrix, eta: float, x) -> float:
    """Continuum Green's function of eta*u - div(A grad u) = delta at x != 0.

    After mapping y = A^(-1/2) x the kernel is the radial massive free-field
    Green's function in d dimensions, (2 pi)^(-d/2) (sqrt(eta)/|y|)^(d/2-1)
    K_(d/2-1)(sqrt(eta) |y|), divided by sqrt(det A).  In d = 3 this is the
    Yukawa form exp(-sqrt(eta) |y|) / (4 pi |y|).
    """
    if eta <= 0:
        raise ValueError("hom_green_continuum requires eta > 0")
    x = np.asarray(x, dtype=float)
    matrix = np.asarray(matrix, dtype=float)
    d = x.size
    if matrix.ndim == 0:
        matrix = float(matrix) * np.eye(d)
    if matrix.shape != (d, d):
        raise ValueError("matrix and point dimensions disagree")
    vals, vecs = np.linalg.eigh(matrix)
    if vals.min() <= 0:
        raise ValueError("matrix must be positive definite")
    y = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T @ x
    r = float(np.linalg.norm(y))
    if r == 0:
        raise ValueError("the Green's function is singular at x = 0")
    det = float(np.prod(vals))
    m = np.sqrt(eta)
    if d == 3:
        return float(np.exp(-m * r) / (4 * np.pi * r * np.sqrt(det)))
    nu = d / 2.0 - 1.0
    val = (2 * np.pi) ** (-d / 2.0) * (m / r) ** nu * kv(nu, m * r)
    return float(val / np.sqrt(det))


def _second_differences(values: np.ndarray) -> np.ndarray:
    """Forward-forward second differences, (*sides) -> (*sides, d, d)."""
    g = grad_values(values)
    d = values.ndim
    return np.stack([grad_values(g[..., k]) for k in range(d)], axis=-1)


def shell_profile(lattice: TorusLattice, table: np.ndarray, kind: str) -> np.ndarray:
    """Signed shell average of a site table, one value per radial bin.

    value: plain shell mean.  grad: shell mean of the radial projection
    xhat . grad (the radial derivative of the isotropic part).  grad2: shell
    mean of xhat . grad2 . xhat.  Linear in the data, so profiles of a Monte
    Carlo mean equal means of per-replica profiles, and a deterministic
    reference can be subtracted after averaging.
    """
    rbin, radii, counts = lattice.radial_bins()
    xhat = lattice.unit_directions()
    if kind == "value":
        scalar = table
    elif kind == "grad":
        scalar = (table * xhat).sum(axis=-1)
    elif kind == "grad2":
        scalar = np.einsum("...ij,...i,...j->...", table, xhat, xhat)
    else:
        raise ValueError(f"unknown table kind {kind!r}")
    return np.bincount(rbin.ravel(), weights=scalar.ravel(),
                       minlength=radii.size) / counts


@dataclass(eq=False)
class GreenEstimate:
    """Monte Carlo averaged Green's function with differences and errors.

    Site tables carry the mean and standard error of the function and its
    first and second forward differences.  Radial profiles (signed shell
    averages, gradients projected on the radial direction) carry their own
    standard errors measured from the per-observation scatter, so shell
    correlations are priced in; they are the inputs to the decay fits.
    """

    lattice: TorusLattice
    eta: float
    replicas: int               # converged solves
    observations: int           # independent observations (pairs if antithetic)
    mean: np.ndarray
    stderr: np.ndarray
    grad_mean: np.ndarray
    grad_stderr: np.ndarray
    grad2_mean: np.ndarray
    grad2_stderr: np.ndarray
    prof_radii: np.ndarray
    prof_mean: dict
    prof_stderr: dict
    antithetic: bool = True
    skipped: int = 0
    env: dict | None = None

    def radial_table(self, reference=None, kind: str = "value", r_min: float = 1.0,
                     r_max: float | None = None):
        """Radial profile of |mean - reference| with honest errors.

        ``reference`` is a site table matching ``kind`` (e.g. one entry of
        :func:`lattice_reference`), or None for the raw profile.  Returns
        (radii, values, stderrs) over bins with mean radius in
        [r_min, r_max] (default r_max = min(sides)/2).
        """
        prof = self.prof_mean[kind]
        se = self.prof_stderr[kind]
        if reference is not None:
            prof = prof - shell_profile(self.lattice, reference, kind)
        _, radii, counts = self.lattice.radial_bins()
        if r_max is None:
            r_max = min(self.lattice.sides) / 2.0
        keep = (radii >= r_min) & (radii <= r_max) & (counts > 0)
        return radii[keep], np.abs(prof)[keep], se[keep]


def radial_reduce(lattice: TorusLattice, values: np.ndarray, stderr: np.ndarray,
                  r_min: float = 1.0, r_max: float | None = None):
    """Bin a site table by rounded torus-minimal distance.

    Bin value is the site mean; bin error treats sites as independent,
    sqrt(sum sigma^2)/count.
    """
    rbin, radii, counts = lattice.radial_bins()
    nbins = radii.size
    sums = np.bincount(rbin.ravel(), weights=values.ravel(), minlength=nbins)
    var_sums = np.bincount(rbin.ravel(), weights=(stderr**2).ravel(), minlength=nbins)
    means = sums / counts
    errs = np.sqrt(var_sums) / counts
    if r_max is None:
        r_max = min(lattice.sides) / 2.0
    keep = (radii >= r_min) & (radii <= r_max) & (counts > 0)
    return radii[keep], means[keep], errs[keep]


class _TableSet:
    """Accumulates value/grad/grad2 site fields and their radial profiles."""

    def __init__(self, lattice):
        self.lattice = lattice
        self.field = {k: Accumulator() for k in ("value", "grad", "grad2")}
        self.profile = {k: Accumulator() for k in ("value", "grad", "grad2")}

    def add(self, values):
        grad = grad_values(values)
        grad2 = _second_differences(values)
        for kind, table in (("value", values), ("grad", grad), ("grad2", grad2)):
            self.field[kind].add(table)
            self.profile[kind].add(shell_profile(self.lattice, table, kind))

    @property
    def count(self):
        return self.field["value"].count


def _born_step(inv, coeff, matrix, values):
    """One preconditioned Born step: G0 div[(a - a_hom) grad values]."""
    g = grad_values(values)
    flux = coeff.apply(g) - np.einsum("ij,...j->...i", matrix, g)
    return inv(div_values(flux))


def averaged_green(spec: EnvironmentSpec, cmap: CoefficientMap, eta: float,
                   replicas: int, tol: float = 1e-8, max_iter: int = 500,
                   stream: int = 0, threads: int = 1, antithetic: bool = True,
                   cv_matrix=None, cv_replicas: int = 0,
                   cv_stream: int = 2) -> GreenEstimate:
    """Monte Carlo mean of the random Green's function and its differences.

    ``replicas`` counts solves.  With ``antithetic`` (default) solves come in
    +/- pairs of the same environment draw: the environments are centered
    Gaussians (possibly convolved), so the negated field has the same law and
    the pair mean is unbiased while cancelling the Green function's linear
    response to coefficient fluctuations, which otherwise dominates the
    variance.  Observations are accumulated in index order.  Solves that fail
    to converge are skipped with a count; more than 1% skipped is a hard
    error.

    With ``cv_matrix`` and ``cv_replicas`` a two-level control variate is
    added: per realization the second-order truncation of the Neumann series
    around the constant operator eta + div(cv_matrix grad .) is subtracted
    from the exact solve (the residual carries only third-and-higher-order
    fluctuations), and the truncation's own mean is estimated on
    ``cv_replicas`` extra spectral-only solves from an independent stream.
    The combined estimator is unbiased for any reference matrix; errors from
    the two levels add in quadrature.  This is what makes the gradient and
    second-difference decay tables resolvable at desk-scale replica counts.
    """
    if eta <= 0:
        raise ValueError("averaged_green requires eta > 0")
    if replicas < 2:
        raise ValueError("need at least 2 replicas for standard errors")
    if antithetic and replicas % 2:
        raise ValueError("antithetic pairing needs an even replica count")
    use_cv = cv_replicas > 0
    if use_cv and cv_matrix is None:
        raise ValueError("control variate needs a reference matrix")
    if use_cv and (cv_replicas < 4 or (antithetic and cv_replicas % 2)):
        raise ValueError("cv_replicas must be even and at least 4")
    lattice = spec.lattice
    rhs = delta_field(lattice)
    signs = (1.0, -1.0) if antithetic else (1.0,)
    n_obs = replicas // len(signs)

    if use_cv:
        cv_matrix = np.asarray(cv_matrix, dtype=float)
        inv = _const_inverse(lattice, eta, cv_matrix)
        base_green = inv(rhs.values)

        def born_rest(a):
            """B(a) - G0 for the second-order Born truncation B."""
            t1 = _born_step(inv, a, cv_matrix, base_green)
            t2 = _born_step(inv, a, cv_matrix, t1)
            return t2 - t1
    else:
        base_green = np.zeros(lattice.sides)

    def main_obs(idx):
        base = spec.sample(idx, stream)
        fields = []
        for sign in signs:
            a = evaluate_map(cmap, ScalarField(lattice, sign * base.values))
            try:
                g, _ = solve_cg(eta, a, rhs, tol=tol, max_iter=max_iter)
            except ConvergenceError:
                return None, len(signs)
            centred = g.values - base_green
            if use_cv:
                centred = centred - born_rest(a)
            fields.append(centred)
        return sum(fields) / len(fields), 0

    main = _TableSet(lattice)
    skipped = 0
    for gv, failed in replica_map(main_obs, n_obs, threads):
        if gv is None:
            skipped += failed
            continue
        main.add(gv)
    if skipped > 0.01 * replicas:
        raise ConvergenceError(
            f"{skipped}/{replicas} solves failed to converge (limit 1%)")

    cv = None
    if use_cv:
        def cv_obs(idx):
            base = spec.sample(idx, cv_stream)
            fields = []
            for sign in signs:
                a = evaluate_map(cmap, ScalarField(lattice, sign * base.values))
                fields.append(born_rest(a))
            return sum(fields) / len(fields)

        cv = _TableSet(lattice)
        for bv in replica_map(cv_obs, cv_replicas // len(signs), threads):
            cv.add(bv)

    _, radii, _ = lattice.radial_bins()
    base_tables = {"value": base_green, "grad": grad_values(base_green),
                   "grad2": _second_differences(base_green)}
    field_mean, field_se, prof_mean, prof_se = {}, {}, {}, {}
    for kind in ("value", "grad", "grad2"):
        mean = np.asarray(main.field[kind].mean) + base_tables[kind]
        var = np.asarray(main.field[kind].stderr) ** 2
        pmean = np.asarray(main.profile[kind].mean) + \
            shell_profile(lattice, base_tables[kind], kind)
        pvar = np.asarray(main.profile[kind].stderr) ** 2
        if cv is not None:
            mean = mean + np.asarray(cv.field[kind].mean)
            var = var + np.asarray(cv.field[kind].stderr) ** 2
            pmean = pmean + np.asarray(cv.profile[kind].mean)
            pvar = pvar + np.asarray(cv.profile[kind].stderr) ** 2
        field_mean[kind], field_se[kind] = mean, np.sqrt(var)
        prof_mean[kind], prof_se[kind] = pmean, np.sqrt(pvar)

    return GreenEstimate(
        lattice=lattice, eta=eta, replicas=replicas - skipped,
        observations=main.count,
        mean=field_mean["value"], stderr=field_se["value"],
        grad_mean=field_mean["grad"], grad_stderr=field_se["grad"],
        grad2_mean=field_mean["grad2"], grad2_stderr=field_se["grad2"],
        prof_radii=radii.copy(),
        prof_mean=prof_mean, prof_stderr=prof_se,
        antithetic=antithetic, skipped=skipped, env=spec.describe(),
    )


def lattice_reference(eta: float, matrix, lattice: TorusLattice):
    """Site tables (value, grad, grad2) of the constant-coefficient torus Green."""
    g = lattice_green(eta, matrix, lattice).values
    return g, grad_values(g), _second_differences(g)


def continuum_reference(eta: float, matrix, lattice: TorusLattice):
    """Continuum homogenized Green's function sampled at the lattice sites.

    The value at the origin is set to 0 (the continuum kernel is singular
    there); restrict comparisons to |x| >= 8 where the lattice-continuum
    discrepancy is subdominant.  Differences are the same forward stencils
    applied to the sampled values.
    """
    d = lattice.d
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 0:
        matrix = float(matrix) * np.eye(d)
    vals_e, vecs = np.linalg.eigh(matrix)
    if vals_e.min() <= 0:
        raise ValueError("matrix must be positive definite")
    inv_sqrt = vecs @ np.diag(1.0 / np.sqrt(vals_e)) @ vecs.T
    det = float(np.prod(vals_e))
    coords = np.stack(
        [np.broadcast_to(lattice.axis_offsets(j), lattice.sides) for j in range(d)],
        axis=-1)
    y = np.einsum("ij,...j->...i", inv_sqrt, coords)
    r = np.sqrt((y**2).sum(axis=-1))
    origin = (0,) * d
    r[origin] = 1.0  # placeholder; the origin value is zeroed below
    m = np.sqrt(eta)
    if d == 3:
        vals = np.exp(-m * r) / (4 * np.pi * r * np.sqrt(det))
    else:
        nu = d / 2.0 - 1.0
        vals = (2 * np.pi) ** (-d / 2.0) * (m / r) ** nu * kv(nu, m * r) / np.sqrt(det)
    vals[origin] = 0.0
    return vals, grad_values(vals), _second_differences(vals)


def fit_decay(radii, values, stderrs, window, offset: float = 1.0,
              cofit_exponential: bool = False, resamples: int = 400,
              seed: int = 0) -> RateFit:
    """Power-law fit of a decay table against (r + offset).

    Weighted log-log least squares with the abscissa shifted by ``offset``
    (the decay estimates are stated against |x| + 1).  With
    ``cofit_exponential`` an additional -g*r term is fit jointly, absorbing a
    flat exponential factor; by default experiments choose eta small enough
    that the factor is flat on the window and the term is unnecessary.  The
    confidence interval is a percentile bootstrap over Gaussian resamples of
    the table, deterministic given ``seed``.

    The window selects radial bins by rounded label: a table point belongs to
    the window when its radius lies within half a unit of [lo, hi], so the
    bin whose mean radius is 8.03 still counts as r = 8.
    """
    radii = np.asarray(radii, dtype=float)
    lo, hi = window
    sel = (lo - 0.5, hi + 0.5)

    if cofit_exponential:
        def fitter(r, v, s):
            fit = _cofit_exponential(r, v, s, sel, offset)
            fit.window = (lo, hi)
            return fit
    else:
        def fitter(r, v, s):
            fit = loglog_fit(r + offset, v, s, window=(sel[0] + offset, sel[1] + offset))
            fit.window = (lo, hi)
            return fit

    fit = fitter(radii, values, stderrs)
    ci = parametric_bootstrap_ci(fitter, radii, values, stderrs,
                                 resamples=resamples, seed=seed)
    fit.ci_low, fit.ci_high = min(ci[0], fit.exponent), max(ci[1], fit.exponent)
    return fit


def _cofit_exponential(radii, values, stderrs, window, offset) -> RateFit:
    from .stats import _select_window

    r, v, s, excluded = _select_window(radii, values, stderrs, window)
    y = np.log(v)
    sig = np.where(s > 0, s / v, 1.0)
    if np.all(s == 0):
        sig = np.ones_like(y)
    w = 1.0 / sig**2
    X = np.stack([np.ones_like(r), np.log(r + offset), r], axis=1)
    sw = np.sqrt(w)
    beta, res, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ beta
    return RateFit(
        exponent=float(beta[1]), ci_low=float(beta[1]), ci_high=float(beta[1]),
        window=tuple(window), n_points=int(r.size),
        residual_norm=float(np.sqrt((w * resid**2).sum())), excluded=excluded,
        extra={"exp_rate": float(-beta[2]), "model": "power_times_exponential"},
    )
