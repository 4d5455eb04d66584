"""Corrector solves and Monte Carlo estimation of the homogenized matrix.

The homogenized matrix is estimated by the flux average: column k is the
environment and space average of a(x)(e_k + grad chi_k(x)), where chi_k is
the regularized corrector.  The energy form <(e_j + grad chi_j) . a (e_k +
grad chi_k)> is computed alongside; the two agree up to eta times the
corrector covariance, which is itself a correctness check.
"""

from dataclasses import dataclass, field

import numpy as np

from .coeffs import CoefficientField, CoefficientMap, evaluate_map
from .fields import EnvironmentSpec
from .lattice import ScalarField, div_values, grad_values
from .solver import solve_cg, solve_richardson
from .stats import Accumulator, replica_map


def solve_corrector(a: CoefficientField, eta: float, axis: int, method: str = "cg",
                    tol: float = 1e-8, max_iter: int = 500) -> ScalarField:
    """Mean-zero corrector chi_k solving eta*chi + div(a (grad chi + e_k)) = 0.

    For eta > 0 the solution is automatically mean-zero (sum the equation
    over the torus); eta = 0 is the pure periodic cell problem, pinned to
    mean zero.  ``method`` selects the conjugate-gradient route or the
    Richardson series (the latter needs eta > 0).
    """
    lattice = a.lattice
    if not 0 <= axis < lattice.d:
        raise ValueError(f"axis must be in [0, {lattice.d})")
    if method == "richardson":
        chi, _ = solve_richardson(eta, a, np.eye(lattice.d)[axis], tol=tol,
                                  max_iter=max_iter)
    elif method == "cg":
        e = np.zeros(lattice.sides + (lattice.d,))
        e[..., axis] = 1.0
        rhs = ScalarField(lattice, -div_values(a.apply(e)))
        chi, _ = solve_cg(eta, a, rhs, tol=tol, max_iter=max_iter)
    else:
        raise ValueError(f"unknown corrector method {method!r}")
    return ScalarField(lattice, chi.values - chi.values.mean())


@dataclass(eq=False)
class CorrectorSet:
    """Correctors for all coordinate directions of one environment sample."""

    correctors: list
    eta: float
    lattice: object
    seed: int | None = None

    def gradients(self) -> np.ndarray:
        """Stacked corrector gradients, shape sides + (d, d): [..., i, k] = d_i chi_k."""
        return np.stack([grad_values(chi.values) for chi in self.correctors], axis=-1)


def corrector_set(a: CoefficientField, eta: float, method: str = "cg",
                  tol: float = 1e-8, max_iter: int = 500, seed=None) -> CorrectorSet:
    chis = [solve_corrector(a, eta, k, method, tol, max_iter) for k in range(a.lattice.d)]
    return CorrectorSet(chis, eta, a.lattice, seed)


@dataclass(eq=False)
class HomogenizedEstimate:
    """Monte Carlo estimate of the homogenized matrix with per-entry errors."""

    matrix: np.ndarray            # symmetrized flux average
    stderr: np.ndarray
    eta: float
    replicas: int
    sides: tuple
    seed: int | None = None
    energy_matrix: np.ndarray | None = None
    raw_matrix: np.ndarray | None = None   # flux average before symmetrization
    extrapolated: bool = False

    def __post_init__(self):
        if not np.allclose(self.matrix, self.matrix.T, atol=1e-10):
            raise ValueError("homogenized estimate must be symmetric")

    def to_json(self) -> dict:
        out = {
            "matrix": self.matrix.tolist(),
            "stderr": self.stderr.tolist(),
            "eta": self.eta,
            "replicas": self.replicas,
            "sides": list(self.sides),
            "extrapolated": self.extrapolated,
        }
        if self.seed is not None:
            out["seed"] = self.seed
        if self.energy_matrix is not None:
            out["energy_matrix"] = self.energy_matrix.tolist()
        return out


def _flux_and_energy(a: CoefficientField, eta: float, method: str, tol: float,
                     max_iter: int):
    """Per-realization flux and energy averages of the corrected gradients."""
    d = a.lattice.d
    corrected = np.empty(a.lattice.sides + (d, d))   # [..., i, k] = (e_k + grad chi_k)_i
    fluxes = np.empty_like(corrected)
    for k in range(d):
        chi = solve_corrector(a, eta, k, method, tol, max_iter)
        g = grad_values(chi.values)
        g[..., k] += 1.0
        corrected[..., k] = g
        fluxes[..., k] = a.apply(g)
    nsite = a.lattice.volume
    flux = fluxes.reshape(nsite, d, d).mean(axis=0)
    energy = np.einsum("xik,xij->kj", corrected.reshape(nsite, d, d),
                       fluxes.reshape(nsite, d, d)) / nsite
    return flux, energy


def estimate_ahom(spec: EnvironmentSpec, cmap: CoefficientMap, eta: float,
                  replicas: int, method: str = "cg", tol: float = 1e-8,
                  max_iter: int = 500, stream: int = 1, threads: int = 1,
                  antithetic: bool = False) -> HomogenizedEstimate:
    """Monte Carlo flux-average estimate of the homogenized matrix.

    Samples ``replicas`` environments, solves all d correctors per replica,
    and averages a(x)(e_k + grad chi_k(x)) over sites and replicas.  The
    returned matrix is symmetrized; the skew part is Monte Carlo noise and
    stays within its error bars.  With ``antithetic`` each environment draw
    is used with both signs (valid for the centered Gaussian environments)
    and pair means are the observations, cancelling the flux's odd response;
    ``replicas`` still counts environment evaluations and must then be a
    multiple of 4 so at least two pair observations remain for error bars.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas for standard errors")
    if eta <= 0:
        raise ValueError("estimate_ahom requires eta > 0 (extrapolate to 0 separately)")
    if antithetic and replicas % 2:
        raise ValueError("antithetic pairing needs an even replica count")
    signs = (1.0, -1.0) if antithetic else (1.0,)
    n_obs = replicas // len(signs)
    if n_obs < 2:
        raise ValueError("need at least 2 observations for standard errors")

    def one(idx):
        base = spec.sample(idx, stream)
        out = []
        for sign in signs:
            a = evaluate_map(cmap, ScalarField(spec.lattice, sign * base.values))
            out.append(_flux_and_energy(a, eta, method, tol, max_iter))
        flux = sum(f for f, _ in out) / len(out)
        energy = sum(e for _, e in out) / len(out)
        return flux, energy

    flux_acc = Accumulator()
    energy_acc = Accumulator()
    for flux, energy in replica_map(one, n_obs, threads):
        flux_acc.add(flux)
        energy_acc.add(energy)
    raw = np.asarray(flux_acc.mean)
    se = np.asarray(flux_acc.stderr)
    sym = 0.5 * (raw + raw.T)
    sym_se = 0.5 * np.sqrt(se**2 + se.T**2)
    return HomogenizedEstimate(
        matrix=sym, stderr=sym_se, eta=eta, replicas=replicas,
        sides=spec.lattice.sides, seed=spec.seed,
        energy_matrix=0.5 * (np.asarray(energy_acc.mean) + np.asarray(energy_acc.mean).T),
        raw_matrix=raw,
    )


def deterministic_ahom(a: CoefficientField, eta: float, method: str = "cg",
                       tol: float = 1e-8, max_iter: int = 500) -> HomogenizedEstimate:
    """Flux-average homogenized matrix of one fixed coefficient field.

    For deterministic media (laminates and other analytic oracles) there is
    nothing to sample: the flux average of the single realization is the
    estimate and the error is zero.
    """
    flux, energy = _flux_and_energy(a, eta, method, tol, max_iter)
    sym = 0.5 * (flux + flux.T)
    return HomogenizedEstimate(
        matrix=sym, stderr=np.zeros_like(sym), eta=eta, replicas=1,
        sides=a.lattice.sides, energy_matrix=0.5 * (energy + energy.T),
        raw_matrix=flux,
    )


def extrapolate_eta(estimates) -> HomogenizedEstimate:
    """Polynomial Richardson extrapolation of homogenized estimates to eta = 0.

    Takes at least three estimates at strictly decreasing eta and evaluates
    the interpolating polynomial (in eta, entrywise) at zero.  The error
    combines the extrapolation increment from the highest-order step with the
    propagated Monte Carlo errors of the linear combination.
    """
    estimates = list(estimates)
    if len(estimates) < 3:
        raise ValueError("need at least 3 estimates to extrapolate")
    etas = np.array([e.eta for e in estimates], dtype=float)
    if np.any(np.diff(etas) >= 0):
        raise ValueError(f"eta sequence must be strictly decreasing, got {etas.tolist()}")
    sides = estimates[0].sides
    if any(e.sides != sides for e in estimates):
        raise ValueError("estimates come from different lattices")

    def lagrange_weights(xs):
        ws = []
        for i, xi in enumerate(xs):
            w = 1.0
            for j, xj in enumerate(xs):
                if j != i:
                    w *= xj / (xj - xi)
            ws.append(w)
        return np.array(ws)

    mats = np.array([e.matrix for e in estimates])
    errs = np.array([e.stderr for e in estimates])
    w_all = lagrange_weights(etas)
    value = np.tensordot(w_all, mats, axes=1)
    mc_err = np.sqrt(np.tensordot(w_all**2, errs**2, axes=1))
    # increment from dropping the coarsest eta: honest size of the last correction
    w_drop = lagrange_weights(etas[1:])
    drop_value = np.tensordot(w_drop, mats[1:], axes=1)
    fit_err = np.abs(value - drop_value)
    total = np.sqrt(mc_err**2 + fit_err**2)
    return HomogenizedEstimate(
        matrix=0.5 * (value + value.T), stderr=0.5 * np.sqrt(total**2 + total.T**2),
        eta=0.0, replicas=estimates[0].replicas, sides=sides,
        seed=estimates[0].seed, extrapolated=True,
    )
