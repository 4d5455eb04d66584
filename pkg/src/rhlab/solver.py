"""Solvers for eta*u + div(a grad u) = f on the torus.

Three routes: exact spectral solve for constant coefficients, preconditioned
conjugate gradient for variable coefficients, and the constant-coefficient-
preconditioned Richardson (Neumann-series) iteration whose gradient norms
contract by at least (1 - lower/upper) per step.
"""

from dataclasses import dataclass, field

import numpy as np

from .coeffs import CoefficientField
from .lattice import ScalarField, TorusLattice, div_values, grad_values


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the best iterate and its residual."""

    def __init__(self, message, best=None, residual=None, trace=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.trace = trace


@dataclass
class SolveReport:
    method: str
    iterations: int
    residual: float
    tol: float

    def to_json(self) -> dict:
        return {"method": self.method, "iterations": self.iterations,
                "residual": self.residual, "tol": self.tol}


def _const_inverse(lattice: TorusLattice, eta: float, matrix):
    """Spectral inverse of eta + div(A grad .) as a values -> values callable.

    At eta = 0 the zero mode is pinned to 0 (solutions on the mean-zero
    subspace).
    """
    sym = lattice.operator_symbol(matrix) + eta
    origin = (0,) * lattice.d
    if eta == 0:
        sym = sym.copy()
        sym[origin] = 1.0

    def solve(values):
        spec = lattice.rfftn(values) / sym
        if eta == 0:
            spec[origin] = 0.0
        return lattice.irfftn(spec)

    return solve


def solve_const(eta: float, matrix, f: ScalarField) -> ScalarField:
    """Exact spectral solution of eta*u + div(A grad u) = f for constant SPD A.

    ``matrix`` is a scalar or a symmetric (d, d) array.  For eta = 0 the
    right side must be mean-zero and the solution is pinned to mean zero.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    lattice = f.lattice
    if eta == 0 and abs(f.values.mean()) > 1e-12 * (np.abs(f.values).max() + 1e-300):
        raise ValueError("eta = 0 requires a mean-zero right side (solvability)")
    return ScalarField(lattice, _const_inverse(lattice, eta, matrix)(f.values))


def _operator(eta: float, a: CoefficientField):
    def apply(values):
        return eta * values + div_values(a.apply(grad_values(values)))
    return apply


def solve_cg(eta: float, a: CoefficientField, f: ScalarField, tol: float = 1e-8,
             max_iter: int = 500, precond: str = "midpoint"):
    """Preconditioned conjugate gradient for eta*u + div(a grad u) = f.

    The preconditioner is the exact constant-coefficient inverse with
    A = c*I, where c is the midpoint (lower+upper)/2 of the certified bounds
    by default, or the upper bound with ``precond="upper"`` (the scaling the
    Richardson series uses).  Returns (solution, report); the reported
    residual is recomputed from the returned iterate.  For eta = 0 the right
    side must be mean-zero and iterates stay on the mean-zero subspace.
    """
    if a.lattice != f.lattice:
        raise ValueError("coefficients and right side live on different lattices")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if not 0 < tol < 1:
        raise ValueError("tol must be in (0, 1)")
    lattice = f.lattice
    fv = f.values
    fnorm = float(np.linalg.norm(fv))
    if fnorm == 0.0:
        return ScalarField(lattice, np.zeros(lattice.sides)), SolveReport(
            "cg", 0, 0.0, tol)
    if eta == 0 and abs(fv.mean()) > 1e-12 * np.abs(fv).max():
        raise ValueError("eta = 0 requires a mean-zero right side (solvability)")
    if precond == "midpoint":
        c = 0.5 * (a.lower + a.upper)
    elif precond == "upper":
        c = a.upper
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")
    apply_m = _const_inverse(lattice, eta, c)
    apply_a = _operator(eta, a)

    u = np.zeros(lattice.sides)
    r = fv.copy()
    if eta == 0:
        r = r - r.mean()
    z = apply_m(r)
    p = z.copy()
    rz = float((r * z).sum())
    best = u
    best_res = np.inf
    iterations = 0
    for it in range(1, max_iter + 1):
        q = apply_a(p)
        alpha = rz / float((p * q).sum())
        u = u + alpha * p
        r = r - alpha * q
        if eta == 0:
            r = r - r.mean()
        iterations = it
        res = float(np.linalg.norm(r)) / fnorm
        if res < best_res:
            best, best_res = u, res
        if res <= tol:
            break
        z = apply_m(r)
        rz_new = float((r * z).sum())
        p = z + (rz_new / rz) * p
        rz = rz_new
    # certify with an independently recomputed residual
    true_res = float(np.linalg.norm(fv - apply_a(best))) / fnorm
    report = SolveReport("cg", iterations, true_res, tol)
    sol = ScalarField(lattice, best)
    if true_res > tol:
        raise ConvergenceError(
            f"cg did not reach tol {tol} in {max_iter} iterations "
            f"(residual {true_res:.3e})", best=sol, residual=true_res)
    return sol, report


@dataclass
class RichardsonTrace:
    """Per-term diagnostics of the Neumann series."""

    gradient_norms: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    iterations: int = 0
    contraction_bound: float = 1.0

    def to_json(self) -> dict:
        return {"method": "richardson", "iterations": self.iterations,
                "contraction_bound": self.contraction_bound,
                "gradient_norms": self.gradient_norms, "ratios": self.ratios}


def solve_richardson(eta: float, a: CoefficientField, direction, tol: float = 1e-8,
                     max_iter: int = 400):
    """Neumann series for the regularized corrector in a fixed direction.

    With b(x) = I - a(x)/upper, iterates solve

        (eta/upper + div grad) F_2 = P div[b v],
        (eta/upper + div grad) F_r = P div[b grad F_{r-1}],

    where P removes the torus mean, and the sum Phi = sum_r F_r satisfies

        eta*Phi + div(a (grad Phi + v)) = 0

    on the torus.  Each measured ratio |grad F_r| / |grad F_{r-1}| is at most
    1 - lower/upper; the series truncates when |grad F_r| <= tol * |v|.
    Returns (Phi, trace).
    """
    if eta <= 0:
        raise ValueError("the Richardson series requires eta > 0")
    lattice = a.lattice
    v = np.asarray(direction, dtype=float)
    if v.shape != (lattice.d,):
        raise ValueError(f"direction must be a {lattice.d}-vector")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0:
        raise ValueError("direction must be nonzero")
    upper = a.upper
    bound = 1.0 - a.lower / upper
    inv = _const_inverse(lattice, eta / upper, 1.0)

    def b_apply(vec_values):
        return vec_values - a.apply(vec_values) / upper

    trace = RichardsonTrace(contraction_bound=bound)
    rhs = div_values(b_apply(np.broadcast_to(v, lattice.sides + (lattice.d,)).copy()))
    rhs -= rhs.mean()
    term = inv(rhs)
    total = term.copy()
    gnorm = float(np.linalg.norm(grad_values(term)))
    trace.gradient_norms.append(gnorm)
    trace.iterations = 1
    while gnorm > tol * vnorm:
        if trace.iterations >= max_iter:
            raise ConvergenceError(
                f"richardson did not reach tol {tol} in {max_iter} terms",
                best=ScalarField(lattice, total), trace=trace)
        rhs = div_values(b_apply(grad_values(term)))
        rhs -= rhs.mean()
        term = inv(rhs)
        new_norm = float(np.linalg.norm(grad_values(term)))
        trace.ratios.append(new_norm / gnorm if gnorm > 0 else 0.0)
        trace.gradient_norms.append(new_norm)
        trace.iterations += 1
        total += term
        gnorm = new_norm
    return ScalarField(lattice, total), trace
