"""Coefficient maps: environment field -> uniformly elliptic matrix field.

The canonical shapes are logistic: smooth, C^1, with analytic contrast and
derivative bound.  A map with bounds (lower, upper) satisfies
lower*I <= a(s) <= upper*I as quadratic forms for every input s.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .lattice import ScalarField, TorusLattice


@dataclass(eq=False)
class CoefficientField:
    """Per-site symmetric d x d matrices with certified ellipticity bounds.

    Diagonal fields (the common case) store one entry per axis in ``diag``
    of shape sides + (d,); dense fields store ``full`` of shape
    sides + (d, d).  Exactly one of the two is set.
    """

    lattice: TorusLattice
    lower: float
    upper: float
    diag: np.ndarray | None = None
    full: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.lower <= self.upper:
            raise ValueError(f"need 0 < lower <= upper, got ({self.lower}, {self.upper})")
        if (self.diag is None) == (self.full is None):
            raise ValueError("exactly one of diag/full storage must be given")
        d = self.lattice.d
        if self.diag is not None and self.diag.shape != self.lattice.sides + (d,):
            raise ValueError("diag storage must have shape sides + (d,)")
        if self.full is not None:
            if self.full.shape != self.lattice.sides + (d, d):
                raise ValueError("full storage must have shape sides + (d, d)")
            if not np.allclose(self.full, np.swapaxes(self.full, -1, -2)):
                raise ValueError("per-site matrices must be symmetric")

    def apply(self, vector_values: np.ndarray) -> np.ndarray:
        """Site-wise matrix-vector product a(x) v(x) on raw (*sides, d) arrays."""
        if self.diag is not None:
            return self.diag * vector_values
        return np.einsum("...ij,...j->...i", self.full, vector_values)

    def matrices(self) -> np.ndarray:
        """Dense (*sides, d, d) view of the per-site matrices."""
        if self.full is not None:
            return self.full
        d = self.lattice.d
        out = np.zeros(self.lattice.sides + (d, d))
        for j in range(d):
            out[..., j, j] = self.diag[..., j]
        return out

    def components_upper(self) -> np.ndarray:
        """Upper-triangle components, row-major: the RHL1 dump layout."""
        d = self.lattice.d
        mats = self.matrices()
        cols = [mats[..., i, j] for i in range(d) for j in range(i, d)]
        return np.stack(cols, axis=-1)

    @property
    def bounds(self):
        return (self.lower, self.upper)


def contrast_ratio(field: CoefficientField) -> float:
    """Ellipticity contrast upper/lower from the certified bounds."""
    return field.upper / field.lower


@dataclass(eq=False)
class CoefficientMap:
    """Smooth scalar-to-matrix map with certified bounds and derivative bound.

    form "isotropic_sigmoid": a(s) = [lower + (upper-lower)*sigma(s)] I with
    sigma the logistic function, so the derivative bound is (upper-lower)/4.
    form "diagonal_sigmoid": independent logistic entries per axis, entry j
    driven by the environment shifted one step along axis j (gives an
    anisotropic homogenized matrix).  form "custom": a user scalar shape with
    values in [0, 1] and a stated slope bound.
    """

    form: str
    lower: float
    upper: float
    shape: Callable[[np.ndarray], np.ndarray] | None = None
    shape_slope_max: float = 0.25

    def __post_init__(self):
        if not 0 < self.lower <= self.upper:
            raise ValueError(f"need 0 < lower <= upper, got ({self.lower}, {self.upper})")
        if self.form not in ("isotropic_sigmoid", "diagonal_sigmoid", "custom"):
            raise ValueError(f"unknown coefficient map form {self.form!r}")
        if self.form == "custom" and self.shape is None:
            raise ValueError("custom map requires a shape function")

    @property
    def deriv_bound(self) -> float:
        """Sup-norm bound on the map's derivative."""
        return (self.upper - self.lower) * self.shape_slope_max

    def scalar(self, s: np.ndarray) -> np.ndarray:
        shape = expit if self.shape is None else self.shape
        return self.lower + (self.upper - self.lower) * shape(s)

    def describe(self) -> dict:
        return {"form": self.form, "lower": self.lower, "upper": self.upper}


def isotropic_map(lower: float, upper: float) -> CoefficientMap:
    return CoefficientMap("isotropic_sigmoid", lower, upper)


def diagonal_map(lower: float, upper: float) -> CoefficientMap:
    return CoefficientMap("diagonal_sigmoid", lower, upper)


def custom_map(lower: float, upper: float, shape, shape_slope_max: float) -> CoefficientMap:
    return CoefficientMap("custom", lower, upper, shape=shape,
                          shape_slope_max=shape_slope_max)


def evaluate_map(cmap: CoefficientMap, omega: ScalarField) -> CoefficientField:
    """Site-wise coefficients a(x) = map(environment at x).

    The diagonal form reads the environment at x + e_j for entry j; the
    isotropic and custom forms read it at x.
    """
    lattice = omega.lattice
    d = lattice.d
    if cmap.form == "diagonal_sigmoid":
        diag = np.stack(
            [cmap.scalar(np.roll(omega.values, -1, axis=j)) for j in range(d)], axis=-1
        )
    else:
        diag = np.repeat(cmap.scalar(omega.values)[..., None], d, axis=-1)
    return CoefficientField(lattice, cmap.lower, cmap.upper, diag=diag)


def identity_coefficients(lattice: TorusLattice) -> CoefficientField:
    return CoefficientField(lattice, 1.0, 1.0,
                            diag=np.ones(lattice.sides + (lattice.d,)))


def constant_coefficients(lattice: TorusLattice, matrix) -> CoefficientField:
    """Constant (site-independent) coefficient field from an SPD matrix or scalar."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 0:
        c = float(matrix)
        return CoefficientField(lattice, c, c,
                                diag=np.full(lattice.sides + (lattice.d,), c))
    eigs = np.linalg.eigvalsh(matrix)
    full = np.broadcast_to(matrix, lattice.sides + matrix.shape).copy()
    return CoefficientField(lattice, float(eigs.min()), float(eigs.max()), full=full)


def laminate_field(lattice: TorusLattice, profile, axis: int = 0,
                   isotropic: bool = True, off_value: float = 1.0) -> CoefficientField:
    """Deterministic laminate: coefficients depend on one coordinate only.

    ``profile`` gives the scalar value per slice along ``axis``.  Isotropic
    laminates use profile(x_axis) * I; otherwise only the ``axis`` diagonal
    entry varies and the remaining entries are ``off_value``.  Included as an
    analytic oracle: the homogenized matrix of an isotropic laminate is the
    harmonic mean across layers, arithmetic mean along them.
    """
    profile = np.asarray(profile, dtype=float)
    if profile.shape != (lattice.sides[axis],):
        raise ValueError(f"profile must have one value per slice along axis {axis}")
    if np.any(profile <= 0):
        raise ValueError("laminate profile must be positive")
    shape = [1] * lattice.d
    shape[axis] = lattice.sides[axis]
    slab = np.broadcast_to(profile.reshape(shape), lattice.sides)
    d = lattice.d
    diag = np.empty(lattice.sides + (d,))
    if isotropic:
        for j in range(d):
            diag[..., j] = slab
        lo, hi = float(profile.min()), float(profile.max())
    else:
        for j in range(d):
            diag[..., j] = slab if j == axis else off_value
        lo = float(min(profile.min(), off_value))
        hi = float(max(profile.max(), off_value))
    return CoefficientField(lattice, lo, hi, diag=diag)
