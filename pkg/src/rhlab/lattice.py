"""Periodic lattice geometry and the discrete vector calculus on the torus.

The gradient is the forward difference (grad u)_j(x) = u(x+e_j) - u(x) with
periodic wraparound; the divergence is its exact adjoint under the site-wise
counting inner product, (div v)(x) = sum_j [v_j(x-e_j) - v_j(x)].  With these
conventions div(grad u) is the standard 2d-point lattice Laplacian, whose
Fourier symbol is sum_j 4 sin^2(pi m_j / L_j).

Site order is row-major with the last coordinate fastest, i.e. numpy C order
on arrays of shape ``sides``.
"""

from dataclasses import dataclass
from math import prod

import numpy as np


class TorusLattice:
    """Periodic box in Z^d with even side lengths.

    Caches the spectral data (forward-difference phase factors, Laplacian
    symbol, site distances and radial bins) that the solvers and samplers
    share.  Instances are immutable in practice; all cached arrays are
    treated as read-only.
    """

    def __init__(self, sides):
        sides = tuple(int(s) for s in sides)
        if len(sides) < 1:
            raise ValueError("lattice needs at least one dimension")
        for s in sides:
            if s <= 0 or s % 2 != 0:
                raise ValueError(f"side lengths must be positive even integers, got {sides}")
        self.sides = sides
        self.d = len(sides)
        self.volume = prod(sides)
        self._cache = {}

    def __repr__(self):
        return f"TorusLattice(sides={self.sides})"

    def __eq__(self, other):
        return isinstance(other, TorusLattice) and other.sides == self.sides

    def __hash__(self):
        return hash(self.sides)

    # -- indexing ---------------------------------------------------------

    def site_index(self, coords) -> int:
        """Linear index of a site, row-major with the last coordinate fastest."""
        coords = tuple(int(c) % s for c, s in zip(coords, self.sides))
        idx = 0
        for c, s in zip(coords, self.sides):
            idx = idx * s + c
        return idx

    def site_coords(self, index: int):
        """Inverse of :meth:`site_index`."""
        if not 0 <= index < self.volume:
            raise ValueError(f"site index {index} out of range")
        coords = []
        for s in reversed(self.sides):
            coords.append(index % s)
            index //= s
        return tuple(reversed(coords))

    def min_image(self, coords):
        """Torus-minimal representative of a displacement, per axis in (-L/2, L/2]."""
        out = []
        for c, s in zip(coords, self.sides):
            c = int(c) % s
            out.append(c if c <= s // 2 else c - s)
        return tuple(out)

    # -- cached geometry ---------------------------------------------------

    def axis_offsets(self, axis: int) -> np.ndarray:
        """Minimal-image displacement values along one axis, shaped for broadcasting."""
        key = ("axis_offsets", axis)
        if key not in self._cache:
            s = self.sides[axis]
            c = np.arange(s)
            c = np.where(c <= s // 2, c, c - s).astype(float)
            shape = [1] * self.d
            shape[axis] = s
            self._cache[key] = c.reshape(shape)
        return self._cache[key]

    def distances(self) -> np.ndarray:
        """Torus-minimal Euclidean distance |z| from the origin, per site."""
        if "distances" not in self._cache:
            d2 = sum(self.axis_offsets(j) ** 2 for j in range(self.d))
            self._cache["distances"] = np.sqrt(np.broadcast_to(d2, self.sides))
        return self._cache["distances"]

    def radial_bins(self):
        """Integer radial binning of sites by rounded torus-minimal distance.

        Returns ``(bin_index, radii, counts)`` where ``bin_index`` maps each
        site to a bin, ``radii[b]`` is the mean distance inside bin b and
        ``counts[b]`` the number of sites in it.  Bins are contiguous from 0.
        """
        if "radial_bins" not in self._cache:
            dist = self.distances()
            rbin = np.rint(dist).astype(np.int64)
            nbins = int(rbin.max()) + 1
            counts = np.bincount(rbin.ravel(), minlength=nbins)
            sums = np.bincount(rbin.ravel(), weights=dist.ravel(), minlength=nbins)
            radii = sums / np.maximum(counts, 1)
            self._cache["radial_bins"] = (rbin, radii, counts)
        return self._cache["radial_bins"]

    def unit_directions(self) -> np.ndarray:
        """Unit vectors along the torus-minimal displacement, zero at the origin."""
        if "unit_directions" not in self._cache:
            coords = np.stack(
                [np.broadcast_to(self.axis_offsets(j), self.sides) for j in range(self.d)],
                axis=-1)
            dist = self.distances()
            safe = np.where(dist > 0, dist, 1.0)
            self._cache["unit_directions"] = coords / safe[..., None]
        return self._cache["unit_directions"]

    # -- spectral data -----------------------------------------------------

    def rfft_shape(self):
        return self.sides[:-1] + (self.sides[-1] // 2 + 1,)

    def forward_phase(self, axis: int) -> np.ndarray:
        """Symbol exp(2*pi*i*k/L) - 1 of the forward difference along one axis.

        Shaped for broadcasting over the rfft grid (real FFT along the last
        axis).
        """
        key = ("phase", axis)
        if key not in self._cache:
            s = self.sides[axis]
            if axis == self.d - 1:
                k = np.arange(s // 2 + 1)
            else:
                k = np.fft.fftfreq(s) * s
            ph = np.exp(2j * np.pi * k / s) - 1.0
            shape = [1] * self.d
            shape[axis] = ph.size
            self._cache[key] = ph.reshape(shape)
        return self._cache[key]

    def laplacian_symbol(self) -> np.ndarray:
        """Fourier symbol of div(grad .) on the rfft grid: sum_j 4 sin^2(pi k_j/L_j)."""
        if "lap_symbol" not in self._cache:
            sym = sum(np.abs(self.forward_phase(j)) ** 2 for j in range(self.d))
            self._cache["lap_symbol"] = np.ascontiguousarray(
                np.broadcast_to(sym, self.rfft_shape())
            )
        return self._cache["lap_symbol"]

    def operator_symbol(self, matrix) -> np.ndarray:
        """Exact Fourier symbol of div(A grad .) for a constant SPD matrix A.

        ``matrix`` may be a scalar (isotropic A = c*I) or a symmetric (d, d)
        array; cross terms use 2*A_jl*Re(conj(D_j) D_l) with D_j the forward
        phase.
        """
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim == 0:
            return float(matrix) * self.laplacian_symbol()
        if matrix.shape != (self.d, self.d):
            raise ValueError(f"constant coefficient matrix must be {self.d}x{self.d}")
        if not np.allclose(matrix, matrix.T):
            raise ValueError("constant coefficient matrix must be symmetric")
        sym = np.zeros(self.rfft_shape())
        for j in range(self.d):
            sym += matrix[j, j] * np.abs(self.forward_phase(j)) ** 2
            for l in range(j + 1, self.d):
                cross = (np.conj(self.forward_phase(j)) * self.forward_phase(l)).real
                sym += 2.0 * matrix[j, l] * cross
        return sym

    def rfftn(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(values, axes=tuple(range(self.d)))

    def irfftn(self, spectrum: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(spectrum, s=self.sides, axes=tuple(range(self.d)))


def _check_values(lattice, values, ncomp_shape):
    values = np.asarray(values, dtype=float)
    expected = lattice.sides + ncomp_shape
    if values.shape != expected:
        raise ValueError(f"field values have shape {values.shape}, expected {expected}")
    if not np.all(np.isfinite(values)):
        raise ValueError("field values must be finite")
    return values


@dataclass
class ScalarField:
    """One real value per site of a torus lattice."""

    lattice: TorusLattice
    values: np.ndarray

    def __post_init__(self):
        self.values = _check_values(self.lattice, self.values, ())

    def mean(self) -> float:
        return float(self.values.mean())

    def copy(self) -> "ScalarField":
        return ScalarField(self.lattice, self.values.copy())


@dataclass
class VectorField:
    """d real components per site, stored with components last: shape sides + (d,)."""

    lattice: TorusLattice
    values: np.ndarray

    def __post_init__(self):
        self.values = _check_values(self.lattice, self.values, (self.lattice.d,))

    def copy(self) -> "VectorField":
        return VectorField(self.lattice, self.values.copy())


def constant_field(lattice: TorusLattice, value: float) -> ScalarField:
    return ScalarField(lattice, np.full(lattice.sides, float(value)))


def delta_field(lattice: TorusLattice) -> ScalarField:
    """Unit mass at the origin."""
    values = np.zeros(lattice.sides)
    values[(0,) * lattice.d] = 1.0
    return ScalarField(lattice, values)


# -- raw-array kernels shared by the solvers ------------------------------


def grad_values(values: np.ndarray) -> np.ndarray:
    """Forward-difference gradient, (*sides) -> (*sides, d)."""
    d = values.ndim
    return np.stack([np.roll(values, -1, axis=j) - values for j in range(d)], axis=-1)


def div_values(values: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`grad_values`, (*sides, d) -> (*sides)."""
    d = values.shape[-1]
    out = np.zeros(values.shape[:-1])
    for j in range(d):
        out += np.roll(values[..., j], 1, axis=j) - values[..., j]
    return out


def gradient(u: ScalarField) -> VectorField:
    """Forward-difference gradient with periodic wraparound."""
    return VectorField(u.lattice, grad_values(u.values))


def divergence(v: VectorField) -> ScalarField:
    """Exact adjoint of :func:`gradient`: <grad u, v> = <u, div v> sitewise."""
    return ScalarField(v.lattice, div_values(v.values))


def apply_operator(eta: float, coeff, u: ScalarField) -> ScalarField:
    """Apply eta*u + div(a grad u) for a per-site coefficient field ``a``.

    ``coeff`` is a :class:`rhlab.coeffs.CoefficientField` (anything with a
    ``lattice`` and an ``apply(vector_values)`` method works).
    """
    if coeff.lattice != u.lattice:
        raise ValueError("coefficient field and input live on different lattices")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    flux = coeff.apply(grad_values(u.values))
    return ScalarField(u.lattice, eta * u.values + div_values(flux))
