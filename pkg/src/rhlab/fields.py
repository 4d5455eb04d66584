"""Gaussian lattice environments and long-range convolution environments.

Samplers are exact and spectral: a real white-noise field is transformed,
scaled mode-by-mode by the inverse square root of the operator symbol, and
transformed back.  Because the input noise is real, conjugate symmetry is
automatic and the output is real to rounding.  Every sampler is a pure
function of (lattice, parameters, seed, replica): streams are counter-based
(Philox) and keyed by (seed, stream, replica), so results do not depend on
evaluation order or worker count.
"""

from dataclasses import dataclass, field

import numpy as np

from .lattice import ScalarField, TorusLattice, VectorField, grad_values
from . import io
from .stats import Accumulator, replica_map


def replica_rng(seed: int, replica: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one replica of one sampling stream."""
    seed = int(seed)
    replica = int(replica)
    stream = int(stream)
    if not 0 <= replica < 2**32:
        raise ValueError("replica index out of range")
    if not 0 <= stream < 2**32:
        raise ValueError("stream index out of range")
    key = [np.uint64(seed % 2**64), np.uint64((stream << 32) | replica)]
    return np.random.Generator(np.random.Philox(key=key))


def sample_white_noise(lattice: TorusLattice, seed: int, replica: int = 0,
                       stream: int = 0) -> ScalarField:
    """I.i.d. standard normal values, deterministic per (lattice, seed, replica)."""
    rng = replica_rng(seed, replica, stream)
    return ScalarField(lattice, rng.standard_normal(lattice.sides))


def _spectral_gaussian(lattice, inv_sqrt_symbol, rng) -> np.ndarray:
    noise = rng.standard_normal(lattice.sides)
    return lattice.irfftn(lattice.rfftn(noise) * inv_sqrt_symbol)


def sample_massive_gff(lattice: TorusLattice, mass_sq: float, matrix=None,
                       seed: int = 0, replica: int = 0, stream: int = 0) -> ScalarField:
    """Gaussian field with covariance (m^2 + div(A grad .))^(-1) on the torus.

    ``matrix`` is the constant SPD second-derivative matrix of the quadratic
    interaction (identity by default).
    """
    if mass_sq <= 0:
        raise ValueError(f"mass_sq must be positive, got {mass_sq}")
    matrix = np.eye(lattice.d) if matrix is None else np.asarray(matrix, dtype=float)
    sym = lattice.operator_symbol(matrix) + mass_sq
    rng = replica_rng(seed, replica, stream)
    return ScalarField(lattice, _spectral_gaussian(lattice, 1.0 / np.sqrt(sym), rng))


def sample_massless_gff(lattice: TorusLattice, seed: int = 0, replica: int = 0,
                        regularization: str = "zero_mode", stream: int = 0) -> ScalarField:
    """Massless Gaussian field, d >= 3 only.

    Default covariance is the zero-mode-removed inverse lattice Laplacian, so
    samples are exactly mean-zero.  ``regularization="mass"`` instead uses the
    small-mass finite-volume representation with m^2 = 1/L^2 (L the largest
    side), kept for fidelity tests; both converge to the same infinite-volume
    field for d >= 3.
    """
    if lattice.d < 3:
        raise ValueError(
            f"the massless field requires d >= 3 (the m -> 0 limit does not exist "
            f"for d = {lattice.d})"
        )
    if regularization == "mass":
        return sample_massive_gff(lattice, 1.0 / max(lattice.sides) ** 2,
                                  seed=seed, replica=replica, stream=stream)
    if regularization != "zero_mode":
        raise ValueError(f"unknown regularization {regularization!r}")
    sym = lattice.laplacian_symbol().copy()
    origin = (0,) * lattice.d
    sym[origin] = 1.0
    scale = 1.0 / np.sqrt(sym)
    scale[origin] = 0.0
    rng = replica_rng(seed, replica, stream)
    return ScalarField(lattice, _spectral_gaussian(lattice, scale, rng))


# -- convolution kernels ---------------------------------------------------


@dataclass(eq=False)
class Kernel:
    """Realized per-site convolution weights on the torus.

    Scalar kernels have ``values`` of shape ``sides``; the gradient-Green
    kernel is vector valued with shape ``sides + (d,)`` and pairs with a
    vector-field base, contracting over components.
    """

    lattice: TorusLattice
    family: str
    values: np.ndarray
    eps: float | None = None
    support_radius: int = 0

    def lq_norm(self, q: float) -> float:
        """Diagnostic l^q norm of the realized kernel (per-site Euclidean size)."""
        mag = np.abs(self.values) if self.values.ndim == self.lattice.d else \
            np.sqrt((self.values**2).sum(axis=-1))
        return float((mag**q).sum() ** (1.0 / q))

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == self.lattice.d + 1


def _effective_radius(lattice, values) -> int:
    mag = np.abs(values) if values.ndim == lattice.d else np.sqrt((values**2).sum(axis=-1))
    rbin, radii, _ = lattice.radial_bins()
    nbins = radii.size
    peak = mag.max()
    if peak == 0:
        return 0
    bin_max = np.zeros(nbins)
    np.maximum.at(bin_max, rbin.ravel(), mag.ravel())
    # smallest radius with everything outside below threshold
    outside = 0.0
    radius = nbins - 1
    for b in range(nbins - 1, -1, -1):
        outside = max(outside, bin_max[b])
        if outside > 1e-12 * peak:
            radius = b
            break
    return max(1, int(np.ceil(radii[min(radius, nbins - 1)])))


def build_kernel(lattice: TorusLattice, family: str, eps: float | None = None,
                 values=None) -> Kernel:
    """Realize a convolution kernel on the torus.

    power_law: h(z) = 1/(1 + |z|^(d/2 + eps)) at the torus-minimal
    representative of each site, eps > 0.  grad_green (d >= 3): the forward
    gradient of the zero-mode-removed inverse-Laplacian Green's function.
    custom: explicit per-site values.  Torus aliasing of the corresponding
    infinite-lattice kernels is accepted; correlation fit windows stop at L/4.
    """
    if family == "power_law":
        if eps is None or eps <= 0:
            raise ValueError(f"power_law kernel requires eps > 0, got {eps}")
        dist = lattice.distances()
        vals = 1.0 / (1.0 + dist ** (lattice.d / 2.0 + eps))
        return Kernel(lattice, family, vals, eps=eps,
                      support_radius=_effective_radius(lattice, vals))
    if family == "grad_green":
        if lattice.d < 3:
            raise ValueError("grad_green kernel requires d >= 3")
        sym = lattice.laplacian_symbol().copy()
        origin = (0,) * lattice.d
        sym[origin] = 1.0
        delta_hat = np.ones(lattice.rfft_shape(), dtype=complex)
        delta_hat[origin] = 0.0
        green = lattice.irfftn(delta_hat / sym)
        vals = grad_values(green)
        return Kernel(lattice, family, vals,
                      support_radius=_effective_radius(lattice, vals))
    if family == "custom":
        if values is None:
            raise ValueError("custom kernel requires explicit values")
        values = np.asarray(values, dtype=float)
        if values.shape != lattice.sides:
            raise ValueError(f"custom kernel values must have shape {lattice.sides}")
        return Kernel(lattice, family, values,
                      support_radius=_effective_radius(lattice, values))
    raise ValueError(f"unknown kernel family {family!r}")


def convolve_env(kernel: Kernel, base) -> ScalarField:
    """Circular convolution of a kernel with a base field, computed spectrally.

    Scalar kernels take a ScalarField; the grad_green kernel takes a
    VectorField and contracts over components.
    """
    if kernel.lattice != base.lattice:
        raise ValueError("kernel and base field live on different lattices")
    lattice = kernel.lattice
    if kernel.is_vector:
        if not isinstance(base, VectorField):
            raise ValueError("a gradient-Green kernel pairs with a VectorField base")
        spec = np.zeros(lattice.rfft_shape(), dtype=complex)
        for j in range(lattice.d):
            spec += lattice.rfftn(kernel.values[..., j]) * lattice.rfftn(base.values[..., j])
        return ScalarField(lattice, lattice.irfftn(spec))
    if not isinstance(base, ScalarField):
        raise ValueError("a scalar kernel pairs with a ScalarField base")
    spec = lattice.rfftn(kernel.values) * lattice.rfftn(base.values)
    return ScalarField(lattice, lattice.irfftn(spec))


# -- environment recipes ---------------------------------------------------


@dataclass(eq=False)
class EnvironmentSpec:
    """Recipe for sampling an environment: base measure plus optional kernel.

    ``base`` is one of white_noise, massive_gff, massless_gff.  With a
    scalar kernel the base field is convolved; with the grad_green kernel the
    base field's gradient is the vector base of the convolution (the massless
    field is itself such a convolution, which :func:`convolve_env` reproduces
    exactly on the torus).
    """

    lattice: TorusLattice
    base: str = "white_noise"
    mass_sq: float | None = None
    base_matrix: np.ndarray | None = None
    kernel: Kernel | None = None
    seed: int = 0

    def __post_init__(self):
        if self.base not in ("white_noise", "massive_gff", "massless_gff"):
            raise ValueError(f"unknown base measure {self.base!r}")
        if self.base == "massive_gff":
            if self.mass_sq is None or self.mass_sq <= 0:
                raise ValueError("massive_gff requires mass_sq > 0")
            if self.base_matrix is not None:
                m = np.asarray(self.base_matrix, dtype=float)
                if m.shape != (self.lattice.d, self.lattice.d) or not np.allclose(m, m.T):
                    raise ValueError("base matrix must be symmetric d x d")
                if np.linalg.eigvalsh(m).min() <= 0:
                    raise ValueError("base matrix must be positive definite")
        if self.base == "massless_gff" and self.lattice.d < 3:
            raise ValueError("massless_gff requires d >= 3")
        if self.kernel is not None and self.kernel.lattice != self.lattice:
            raise ValueError("kernel lattice does not match environment lattice")

    def sample_base(self, replica: int = 0, stream: int = 0) -> ScalarField:
        if self.base == "white_noise":
            return sample_white_noise(self.lattice, self.seed, replica, stream)
        if self.base == "massive_gff":
            return sample_massive_gff(self.lattice, self.mass_sq, self.base_matrix,
                                      self.seed, replica, stream)
        return sample_massless_gff(self.lattice, self.seed, replica, stream=stream)

    def sample(self, replica: int = 0, stream: int = 0) -> ScalarField:
        base = self.sample_base(replica, stream)
        if self.kernel is None:
            return base
        if self.kernel.is_vector:
            return convolve_env(self.kernel, VectorField(self.lattice, grad_values(base.values)))
        return convolve_env(self.kernel, base)

    def describe(self) -> dict:
        out = {"base": self.base, "seed": self.seed, "sides": list(self.lattice.sides)}
        if self.mass_sq is not None:
            out["mass_sq"] = self.mass_sq
        if self.base_matrix is not None:
            out["base_matrix"] = np.asarray(self.base_matrix).tolist()
        if self.kernel is not None:
            out["kernel"] = {"family": self.kernel.family}
            if self.kernel.eps is not None:
                out["kernel"]["eps"] = self.kernel.eps
        return out


# -- empirical two-point function ------------------------------------------


@dataclass
class CorrelationProfile:
    """Radially binned empirical two-point function with per-bin errors."""

    radii: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("radii must be strictly increasing")
        if np.any(self.stderrs < 0) or np.any(self.counts <= 0):
            raise ValueError("invalid profile: negative errors or empty bins")

    def to_csv(self, path) -> None:
        rows = zip(self.radii.tolist(), self.means.tolist(),
                   self.stderrs.tolist(), self.counts.tolist())
        io.write_csv(path, ["r", "mean", "stderr", "count"], rows)


def estimate_correlation(spec: EnvironmentSpec, replicas: int, stream: int = 0,
                         threads: int = 1) -> CorrelationProfile:
    """Monte Carlo two-point function of an environment.

    Each replica's full translation-averaged autocovariance is computed
    spectrally from its power spectrum, then binned by rounded torus-minimal
    distance.  Standard errors come from the scatter across replicas, so at
    least two are required.  Bin counts report site pairs aggregated over
    replicas.  Replicas are accumulated in index order.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas for standard errors")
    lattice = spec.lattice
    rbin, radii, counts = lattice.radial_bins()
    nbins = radii.size

    def one(rep):
        omega = spec.sample(rep, stream)
        spec_power = np.abs(lattice.rfftn(omega.values)) ** 2
        # rfft drops conjugate modes; irfftn rebuilds the full-spectrum sum
        autocov = lattice.irfftn(spec_power) / lattice.volume
        return np.bincount(rbin.ravel(), weights=autocov.ravel(),
                           minlength=nbins) / counts

    acc = Accumulator()
    for bin_means in replica_map(one, replicas, threads):
        acc.add(bin_means)
    return CorrelationProfile(
        radii=radii.copy(),
        means=np.asarray(acc.mean),
        stderrs=np.asarray(acc.stderr),
        counts=counts * replicas,
    )
