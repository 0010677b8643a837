"""Generalized Householder factors I − β k kᵀ, their products and the RWKV-7 comparison family.

Products follow one canonical order everywhere in the package: factor ``j = 0`` is applied to the state first, so
the realized matrix is ``g · H_{n_h-1} ··· H_1 H_0``.
"""

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ContractViolationError, NumericalError
from .numerics import Matrix, Spectrum2, as_matrix, eig2x2, matmul, spectral_norm, spectral_radius

ALWAYS_REAL: Literal['always real'] = 'always real'
MIN_KEY_NORM = 1e-12
NORM_SLACK = 1e-9


@dataclass(frozen=True)
class HouseholderFactor:
    """One factor I − β k kᵀ.

    The key is normalized on construction; keys shorter than ``MIN_KEY_NORM`` are rejected instead of being
    silently rescaled.

    Args:
        - beta (float):
            Coefficient in [0, 2]: 0 is the identity, 1 an orthogonal projection, 2 a reflection.
        - key (array-like):
            Direction of the factor, any nonzero vector.
    """

    beta: float
    key: np.ndarray = field(repr=False)

    def __post_init__(self):
        key = np.asarray(self.key, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(key)):
            raise NumericalError('Householder key has non-finite entries')
        norm = float(np.linalg.norm(key))
        if norm < MIN_KEY_NORM:
            raise NumericalError(f'Householder key norm {norm:.3e} is below {MIN_KEY_NORM:.0e}')
        if not 0.0 <= self.beta <= 2.0:
            raise ContractViolationError(f'beta must lie in [0, 2], got {self.beta}')
        key = key / norm
        key.setflags(write=False)
        object.__setattr__(self, 'key', key)
        object.__setattr__(self, 'beta', float(self.beta))

    @property
    def dim(self) -> int:
        return self.key.shape[0]


@dataclass(frozen=True)
class HouseholderProduct:
    """Ordered product of Householder factors, optionally scaled by a gate.

    Args:
        - factors (tuple[HouseholderFactor, ...]):
            Factors in application order (index 0 acts on the state first).
        - gate (float):
            Scalar in [0, 1] multiplying the whole product; 1 for the ungated model.
        - dim (int | None):
            Dimension of the realized matrix. Only needed for an empty factor list.
    """

    factors: tuple[HouseholderFactor, ...] = ()
    gate: float = 1.0
    dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, 'factors', tuple(self.factors))
        if not 0.0 <= self.gate <= 1.0:
            raise ContractViolationError(f'gate must lie in [0, 1], got {self.gate}')
        dims = {f.dim for f in self.factors}
        if self.dim is not None:
            dims.add(self.dim)
        if len(dims) > 1:
            raise ContractViolationError(f'Householder factors mix key dimensions {sorted(dims)}')
        if not dims:
            raise ContractViolationError('an empty HouseholderProduct needs an explicit dim')
        object.__setattr__(self, 'dim', dims.pop())


@dataclass(frozen=True)
class Rwkv7Matrix:
    """State-transition matrix diag(w) − c·k(k ⊙ a)ᵀ of RWKV-7."""

    w: np.ndarray
    k: np.ndarray
    a: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        w, k, a = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (self.w, self.k, self.a))
        if not w.shape == k.shape == a.shape:
            raise ContractViolationError(f'RWKV-7 vectors differ in size: w{w.shape}, k{k.shape}, a{a.shape}')
        if self.c not in (1, 2):
            raise ContractViolationError(f'c must be 1 or 2, got {self.c}')
        norm = float(np.linalg.norm(k))
        if abs(norm - 1.0) > 1e-9:
            raise ContractViolationError(f'RWKV-7 key must be unit norm, got {norm}')
        object.__setattr__(self, 'w', w)
        object.__setattr__(self, 'k', k)
        object.__setattr__(self, 'a', a)


def apply_factor(f: HouseholderFactor, h: Matrix) -> Matrix:
    """Returns (I − β k kᵀ) h as h − β k (kᵀ h) without forming the n x n matrix."""
    h = as_matrix(h, 'h')
    if h.shape[0] != f.dim:
        raise ContractViolationError(f'key dimension {f.dim} does not match state rows {h.shape[0]}')
    return h - f.beta * np.outer(f.key, f.key @ h)


def householder_matrix(f: HouseholderFactor) -> Matrix:
    return np.eye(f.dim) - f.beta * np.outer(f.key, f.key)


def realize(p: HouseholderProduct) -> Matrix:
    """Dense matrix g · Π H_j with the last factor leftmost.

    Raises:
        - NumericalError: When the realized matrix violates the operator-norm bound ‖A‖ ≤ 1.
    """
    m = np.eye(p.dim)
    for f in p.factors:
        m = apply_factor(f, m)
    m = p.gate * m
    norm = spectral_norm(m)
    if norm > 1.0 + NORM_SLACK:
        raise NumericalError(f'realized Householder product has operator norm {norm:.12f} > 1')
    return m


def collapse_same_key(betas: list[float]) -> float:
    """Effective β* of a product of factors that share one key.

    Folds β ← β_prev + β_next − β_prev·β_next from the left.
    """
    if len(betas) == 0:
        raise ContractViolationError('collapse_same_key needs at least one beta')
    effective = float(betas[0])
    for beta in betas[1:]:
        effective = effective + beta - effective * beta
    return effective


def orthogonal_sum_form(factors: list[HouseholderFactor]) -> Matrix:
    """I − Σ β_j k_j k_jᵀ for pairwise orthogonal keys (the factors then commute).

    Raises:
        - ContractViolationError: When the list is empty or two keys are not orthogonal within 1e-9.
    """
    if not factors:
        raise ContractViolationError('orthogonal_sum_form needs at least one factor')
    n = factors[0].dim
    if any(f.dim != n for f in factors):
        raise ContractViolationError('orthogonal_sum_form factors mix key dimensions')
    keys = np.stack([f.key for f in factors])
    gram = keys @ keys.T
    off_diagonal = gram - np.diag(np.diag(gram))
    if np.max(np.abs(off_diagonal)) > 1e-9:
        raise ContractViolationError(
            f'keys are not pairwise orthogonal (max |k_i·k_j| = {np.max(np.abs(off_diagonal)):.3e})'
        )
    m = np.eye(n)
    for f in factors:
        m -= f.beta * np.outer(f.key, f.key)
    return m


def orthogonal_sum_spectrum(factors: list[HouseholderFactor]) -> np.ndarray:
    """Real spectrum {1 − β_j} ∪ {1, multiplicity n − n_h} of an orthogonal-key product, sorted ascending."""
    orthogonal_sum_form(factors)
    n = factors[0].dim
    values = [1.0 - f.beta for f in factors] + [1.0] * (n - len(factors))
    return np.sort(np.asarray(values))


def two_factor_trace_det(beta1: float, beta2: float, cos_theta: float) -> tuple[float, float]:
    """Trace and determinant of (I − β₂k₂k₂ᵀ)(I − β₁k₁k₁ᵀ) restricted to span{k₁, k₂}."""
    trace = 2.0 - beta1 - beta2 + beta1 * beta2 * cos_theta**2
    det = (1.0 - beta1) * (1.0 - beta2)
    return trace, det


def two_factor_spectrum(beta1: float, beta2: float, theta: float) -> Spectrum2:
    """Spectrum of the two-factor product in the plane of its keys, with keys at angle ``theta``."""
    k1 = np.array([1.0, 0.0])
    k2 = np.array([math.cos(theta), math.sin(theta)])
    product = HouseholderProduct((HouseholderFactor(beta1, k1), HouseholderFactor(beta2, k2)))
    return eig2x2(realize(product))


def complex_region_bounds(beta1: float, beta2: float) -> tuple[float, float] | Literal['always real']:
    """Open interval of cos²θ for which a two-factor product has complex eigenvalues.

    Complex eigenvalues need both coefficients strictly above one; otherwise the product is always real.

    Raises:
        - ContractViolationError: When a coefficient lies outside [0, 2].
    """
    for beta in (beta1, beta2):
        if not 0.0 <= beta <= 2.0:
            raise ContractViolationError(f'beta must lie in [0, 2], got {beta}')
    if beta1 <= 1.0 or beta2 <= 1.0:
        return ALWAYS_REAL
    r1 = math.sqrt(beta1 - 1.0)
    r2 = math.sqrt(beta2 - 1.0)
    scale = beta1 * beta2
    return (r1 - r2) ** 2 / scale, (r1 + r2) ** 2 / scale


def rotation_2d(alpha: float) -> Matrix:
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s], [s, c]])


def reflection_2d(alpha: float) -> Matrix:
    """Reflection across the line at angle ``alpha / 2`` through the origin."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, s], [s, -c]])


def reflection_key(alpha: float) -> np.ndarray:
    """Unit key k with I − 2kkᵀ equal to ``reflection_2d(alpha)``."""
    return np.array([math.sin(alpha / 2.0), -math.cos(alpha / 2.0)])


def rwkv7_realize(m: Rwkv7Matrix) -> Matrix:
    return np.diag(m.w) - m.c * np.outer(m.k, m.k * m.a)


@dataclass(frozen=True)
class InstabilityDemo:
    """Outcome of alternating two RWKV-7 matrices whose product has spectral radius above one.

    Args:
        - spectral_radius (float):
            ρ(A A′).
        - norm_trace (list[float]):
            Spectral norm of A_i ··· A_1 after every step.
        - perturbed_radii (dict[float, float]):
            ρ(A A′) for key angles around π/3.
    """

    spectral_radius: float
    norm_trace: list[float]
    perturbed_radii: dict[float, float]


def rwkv7_pair(theta: float = math.pi / 3) -> tuple[Rwkv7Matrix, Rwkv7Matrix]:
    """The pair (A, A′) with c = 1, w = 1 whose product is unstable.

    A uses k = (sin θ, cos θ), a = (0, 1); A′ uses k′ = (cos θ, sin θ), a′ = (1, 0). At θ = π/3 this gives
    A = [[1, −√3/4], [0, 3/4]] and A′ = [[3/4, 0], [−√3/4, 1]].
    """
    ones = np.ones(2)
    a = Rwkv7Matrix(w=ones, k=[math.sin(theta), math.cos(theta)], a=[0.0, 1.0], c=1)
    a_prime = Rwkv7Matrix(w=ones, k=[math.cos(theta), math.sin(theta)], a=[1.0, 0.0], c=1)
    return a, a_prime


def rwkv7_instability_demo(steps: int) -> InstabilityDemo:
    """Multiplies A′, A, A′, A, … and records the norm of the running product.

    Raises:
        - ContractViolationError: When ``steps`` is odd or smaller than two.
    """
    if steps < 2 or steps % 2:
        raise ContractViolationError(f'steps must be even and at least 2, got {steps}')
    a, a_prime = (rwkv7_realize(m) for m in rwkv7_pair())
    rho = spectral_radius(matmul(a, a_prime))
    product = np.eye(2)
    norm_trace = []
    for i in range(1, steps + 1):
        product = matmul(a if i % 2 == 0 else a_prime, product)
        norm_trace.append(spectral_norm(product))
    perturbed = {}
    for offset in (-0.05, -0.025, 0.0, 0.025, 0.05):
        pa, pb = (rwkv7_realize(m) for m in rwkv7_pair(math.pi / 3 + offset))
        perturbed[offset] = spectral_radius(matmul(pa, pb))
    return InstabilityDemo(spectral_radius=rho, norm_trace=norm_trace, perturbed_radii=perturbed)
