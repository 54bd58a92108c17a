"""Gaussian-type orbital basis for multicentric density expansion.

A basis function with radial index n and angular indices (l, m) centered at
``r_u`` is

    psi_{n l m}(x) = c_{n l} * exp(-a_n |d|^2) * |d|^l * Y_lm(dhat),  d = x - r_u

with real harmonics Y from :mod:`infgcn.so3` and the per-function constant
``c_{n l} = sqrt(2 (2 a_n)^(l+3/2) / Gamma(l+3/2))`` that makes every
(n, l, m) unit-norm in L2(R^3).  Exponents derive from characteristic radii
r_k via a_k = 1/(2 r_k^2); radii are spaced linearly (default) or
geometrically between r_min and r_max, so the first exponent is the tightest.

All lengths are Bohr; densities are e/Bohr^3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import so3
from .errors import AccuracyError, DomainError


def make_exponents(r_min=0.5, r_max=5.0, n=16, spacing="linear"):
    """Gaussian exponents a_k = 1/(2 r_k^2) for radii spanning [r_min, r_max]."""
    if not (0.0 < r_min < r_max):
        raise DomainError("need 0 < r_min < r_max")
    if n < 1:
        raise DomainError("need at least one radial function")
    if spacing == "linear":
        radii = np.linspace(r_min, r_max, n)
    elif spacing == "geometric":
        radii = np.geomspace(r_min, r_max, n)
    else:
        raise DomainError(f"unknown spacing {spacing!r}")
    return 1.0 / (2.0 * radii ** 2)


def normalization_constant(a, l):
    """Unit-L2-norm constant c = sqrt(2 (2a)^(l+3/2) / Gamma(l+3/2))."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0.0):
        raise DomainError("exponents must be positive")
    if l < 0:
        raise DomainError("degree must be >= 0")
    return np.sqrt(2.0 * (2.0 * a) ** (l + 1.5) / math.gamma(l + 1.5))


@dataclass(frozen=True)
class RadialBasisSpec:
    """Exponent list plus the angular degree cap shared by all centers."""
    exponents: np.ndarray
    l_max: int

    def __post_init__(self):
        ex = np.asarray(self.exponents, dtype=float)
        if ex.ndim != 1 or ex.size == 0:
            raise DomainError("exponents must be a non-empty 1-D array")
        if np.any(ex <= 0.0):
            raise DomainError("exponents must be positive")
        if self.l_max < 0:
            raise DomainError("l_max must be >= 0")
        object.__setattr__(self, "exponents", ex)

    @staticmethod
    def default(l_max=7, n=16, r_min=0.5, r_max=5.0, spacing="linear"):
        return RadialBasisSpec(make_exponents(r_min, r_max, n, spacing), l_max)

    @property
    def n_radial(self):
        return int(self.exponents.size)

    @property
    def n_sh(self):
        return (self.l_max + 1) ** 2

    def norm_table(self):
        """(n_radial, l_max+1) table of c_{n l}."""
        return np.stack([normalization_constant(self.exponents, l)
                         for l in range(self.l_max + 1)], axis=1)


def eval_basis_block(spec, center, points):
    """Evaluate all (n, l, m) basis functions of one center.

    Returns (Q, n_radial, (l_max+1)**2); points of shape (Q, 3).
    At the center itself every l > 0 entry is exactly zero.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = points - np.asarray(center, dtype=float)
    return _eval_displacements(spec, d)


def _eval_displacements(spec, d):
    """Core evaluation for displacement vectors d of shape (..., 3)."""
    r2 = np.einsum("...i,...i->...", d, d)
    r = np.sqrt(r2)
    safe = np.where(r > 0.0, r, 1.0)
    dirs = d / safe[..., None]
    dirs[r == 0.0] = (0.0, 0.0, 1.0)
    Y = so3.eval_real_sh(spec.l_max, dirs, check_unit=False)
    # radial part per (point, n): exp(-a r^2); angular-degree factor r^l
    expo = np.exp(-np.multiply.outer(r2, spec.exponents))          # (..., n)
    out = np.empty(d.shape[:-1] + (spec.n_radial, spec.n_sh))
    norms = spec.norm_table()                                       # (n, L+1)
    rl = np.ones_like(r)
    for l in range(spec.l_max + 1):
        if l > 0:
            rl = rl * r
        sl = so3.block_slice(l)
        out[..., sl] = (expo * norms[:, l])[..., None] \
            * (rl[..., None] * Y[..., sl])[..., None, :]
    return out


def expand_density(spec, coeffs, centers, queries, chunk=512):
    """Multicentric expansion  rho(x) = sum_u sum_{n l m} f[u,n,lm] psi(x - r_u).

    coeffs: (U, n_radial, (l_max+1)**2); centers: (U, 3); queries: (Q, 3).
    Returns (Q,).  Linear in the coefficients; queries are processed in
    chunks so the (q, U, n, S) evaluation tensor stays small.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if coeffs.shape != (centers.shape[0], spec.n_radial, spec.n_sh):
        raise DomainError(
            f"coeffs shape {coeffs.shape} does not match spec/centers "
            f"({centers.shape[0]}, {spec.n_radial}, {spec.n_sh})")
    out = np.empty(queries.shape[0])
    for lo in range(0, queries.shape[0], chunk):
        hi = min(lo + chunk, queries.shape[0])
        d = queries[lo:hi, None, :] - centers[None, :, :]
        B = _eval_displacements(spec, d)                 # (q, U, n, S)
        out[lo:hi] = np.einsum("quns,uns->q", B, coeffs)
    return out


def expand_density_backward(spec, grad_out, centers, queries, chunk=512):
    """Adjoint of expand_density with respect to the coefficients."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    grad = np.zeros((centers.shape[0], spec.n_radial, spec.n_sh))
    for lo in range(0, queries.shape[0], chunk):
        hi = min(lo + chunk, queries.shape[0])
        d = queries[lo:hi, None, :] - centers[None, :, :]
        B = _eval_displacements(spec, d)
        grad += np.einsum("quns,q->uns", B, grad_out[lo:hi])
    return grad


def overlap_integral_numeric(spec, i, j, displacement, n_points=20, tol=1e-6):
    """Overlap  S = int psi_i(x) psi_j(x - r) d^3x  by tensor Gauss-Hermite.

    ``i``/``j`` are (n, l, m) index triples into ``spec``; ``displacement`` is
    the second center relative to the first.  The two Gaussians combine into a
    single one; the polynomial factor has degree l_i + l_j, so the rule is
    exact once n_points exceeds half that.  The error is estimated against a
    larger rule; if the estimate exceeds ``tol`` an AccuracyError is raised.
    """
    val_lo = _overlap_gh(spec, i, j, displacement, n_points)
    val_hi = _overlap_gh(spec, i, j, displacement, n_points + 6)
    est = abs(val_hi - val_lo)
    if est > tol:
        raise AccuracyError(
            f"overlap quadrature at {n_points} points is too coarse: "
            f"estimated error {est:.3e} > tol {tol:.1e}")
    return val_hi


def _overlap_gh(spec, i, j, displacement, n_points):
    n1, l1, m1 = i
    n2, l2, m2 = j
    for (n, l, m) in (i, j):
        if not 0 <= n < spec.n_radial:
            raise DomainError(f"radial index {n} out of range")
        if not 0 <= l <= spec.l_max or abs(m) > l:
            raise DomainError(f"angular index ({l},{m}) out of range")
    r = np.asarray(displacement, dtype=float)
    a1 = spec.exponents[n1]
    a2 = spec.exponents[n2]
    beta = a1 + a2
    c = a2 * r / beta
    mu = a1 * a2 / beta
    t, w = np.polynomial.hermite.hermgauss(n_points)
    scale = 1.0 / math.sqrt(beta)
    g = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
    x = c + g * scale
    wt = (w[:, None, None] * w[None, :, None] * w[None, None, :]).reshape(-1)
    s1 = _solid_harmonic(x, l1, m1)
    s2 = _solid_harmonic(x - r, l2, m2)
    c1 = float(normalization_constant(a1, l1))
    c2 = float(normalization_constant(a2, l2))
    total = float(np.dot(wt, s1 * s2))
    return c1 * c2 * math.exp(-mu * float(r @ r)) * scale ** 3 * total


def _solid_harmonic(x, l, m):
    """|x|^l Y_lm(xhat); zero at the origin for l > 0."""
    rr = np.linalg.norm(x, axis=-1)
    safe = np.where(rr > 0.0, rr, 1.0)
    dirs = x / safe[..., None]
    dirs[rr == 0.0] = (0.0, 0.0, 1.0)
    Y = so3.eval_real_sh(l, dirs, check_unit=False)[..., so3.sh_index(l, m)]
    return Y * rr ** l
