"""Real-spherical-harmonic SO(3) machinery: harmonics, Wigner blocks,
Clebsch-Gordan tables, spherical tensors.

Conventions
-----------
Real (tesseral) spherical harmonics, orthonormal on the unit sphere, with the
Condon-Shortley phase absorbed (no ``(-1)^m`` in the real basis).  Within
degree ``l`` orders are stored ascending, ``m = -l..l``; negative orders carry
``sin(|m| phi)``, positive orders ``cos(m phi)``.  The flat index of ``(l, m)``
is ``l*l + l + m``, so degrees ``0..L`` pack into ``(L+1)**2`` slots.  For
``l = 1`` the components are ``(y, z, x) * sqrt(3/(4 pi))``.

``wigner_block(l, R)`` returns the orthogonal matrix ``D`` with

    Y_l(R rhat) = D Y_l(rhat)      equivalently   Y_l(R^-1 rhat) = D^T Y_l(rhat)

which is exactly the matrix that rotates coefficient vectors: expanding
``D @ f`` on the harmonics at ``x`` equals expanding ``f`` at ``R^-1 x``.
With this choice ``D(R1 @ R2) = D(R1) @ D(R2)``.

``cg_table(l, k, J)`` couples two real blocks to a real block with
orthonormal rows (``Q Q^T = I``).  Tables are built from the exact rational
coupling coefficients of the complex basis and the unitary real<->complex
change of basis; for ``l+k+J`` odd the raw transform is purely imaginary and
the table keeps the imaginary part, a unit-modulus rescaling that preserves
both orthonormality and the intertwining property.

Tables are cached in memory and, by default, on disk under
``$INFGCN_CACHE_DIR`` (default ``~/.cache/infgcn``) as flat little-endian
float64 blobs with a JSON index; missing files are regenerated.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DomainError

_ROT_TOL = 1e-12
_SH_UNIT_TOL = 1e-9


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def check_rotation(R, tol=_ROT_TOL):
    """Validate that R is a proper rotation (orthogonal within tol, det +1)."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise DomainError(f"rotation must be 3x3, got shape {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise DomainError(f"matrix is not orthogonal: max |R^T R - I| = {err:.3e}")
    det = np.linalg.det(R)
    if abs(det - 1.0) > 1e-10:
        raise DomainError(f"matrix is not a proper rotation: det = {det!r}")
    return R


def random_rotation(rng):
    """Haar-ish random rotation from the QR decomposition of a Gaussian matrix."""
    A = rng.standard_normal((3, 3))
    Q, r = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(r))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def axis_angle_rotation(axis, angle):
    """Rotation matrix about a (not necessarily unit) axis by angle in radians."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise DomainError("rotation axis must be nonzero")
    u = axis / n
    K = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


# ---------------------------------------------------------------------------
# real spherical harmonics
# ---------------------------------------------------------------------------

def num_sh(l_max):
    return (l_max + 1) ** 2


def sh_index(l, m):
    return l * l + l + m


def block_slice(l):
    return slice(l * l, (l + 1) * (l + 1))


def eval_real_sh(l_max, dirs, check_unit=True):
    """Evaluate real spherical harmonics Y_lm for all l <= l_max.

    Parameters
    ----------
    l_max : int
    dirs : (..., 3) array of unit vectors
    check_unit : validate |dir| = 1 within 1e-9 and raise DomainError otherwise

    Returns
    -------
    (..., (l_max+1)**2) array, flat index l*l + l + m.
    """
    if l_max < 0:
        raise DomainError("l_max must be >= 0")
    dirs = np.asarray(dirs, dtype=float)
    if dirs.shape[-1] != 3:
        raise DomainError("directions must have a trailing dimension of 3")
    if check_unit:
        nrm = np.linalg.norm(dirs, axis=-1)
        bad = np.abs(nrm - 1.0)
        if bad.size and bad.max() > _SH_UNIT_TOL:
            raise DomainError(
                f"directions must be unit vectors: max | |r|-1 | = {bad.max():.3e}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (num_sh(l_max),), dtype=float)

    # q[m][l] holds Q_lm(z) = P_lm(z) / (1-z^2)^(m/2), a polynomial in z,
    # with no Condon-Shortley factor.  c_m + i s_m = (x + i y)^m absorbs the
    # (1-z^2)^(m/2) weight, so the poles need no special casing.
    c = np.ones_like(z)
    s = np.zeros_like(z)
    q_mm = np.ones_like(z)  # Q_mm = (2m-1)!!
    for m in range(0, l_max + 1):
        if m > 0:
            c, s = x * c - y * s, x * s + y * c
            q_mm = q_mm * (2 * m - 1)
        q_prev = q_mm
        q_curr = None
        for l in range(m, l_max + 1):
            if l == m:
                q = q_mm
            elif l == m + 1:
                q = (2 * m + 1) * z * q_mm
            else:
                q = ((2 * l - 1) * z * q_curr - (l + m - 1) * q_prev) / (l - m)
            if l > m:
                q_prev, q_curr = q_curr, q
            else:
                q_curr = q
            nlm = math.sqrt((2 * l + 1) / (4.0 * math.pi)
                            * math.factorial(l - m) / math.factorial(l + m))
            if m == 0:
                out[..., sh_index(l, 0)] = nlm * q
            else:
                f = math.sqrt(2.0) * nlm
                out[..., sh_index(l, m)] = f * q * c
                out[..., sh_index(l, -m)] = f * q * s
    return out


# ---------------------------------------------------------------------------
# Clebsch-Gordan tables
# ---------------------------------------------------------------------------

def _cg_complex_scalar(j1, m1, j2, m2, J, M):
    """Exact coupling coefficient <j1 m1 j2 m2 | J M> in the complex basis."""
    if m1 + m2 != M:
        return 0.0
    if not abs(j1 - j2) <= J <= j1 + j2:
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(M) > J:
        return 0.0
    f = math.factorial
    pref = Fraction(
        (2 * J + 1) * f(j1 + j2 - J) * f(j1 - j2 + J) * f(-j1 + j2 + J),
        f(j1 + j2 + J + 1),
    ) * Fraction(f(J + M) * f(J - M) * f(j1 - m1) * f(j1 + m1)
                 * f(j2 - m2) * f(j2 + m2))
    total = Fraction(0)
    t_lo = max(0, j2 - J - m1, j1 - J + m2)
    t_hi = min(j1 + j2 - J, j1 - m1, j2 + m2)
    for t in range(t_lo, t_hi + 1):
        den = (f(t) * f(j1 + j2 - J - t) * f(j1 - m1 - t) * f(j2 + m2 - t)
               * f(J - j2 + m1 + t) * f(J - j1 - m2 + t))
        total += Fraction((-1) ** t, den)
    return float(total) * math.sqrt(float(pref))


def _complex_cg(l, k, J):
    """Dense complex-basis table, shape (2J+1, 2l+1, 2k+1), index (M, m1, m2)."""
    out = np.zeros((2 * J + 1, 2 * l + 1, 2 * k + 1))
    for m1 in range(-l, l + 1):
        for m2 in range(-k, k + 1):
            M = m1 + m2
            if abs(M) <= J:
                out[J + M, l + m1, k + m2] = _cg_complex_scalar(l, m1, k, m2, J, M)
    return out


def _real_from_complex_basis(l):
    """Unitary A with  Y^real_mu = sum_m A[mu, m] Y^complex_m  (rows mu=-l..l)."""
    A = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    A[l, l] = 1.0
    rt = 1.0 / math.sqrt(2.0)
    for m in range(1, l + 1):
        sgn = (-1.0) ** m
        A[l + m, l + m] = sgn * rt
        A[l + m, l - m] = rt
        A[l - m, l + m] = -1j * sgn * rt
        A[l - m, l - m] = 1j * rt
    return A


def _real_cg(l, k, J):
    C = _complex_cg(l, k, J)
    AJ = _real_from_complex_basis(J)
    Al = _real_from_complex_basis(l)
    Ak = _real_from_complex_basis(k)
    Ct = np.einsum("PM,am,bn,Mmn->Pab", AJ.conj(), Al, Ak, C)
    re, im = np.abs(Ct.real).max(), np.abs(Ct.imag).max()
    table = Ct.real if re >= im else Ct.imag
    resid = min(re, im)
    if resid > 1e-12:
        raise AssertionError(
            f"real CG table ({l},{k},{J}) is not purely real or imaginary "
            f"(residual {resid:.3e})")
    return np.ascontiguousarray(table)


@dataclass(frozen=True)
class CGTable:
    """Real coupling table for degrees (l, k) -> J.

    ``dense[M, m1, m2]`` couples a degree-l and a degree-k vector to degree J;
    rows (flattened over m1, m2) are orthonormal.
    """
    l: int
    k: int
    J: int
    dense: np.ndarray = field(repr=False)

    def matrix(self):
        """(2J+1, (2l+1)(2k+1)) matricization, m1-major."""
        return self.dense.reshape(2 * self.J + 1, -1)


def default_cache_dir():
    root = os.environ.get("INFGCN_CACHE_DIR", os.path.join("~", ".cache", "infgcn"))
    return Path(root).expanduser() / "cg"


_MEMO: dict = {}


def _cache_paths(cache_dir, l, k, J):
    d = Path(cache_dir)
    return d / f"cg_{l}_{k}_{J}.f64", d / "index.json"


def _load_index(index_path):
    try:
        with open(index_path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError):
        return {}


def cg_table(l, k, J, cache_dir="default"):
    """Real Clebsch-Gordan table coupling degrees (l, k) to J.

    Raises DomainError when (l, k, J) violates the triangle inequality.
    ``cache_dir``: "default" uses the package cache, None disables the disk
    layer, any path uses that directory.  Blobs are little-endian float64 in
    C order, shapes listed in index.json, regenerated when absent.
    """
    if l < 0 or k < 0 or J < 0:
        raise DomainError("degrees must be non-negative")
    if not abs(l - k) <= J <= l + k:
        raise DomainError(
            f"degree triple ({l},{k},{J}) violates |l-k| <= J <= l+k")
    cdir = default_cache_dir() if cache_dir == "default" else cache_dir
    memo_key = (l, k, J, str(cdir) if cdir is not None else None)
    hit = _MEMO.get(memo_key)
    if hit is not None:
        return hit
    shape = (2 * J + 1, 2 * l + 1, 2 * k + 1)
    dense = None
    if cdir is not None:
        blob, index_path = _cache_paths(cdir, l, k, J)
        key = f"{l},{k},{J}"
        idx = _load_index(index_path)
        if blob.exists() and idx.get(key) == list(shape):
            raw = np.fromfile(blob, dtype="<f8")
            if raw.size == shape[0] * shape[1] * shape[2]:
                dense = raw.reshape(shape)
        if dense is None:
            dense = _real_cg(l, k, J)
            blob.parent.mkdir(parents=True, exist_ok=True)
            dense.astype("<f8").tofile(blob)
            idx[key] = list(shape)
            with open(index_path, "w") as fh:
                json.dump(idx, fh, sort_keys=True)
    else:
        dense = _real_cg(l, k, J)
    dense.setflags(write=False)
    table = CGTable(l=l, k=k, J=J, dense=dense)
    _MEMO[memo_key] = table
    return table


# ---------------------------------------------------------------------------
# Wigner blocks
# ---------------------------------------------------------------------------

_PI_XYZ_TO_YZX = np.array([[0.0, 1.0, 0.0],
                           [0.0, 0.0, 1.0],
                           [1.0, 0.0, 0.0]])


def wigner_block(l, R, validate=True):
    """Orthogonal (2l+1)x(2l+1) block D with Y_l(R rhat) = D Y_l(rhat).

    l = 1 is the similarity-transformed rotation matrix itself (the real
    harmonics of degree one are (y, z, x) up to a common scale); higher
    degrees follow by coupling the (l-1, 1) product back to degree l.
    """
    if validate:
        R = check_rotation(R)
    else:
        R = np.asarray(R, dtype=float)
    if l < 0:
        raise DomainError("degree must be >= 0")
    if l == 0:
        return np.ones((1, 1))
    D1 = _PI_XYZ_TO_YZX @ R @ _PI_XYZ_TO_YZX.T
    D = D1
    for j in range(2, l + 1):
        Q = cg_table(j - 1, 1, j).matrix()
        D = Q @ np.kron(D, D1) @ Q.T
    return D


def wigner_blocks(l_max, R, validate=True):
    """All blocks 0..l_max in one pass (shares the recursion)."""
    if validate:
        R = check_rotation(R)
    out = [np.ones((1, 1))]
    if l_max == 0:
        return out
    D1 = _PI_XYZ_TO_YZX @ R @ _PI_XYZ_TO_YZX.T
    out.append(D1)
    D = D1
    for j in range(2, l_max + 1):
        Q = cg_table(j - 1, 1, j).matrix()
        D = Q @ np.kron(D, D1) @ Q.T
        out.append(D)
    return out


# ---------------------------------------------------------------------------
# spherical tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IrrepLayout:
    """Ordered list of (degree, channels) with strictly ascending degrees."""
    entries: tuple

    def __post_init__(self):
        ent = tuple((int(l), int(c)) for l, c in self.entries)
        if not ent:
            raise DomainError("layout must contain at least one degree")
        degs = [l for l, _ in ent]
        if any(l < 0 for l in degs):
            raise DomainError("degrees must be non-negative")
        if sorted(set(degs)) != degs:
            raise DomainError("degrees must be strictly ascending and unique")
        if any(c <= 0 for _, c in ent):
            raise DomainError("channel counts must be positive")
        object.__setattr__(self, "entries", ent)

    @staticmethod
    def uniform(l_max, channels):
        return IrrepLayout(tuple((l, channels) for l in range(l_max + 1)))

    @property
    def degrees(self):
        return tuple(l for l, _ in self.entries)

    def channels(self, l):
        for ll, c in self.entries:
            if ll == l:
                return c
        raise DomainError(f"degree {l} not in layout")

    @property
    def flat_len(self):
        return sum(c * (2 * l + 1) for l, c in self.entries)


@dataclass
class SphericalTensor:
    """Typed container: one (channels, 2l+1) block per layout degree."""
    layout: IrrepLayout
    blocks: dict

    def __post_init__(self):
        for l, c in self.layout.entries:
            b = np.asarray(self.blocks[l], dtype=float)
            if b.shape != (c, 2 * l + 1):
                raise DomainError(
                    f"block {l} has shape {b.shape}, expected {(c, 2 * l + 1)}")
            self.blocks[l] = b

    @staticmethod
    def zeros(layout):
        return SphericalTensor(
            layout, {l: np.zeros((c, 2 * l + 1)) for l, c in layout.entries})

    @staticmethod
    def single(l, vec):
        vec = np.atleast_2d(np.asarray(vec, dtype=float))
        return SphericalTensor(IrrepLayout(((l, vec.shape[0]),)), {l: vec})

    def flat(self):
        return np.concatenate(
            [self.blocks[l].reshape(-1) for l, _ in self.layout.entries])

    @staticmethod
    def from_flat(layout, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (layout.flat_len,):
            raise DomainError(
                f"flat vector has length {vec.shape}, layout needs {layout.flat_len}")
        blocks, ofs = {}, 0
        for l, c in layout.entries:
            n = c * (2 * l + 1)
            blocks[l] = vec[ofs:ofs + n].reshape(c, 2 * l + 1).copy()
            ofs += n
        return SphericalTensor(layout, blocks)

    def norm(self):
        return math.sqrt(sum(float((b * b).sum()) for b in self.blocks.values()))


def rotate_tensor(f, R):
    """Rotate every degree block by its Wigner matrix (coefficients of the
    rotated function: expanding the result at x equals expanding f at R^-1 x)."""
    R = check_rotation(R)
    l_max = max(f.layout.degrees)
    blocks = wigner_blocks(l_max, R, validate=False)
    out = {l: f.blocks[l] @ blocks[l].T for l, _ in f.layout.entries}
    return SphericalTensor(f.layout, out)


def tensor_product(a, b, J, cache_dir="default"):
    """Couple two single-degree tensors to degree J.

    C_{J M} = sum_{m1 m2} a_{l m1} b_{k m2} Q[M, m1, m2], per channel.
    Raises DomainError for multi-degree layouts, channel mismatch, or a
    degree triple outside the triangle range.
    """
    if len(a.layout.entries) != 1 or len(b.layout.entries) != 1:
        raise DomainError("tensor_product expects single-degree tensors")
    (l, ca), = a.layout.entries
    (k, cb), = b.layout.entries
    if ca != cb:
        raise DomainError(f"channel mismatch: {ca} vs {cb}")
    Q = cg_table(l, k, J, cache_dir=cache_dir).dense
    out = np.einsum("Mab,ca,cb->cM", Q, a.blocks[l], b.blocks[k])
    return SphericalTensor(IrrepLayout(((J, ca),)), {J: out})
