"""Algebraic curvature tensors, symmetric forms and the quadratic algebra of the Hamilton ODE.

A curvature tensor in dimension n is stored as the symmetric N x N block
M[(ij),(kl)] = R_ijkl over the coordinate 2-planes i < j, N = n(n-1)/2.
The pair symmetries are built into that storage; the first Bianchi identity
is not, so every public constructor routes through ``bianchi_project``.
"""
import logging
from functools import lru_cache

import numpy as np

from utils.errors import DimensionMismatch, PreconditionError, SymmetryViolation

logger = logging.getLogger(__name__)

MIN_DIM = 4
MAX_DIM = 12
SYMMETRY_TOL = 1e-10
RECORD_VERSION = 1


@lru_cache(maxsize=None)
def _plane_index(n):
    """Pair index tables for dimension n: (I, J, index, sign)"""
    I, J = np.triu_indices(n, k=1)
    index = np.zeros((n, n), dtype=int)
    sign = np.zeros((n, n))
    planes = np.arange(len(I))
    index[I, J] = planes
    index[J, I] = planes
    sign[I, J] = 1.0
    sign[J, I] = -1.0
    index.setflags(write=False)
    sign.setflags(write=False)
    return I, J, index, sign


def plane_count(n):
    return n * (n - 1) // 2


def dim_from_planes(count):
    """Recover n from N = n(n-1)/2"""
    n = int(round((1 + np.sqrt(1 + 8 * count)) / 2))
    if plane_count(n) != count:
        raise DimensionMismatch(count, plane_count(n), "block size and any dimension")
    return n


def check_dim(n):
    if not MIN_DIM <= n <= MAX_DIM:
        raise PreconditionError(f"dimension n = {n} outside supported range [{MIN_DIM}, {MAX_DIM}]")


def _block_to_full(block, n):
    _, _, index, sign = _plane_index(n)
    full = block[index[:, :, None, None], index[None, None, :, :]]
    return full * sign[:, :, None, None] * sign[None, None, :, :]


def _full_to_block(full, n):
    I, J, _, _ = _plane_index(n)
    return full[I[:, None], J[:, None], I[None, :], J[None, :]]


class SymmetricForm:
    """Symmetric bilinear form on R^n (H, Ric, Ric0, Hessians)"""

    __slots__ = ("entries",)

    def __init__(self, entries, tol=1e-12):
        matrix = np.array(entries, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise SymmetryViolation(f"symmetric form needs a square matrix, got shape {matrix.shape}")
        error = float(np.max(np.abs(matrix - matrix.T))) if matrix.size else 0.0
        scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
        if error > tol * scale:
            raise SymmetryViolation("form is not symmetric", error)
        matrix = 0.5 * (matrix + matrix.T)
        matrix.setflags(write=False)
        self.entries = matrix

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, n)))

    @classmethod
    def diag(cls, values):
        return cls(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def outer(cls, u, v=None):
        """Symmetrized product u (x) v"""
        u = np.asarray(u, dtype=float)
        v = u if v is None else np.asarray(v, dtype=float)
        product = np.outer(u, v)
        return cls(0.5 * (product + product.T))

    @property
    def dim(self):
        return self.entries.shape[0]

    def trace(self):
        return float(np.trace(self.entries))

    def norm2(self):
        """|H|^2 = sum of squared entries"""
        return float(np.sum(self.entries * self.entries))

    def square(self):
        return SymmetricForm(self.entries @ self.entries)

    def eigenvalues(self):
        return np.linalg.eigvalsh(self.entries)

    def eigh(self):
        return np.linalg.eigh(self.entries)

    def traceless(self):
        return SymmetricForm(self.entries - (self.trace() / self.dim) * np.eye(self.dim))

    def quadratic(self, u):
        u = np.asarray(u, dtype=float)
        return float(u @ self.entries @ u)

    def scale(self):
        return float(np.max(np.abs(self.entries))) if self.entries.size else 0.0

    def max_error(self, other):
        _same_dim(self, other)
        reference = max(1.0, self.scale(), other.scale())
        return float(np.max(np.abs(self.entries - other.entries))) / reference

    def _combine(self, other, op):
        _same_dim(self, other)
        return SymmetricForm(op(self.entries, other.entries))

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __neg__(self):
        return SymmetricForm(-self.entries)

    def __mul__(self, factor):
        return SymmetricForm(float(factor) * self.entries)

    __rmul__ = __mul__

    def __truediv__(self, factor):
        return SymmetricForm(self.entries / float(factor))

    def __repr__(self):
        return f"SymmetricForm(n={self.dim}, trace={self.trace():.6g})"


class CurvatureTensor:
    """Algebraic curvature tensor stored as the symmetric block over coordinate 2-planes"""

    __slots__ = ("dim", "block", "_full")

    def __init__(self, block, project=True):
        block = np.array(block, dtype=float)
        if block.ndim != 2 or block.shape[0] != block.shape[1]:
            raise SymmetryViolation(f"curvature block must be square, got shape {block.shape}")
        n = dim_from_planes(block.shape[0])
        check_dim(n)
        asym = float(np.max(np.abs(block - block.T))) if block.size else 0.0
        if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(block)))):
            raise SymmetryViolation("curvature block is not symmetric", asym)
        block = 0.5 * (block + block.T)
        if project:
            block = _bianchi_block(_block_to_full(block, n), n)
        block.setflags(write=False)
        self.dim = n
        self.block = block
        self._full = None

    @classmethod
    def zeros(cls, n):
        check_dim(n)
        return cls(np.zeros((plane_count(n), plane_count(n))), project=False)

    @classmethod
    def from_full(cls, full, tol=SYMMETRY_TOL):
        return bianchi_project(full, tol)

    def full(self):
        """Dense n^4 component array (read-only, cached)"""
        if self._full is None:
            full = _block_to_full(self.block, self.dim)
            full.setflags(write=False)
            self._full = full
        return self._full

    def component(self, i, j, k, l):
        return float(self.full()[i, j, k, l])

    def scale(self):
        return float(np.max(np.abs(self.block)))

    def max_error(self, other):
        """Max componentwise error relative to max(1, component scale)"""
        _same_dim(self, other)
        reference = max(1.0, self.scale(), other.scale())
        return float(np.max(np.abs(self.block - other.block))) / reference

    def bianchi_residual(self):
        full = self.full()
        cyclic = full + np.einsum("iklj->ijkl", full) + np.einsum("iljk->ijkl", full)
        return float(np.max(np.abs(cyclic)))

    def operator_eigenvalues(self):
        """Eigenvalues of the curvature operator on unit 2-forms e_i ^ e_j"""
        return np.linalg.eigvalsh(self.block)

    def sectional(self, i, j):
        return float(self.full()[i, j, i, j])

    def packed(self):
        """Upper-triangular part of the block, row-major"""
        rows, cols = np.triu_indices(self.block.shape[0])
        return self.block[rows, cols].copy()

    @classmethod
    def from_packed(cls, n, values, project=True):
        check_dim(n)
        size = plane_count(n)
        values = np.asarray(values, dtype=float)
        rows, cols = np.triu_indices(size)
        if values.shape != rows.shape:
            raise DimensionMismatch(values.size, rows.size, "packed record and dimension")
        block = np.zeros((size, size))
        block[rows, cols] = values
        block[cols, rows] = values
        return cls(block, project=project)

    def to_record(self):
        return {"version": RECORD_VERSION, "n": self.dim, "packed": self.packed().tolist()}

    @classmethod
    def from_record(cls, record):
        version = record.get("version")
        if version != RECORD_VERSION:
            raise PreconditionError(f"unsupported tensor record version {version!r}")
        return cls.from_packed(int(record["n"]), record["packed"])

    def _combine(self, other, op):
        _same_dim(self, other)
        return CurvatureTensor(op(self.block, other.block), project=False)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __neg__(self):
        return CurvatureTensor(-self.block, project=False)

    def __mul__(self, factor):
        return CurvatureTensor(float(factor) * self.block, project=False)

    __rmul__ = __mul__

    def __truediv__(self, factor):
        return CurvatureTensor(self.block / float(factor), project=False)

    def __repr__(self):
        return f"CurvatureTensor(n={self.dim}, scal={scalar(self):.6g})"


def _same_dim(left, right):
    if left.dim != right.dim:
        raise DimensionMismatch(left.dim, right.dim)


def _bianchi_block(full, n):
    cyclic = (full + np.einsum("iklj->ijkl", full) + np.einsum("iljk->ijkl", full)) / 3.0
    return _full_to_block(full - cyclic, n)


def bianchi_project(full, tol=SYMMETRY_TOL):
    """Orthogonal projection of a pair-symmetric 4-index array onto curvature tensors.

    Raises SymmetryViolation when the antisymmetry in (i,j), (k,l) or the pair
    exchange symmetry fails by more than ``tol`` relative to the entry scale.
    """
    full = np.asarray(full, dtype=float)
    if full.ndim != 4 or len(set(full.shape)) != 1:
        raise SymmetryViolation(f"expected an n x n x n x n array, got shape {full.shape}")
    n = full.shape[0]
    check_dim(n)
    scale = max(1.0, float(np.max(np.abs(full))))
    error = max(
        float(np.max(np.abs(full + full.transpose(1, 0, 2, 3)))),
        float(np.max(np.abs(full + full.transpose(0, 1, 3, 2)))),
        float(np.max(np.abs(full - full.transpose(2, 3, 0, 1)))),
    )
    if error > tol * scale:
        raise SymmetryViolation("array lacks the curvature pair symmetries", error)
    # Remove round-off in the pair symmetries before the cyclic projection
    full = (full - full.transpose(1, 0, 2, 3) - full.transpose(0, 1, 3, 2) + full.transpose(1, 0, 3, 2)) / 4.0
    full = 0.5 * (full + full.transpose(2, 3, 0, 1))
    return CurvatureTensor(_bianchi_block(full, n), project=False)


def kn_product(A, B):
    """Kulkarni-Nomizu product A (KN) B of two symmetric forms"""
    _same_dim(A, B)
    check_dim(A.dim)
    a, b = A.entries, B.entries
    full = (
        np.einsum("ik,jl->ijkl", a, b)
        - np.einsum("il,jk->ijkl", a, b)
        - np.einsum("jk,il->ijkl", a, b)
        + np.einsum("jl,ik->ijkl", a, b)
    )
    return bianchi_project(full)


def sphere_tensor(n):
    """id (KN) id: constant sectional curvature 2"""
    return kn_product(SymmetricForm.identity(n), SymmetricForm.identity(n))


def b_product(S, T):
    """Symmetric bilinear B(S, T) with B(R, R) = Q(R)"""
    _same_dim(S, T)
    s, t = S.full(), T.full()
    square = np.einsum("ijpq,klpq->ijkl", s, t)
    first = 0.5 * (square + square.transpose(2, 3, 0, 1))
    cross = np.einsum("ipkq,jplq->ijkl", s, t)
    second = (
        cross
        - cross.transpose(0, 1, 3, 2)
        - cross.transpose(1, 0, 2, 3)
        + cross.transpose(1, 0, 3, 2)
    )
    return bianchi_project(first + second)


def q_quadratic(R):
    return b_product(R, R)


def ricci(R):
    return SymmetricForm(np.einsum("ijkj->ik", R.full()))


def scalar(R):
    return float(np.einsum("ijij->", R.full()))


def ricci_traceless(R):
    return ricci(R).traceless()


def contract_sh(S, H):
    """(S*H)_ik = sum_jl S_ijkl H_jl"""
    _same_dim(S, H)
    return SymmetricForm(np.einsum("ijkl,jl->ik", S.full(), H.entries))


def weyl_part(R):
    """R minus its Ricci and scalar parts"""
    n = R.dim
    identity = SymmetricForm.identity(n)
    ric0 = ricci_traceless(R)
    return R - kn_product(ric0, identity) * (1.0 / (n - 2)) - sphere_tensor(n) * (scalar(R) / (2 * n * (n - 1)))
