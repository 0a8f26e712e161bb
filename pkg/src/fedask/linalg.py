"""Dense float64 linear algebra and deterministic, splittable randomness.

Matrices are plain 2-D numpy arrays in 64-bit floating point. Exported
operations validate shapes and reject non-finite values, so protocol code
built on top can assume clean inputs and outputs.

Randomness is counter-based (Philox) and addressed by an explicit
``(seed, path)`` pair. A sub-stream derived for one purpose (one round, one
client) yields the same values no matter what any other stream drew, which
keeps simulations reproducible under concurrent client execution.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but degenerate (empty batch, zero norm)."""


class NonFiniteError(ValueError):
    """A matrix contains NaN or infinite entries."""


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, raising on bad input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def _label_index(label: int | str) -> int:
    """Map a stream label to a stable 32-bit index.

    Integers pass through; strings hash via blake2s so the mapping is
    identical across processes and platforms.
    """
    if isinstance(label, bool):
        raise TypeError("bool is not a valid stream label")
    if isinstance(label, int):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative, got {label}")
        return label
    if isinstance(label, str):
        digest = hashlib.blake2s(label.encode("utf-8"), digest_size=4).digest()
        return int.from_bytes(digest, "big")
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


class RngStream:
    """Deterministic random stream identified by (seed, path).

    Built on the Philox counter-based generator: the draw sequence is a pure
    function of the 64-bit seed and the split path, independent of platform
    and of activity on any other stream. ``position`` counts values drawn so
    far from this stream.
    """

    __slots__ = ("seed", "path", "position", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))
        self.position = 0

    def split(self, *labels: int | str) -> "RngStream":
        """Derive an independent sub-stream for the given labels.

        Typical use: ``root.split(round_index, client_id, "noise")``.
        """
        if not labels:
            raise ValueError("split requires at least one label")
        return RngStream(self.seed, self.path + tuple(_label_index(x) for x in labels))

    def standard_normal(self, shape: int | tuple[int, ...]) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.position += out.size
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        out = self._gen.uniform(low, high, size)
        self.position += 1 if size is None else int(np.prod(size))
        return out

    def integers(self, low: int, high: int, size=None):
        out = self._gen.integers(low, high, size=size)
        self.position += 1 if size is None else int(np.prod(size))
        return out

    def dirichlet(self, alpha: np.ndarray) -> np.ndarray:
        out = self._gen.dirichlet(alpha)
        self.position += out.size
        return out

    def choice(self, n: int, size=None, p: np.ndarray | None = None):
        out = self._gen.choice(n, size=size, p=p)
        self.position += 1 if size is None else int(np.prod(size))
        return out

    def bernoulli_mask(self, p: float, n: int) -> np.ndarray:
        """Boolean mask with independent inclusion probability p."""
        out = self._gen.random(n) < p
        self.position += n
        return out

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, path={self.path}, position={self.position})"


@dataclass(frozen=True)
class SvdResult:
    """Thin singular value decomposition a = u @ diag(s) @ vt.

    ``u`` has orthonormal columns, ``vt`` orthonormal rows, singular values
    are non-negative and non-increasing. Signs are normalized so the
    largest-magnitude entry of each left singular vector is non-negative,
    making the factorization deterministic for reproducibility checks.
    """

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit conformance check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def qr(a) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR factorization of a tall (rows >= cols) matrix.

    Returns (q, r) with q (rows x cols, orthonormal columns) and r upper
    triangular, q @ r == a to roundoff. Householder-based LAPACK backend.
    """
    a = as_matrix(a, "a")
    rows, cols = a.shape
    if rows < cols:
        raise ShapeError(f"qr requires rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    return q, r


def svd(a) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Each left singular vector is flipped, together with its right partner,
    so that its largest-magnitude entry is non-negative. Ties resolve to the
    first index, so equal inputs always factor identically.
    """
    a = as_matrix(a, "a")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    flip_rows = np.abs(u).argmax(axis=0)
    signs = np.where(u[flip_rows, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    u = u * signs[np.newaxis, :]
    vt = vt * signs[:, np.newaxis]
    return SvdResult(u=u, singular_values=s, vt=vt)


def gaussian_matrix(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """Matrix of i.i.d. standard normal entries drawn from ``rng``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"gaussian_matrix needs positive dims, got {rows}x{cols}")
    return rng.standard_normal((rows, cols))


def frobenius_norm(a) -> float:
    a = as_matrix(a, "a")
    return float(np.linalg.norm(a, "fro"))


def frobenius_inner(a, b) -> float:
    """Frobenius inner product <a, b> = sum of elementwise products."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.tensordot(a, b))


def cosine_similarity(a, b) -> float:
    """Frobenius cosine similarity, always within [-1, 1].

    Raises DegenerateInputError when either operand has zero norm.
    """
    na = frobenius_norm(a)
    nb = frobenius_norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm input")
    value = frobenius_inner(a, b) / (na * nb)
    return float(min(1.0, max(-1.0, value)))
