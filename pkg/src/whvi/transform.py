"""Fast Walsh-Hadamard transform kernel, dense Hadamard oracle, and Fastfood sampling.

The transform here multiplies by the Hadamard matrix of order D = 2^d,
defined by the recursion

    H_1 = [1],    H_2D = [[H_D,  H_D],
                          [H_D, -H_D]]

without ever materializing it.  Two conventions are supported: the raw
+-1 matrix (``normalized=False``) and the orthonormal scaling D^{-1/2} H
(``normalized=True``, the default), for which the transform is its own
inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Row chunking target for the batched transform: keep the working set of a
# chunk cache-resident across all log2(D) passes so per-element cost stays
# flat as D grows.
_CHUNK_BYTES = 4 << 20


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_length(n: int) -> None:
    if not is_power_of_two(n):
        raise ValueError(f"transform length must be a power of two, got {n}")


def fwht_inplace(x: np.ndarray, normalized: bool = True) -> np.ndarray:
    """Walsh-Hadamard transform along the last axis of ``x``, in place.

    Iterative butterfly: d passes of stride-doubling add/sub pairs, no
    recursion and no auxiliary buffers.  ``x`` must be a C-contiguous
    float64 array whose last axis length is a power of two.  Returns ``x``.
    """
    if not isinstance(x, np.ndarray) or x.dtype != np.float64:
        raise TypeError("in-place transform requires a float64 ndarray")
    if not x.flags["C_CONTIGUOUS"]:
        raise ValueError("in-place transform requires a C-contiguous array")
    d = x.shape[-1]
    _check_length(d)
    h = 1
    while h < d:
        v = x.reshape(x.shape[:-1] + (-1, 2, h))
        lo = v[..., 0, :]
        hi = v[..., 1, :]
        # (lo, hi) <- (lo + hi, lo - hi) without a temporary:
        lo += hi
        hi *= -2.0
        hi += lo
        h *= 2
    if normalized:
        x *= 1.0 / math.sqrt(d)
    return x


def fwht(v: np.ndarray, normalized: bool = True) -> np.ndarray:
    """Return H v (or D^{-1/2} H v when ``normalized``) for a 1-D vector.

    O(D log D) time; the input is left untouched.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"fwht expects a 1-D vector, got shape {v.shape}")
    out = np.array(v, dtype=np.float64, order="C", copy=True)
    return fwht_inplace(out, normalized=normalized)


def fwht_batch(mat: np.ndarray, normalized: bool = True) -> np.ndarray:
    """Apply :func:`fwht` to every row of a B x D matrix.

    Rows are independent (there are no cross-row reductions), so row order
    and internal chunking cannot change the result.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"fwht_batch expects a 2-D matrix, got shape {mat.shape}")
    _check_length(mat.shape[1])
    out = np.array(mat, dtype=np.float64, order="C", copy=True)
    chunk = max(1, _CHUNK_BYTES // (8 * out.shape[1]))
    for start in range(0, out.shape[0], chunk):
        fwht_inplace(out[start : start + chunk], normalized=normalized)
    return out


def hadamard_dense(D: int, normalized: bool = False) -> np.ndarray:
    """Dense Hadamard matrix of order D, built by the defining recursion.

    Intended as a test oracle for the fast transform; O(D^2) memory.
    """
    _check_length(D)
    h = np.ones((1, 1))
    while h.shape[0] < D:
        h = np.block([[h, h], [h, -h]])
    if normalized:
        h = h / math.sqrt(D)
    return h


@dataclass
class FastfoodFactors:
    """Diagonal and permutation factors of the Fastfood product S H G Pi H B.

    ``scale`` is S, ``gauss`` is G, ``sign`` is the +-1 Rademacher diagonal
    B, and ``perm`` encodes Pi as the index map j -> perm[j].
    """

    scale: np.ndarray
    gauss: np.ndarray
    sign: np.ndarray
    perm: np.ndarray

    def __post_init__(self) -> None:
        d = self.gauss.shape[0]
        if not (self.scale.shape == self.sign.shape == self.perm.shape == (d,)):
            raise ValueError("factor vectors must share one length")
        _check_length(d)
        if not np.all(np.abs(self.sign) == 1.0):
            raise ValueError("sign diagonal entries must be +-1")
        if not np.array_equal(np.sort(self.perm), np.arange(d)):
            raise ValueError("perm must be a permutation of 0..D-1")


def sample_fastfood_factors(D: int, rng: np.random.Generator) -> FastfoodFactors:
    """Draw the random factors: G standard normal, B Rademacher, Pi uniform,
    and scaling entries s_i = r_i / ||g||_2 with r_i the norm of an
    independent D-dimensional standard normal draw (chi distribution)."""
    _check_length(D)
    gauss = rng.standard_normal(D)
    sign = rng.integers(0, 2, size=D).astype(np.float64) * 2.0 - 1.0
    perm = rng.permutation(D)
    radii = np.sqrt(rng.chisquare(D, size=D))
    norm = float(np.linalg.norm(gauss))
    if norm == 0.0:
        raise FloatingPointError("degenerate Gaussian diagonal draw")
    scale = radii / norm
    return FastfoodFactors(scale=scale, gauss=gauss, sign=sign, perm=perm)


def fastfood_matrix(factors: FastfoodFactors) -> np.ndarray:
    """Assemble D^{-1/2} S H G Pi H B from given factors (unnormalized H).

    The D^{-1/2} factor calibrates the product so that, with factors drawn
    by :func:`sample_fastfood_factors`, entries are approximately standard
    normal: each row of S H G Pi H B has norm r_i * sqrt(D) exactly, so
    dividing by sqrt(D) matches the row norms of a Gaussian matrix.
    """
    d = factors.gauss.shape[0]
    # Work column-wise on the transposed product: rows of X are columns of
    # the matrix being built.
    x = np.diag(factors.sign)  # B (diagonal, so transpose-free)
    x = fwht_batch(x, normalized=False).T  # H B
    x = _permute_rows(x, factors.perm)  # Pi H B
    x = factors.gauss[:, None] * x  # G Pi H B
    x = fwht_batch(x.T, normalized=False).T  # H G Pi H B
    x = factors.scale[:, None] * x  # S H G Pi H B
    return x / math.sqrt(d)


def _permute_rows(x: np.ndarray, perm: np.ndarray) -> np.ndarray:
    # Pi maps e_j -> e_{perm[j]}, so row j of the input lands on row perm[j].
    out = np.empty_like(x)
    out[perm] = x
    return out


def fastfood_sample(D: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one Fastfood random matrix with approximately N(0,1) entries."""
    return fastfood_matrix(sample_fastfood_factors(D, rng))
