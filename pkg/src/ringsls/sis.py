"""Spatially invariant systems on the ring Z_N.

A spatially invariant transfer matrix over N sites is block circulant, so it
is determined by its convolution kernel {K_m(s)}: the block that maps the
input at site j to the output at site j+m (indices mod N).  We store only the
nonzero offsets, which keeps banded operators O(band) instead of O(N), and
materialize the full circulant only when a dense transfer matrix is actually
wanted.

Offsets live in the centered range -(N-1)/2 .. (N-1)/2, which is why N is
restricted to odd values.  The band size of a kernel is the largest |m| with
a nonzero block; composing two kernels adds band sizes (circular convolution
of the offset maps).

The per-site H2 norm of a stable, strictly proper kernel is
``sum_m ||K_m||_{H2}^2``, equal to the H2 norm of any single block column of
the circulant form.  Kernels are immutable once built; all operations here
are pure functions, so concurrent reads are safe.
"""

from __future__ import annotations

import numpy as np

from .ratfun import RatMatrix, RationalFn, h2_norm_sq

__all__ = [
    "ShapeError",
    "ConvKernel",
    "CirculantTM",
    "KernelSymbol",
    "compose",
    "apply_basis",
    "per_site_h2_sq",
    "symbol",
    "band_size",
]

#: Ring size used to truncate infinite-extent (whole-line) systems.  Large
#: enough that banded per-site quantities are N-independent to working
#: precision.
N_TRUNC_DEFAULT = 129


class ShapeError(Exception):
    """Block dimensions or ring sizes that cannot be combined."""


def _as_block(val) -> RatMatrix:
    if isinstance(val, RatMatrix):
        return val
    if isinstance(val, RationalFn):
        return RatMatrix.from_scalar(val)
    if np.isscalar(val):
        return RatMatrix.from_scalar(RationalFn.const(float(val)))
    return RatMatrix.from_const(np.asarray(val, dtype=float))


class ConvKernel:
    """Sparse convolution kernel of a spatially invariant system.

    Parameters
    ----------
    N : int or "infinite"
        Ring size (positive odd integer).  ``"infinite"`` marks a whole-line
        system represented by truncation to ``n_trunc`` sites.
    entries : mapping
        Offset m -> block.  Blocks may be RatMatrix, RationalFn, scalars, or
        constant arrays; all must share one block dimension.  Offsets are
        wrapped into the centered range; colliding offsets are summed.
    block_dims : (p, q), optional
        Required only when ``entries`` is empty.
    """

    __slots__ = ("N", "infinite", "block_dims", "entries")

    def __init__(self, N, entries, block_dims=None, n_trunc=N_TRUNC_DEFAULT):
        infinite = N == "infinite"
        if infinite:
            N = n_trunc
        N = int(N)
        if N <= 0 or N % 2 == 0:
            raise ShapeError(f"ring size must be a positive odd integer, got {N}")
        half = (N - 1) // 2
        merged: dict[int, RatMatrix] = {}
        dims = None
        for m, val in entries.items():
            blk = _as_block(val)
            if dims is None:
                dims = blk.shape
            elif blk.shape != dims:
                raise ShapeError(
                    f"kernel blocks disagree: {blk.shape} vs {dims}")
            mm = ((int(m) + half) % N) - half
            merged[mm] = merged[mm] + blk if mm in merged else blk
        if dims is None:
            if block_dims is None:
                raise ShapeError("block_dims required for an empty kernel")
            dims = (int(block_dims[0]), int(block_dims[1]))
        elif block_dims is not None and tuple(block_dims) != dims:
            raise ShapeError(
                f"declared block_dims {tuple(block_dims)} != entries {dims}")
        self.N = N
        self.infinite = infinite
        self.block_dims = dims
        self.entries = {m: v for m, v in sorted(merged.items())
                        if not v.is_zero}

    # -- constructors -------------------------------------------------------

    @staticmethod
    def identity(N, p: int = 1) -> "ConvKernel":
        return ConvKernel(N, {0: RatMatrix.identity(p)})

    # -- queries ------------------------------------------------------------

    @property
    def band_size(self) -> int:
        return max((abs(m) for m in self.entries), default=0)

    @property
    def is_zero(self) -> bool:
        return not self.entries

    def get(self, m: int) -> RatMatrix:
        """Block at offset m (zero block for absent offsets)."""
        half = (self.N - 1) // 2
        mm = ((int(m) + half) % self.N) - half
        if mm in self.entries:
            return self.entries[mm]
        return RatMatrix.zeros(*self.block_dims)

    def equals(self, other: "ConvKernel", rtol: float = 1e-8) -> bool:
        if self.N != other.N or self.block_dims != other.block_dims:
            return False
        for m in set(self.entries) | set(other.entries):
            if not self.get(m).equals(other.get(m), rtol=rtol):
                return False
        return True

    # -- algebra ------------------------------------------------------------

    def _same_ring(self, other: "ConvKernel") -> None:
        if self.N != other.N:
            raise ShapeError(f"ring sizes differ: {self.N} vs {other.N}")

    def __add__(self, other: "ConvKernel") -> "ConvKernel":
        self._same_ring(other)
        if self.block_dims != other.block_dims:
            raise ShapeError(
                f"block dims differ: {self.block_dims} vs {other.block_dims}")
        ent = dict(self.entries)
        for m, blk in other.entries.items():
            ent[m] = ent[m] + blk if m in ent else blk
        return self._rebuild(ent, self.block_dims, other)

    def __sub__(self, other: "ConvKernel") -> "ConvKernel":
        return self + (-other)

    def __neg__(self) -> "ConvKernel":
        return self._rebuild({m: -blk for m, blk in self.entries.items()},
                             self.block_dims, self)

    def __mul__(self, g) -> "ConvKernel":
        """Scale every block by a scalar or RationalFn."""
        g = g if isinstance(g, RationalFn) else RationalFn.const(float(g))
        return self._rebuild(
            {m: blk.map(lambda e: e * g) for m, blk in self.entries.items()},
            self.block_dims, self)

    __rmul__ = __mul__

    def _rebuild(self, entries, dims, other=None) -> "ConvKernel":
        out = ConvKernel(self.N, entries, block_dims=dims)
        out.infinite = self.infinite or (other is not None and other.infinite)
        return out

    # -- materialization ----------------------------------------------------

    def materialize(self) -> "CirculantTM":
        """Dense (N p) x (N q) block-circulant transfer matrix."""
        N = self.N
        p, q = self.block_dims
        tm = RatMatrix.zeros(N * p, N * q)
        half = (N - 1) // 2
        for i in range(N):
            for j in range(N):
                m = ((i - j + half) % N) - half
                blk = self.entries.get(m)
                if blk is not None:
                    tm.a[i * p:(i + 1) * p, j * q:(j + 1) * q] = blk.a
        return CirculantTM(N, self.block_dims, tm)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "N": "infinite" if self.infinite else self.N,
            "block_dims": list(self.block_dims),
            "entries": {str(m): blk.to_json()
                        for m, blk in self.entries.items()},
        }

    @staticmethod
    def from_json(d) -> "ConvKernel":
        entries = {int(m): RatMatrix.from_json(blk)
                   for m, blk in d["entries"].items()}
        n_trunc = d.get("n_trunc", N_TRUNC_DEFAULT)
        return ConvKernel(d["N"], entries,
                          block_dims=tuple(d["block_dims"]),
                          n_trunc=n_trunc)

    def __repr__(self) -> str:
        return (f"ConvKernel(N={self.N}, block_dims={self.block_dims}, "
                f"offsets={sorted(self.entries)})")


class CirculantTM:
    """Materialized block-circulant transfer matrix of a ConvKernel."""

    __slots__ = ("N", "block_dims", "tm")

    def __init__(self, N: int, block_dims, tm: RatMatrix):
        p, q = block_dims
        if tm.shape != (N * p, N * q):
            raise ShapeError(
                f"transfer matrix shape {tm.shape} != ({N * p}, {N * q})")
        self.N = N
        self.block_dims = (p, q)
        self.tm = tm

    def __repr__(self) -> str:
        return f"CirculantTM(N={self.N}, shape={self.tm.shape})"


def band_size(kernel: ConvKernel) -> int:
    return kernel.band_size


def compose(K: ConvKernel, H: ConvKernel) -> ConvKernel:
    """Kernel of the product system K H (circular convolution of kernels)."""
    if K.N != H.N:
        raise ShapeError(f"ring sizes differ: {K.N} vs {H.N}")
    if K.block_dims[1] != H.block_dims[0]:
        raise ShapeError(
            f"inner block dims differ: {K.block_dims} vs {H.block_dims}")
    out: dict[int, RatMatrix] = {}
    for m1, A in K.entries.items():
        for m2, B in H.entries.items():
            m = m1 + m2
            prod = A @ B
            out[m] = out[m] + prod if m in out else prod
    dims = (K.block_dims[0], H.block_dims[1])
    result = ConvKernel(K.N, out, block_dims=dims)
    result.infinite = K.infinite or H.infinite
    return result


def apply_basis(K: ConvKernel, j: int) -> RatMatrix:
    """j-th block column of the circulant form (the response to e_j)."""
    N = K.N
    p, q = K.block_dims
    if not 0 <= int(j) < N:
        raise IndexError(f"site index {j} out of range for N={N}")
    j = int(j)
    col = RatMatrix.zeros(N * p, q)
    for m, blk in K.entries.items():
        i = (j + m) % N
        col.a[i * p:(i + 1) * p, :] = blk.a
    return col


def per_site_h2_sq(K: ConvKernel, convention: str = "one_over_two_pi") -> float:
    """Squared H2 norm per spatial site: sum_m ||K_m||^2.

    Equals the squared H2 norm of any single block column of the circulant
    form.  Raises NormUndefined (from the entry norms) for unstable or
    non-strictly-proper blocks.
    """
    return float(sum(h2_norm_sq(blk, convention=convention)
                     for blk in K.entries.values()))


class KernelSymbol:
    """DFT symbol of a kernel at frequency index k, evaluated on demand.

    Calling the object at a complex point s returns
    ``sum_m K_m(s) exp(-i 2 pi k m / N)`` as a complex (p, q) array.  The
    symbol of the identity kernel is the identity at every s.
    """

    __slots__ = ("N", "k", "block_dims", "_terms")

    def __init__(self, kernel: ConvKernel, k: int):
        self.N = kernel.N
        self.k = int(k)
        self.block_dims = kernel.block_dims
        w = np.exp(-2j * np.pi * self.k / kernel.N)
        self._terms = [(w ** m, blk) for m, blk in kernel.entries.items()]

    def __call__(self, s) -> np.ndarray:
        p, q = self.block_dims
        out = np.zeros((p, q), dtype=complex)
        for wm, blk in self._terms:
            out += wm * blk.evalm(s)
        return out

    def __repr__(self) -> str:
        return f"KernelSymbol(N={self.N}, k={self.k})"


def symbol(K: ConvKernel, k: int) -> KernelSymbol:
    """Frequency-k symbol of the kernel under the ring DFT."""
    if not 0 <= int(k) < K.N:
        raise IndexError(f"frequency index {k} out of range for N={K.N}")
    return KernelSymbol(K, k)
