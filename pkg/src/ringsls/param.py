"""Explicit parameterizations of achievable stabilized closed loops.

Every state-feedback closed loop (Phi_x, Phi_u) of the plant
``x' = A x + B1 w + B2 u`` satisfies the affine constraint

    (s I - A) Phi_x - B2 Phi_u = I,

and conversely any stable strictly proper pair satisfying it is achievable.
For several plant classes that constraint can be solved *explicitly*: the
closed loops are an affine function of one free stable strictly proper
parameter theta, with no approximation step.  This module implements those
parameterizations:

* identical unstable first-order sites on a ring (``family_first_order``),
* identical canonical-form r-th order sites (``family_nth_order``), with the
  similarity transform into that form (``canonical_transform``),
* site-dependent first-order and r-th order dynamics (``family_varying_1st``
  and ``family_varying_nth``),
* spatially coupled dynamics when the open loop is stable or B2 is an
  invertible circulant (``coupled_parameterization``),
* the bridge between theta and the classical Youla parameter Q for the
  first-order case (``youla_bridge`` / ``youla_inverse``).

``affine_residual`` checks membership directly and is the oracle all the
constructors are tested against.  Constructors are pure; plant and family
objects are immutable in use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ratfun import (
    Poly,
    RatMatrix,
    RationalFn,
    chop,
    classify,
)
from .sis import ConvKernel, ShapeError, compose

__all__ = [
    "ParamError",
    "WrongFamily",
    "NotControllable",
    "UnsupportedPlant",
    "InvalidParameter",
    "PlantSpec",
    "ParamFamily",
    "ThetaKernel",
    "VaryingFirstOrderFamily",
    "VaryingNthFamily",
    "family_first_order",
    "canonical_transform",
    "family_nth_order",
    "family_varying_1st",
    "family_varying_nth",
    "phis_from_theta",
    "affine_residual",
    "coupled_parameterization",
    "youla_bridge",
    "youla_inverse",
    "youla_closed_loops",
]

_S = RationalFn.var()

#: Entries of a computed canonical form are snapped against the 0/1 template
#: at this absolute tolerance; transforms are computed, not measured.
CANONICAL_TOL = 1e-10


class ParamError(Exception):
    """Base class for parameterization errors."""


class WrongFamily(ParamError):
    """Plant data does not match the requested parameterization family."""


class NotControllable(ParamError):
    """Controllability (or the required canonical structure) fails."""


class UnsupportedPlant(ParamError):
    """No explicit parameterization is implemented for this plant."""


class InvalidParameter(ParamError):
    """The free parameter is outside the admissible set."""


# ---------------------------------------------------------------------------
# Plant description
# ---------------------------------------------------------------------------

@dataclass
class PlantSpec:
    """Plant data plus optional performance weights.

    ``kind`` selects the dynamics class; ``data`` holds the kind-specific
    payload (scalars, matrices, per-site lists, or kernels).  B1, C1, D12
    are optional performance-channel kernels used by the synthesis layer.
    """

    SI_1ST = "siInvariant1st"
    SI_NTH = "siInvariantNth"
    VARY_1ST = "varying1st"
    VARY_NTH = "varyingNth"
    COUPLED_STABLE = "coupledStable"
    COUPLED_B2INV = "coupledB2Invertible"

    kind: str
    N: int
    data: dict = field(default_factory=dict)
    B1: ConvKernel | None = None
    C1: ConvKernel | None = None
    D12: ConvKernel | None = None

    # -- constructors -------------------------------------------------------

    @staticmethod
    def si_invariant_1st(a: float, N: int, **weights) -> "PlantSpec":
        return PlantSpec(PlantSpec.SI_1ST, int(N), {"a": float(a)}, **weights)

    @staticmethod
    def si_invariant_nth(A, B2, N: int, **weights) -> "PlantSpec":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B2 = np.asarray(B2, dtype=float)
        if B2.ndim == 1:
            B2 = B2[:, None]
        _controllability_check(A + np.eye(A.shape[0]), B2)
        return PlantSpec(PlantSpec.SI_NTH, int(N), {"A": A, "B2": B2},
                         **weights)

    @staticmethod
    def varying_1st(a, b, **weights) -> "PlantSpec":
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise ShapeError("per-site pole and gain lists must match")
        if np.any(b == 0.0):
            raise NotControllable("b_n = 0 at some site")
        return PlantSpec(PlantSpec.VARY_1ST, len(a), {"a": a, "b": b},
                         **weights)

    @staticmethod
    def varying_nth(A_list, B2_list, **weights) -> "PlantSpec":
        if len(A_list) != len(B2_list):
            raise ShapeError("one (A, B2) pair per site required")
        A_list = [np.atleast_2d(np.asarray(A, dtype=float)) for A in A_list]
        B2_list = [np.asarray(B, dtype=float).reshape(A.shape[0], -1)
                   for A, B in zip(A_list, B2_list)]
        return PlantSpec(PlantSpec.VARY_NTH, len(A_list),
                         {"A": A_list, "B2": B2_list}, **weights)

    @staticmethod
    def coupled_stable(A: ConvKernel, B2: ConvKernel, **weights) -> "PlantSpec":
        return PlantSpec(PlantSpec.COUPLED_STABLE, A.N,
                         {"A": A, "B2": B2}, **weights)

    @staticmethod
    def coupled_b2_invertible(A: ConvKernel, B2: ConvKernel,
                              **weights) -> "PlantSpec":
        return PlantSpec(PlantSpec.COUPLED_B2INV, A.N,
                         {"A": A, "B2": B2}, **weights)

    # -- operators for the membership check ----------------------------------

    def state_block_dim(self) -> int:
        """State dimension per site (kernel cases) or in total (varying)."""
        kind = self.kind
        if kind == self.SI_1ST:
            return 1
        if kind == self.SI_NTH:
            return self.data["A"].shape[0]
        if kind == self.VARY_1ST:
            return self.N
        if kind == self.VARY_NTH:
            return sum(A.shape[0] for A in self.data["A"])
        return self.data["A"].block_dims[0]

    def a_kernel(self) -> ConvKernel:
        kind = self.kind
        if kind == self.SI_1ST:
            return ConvKernel(self.N, {0: self.data["a"]})
        if kind == self.SI_NTH:
            return ConvKernel(self.N, {0: self.data["A"]})
        if kind in (self.COUPLED_STABLE, self.COUPLED_B2INV):
            return self.data["A"]
        raise UnsupportedPlant(f"no spatially-invariant A for kind {kind}")

    def b2_kernel(self) -> ConvKernel:
        kind = self.kind
        if kind == self.SI_1ST:
            return ConvKernel(self.N, {0: 1.0})
        if kind == self.SI_NTH:
            return ConvKernel(self.N, {0: self.data["B2"]})
        if kind in (self.COUPLED_STABLE, self.COUPLED_B2INV):
            return self.data["B2"]
        raise UnsupportedPlant(f"no spatially-invariant B2 for kind {kind}")

    def a_matrix(self) -> np.ndarray:
        """Full constant A (varying kinds only)."""
        if self.kind == self.VARY_1ST:
            return np.diag(self.data["a"])
        if self.kind == self.VARY_NTH:
            import scipy.linalg
            return scipy.linalg.block_diag(*self.data["A"])
        raise UnsupportedPlant(f"no dense A for kind {self.kind}")

    def b2_matrix(self) -> np.ndarray:
        if self.kind == self.VARY_1ST:
            return np.diag(self.data["b"])
        if self.kind == self.VARY_NTH:
            import scipy.linalg
            return scipy.linalg.block_diag(*self.data["B2"])
        raise UnsupportedPlant(f"no dense B2 for kind {self.kind}")

    # -- serialization --------------------------------------------------------

    def to_json(self) -> dict:
        d = {"kind": self.kind, "N": self.N}
        kind = self.kind
        if kind == self.SI_1ST:
            d["a"] = self.data["a"]
        elif kind == self.SI_NTH:
            d["A"] = self.data["A"].tolist()
            d["B2"] = self.data["B2"].tolist()
        elif kind == self.VARY_1ST:
            d["a"] = self.data["a"].tolist()
            d["b"] = self.data["b"].tolist()
        elif kind == self.VARY_NTH:
            d["A"] = [A.tolist() for A in self.data["A"]]
            d["B2"] = [B.tolist() for B in self.data["B2"]]
        else:
            d["A"] = self.data["A"].to_json()
            d["B2"] = self.data["B2"].to_json()
        for name in ("B1", "C1", "D12"):
            k = getattr(self, name)
            if k is not None:
                d[name] = k.to_json()
        return d

    @staticmethod
    def from_json(d: dict) -> "PlantSpec":
        kind = d["kind"]
        weights = {name: ConvKernel.from_json(d[name])
                   for name in ("B1", "C1", "D12") if name in d}
        if kind == PlantSpec.SI_1ST:
            return PlantSpec.si_invariant_1st(d["a"], d["N"], **weights)
        if kind == PlantSpec.SI_NTH:
            return PlantSpec.si_invariant_nth(d["A"], d["B2"], d["N"],
                                              **weights)
        if kind == PlantSpec.VARY_1ST:
            return PlantSpec.varying_1st(d["a"], d["b"], **weights)
        if kind == PlantSpec.VARY_NTH:
            return PlantSpec.varying_nth(d["A"], d["B2"], **weights)
        if kind in (PlantSpec.COUPLED_STABLE, PlantSpec.COUPLED_B2INV):
            ctor = (PlantSpec.coupled_stable
                    if kind == PlantSpec.COUPLED_STABLE
                    else PlantSpec.coupled_b2_invertible)
            return ctor(ConvKernel.from_json(d["A"]),
                        ConvKernel.from_json(d["B2"]), **weights)
        raise UnsupportedPlant(f"unknown plant kind {kind!r}")


# ---------------------------------------------------------------------------
# Families and the free parameter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamFamily:
    """Affine closed-loop family Phi_x = F theta + L, Phi_u = chi theta + eta.

    F is (r m) x m, L is (r m) x (r m), chi scalar, eta m x (r m); every
    pole sits at -p.
    """

    F: RatMatrix
    L: RatMatrix
    chi: RationalFn
    eta: RatMatrix
    p: float = 1.0
    r: int = 1
    m: int = 1
    a_coeffs: tuple = ()

    def theta_dims(self) -> tuple:
        return (self.m, self.r * self.m)


class ThetaKernel:
    """Validated free parameter: a stable, strictly proper banded kernel."""

    def __init__(self, kernel: ConvKernel, M: int | None = None):
        for blk in kernel.entries.values():
            for i in range(blk.rows):
                for j in range(blk.cols):
                    g = blk.a[i, j]
                    if g.is_zero:
                        continue
                    cl = classify(g)
                    if not (cl.stable and cl.strictly_proper):
                        raise InvalidParameter(
                            "theta entries must be stable and strictly proper")
        if M is None:
            M = kernel.band_size
        elif kernel.band_size > int(M):
            raise InvalidParameter(
                f"band size {kernel.band_size} exceeds M={M}")
        self.kernel = kernel
        self.M = int(M)

    @staticmethod
    def from_entries(N, entries, M: int | None = None,
                     block_dims=None) -> "ThetaKernel":
        return ThetaKernel(ConvKernel(N, entries, block_dims=block_dims), M)

    @staticmethod
    def zero(N, m: int = 1, r: int = 1, M: int = 0) -> "ThetaKernel":
        return ThetaKernel(ConvKernel(N, {}, block_dims=(m, r * m)), M)

    def to_json(self) -> dict:
        d = self.kernel.to_json()
        d["M"] = self.M
        return d

    @staticmethod
    def from_json(d) -> "ThetaKernel":
        return ThetaKernel(ConvKernel.from_json(d), d.get("M"))

    def __repr__(self) -> str:
        return f"ThetaKernel(M={self.M}, kernel={self.kernel!r})"


# ---------------------------------------------------------------------------
# Identical first-order sites
# ---------------------------------------------------------------------------

def family_first_order(a: float, p: float = 1.0) -> ParamFamily:
    """Closed-loop family for identical unstable first-order sites.

    x_n' = a x_n + w_n + u_n with Re(a) >= 0.  The family is
    F = L = 1/(s+p), chi = (s-a)/(s+p), eta = -(a+p)/(s+p); stable sites
    (Re(a) < 0) must use the stable-open-loop parameterization instead.
    """
    a = float(a)
    if a < 0.0:
        raise WrongFamily(
            "stable local dynamics: use coupled_parameterization "
            "(stable open loop) instead")
    p = float(p)
    if p <= 0.0:
        raise InvalidParameter("pole location p must be positive")
    one_over = 1 / (_S + p)
    return ParamFamily(
        F=RatMatrix.from_scalar(one_over),
        L=RatMatrix.from_scalar(one_over),
        chi=(_S - a) / (_S + p),
        eta=RatMatrix.from_scalar(RationalFn.const(-(a + p)) / (_S + p)),
        p=p,
        r=1,
        m=1,
        a_coeffs=(),
    )


# ---------------------------------------------------------------------------
# Canonical form and identical r-th order sites
# ---------------------------------------------------------------------------

def _controllability_check(Abar: np.ndarray, B: np.ndarray,
                           tol: float = 1e-9) -> np.ndarray:
    """Square block controllability matrix [B, Abar B, ..., Abar^{r-1} B].

    Raises NotControllable if it is singular (covers genuinely
    uncontrollable pairs and pairs whose controllability indices are not
    all equal, for which the scalar-coefficient block form does not exist).
    """
    n, m = B.shape
    if n % m:
        raise NotControllable(
            f"state dimension {n} is not a multiple of input dimension {m}")
    r = n // m
    blocks = [B]
    for _ in range(r - 1):
        blocks.append(Abar @ blocks[-1])
    K = np.hstack(blocks)
    sv = np.linalg.svd(K, compute_uv=False)
    if sv[-1] <= tol * max(sv[0], 1.0):
        raise NotControllable("block controllability matrix is singular")
    return K


def canonical_transform(A, B2):
    """Similarity transform into the shifted controllable-canonical form.

    Returns (T, Ahat, B2hat) with Ahat = T A T^{-1}, B2hat = T B2, and
    (Ahat + I, B2hat) matching the template: first block row of Ahat + I is
    [-a_1 I, ..., -a_r I], identity blocks on the subdiagonal, and
    B2hat = [I, 0, ..., 0]^T.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B2 = np.asarray(B2, dtype=float)
    if B2.ndim == 1:
        B2 = B2[:, None]
    n, m = B2.shape
    Abar = A + np.eye(n)
    K = _controllability_check(Abar, B2)
    r = n // m
    q = np.linalg.inv(K)[-m:, :]
    T = np.vstack([q @ np.linalg.matrix_power(Abar, r - 1 - i)
                   for i in range(r)])
    Ahat = T @ A @ np.linalg.inv(T)
    B2hat = T @ B2
    # Snap entries that the template forces to 0 or +-1.
    Ahat = _snap_canonical(Ahat, m)
    B2hat = np.where(np.abs(B2hat - np.vstack(
        [np.eye(m)] + [np.zeros((m, m))] * (r - 1))) < CANONICAL_TOL,
        np.vstack([np.eye(m)] + [np.zeros((m, m))] * (r - 1)), B2hat)
    _parse_canonical(Ahat, B2hat)  # raises WrongFamily if the form failed
    return T, Ahat, B2hat


def _snap_canonical(Ahat: np.ndarray, m: int) -> np.ndarray:
    n = Ahat.shape[0]
    Abar = Ahat + np.eye(n)
    out = Abar.copy()
    r = n // m
    for bi in range(1, r):
        for bj in range(r):
            blk = Abar[bi * m:(bi + 1) * m, bj * m:(bj + 1) * m]
            want = np.eye(m) if bj == bi - 1 else np.zeros((m, m))
            out[bi * m:(bi + 1) * m, bj * m:(bj + 1) * m] = np.where(
                np.abs(blk - want) < CANONICAL_TOL, want, blk)
    # first block row: each block should be a scalar times I
    for bj in range(r):
        blk = out[:m, bj * m:(bj + 1) * m]
        scal = blk[0, 0]
        want = scal * np.eye(m)
        out[:m, bj * m:(bj + 1) * m] = np.where(
            np.abs(blk - want) < CANONICAL_TOL, want, blk)
    return out - np.eye(n)


def _parse_canonical(A: np.ndarray, B2: np.ndarray) -> np.ndarray:
    """Extract (a_1, ..., a_r) from a canonical (A + I, B2); WrongFamily else."""
    n, m = B2.shape
    if n % m:
        raise WrongFamily("state dimension is not a multiple of block size")
    r = n // m
    Abar = A + np.eye(n)
    tmpl_b = np.vstack([np.eye(m)] + [np.zeros((m, m))] * (r - 1))
    if not np.allclose(B2, tmpl_b, atol=CANONICAL_TOL):
        raise WrongFamily("B2 is not [I, 0, ..., 0]^T")
    coeffs = []
    for bj in range(r):
        blk = Abar[:m, bj * m:(bj + 1) * m]
        a = blk[0, 0]
        if not np.allclose(blk, a * np.eye(m), atol=CANONICAL_TOL):
            raise WrongFamily("first block row is not scalar multiples of I")
        coeffs.append(-a)
    for bi in range(1, r):
        for bj in range(r):
            blk = Abar[bi * m:(bi + 1) * m, bj * m:(bj + 1) * m]
            want = np.eye(m) if bj == bi - 1 else np.zeros((m, m))
            if not np.allclose(blk, want, atol=CANONICAL_TOL):
                raise WrongFamily("lower rows do not match the shift pattern")
    return np.asarray(coeffs)


def _inv_pole_power(k: int, p: float = 1.0) -> RationalFn:
    """1 / (s + p)^k."""
    return RationalFn((1.0,), Poly.from_roots([-p] * k).c)


def family_nth_order(A, B2) -> ParamFamily:
    """Closed-loop family for one canonical r-th order subsystem.

    (A + I, B2) must already be in the shifted controllable-canonical form;
    use :func:`canonical_transform` first otherwise.  All family poles sit
    at -1.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B2 = np.asarray(B2, dtype=float)
    if B2.ndim == 1:
        B2 = B2[:, None]
    a = _parse_canonical(A, B2)
    n, m = B2.shape
    r = n // m
    eye = RatMatrix.identity(m)

    F = RatMatrix.vstack([eye * _inv_pole_power(k) for k in range(1, r + 1)])
    L = RatMatrix.zeros(n, n)
    for bi in range(r):
        for bj in range(bi + 1):
            blk = eye * _inv_pole_power(bi - bj + 1)
            L.a[bi * m:(bi + 1) * m, bj * m:(bj + 1) * m] = blk.a
    chi = RationalFn.one()
    for i in range(1, r + 1):
        chi = chi + a[i - 1] * _inv_pole_power(i)
    eta_blocks = []
    for k in range(1, r + 1):
        acc = RationalFn.zero()
        for i in range(k, r + 1):
            acc = acc + a[i - 1] * _inv_pole_power(i + 1 - k)
        eta_blocks.append(eye * acc)
    eta = RatMatrix.hstack(eta_blocks)
    return ParamFamily(F=F, L=L, chi=chi, eta=eta, p=1.0, r=r, m=m,
                       a_coeffs=tuple(float(x) for x in a))


# ---------------------------------------------------------------------------
# Spatially varying families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VaryingFirstOrderFamily:
    """Per-site closed-loop family for x_n' = a_n x_n + w_n + b_n u_n.

    Stable sites keep their open-loop pole: (alpha, beta, gamma) =
    (1, 0, 1/(s-a_n)); other sites are shifted to -1.  The theta
    coefficient of Phi_x is b_n gamma_n at stable sites and gamma_n at the
    rest (the shifted gamma already absorbs the input gain there).
    """

    a: np.ndarray
    b: np.ndarray
    alpha: tuple
    beta: tuple
    gamma: tuple
    gamma_theta: tuple

    @property
    def N(self) -> int:
        return len(self.alpha)


def family_varying_1st(a, b) -> VaryingFirstOrderFamily:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("per-site pole and gain lists must match")
    if np.any(b == 0.0):
        raise NotControllable("b_n = 0 at some site")
    alpha, beta, gamma, gtheta = [], [], [], []
    for an, bn in zip(a, b):
        if an < 0.0:
            alpha.append(RationalFn.one())
            beta.append(RationalFn.zero())
            g = 1 / (_S - an)
            gamma.append(g)
            gtheta.append(bn * g)
        else:
            alpha.append((_S - an) / (bn * (_S + 1)))
            beta.append(RationalFn.const(-(an + 1) / bn) / (_S + 1))
            g = 1 / (_S + 1)
            gamma.append(g)
            gtheta.append(g)
    return VaryingFirstOrderFamily(a=a, b=b, alpha=tuple(alpha),
                                   beta=tuple(beta), gamma=tuple(gamma),
                                   gamma_theta=tuple(gtheta))


@dataclass(frozen=True)
class VaryingNthFamily:
    """Per-site families for heterogeneous canonical subsystems."""

    site_families: tuple  # of ParamFamily

    @property
    def N(self) -> int:
        return len(self.site_families)

    def orders(self) -> list:
        return [fam.r for fam in self.site_families]


def family_varying_nth(A_list, B2_list) -> VaryingNthFamily:
    if len(A_list) != len(B2_list):
        raise ShapeError("one (A, B2) pair per site required")
    fams = tuple(family_nth_order(A, B) for A, B in zip(A_list, B2_list))
    return VaryingNthFamily(site_families=fams)


# ---------------------------------------------------------------------------
# Closed loops from theta
# ---------------------------------------------------------------------------

def _check_theta_matrix(theta: RatMatrix) -> None:
    for i in range(theta.rows):
        for j in range(theta.cols):
            g = theta.a[i, j]
            if g.is_zero:
                continue
            cl = classify(g)
            if not (cl.stable and cl.strictly_proper):
                raise InvalidParameter(
                    "theta entries must be stable and strictly proper")


def phis_from_theta(fam, theta):
    """Closed loops (Phi_x, Phi_u) from the free parameter.

    * ParamFamily + ThetaKernel/ConvKernel -> kernel pair (ring case);
    * VaryingFirstOrderFamily + RatMatrix (N x N) -> dense pair;
    * VaryingNthFamily + nested blocks {(i, j): RatMatrix} or list-of-lists
      (None for zero blocks) -> dense pair.
    """
    if isinstance(fam, ParamFamily):
        if isinstance(theta, ConvKernel):
            theta = ThetaKernel(theta)
        K = theta.kernel
        if K.block_dims != fam.theta_dims():
            raise ShapeError(
                f"theta blocks {K.block_dims} != {fam.theta_dims()}")
        n = fam.r * fam.m
        phix = {m: fam.F @ blk for m, blk in K.entries.items()}
        phiu = {m: blk * fam.chi for m, blk in K.entries.items()}
        phix[0] = phix[0] + fam.L if 0 in phix else fam.L
        phiu[0] = phiu[0] + fam.eta if 0 in phiu else fam.eta
        return (ConvKernel(K.N, phix, block_dims=(n, n)),
                ConvKernel(K.N, phiu, block_dims=(fam.m, n)))
    if isinstance(fam, VaryingFirstOrderFamily):
        return _varying_1st_phis(fam, theta)
    if isinstance(fam, VaryingNthFamily):
        return _varying_nth_phis(fam, theta)
    raise TypeError(f"unsupported family type {type(fam).__name__}")


def _varying_1st_phis(fam: VaryingFirstOrderFamily, theta: RatMatrix):
    N = fam.N
    if theta is None:
        theta = RatMatrix.zeros(N, N)
    if theta.shape != (N, N):
        raise ShapeError(f"theta must be {N} x {N}")
    _check_theta_matrix(theta)
    phix = RatMatrix.zeros(N, N)
    phiu = RatMatrix.zeros(N, N)
    for i in range(N):
        for j in range(N):
            t = theta.a[i, j]
            if not t.is_zero:
                phix.a[i, j] = fam.gamma_theta[i] * t
                phiu.a[i, j] = fam.alpha[i] * t
        phix.a[i, i] = phix.a[i, i] + fam.gamma[i]
        phiu.a[i, i] = phiu.a[i, i] + fam.beta[i]
    return phix, phiu


def _varying_nth_phis(fam: VaryingNthFamily, theta):
    N = fam.N
    fams = fam.site_families
    row_dims = [f.r * f.m for f in fams]
    col_dims = row_dims
    in_dims = [f.m for f in fams]
    row_off = np.concatenate([[0], np.cumsum(row_dims)])
    in_off = np.concatenate([[0], np.cumsum(in_dims)])
    n_tot = int(row_off[-1])
    m_tot = int(in_off[-1])

    def get_block(i, j):
        if theta is None:
            return None
        if isinstance(theta, dict):
            return theta.get((i, j))
        return theta[i][j]

    phix = RatMatrix.zeros(n_tot, n_tot)
    phiu = RatMatrix.zeros(m_tot, n_tot)
    for i in range(N):
        fi = fams[i]
        for j in range(N):
            blk = get_block(i, j)
            r0, r1 = int(row_off[i]), int(row_off[i + 1])
            c0, c1 = int(row_off[j]), int(row_off[j + 1])
            u0, u1 = int(in_off[i]), int(in_off[i + 1])
            if blk is not None and not blk.is_zero:
                if blk.shape != (fi.m, col_dims[j]):
                    raise ShapeError(
                        f"theta block ({i},{j}) is {blk.shape}, "
                        f"want {(fi.m, col_dims[j])}")
                _check_theta_matrix(blk)
                phix.a[r0:r1, c0:c1] = (fi.F @ blk).a
                phiu.a[u0:u1, c0:c1] = (blk * fi.chi).a
            if i == j:
                xblk = RatMatrix(phix.a[r0:r1, c0:c1].copy()) + fi.L
                ublk = RatMatrix(phiu.a[u0:u1, c0:c1].copy()) + fi.eta
                phix.a[r0:r1, c0:c1] = xblk.a
                phiu.a[u0:u1, c0:c1] = ublk.a
    return phix, phiu


# ---------------------------------------------------------------------------
# Membership check
# ---------------------------------------------------------------------------

def affine_residual(plant: PlantSpec, phix, phiu, p: float = 1.0):
    """(s I - A) Phi_x - B2 Phi_u - I; zero iff (Phi_x, Phi_u) achievable.

    The constraint is stated with a shift p in the derivations, but
    ((s+p)I - (A+pI)) = sI - A for every p, so the residual is
    p-independent; the argument is kept for interface symmetry.  Kernel
    closed loops give a kernel residual, dense ones a RatMatrix.
    """
    del p
    if isinstance(phix, ConvKernel):
        n = phix.block_dims[0]
        a_k = plant.a_kernel()
        b2_k = plant.b2_kernel()
        s_k = ConvKernel(phix.N, {0: RatMatrix.identity(n) * _S})
        lhs = compose(s_k - _promote(a_k, n), phix) - compose(b2_k, phiu)
        res = lhs - ConvKernel.identity(phix.N, n)
        return res._rebuild(
            {m: blk.map(chop) for m, blk in res.entries.items()},
            res.block_dims)
    A = plant.a_matrix()
    B2 = plant.b2_matrix()
    n = A.shape[0]
    sI_A = RatMatrix.from_const(-A)
    for i in range(n):
        sI_A.a[i, i] = sI_A.a[i, i] + _S
    res = sI_A @ phix - RatMatrix.from_const(B2) @ phiu
    return (res - RatMatrix.identity(n)).map(chop)


def _promote(K: ConvKernel, n: int) -> ConvKernel:
    """Lift scalar-block kernels to n x n blocks when needed."""
    if K.block_dims == (1, 1) and n > 1:
        return ConvKernel(K.N, {m: RatMatrix.diag([blk.a[0, 0]] * n)
                                for m, blk in K.entries.items()},
                          block_dims=(n, n))
    return K


# ---------------------------------------------------------------------------
# Coupled dynamics (stable open loop / invertible B2)
# ---------------------------------------------------------------------------

def _circulant_symbols(K: ConvKernel) -> np.ndarray:
    """All N DFT symbols of a constant scalar-block kernel."""
    if K.block_dims != (1, 1):
        raise UnsupportedPlant(
            "coupled parameterizations support scalar site blocks only")
    N = K.N
    vals = np.zeros(N, dtype=complex)
    for m, blk in K.entries.items():
        g = blk.a[0, 0]
        if not g.is_constant:
            raise UnsupportedPlant("plant kernels must be constant matrices")
        vals += g.constant_value() * np.exp(
            -2j * np.pi * np.arange(N) * m / N)
    return vals


def _resolvent_kernel(A: ConvKernel) -> ConvKernel:
    """Kernel of (sI - A)^{-1} for a constant scalar circulant A."""
    N = A.N
    ahat = _circulant_symbols(A)
    den = Poly(np.real(np.poly(ahat))[::-1].copy())
    ks = np.arange(N)
    entries = {}
    half = (N - 1) // 2
    for m in range(-half, half + 1):
        num = np.zeros(N, dtype=complex)  # ascending, degree N-1
        for k in range(N):
            others = np.poly(np.delete(ahat, k))[::-1]
            num[:len(others)] += np.exp(2j * np.pi * ks[k] * m / N) * others
        num = np.real(num) / N
        g = chop(RationalFn(num, den.c))
        if not g.is_zero:
            entries[m] = g
    return ConvKernel(N, entries, block_dims=(1, 1))


def _inverse_circulant(B2: ConvKernel) -> ConvKernel:
    """Constant kernel of B2^{-1}; requires every DFT symbol nonzero."""
    N = B2.N
    bhat = _circulant_symbols(B2)
    if np.min(np.abs(bhat)) <= 1e-12 * max(np.max(np.abs(bhat)), 1.0):
        raise UnsupportedPlant("B2 has a zero circulant symbol")
    vals = np.fft.ifft(1.0 / bhat)
    entries = {}
    half = (N - 1) // 2
    for idx in range(N):
        m = ((idx + half) % N) - half
        v = float(np.real(vals[idx]))
        if abs(v) > 1e-14 * np.max(np.abs(vals)):
            entries[m] = RationalFn.const(v)
    return ConvKernel(N, entries, block_dims=(1, 1))


def coupled_parameterization(plant: PlantSpec, theta, p: float = 1.0):
    """Closed loops for coupled (convolution-operator) dynamics.

    Stable open loop: Phi_u = theta is itself free and
    Phi_x = (sI - A)^{-1} (I + B2 Phi_u).  Invertible B2:
    Phi_x = (I + theta)/(s+p) and
    Phi_u = B2^{-1} ((sI - A) theta - (A + pI)) / (s+p).
    """
    if isinstance(theta, ThetaKernel):
        theta = theta.kernel
    if theta is None:
        raise InvalidParameter("theta kernel required")
    for blk in theta.entries.values():
        for g in blk.a.ravel():
            if g.is_zero:
                continue
            cl = classify(g)
            if not (cl.stable and cl.strictly_proper):
                raise InvalidParameter(
                    "theta entries must be stable and strictly proper")
    A = plant.data.get("A")
    B2 = plant.data.get("B2")
    if plant.kind == PlantSpec.COUPLED_STABLE:
        ahat = _circulant_symbols(A)
        if np.max(ahat.real) >= 0.0:
            raise UnsupportedPlant(
                "open loop is not stable; no explicit parameterization")
        R = _resolvent_kernel(A)
        phiu = theta
        phix = compose(R, ConvKernel.identity(A.N) + compose(B2, phiu))
        return phix, phiu
    if plant.kind == PlantSpec.COUPLED_B2INV:
        p = float(p)
        if p <= 0.0:
            raise InvalidParameter("pole location p must be positive")
        b2inv = _inverse_circulant(B2)
        N = A.N
        one_over = 1 / (_S + p)
        phix = (ConvKernel.identity(N) + theta) * one_over
        s_k = ConvKernel(N, {0: _S})
        inner = compose(s_k - A, theta) - (A + ConvKernel(N, {0: p}))
        phiu = compose(b2inv, inner) * one_over
        return phix, phiu
    raise UnsupportedPlant(
        f"coupled parameterization does not cover kind {plant.kind!r}")


# ---------------------------------------------------------------------------
# Youla bridge (first-order case)
# ---------------------------------------------------------------------------

def _check_youla_q(Q: RationalFn) -> None:
    if Q.is_zero:
        return
    cl = classify(Q)
    if not (cl.stable and cl.proper):
        raise InvalidParameter("Q must be stable and proper")


def youla_bridge(a: float, p: float, Q: RationalFn) -> RationalFn:
    """theta = (a+p)/(s+p) - Q/(s+p) for a stable proper Youla parameter."""
    _check_youla_q(Q)
    return (RationalFn.const(a + p) - Q) / (_S + p)


def youla_inverse(a: float, p: float, theta: RationalFn) -> RationalFn:
    """Recover Q = (a+p) - (s+p) theta."""
    return RationalFn.const(a + p) - (_S + p) * theta


def youla_closed_loops(a: float, p: float, Q: RationalFn):
    """Scalar closed loops written directly in terms of Q."""
    _check_youla_q(Q)
    d2 = (_S + p) * (_S + p)
    phix = (_S + 2 * p + a) / d2 - Q / d2
    phiu = RationalFn.const(-(a + p) ** 2) / d2 - (_S - a) * Q / d2
    return phix, phiu
