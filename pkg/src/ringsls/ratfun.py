"""Rational transfer-function algebra.

Real-coefficient rational functions of one complex variable are the atom of
everything in this package: closed-loop maps, model-matching data, spectral
factors, controller kernels.  This module keeps them reduced (numerator and
denominator share no root up to a coincidence tolerance, denominator monic)
and provides the operations the synthesis layers need:

* arithmetic and rational equality (cross-multiplied coefficient test),
* properness / stability classification,
* the para-Hermitian adjoint  G~(s) := G(-s)^T,
* additive splitting into stable + antistable + polynomial parts,
* squared H2 norms via Lyapunov Gramians (1/2pi normalization by default),
* scalar spectral factorization of para-Hermitian functions,
* state-space realization (controllable canonical per column followed by a
  Kalman minimal reduction) and the exact round trip back to transfer form.

Roots are always computed as companion-matrix eigenvalues
(``numpy.polynomial.polynomial.polyroots``); the root-coincidence tolerance
for reduction is 1e-9 relative.  When numerator and denominator share no
root, reduction keeps the original coefficient arrays (monic scaling only),
so constructed high-multiplicity denominators are never rebuilt from
scattered root estimates.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import numpy.polynomial.polynomial as npp
import scipy.linalg

__all__ = [
    "RatFunError",
    "DegenerateInput",
    "AxisPole",
    "NormUndefined",
    "NotFactorable",
    "ImproperTransfer",
    "Poly",
    "RationalFn",
    "RatMatrix",
    "StateSpace",
    "Classification",
    "reduce",
    "arith",
    "classify",
    "para_adjoint",
    "split_stable",
    "h2_norm_sq",
    "spectral_factor",
    "realize_ss",
    "tf_of_ss",
]

# Relative threshold below which a trailing (highest-degree) coefficient is
# treated as arithmetic junk and trimmed.
TRIM_REL = 1e-12
# Relative root-coincidence tolerance for numerator/denominator cancellation.
ROOT_COINCIDENCE_REL = 1e-9
# Default tolerance for detecting poles on the imaginary axis.
AXIS_TOL = 1e-9
# Default relative tolerance of the rational-equality test.
EQ_RTOL = 1e-8
# Default stability margin (strict inequality: stable iff Re(pole) < -margin).
STABILITY_MARGIN = 0.0


class RatFunError(Exception):
    """Base class for errors raised by the rational-function layer."""


class DegenerateInput(RatFunError):
    """Zero denominator or division by the zero function."""


class AxisPole(RatFunError):
    """A pole sits on the imaginary axis where a splitting is requested."""


class NormUndefined(RatFunError):
    """H2 norm requested for a non-stable or non-strictly-proper function."""


class NotFactorable(RatFunError):
    """Spectral factorization preconditions violated."""


class ImproperTransfer(RatFunError):
    """State-space realization requested for an improper transfer function."""


# ---------------------------------------------------------------------------
# Polynomials
# ---------------------------------------------------------------------------

class Poly:
    """Real polynomial stored as ascending coefficients.

    The zero polynomial is represented as ``[0.0]`` with degree 0 by the
    ``degree`` convention used here; use :attr:`is_zero` to test for it.
    Trailing coefficients smaller than ``TRIM_REL`` times the largest
    coefficient magnitude are trimmed on construction.
    """

    __slots__ = ("c",)

    def __init__(self, coeffs):
        c = np.atleast_1d(np.asarray(coeffs, dtype=float)).ravel()
        if c.size == 0:
            c = np.zeros(1)
        scale = np.max(np.abs(c))
        if scale == 0.0:
            c = np.zeros(1)
        else:
            keep = c.size
            while keep > 1 and abs(c[keep - 1]) <= TRIM_REL * scale:
                keep -= 1
            c = c[:keep].copy()
            if keep == 1 and abs(c[0]) <= TRIM_REL * scale:
                c = np.zeros(1)
        self.c = c

    # -- basic queries ------------------------------------------------------

    @property
    def degree(self) -> int:
        return len(self.c) - 1

    @property
    def is_zero(self) -> bool:
        return len(self.c) == 1 and self.c[0] == 0.0

    @property
    def lead(self) -> float:
        return float(self.c[-1])

    def __call__(self, s):
        return npp.polyval(s, self.c)

    def roots(self) -> np.ndarray:
        if self.degree < 1:
            return np.zeros(0, dtype=complex)
        return np.atleast_1d(npp.polyroots(self.c)).astype(complex)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other: "Poly") -> "Poly":
        return Poly(npp.polyadd(self.c, other.c))

    def __sub__(self, other: "Poly") -> "Poly":
        return Poly(npp.polysub(self.c, other.c))

    def __mul__(self, other):
        if isinstance(other, Poly):
            return Poly(npp.polymul(self.c, other.c))
        return Poly(self.c * float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Poly":
        return Poly(-self.c)

    def divmod(self, other: "Poly"):
        if other.is_zero:
            raise DegenerateInput("polynomial division by zero")
        quo, rem = npp.polydiv(self.c, other.c)
        return Poly(quo), Poly(rem)

    def monic(self) -> "Poly":
        if self.is_zero:
            return self
        return Poly(self.c / self.lead)

    def shifted_multiply(self, power: int) -> "Poly":
        """Multiply by s**power."""
        if self.is_zero:
            return self
        return Poly(np.concatenate([np.zeros(power), self.c]))

    @staticmethod
    def from_roots(roots, lead: float = 1.0) -> "Poly":
        roots = np.asarray(roots, dtype=complex)
        if roots.size == 0:
            return Poly([lead])
        c = npp.polyfromroots(roots)
        imag = np.max(np.abs(c.imag))
        scale = max(np.max(np.abs(c.real)), 1.0)
        if imag > 1e-8 * scale:
            raise RatFunError("non-conjugate root set in from_roots")
        return Poly(c.real * lead)

    def __repr__(self) -> str:
        return f"Poly({self.c.tolist()})"


def _pair_roots(a_roots, b_roots, rel=ROOT_COINCIDENCE_REL):
    """Greedy pairing of coincident roots; returns index lists (ia, ib)."""
    used_a: list[int] = []
    used_b: list[int] = []
    for ib, rb in enumerate(b_roots):
        best = -1
        best_dist = np.inf
        for ia, ra in enumerate(a_roots):
            if ia in used_a:
                continue
            d = abs(ra - rb)
            if d < best_dist:
                best_dist = d
                best = ia
        if best >= 0 and best_dist <= rel * max(1.0, abs(b_roots[ib])):
            used_a.append(best)
            used_b.append(ib)
    return used_a, used_b


# Root-finding scatters an m-fold root over a disc of radius roughly
# eps^(1/m); cluster radii are sized from this floor with a safety factor.
_CLUSTER_EPS = 1e-13
_CLUSTER_SAFETY = 4.0
# A candidate cluster is accepted only if deflating its full multiplicity
# leaves relative remainders below this, so any misgrouping perturbs the
# polynomial by less than the working equality tolerance.
_CLUSTER_VERIFY_REL = 1e-9
# Verified cluster means are first-order accurate; pair them generously.
_PAIR_MEAN_REL = 1e-7


def _deflation_ok(p: Poly, center: complex, mult: int,
                  rel: float = _CLUSTER_VERIFY_REL) -> bool:
    """True when (s - center)^mult divides p to relative accuracy rel."""
    c = np.asarray(p.c, dtype=complex)
    z = complex(center)
    for _ in range(mult):
        if len(c) < 2:
            return False
        scale = float(np.sum(np.abs(c)
                             * max(1.0, abs(z)) ** np.arange(len(c))))
        if abs(npp.polyval(z, c)) > rel * max(scale, 1e-300):
            return False
        # synthetic division by (s - center), ascending coefficients
        q = np.zeros(len(c) - 1, dtype=complex)
        acc = 0.0 + 0.0j
        for k in range(len(c) - 1, 0, -1):
            acc = c[k] + acc * z
            q[k - 1] = acc
        c = q
    return True


def _clustered_roots(p: Poly) -> list:
    """Roots of p grouped into verified (center, multiplicity) clusters.

    An m-fold root scatters across a disc of radius ~eps^(1/m) but its
    cluster mean recovers the true root to first order.  Candidate groups
    are accepted only when deflation of the full multiplicity verifies, so
    a false merge can only happen where both readings of the polynomial
    agree to below the verification tolerance.
    """
    roots = list(p.roots())
    n = len(roots)
    out: list = []
    unused = list(range(n))
    for m_hyp in range(n, 1, -1):
        changed = True
        while changed and len(unused) >= m_hyp:
            changed = False
            for i in unused:
                ri = roots[i]
                radius = (_CLUSTER_SAFETY * _CLUSTER_EPS ** (1.0 / m_hyp)
                          * max(1.0, abs(ri)))
                group = [k for k in unused if abs(roots[k] - ri) <= radius]
                if len(group) < m_hyp:
                    continue
                group = sorted(group,
                               key=lambda k: abs(roots[k] - ri))[:m_hyp]
                center = complex(np.mean([roots[k] for k in group]))
                if abs(center.imag) <= radius:
                    center = complex(center.real, 0.0)
                if _deflation_ok(p, center, m_hyp):
                    out.append((center, m_hyp))
                    unused = [k for k in unused if k not in group]
                    changed = True
                    break
    out.extend((roots[k], 1) for k in unused)
    return out


def _expand_clusters(clusters) -> list:
    flat: list = []
    for center, mult in clusters:
        flat.extend([center] * mult)
    return flat


# ---------------------------------------------------------------------------
# Rational functions
# ---------------------------------------------------------------------------

Classification = namedtuple("Classification", ["proper", "strictly_proper", "stable"])


class RationalFn:
    """Reduced rational function num/den with monic denominator."""

    __slots__ = ("num", "den")

    def __init__(self, num, den=(1.0,), _normalized=False):
        if not isinstance(num, Poly):
            num = Poly(num)
        if not isinstance(den, Poly):
            den = Poly(den)
        if _normalized:
            self.num, self.den = num, den
            return
        g = reduce(num, den)
        self.num, self.den = g.num, g.den

    # -- constructors -------------------------------------------------------

    @staticmethod
    def const(value: float) -> "RationalFn":
        return RationalFn(Poly([float(value)]), Poly([1.0]), _normalized=True)

    @staticmethod
    def zero() -> "RationalFn":
        return RationalFn.const(0.0)

    @staticmethod
    def one() -> "RationalFn":
        return RationalFn.const(1.0)

    @staticmethod
    def var() -> "RationalFn":
        """The function s itself."""
        return RationalFn(Poly([0.0, 1.0]), Poly([1.0]), _normalized=True)

    # -- queries -------------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return self.num.is_zero

    @property
    def is_constant(self) -> bool:
        return self.num.degree == 0 and self.den.degree == 0

    @property
    def relative_degree(self) -> int:
        return self.den.degree - self.num.degree

    def poles(self) -> np.ndarray:
        return self.den.roots()

    def zeros(self) -> np.ndarray:
        return self.num.roots()

    def __call__(self, s):
        return self.num(s) / self.den(s)

    def constant_value(self) -> float:
        if self.num.degree > 0 or self.den.degree > 0:
            raise RatFunError("not a constant function")
        return float(self.num.c[0] / self.den.c[0])

    def equals(self, other, rtol: float = EQ_RTOL) -> bool:
        other = _as_ratfn(other)
        p = self.num * other.den
        q = other.num * self.den
        diff = p - q
        scale = max(np.max(np.abs(p.c)), np.max(np.abs(q.c)), 1e-300)
        return bool(np.max(np.abs(diff.c)) <= rtol * scale)

    # -- arithmetic ----------------------------------------------------------

    def _add_signed(self, other, sign: float):
        """self + sign*other, reusing a shared denominator when possible.

        Without these paths every addition in a long chain multiplies the
        denominators together, so a factor shared by both sides becomes a
        repeated root that only root-clustering can remove afterwards.
        Recognizing an identical or nested denominator keeps the chain at
        its true degree in the first place.
        """
        other = _as_ratfn(other)
        if self.is_zero:
            return other if sign > 0 else -other
        if other.is_zero:
            return self
        if np.array_equal(self.den.c, other.den.c):
            return reduce(self.num + sign * other.num, self.den)
        if self.den.degree != other.den.degree:
            if self.den.degree > other.den.degree:
                hi_num, hi_den = self.num, self.den
                lo_num, lo_den = other.num, other.den
                hi_sign, lo_sign = 1.0, sign
            else:
                hi_num, hi_den = other.num, other.den
                lo_num, lo_den = self.num, self.den
                hi_sign, lo_sign = sign, 1.0
            quot, rem = hi_den.divmod(lo_den)
            if rem.is_zero or (
                    np.max(np.abs(rem.c)) <=
                    1e-10 * np.max(np.abs(hi_den.c))):
                return reduce(hi_sign * hi_num + lo_sign * (lo_num * quot),
                              hi_den)
        return reduce(self.num * other.den + sign * other.num * self.den,
                      self.den * other.den)

    def __add__(self, other):
        return self._add_signed(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._add_signed(other, -1.0)

    def __rsub__(self, other):
        return _as_ratfn(other).__sub__(self)

    def __mul__(self, other):
        other = _as_ratfn(other)
        return reduce(self.num * other.num, self.den * other.den)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_ratfn(other)
        if other.is_zero:
            raise DegenerateInput("division by the zero function")
        return reduce(self.num * other.den, self.den * other.num)

    def __rtruediv__(self, other):
        return _as_ratfn(other).__truediv__(self)

    def __neg__(self):
        return RationalFn(-self.num, self.den, _normalized=True)

    def para_adjoint(self) -> "RationalFn":
        return para_adjoint(self)

    def to_json(self) -> dict:
        """Ascending-coefficient dict form: {"num": [...], "den": [...]}."""
        return {"num": [float(c) for c in self.num.c],
                "den": [float(c) for c in self.den.c]}

    @staticmethod
    def from_json(d) -> "RationalFn":
        return RationalFn(list(d["num"]), list(d["den"]))

    def __repr__(self) -> str:
        return f"RationalFn({self.num.c.tolist()}, {self.den.c.tolist()})"


def _as_ratfn(x) -> RationalFn:
    if isinstance(x, RationalFn):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return RationalFn.const(float(x))
    if isinstance(x, Poly):
        return RationalFn(x, Poly([1.0]), _normalized=True)
    raise TypeError(f"cannot interpret {type(x).__name__} as RationalFn")


def reduce(num, den) -> RationalFn:
    """Construct the reduced rational function num/den.

    Roots of both polynomials are grouped into verified multiplicity
    clusters first (a repeated root scatters far beyond any fixed pairing
    tolerance, but its cluster mean is first-order accurate), then common
    cluster centers are cancelled with the shared multiplicity.  The
    denominator is normalized to be monic.  When no root cancels, the
    original coefficient arrays are kept up to the monic scaling so that
    no precision is lost to root reconstruction.
    """
    if not isinstance(num, Poly):
        num = Poly(num)
    if not isinstance(den, Poly):
        den = Poly(den)
    if den.is_zero:
        raise DegenerateInput("zero denominator")
    if num.is_zero:
        return RationalFn(Poly([0.0]), Poly([1.0]), _normalized=True)
    if num.degree == 0 or den.degree == 0:
        lead = den.lead
        return RationalFn(Poly(num.c / lead), Poly(den.c / lead),
                          _normalized=True)
    nclust = _clustered_roots(num)
    dclust = _clustered_roots(den)
    n_mult = [m for _, m in nclust]
    d_mult = [m for _, m in dclust]
    cancelled = False
    for j, (dc, _) in enumerate(dclust):
        if d_mult[j] == 0:
            continue
        best = -1
        best_dist = np.inf
        for i, (nc, _) in enumerate(nclust):
            if n_mult[i] == 0:
                continue
            dist = abs(nc - dc)
            if dist < best_dist:
                best_dist = dist
                best = i
        if best >= 0 and best_dist <= _PAIR_MEAN_REL * max(1.0, abs(dc)):
            k = min(n_mult[best], d_mult[j])
            n_mult[best] -= k
            d_mult[j] -= k
            cancelled = True
    if not cancelled:
        lead = den.lead
        return RationalFn(Poly(num.c / lead), Poly(den.c / lead),
                          _normalized=True)
    keep_n = _expand_clusters(
        (c, m) for (c, _), m in zip(nclust, n_mult) if m > 0)
    keep_d = _expand_clusters(
        (c, m) for (c, _), m in zip(dclust, d_mult) if m > 0)
    new_num = Poly.from_roots(keep_n, lead=num.lead / den.lead)
    new_den = Poly.from_roots(keep_d, lead=1.0)
    return RationalFn(new_num, new_den, _normalized=True)


def arith(a: RationalFn, b: RationalFn, op: str) -> RationalFn:
    """Dispatch arithmetic by name: op in {add, sub, mul, div}."""
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    raise ValueError(f"unknown op {op!r}")


def chop(g: RationalFn, tol: float = EQ_RTOL) -> RationalFn:
    """Zero out g when its numerator is negligible against its denominator.

    Exact cancellations computed in floating point can leave a numerator
    of pure rounding noise.  A reduced function whose largest numerator
    coefficient is below ``tol`` times the largest denominator coefficient
    is collapsed to the zero function; anything larger is returned as is.
    """
    g = _as_ratfn(g)
    if g.is_zero:
        return g
    num_scale = float(np.max(np.abs(g.num.c)))
    den_scale = float(np.max(np.abs(g.den.c)))
    if num_scale <= tol * den_scale:
        return RationalFn.zero()
    return g


def classify(g: RationalFn, margin: float = STABILITY_MARGIN) -> Classification:
    """Properness and stability of a reduced rational function.

    ``stable`` means every pole has real part strictly less than ``-margin``
    (open left half plane for the default margin 0).  The zero function is
    proper, strictly proper and stable.
    """
    g = _as_ratfn(g)
    if g.is_zero:
        return Classification(True, True, True)
    rel = g.relative_degree
    poles = g.poles()
    stable = bool(np.all(poles.real < -margin)) if poles.size else True
    return Classification(rel >= 0, rel >= 1, stable)


def para_adjoint(G):
    """The adjoint G~(s) = G(-s)^T (transpose for matrices)."""
    if isinstance(G, RatMatrix):
        out = RatMatrix.zeros(G.cols, G.rows)
        for i in range(G.rows):
            for j in range(G.cols):
                out.a[j, i] = para_adjoint(G.a[i, j])
        return out
    g = _as_ratfn(G)
    flip_n = g.num.c * ((-1.0) ** np.arange(len(g.num.c)))
    flip_d = g.den.c * ((-1.0) ** np.arange(len(g.den.c)))
    lead = flip_d[-1]
    return RationalFn(Poly(flip_n / lead), Poly(flip_d / lead),
                      _normalized=True)


def mirror(g: RationalFn) -> RationalFn:
    """g(-s) for scalar g; maps antistable functions to stable ones."""
    return para_adjoint(g)


# ---------------------------------------------------------------------------
# Stable / antistable splitting
# ---------------------------------------------------------------------------

def split_stable(g: RationalFn, axis_tol: float = AXIS_TOL):
    """Split g = stable + antistable + polynomial.

    The stable part is strictly proper with all poles in the open left half
    plane, the antistable part strictly proper with all poles in the open
    right half plane.  A pole within ``axis_tol`` (relative) of the
    imaginary axis raises :class:`AxisPole`.
    """
    g = _as_ratfn(g)
    if g.is_zero:
        return RationalFn.zero(), RationalFn.zero(), Poly([0.0])
    if g.num.degree >= g.den.degree:
        quo, rem = g.num.divmod(g.den)
        poly_part = quo
        num = rem
    else:
        poly_part = Poly([0.0])
        num = g.num
    if num.is_zero:
        return RationalFn.zero(), RationalFn.zero(), poly_part
    droots = g.den.roots()
    on_axis = np.abs(droots.real) <= axis_tol * np.maximum(1.0, np.abs(droots))
    if np.any(on_axis):
        raise AxisPole(f"pole(s) on the imaginary axis: {droots[on_axis]}")
    left = droots[droots.real < 0]
    right = droots[droots.real > 0]
    if right.size == 0:
        return reduce(num, g.den), RationalFn.zero(), poly_part
    if left.size == 0:
        return RationalFn.zero(), reduce(num, g.den), poly_part
    dl = Poly.from_roots(left)
    dr = Poly.from_roots(right)
    # Solve a*dr + b*dl = num with deg a < deg dl, deg b < deg dr.
    nl, nr = dl.degree, dr.degree
    n = nl + nr
    A = np.zeros((n, n))
    for i in range(nl):           # columns for a-coefficients (times dr)
        col = dr.shifted_multiply(i).c
        A[: len(col), i] = col
    for j in range(nr):           # columns for b-coefficients (times dl)
        col = dl.shifted_multiply(j).c
        A[: len(col), nl + j] = col
    rhs = np.zeros(n)
    rhs[: len(num.c)] = num.c
    sol = np.linalg.solve(A, rhs)
    a = Poly(sol[:nl])
    b = Poly(sol[nl:])
    return reduce(a, dl), reduce(b, dr), poly_part


# ---------------------------------------------------------------------------
# H2 norm
# ---------------------------------------------------------------------------

def _companion_realization(g: RationalFn):
    """Controllable canonical (A, B, C) of a strictly proper g (no D)."""
    den = g.den
    n = den.degree
    A = np.zeros((n, n))
    if n > 1:
        A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -den.c[:-1]
    B = np.zeros(n)
    B[-1] = 1.0
    C = np.zeros(n)
    C[: len(g.num.c)] = g.num.c
    return A, B, C

def _entry_h2_sq(g: RationalFn) -> float:
    if g.is_zero:
        return 0.0
    cls = classify(g)
    if not (cls.stable and cls.strictly_proper):
        raise NormUndefined(f"H2 norm undefined for {g!r}")
    A, B, C = _companion_realization(g)
    W = scipy.linalg.solve_continuous_lyapunov(A, -np.outer(B, B))
    return float(C @ W @ C)


def h2_norm_sq(G, convention: str = "one_over_two_pi") -> float:
    """Squared H2 norm of a rational function or matrix.

    With the default convention this is (1/2pi) trace int G*(jw) G(jw) dw,
    computed per entry via a state-space controllability Gramian (Lyapunov
    equation).  ``convention="plain"`` drops the 1/2pi factor.  Entries must
    be stable and strictly proper, otherwise :class:`NormUndefined`.
    """
    if convention not in ("one_over_two_pi", "plain"):
        raise ValueError(f"unknown H2 normalization {convention!r}")
    if isinstance(G, RatMatrix):
        total = sum(_entry_h2_sq(G.a[i, j])
                    for i in range(G.rows) for j in range(G.cols))
    else:
        total = _entry_h2_sq(_as_ratfn(G))
    if convention == "plain":
        total *= 2.0 * np.pi
    return float(total)


# ---------------------------------------------------------------------------
# Scalar spectral factorization
# ---------------------------------------------------------------------------

def _half_roots(p: Poly, axis_tol: float):
    """Split the roots of an even-symmetric polynomial for factorization.

    Returns the root multiset of the stable half: all open-LHP roots plus
    half of every imaginary-axis cluster (which must have even size).
    """
    roots = p.roots()
    half: list[complex] = []
    on_axis: list[complex] = []
    for r in roots:
        if abs(r.real) <= axis_tol * max(1.0, abs(r)):
            on_axis.append(r)
        elif r.real < 0:
            half.append(r)
    if len(on_axis) % 2 != 0:
        raise NotFactorable("odd number of imaginary-axis roots")
    # Cluster axis roots by imaginary part and take half of each +/- pair.
    on_axis.sort(key=lambda r: r.imag)
    imags = np.array([r.imag for r in on_axis])
    used = np.zeros(len(on_axis), dtype=bool)
    for i in range(len(on_axis)):
        if used[i]:
            continue
        b = imags[i]
        if abs(b) <= axis_tol:
            # roots at the origin: need even count, take half as zeros at 0
            cluster = [k for k in range(len(on_axis))
                       if not used[k] and abs(imags[k]) <= axis_tol]
            if len(cluster) % 2 != 0:
                raise NotFactorable("odd multiplicity of root at s = 0")
            for k in cluster:
                used[k] = True
            half.extend([0.0] * (len(cluster) // 2))
            continue
        # find the matching -b root
        partner = None
        for k in range(len(on_axis)):
            if not used[k] and k != i and abs(imags[k] + b) <= max(
                    axis_tol, 1e-7 * abs(b)):
                partner = k
                break
        if partner is None:
            raise NotFactorable(f"unpaired axis root at {on_axis[i]}")
        used[i] = used[partner] = True
        half.append(1j * abs(b))
        half.append(-1j * abs(b))
    # the +/- jb pair was appended once -> contributes (s^2 + b^2) once,
    # i.e. half of the (necessarily) doubled cluster.
    return half


def spectral_factor(phi: RationalFn, axis_tol: float = 1e-7,
                    ngrid: int = 64) -> RationalFn:
    """Stable minimum-phase f with f~ f = phi for scalar para-Hermitian phi.

    phi must equal its para-adjoint and be nonnegative on the imaginary axis
    (checked on a sample grid); imaginary-axis zeros are split evenly.  The
    factor is normalized to a positive leading numerator coefficient.
    """
    phi = _as_ratfn(phi)
    if phi.is_zero:
        raise NotFactorable("zero function has no spectral factor")
    if not phi.equals(para_adjoint(phi)):
        raise NotFactorable("phi is not para-Hermitian")
    w = np.concatenate([[0.0], np.logspace(-2, 2, ngrid - 1)])
    vals = phi(1j * w)
    scale = max(np.max(np.abs(vals)), 1e-300)
    if np.max(np.abs(vals.imag)) > 1e-7 * scale:
        raise NotFactorable("phi not real on the imaginary axis")
    if np.min(vals.real) < -1e-7 * scale:
        raise NotFactorable("phi sign-indefinite on the imaginary axis")
    num_half = _half_roots(phi.num, axis_tol)
    den_half = _half_roots(phi.den, axis_tol)
    if 2 * len(num_half) != phi.num.degree or 2 * len(den_half) != phi.den.degree:
        raise NotFactorable("root halves do not account for all roots")
    nl = Poly.from_roots(num_half)
    dl = Poly.from_roots(den_half)
    # gain: |f(jw)|^2 = phi(jw) at a sample point away from roots/poles
    c2 = None
    for wk in (0.73, 1.31, 2.97, 5.11):
        nv = nl(1j * wk)
        dv = dl(1j * wk)
        if abs(nv) > 1e-9 and abs(dv) > 1e-9:
            c2 = float(np.real(phi(1j * wk))) * abs(dv) ** 2 / abs(nv) ** 2
            break
    if c2 is None or c2 <= 0.0:
        raise NotFactorable("could not determine a positive factor gain")
    f = RationalFn(nl * np.sqrt(c2), dl, _normalized=True)
    return f


# ---------------------------------------------------------------------------
# Rational matrices
# ---------------------------------------------------------------------------

class RatMatrix:
    """Dense matrix of RationalFn entries."""

    __slots__ = ("a",)

    def __init__(self, entries):
        if isinstance(entries, np.ndarray) and entries.dtype == object:
            a = entries
        else:
            rows = list(entries)
            a = np.empty((len(rows), len(rows[0])), dtype=object)
            for i, row in enumerate(rows):
                if len(row) != a.shape[1]:
                    raise ValueError("ragged rows in RatMatrix")
                for j, e in enumerate(row):
                    a[i, j] = _as_ratfn(e)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError("RatMatrix must be 2-D and nonempty")
        self.a = a

    # -- constructors --------------------------------------------------------

    @staticmethod
    def zeros(rows: int, cols: int) -> "RatMatrix":
        a = np.empty((rows, cols), dtype=object)
        for i in range(rows):
            for j in range(cols):
                a[i, j] = RationalFn.zero()
        return RatMatrix(a)

    @staticmethod
    def identity(n: int) -> "RatMatrix":
        out = RatMatrix.zeros(n, n)
        for i in range(n):
            out.a[i, i] = RationalFn.one()
        return out

    @staticmethod
    def from_const(M) -> "RatMatrix":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        out = RatMatrix.zeros(M.shape[0], M.shape[1])
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                out.a[i, j] = RationalFn.const(M[i, j])
        return out

    @staticmethod
    def from_scalar(g) -> "RatMatrix":
        out = RatMatrix.zeros(1, 1)
        out.a[0, 0] = _as_ratfn(g)
        return out

    @staticmethod
    def diag(entries) -> "RatMatrix":
        n = len(entries)
        out = RatMatrix.zeros(n, n)
        for i, e in enumerate(entries):
            out.a[i, i] = _as_ratfn(e)
        return out

    @staticmethod
    def hstack(blocks) -> "RatMatrix":
        return RatMatrix(np.concatenate([b.a for b in blocks], axis=1))

    @staticmethod
    def vstack(blocks) -> "RatMatrix":
        return RatMatrix(np.concatenate([b.a for b in blocks], axis=0))

    # -- queries --------------------------------------------------------------

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self):
        return self.a.shape

    def __getitem__(self, idx):
        out = self.a[idx]
        if isinstance(out, np.ndarray):
            return RatMatrix(np.atleast_2d(out))
        return out

    @property
    def is_zero(self) -> bool:
        return all(self.a[i, j].is_zero
                   for i in range(self.rows) for j in range(self.cols))

    def is_constant(self) -> bool:
        return all(self.a[i, j].is_zero or self.a[i, j].is_constant
                   for i in range(self.rows) for j in range(self.cols))

    def constant_matrix(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for i in range(self.rows):
            for j in range(self.cols):
                e = self.a[i, j]
                out[i, j] = 0.0 if e.is_zero else e.constant_value()
        return out

    def evalm(self, s) -> np.ndarray:
        out = np.empty(self.shape, dtype=complex)
        for i in range(self.rows):
            for j in range(self.cols):
                out[i, j] = self.a[i, j](s)
        return out

    def equals(self, other: "RatMatrix", rtol: float = EQ_RTOL) -> bool:
        if self.shape != other.shape:
            return False
        return all(self.a[i, j].equals(other.a[i, j], rtol)
                   for i in range(self.rows) for j in range(self.cols))

    # -- algebra ---------------------------------------------------------------

    def map(self, fn) -> "RatMatrix":
        out = np.empty(self.shape, dtype=object)
        for i in range(self.rows):
            for j in range(self.cols):
                out[i, j] = fn(self.a[i, j])
        return RatMatrix(out)

    def __add__(self, other: "RatMatrix") -> "RatMatrix":
        if self.shape != other.shape:
            raise ValueError("shape mismatch in RatMatrix add")
        out = np.empty(self.shape, dtype=object)
        for i in range(self.rows):
            for j in range(self.cols):
                out[i, j] = self.a[i, j] + other.a[i, j]
        return RatMatrix(out)

    def __sub__(self, other: "RatMatrix") -> "RatMatrix":
        return self + (-other)

    def __neg__(self) -> "RatMatrix":
        return self.map(lambda e: -e)

    def __mul__(self, scalar) -> "RatMatrix":
        g = _as_ratfn(scalar)
        return self.map(lambda e: e * g)

    __rmul__ = __mul__

    def __matmul__(self, other: "RatMatrix") -> "RatMatrix":
        if self.cols != other.rows:
            raise ValueError("inner dimension mismatch in RatMatrix matmul")
        out = RatMatrix.zeros(self.rows, other.cols)
        for i in range(self.rows):
            for j in range(other.cols):
                acc = RationalFn.zero()
                for k in range(self.cols):
                    l, r = self.a[i, k], other.a[k, j]
                    if l.is_zero or r.is_zero:
                        continue
                    acc = acc + l * r
                out.a[i, j] = acc
        return out

    def transpose(self) -> "RatMatrix":
        return RatMatrix(self.a.T.copy())

    def para_adjoint(self) -> "RatMatrix":
        return para_adjoint(self)

    def to_json(self) -> list:
        return [[self.a[i, j].to_json() for j in range(self.cols)]
                for i in range(self.rows)]

    @staticmethod
    def from_json(rows) -> "RatMatrix":
        return RatMatrix([[RationalFn.from_json(d) for d in row]
                          for row in rows])

    def __repr__(self) -> str:
        return f"RatMatrix(shape={self.shape})"


# ---------------------------------------------------------------------------
# State-space realization
# ---------------------------------------------------------------------------

@dataclass
class StateSpace:
    """G(s) = C (sI - A)^{-1} B + D."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = self.A.shape[0]
        if self.A.shape[1] != n:
            raise ValueError("A must be square")
        if self.B.shape[0] != n or self.C.shape[1] != n:
            raise ValueError("B/C dimensions incompatible with A")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D dimensions incompatible with B/C")

    @property
    def n(self) -> int:
        return self.A.shape[0]


def _orth_extend(V: np.ndarray, X: np.ndarray, tol: float) -> np.ndarray:
    """Extend orthonormal basis V by the columns of X (relative rank tol).

    The rank decision is made against the norm of X before projection, so
    that directions already (numerically) inside span(V) are never added.
    """
    n = X.shape[0]
    if X.size == 0 or V.shape[1] >= n:
        return V
    scale = max(np.linalg.norm(X), 1e-300)
    if V.shape[1]:
        X = X - V @ (V.T @ X)
    U, sv, _ = np.linalg.svd(X, full_matrices=False)
    keep = sv > tol * scale
    W = np.hstack([V, U[:, keep]])
    return W[:, :n]


def _controllable_subspace(A: np.ndarray, B: np.ndarray, tol: float) -> np.ndarray:
    n = A.shape[0]
    V = np.zeros((n, 0))
    V = _orth_extend(V, B, tol)
    while 0 < V.shape[1] < n:
        k = V.shape[1]
        V = _orth_extend(V, A @ V, tol)
        if V.shape[1] == k:
            break
    return V


def kalman_minimal(ss: StateSpace, tol: float = 1e-9) -> StateSpace:
    """Exact minimal reduction: controllable then observable staircase.

    When a subspace already spans the full state space the basis change is
    skipped, so an already-minimal realization passes through untouched.
    """
    A, B, C = ss.A, ss.B, ss.C
    V = _controllable_subspace(A, B, tol)
    if V.shape[1] < A.shape[0]:
        A = V.T @ A @ V
        B = V.T @ B
        C = C @ V
    W = _controllable_subspace(A.T, C.T, tol)
    if W.shape[1] < A.shape[0]:
        A = W.T @ A @ W
        B = W.T @ B
        C = C @ W
    if A.shape[0] == 0:
        A = np.zeros((0, 0))
        B = np.zeros((0, ss.B.shape[1]))
        C = np.zeros((ss.C.shape[0], 0))
    return StateSpace(A, B, C, ss.D)


def _poly_lcm(p: Poly, q: Poly) -> Poly:
    """Least common multiple via root pairing against p."""
    if p.degree == 0:
        return q.monic()
    if q.degree == 0:
        return p.monic()
    proots = p.roots()
    qroots = q.roots()
    _, iq = _pair_roots(proots, qroots)
    extra = [r for i, r in enumerate(qroots) if i not in iq]
    return (p.monic() * Poly.from_roots(extra)).monic()


def realize_ss(G, minimal: bool = True) -> StateSpace:
    """State-space realization of a proper rational matrix.

    Controllable canonical per column over the column's common denominator,
    then (by default) an exact Kalman minimal reduction at rank tolerance
    1e-9.  Improper entries raise :class:`ImproperTransfer`.
    """
    if isinstance(G, RationalFn):
        G = RatMatrix.from_scalar(G)
    ny, nu = G.rows, G.cols
    D = np.zeros((ny, nu))
    strict = np.empty((ny, nu), dtype=object)
    for i in range(ny):
        for j in range(nu):
            g = G.a[i, j]
            rel = g.relative_degree
            if g.is_zero:
                strict[i, j] = RationalFn.zero()
                continue
            if rel < 0:
                raise ImproperTransfer(f"entry ({i},{j}) is improper")
            if rel == 0:
                d = g.num.lead / g.den.lead
                D[i, j] = d
                strict[i, j] = reduce(g.num - d * g.den, g.den)
            else:
                strict[i, j] = g
    blocks_A, blocks_B, blocks_C = [], [], []
    for j in range(nu):
        den = Poly([1.0])
        for i in range(ny):
            if not strict[i, j].is_zero:
                den = _poly_lcm(den, strict[i, j].den)
        nu_j = den.degree
        if nu_j == 0:
            continue
        A = np.zeros((nu_j, nu_j))
        if nu_j > 1:
            A[:-1, 1:] = np.eye(nu_j - 1)
        A[-1, :] = -den.c[:-1]
        B = np.zeros((nu_j, nu))
        B[-1, j] = 1.0
        C = np.zeros((ny, nu_j))
        for i in range(ny):
            g = strict[i, j]
            if g.is_zero:
                continue
            quo, _ = den.divmod(g.den)
            numer = g.num * quo
            C[i, : len(numer.c)] = numer.c
        blocks_A.append(A)
        blocks_B.append(B)
        blocks_C.append(C)
    if not blocks_A:
        ss = StateSpace(np.zeros((0, 0)), np.zeros((0, nu)),
                        np.zeros((ny, 0)), D)
        return ss
    A = scipy.linalg.block_diag(*blocks_A)
    B = np.vstack(blocks_B)
    C = np.hstack(blocks_C)
    ss = StateSpace(A, B, C, D)
    return kalman_minimal(ss) if minimal else ss


def tf_of_ss(ss: StateSpace) -> RatMatrix:
    """Exact transfer matrix of a state-space model.

    Each entry is first restricted to its minimal single-input
    single-output subsystem, then read off via the determinant identity
    det(sI - A + b c^T) = det(sI - A) * (1 + c^T (sI - A)^{-1} b) with
    characteristic polynomials computed from eigenvalues.  On the minimal
    subsystem numerator and denominator are coprime, so no root
    cancellation is needed and the subtraction in the identity stays
    well scaled.
    """
    ny, nu = ss.C.shape[0], ss.B.shape[1]
    out = RatMatrix.zeros(ny, nu)
    for i in range(ny):
        for j in range(nu):
            d = float(ss.D[i, j])
            if ss.n == 0:
                out.a[i, j] = RationalFn.const(d)
                continue
            sub = kalman_minimal(
                StateSpace(ss.A, ss.B[:, [j]], ss.C[[i], :],
                           np.zeros((1, 1))))
            if sub.n == 0:
                out.a[i, j] = RationalFn.const(d)
                continue
            char = np.real(np.poly(np.linalg.eigvals(sub.A)))  # descending
            shifted = np.real(np.poly(
                np.linalg.eigvals(sub.A - np.outer(sub.B[:, 0], sub.C[0]))))
            coeffs = shifted[::-1] - char[::-1] + d * char[::-1]
            out.a[i, j] = reduce(Poly(coeffs), Poly(char[::-1].copy()))
    return out
