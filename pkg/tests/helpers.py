"""Shared test utilities: independent oracles and random generators."""

import numpy as np
import scipy.integrate

from ringsls.ratfun import Poly, RationalFn, RatMatrix, reduce


def quad_h2_sq(g: RationalFn) -> float:
    """Independent H2 oracle: adaptive quadrature of |g(jw)|^2 / (2pi).

    Deliberately avoids the Lyapunov machinery under test.
    """

    def integrand(w):
        v = g.num(1j * w) / g.den(1j * w)
        return (v * np.conj(v)).real

    val, _ = scipy.integrate.quad(integrand, -np.inf, np.inf,
                                  limit=400, epsabs=1e-13, epsrel=1e-12)
    return val / (2.0 * np.pi)


def quad_h2_sq_matrix(G: RatMatrix) -> float:
    return sum(quad_h2_sq(G.a[i, j])
               for i in range(G.rows) for j in range(G.cols))


def rand_stable_strictly_proper(rng: np.random.Generator,
                                max_deg: int = 4) -> RationalFn:
    """Random stable strictly proper function built from LHP poles."""
    n = int(rng.integers(1, max_deg + 1))
    poles = []
    while len(poles) < n:
        if n - len(poles) >= 2 and rng.random() < 0.4:
            re = -rng.uniform(0.2, 3.0)
            im = rng.uniform(0.2, 3.0)
            poles += [re + 1j * im, re - 1j * im]
        else:
            poles.append(-rng.uniform(0.2, 3.0))
    den = Poly.from_roots(np.array(poles))
    num = Poly(rng.uniform(-2.0, 2.0, size=int(rng.integers(1, n + 1))))
    if num.is_zero:
        num = Poly([1.0])
    return reduce(num, den)


def rand_ratfn(rng: np.random.Generator, max_deg: int = 3) -> RationalFn:
    """Random (not necessarily stable/proper) rational function."""
    nd = int(rng.integers(0, max_deg + 1))
    dd = int(rng.integers(0, max_deg + 1))
    num = Poly(rng.uniform(-3.0, 3.0, size=nd + 1))
    den_c = rng.uniform(-3.0, 3.0, size=dd + 1)
    if abs(den_c[-1]) < 0.3:
        den_c[-1] = 0.5 if den_c[-1] >= 0 else -0.5
    return reduce(num, Poly(den_c))


def rand_const_matrix(rng, rows, cols, scale=2.0):
    return rng.uniform(-scale, scale, size=(rows, cols))
