"""Closed-loop parameterization and band-constrained H2 synthesis on rings.

The package is organized bottom-up:

``ratfun``
    Scalar/matrix rational transfer-function algebra (reduction, arithmetic,
    stability tests, H2 norms, para-Hermitian adjoint, stable/antistable
    splitting, scalar spectral factorization, state-space round trips).
``sis``
    Spatially invariant systems over the ring Z_N represented by sparse
    convolution kernels of rational matrices.
``param``
    Explicit parameterizations of all stabilized closed-loop pairs
    (Phi_x, Phi_u) for the supported plant families, the affine
    achievability residual, and the Youla bridge.
``h2``
    Reduction of the band-constrained H2 problem to model matching and the
    two solvers (exact inner-outer projection, rational-basis least squares),
    plus the unconstrained per-frequency Riccati baseline.
``apps``
    The consensus and platoon problem builders and the analytic oracle.
``realize``
    Controller implementation via the closed-loop maps, banded structured
    state-space realization, and time-domain ring simulation.
``cli``
    Batch command-line front end (synthesize / sweep / simulate /
    oracle-check) emitting JSON and CSV artifacts.
"""

__version__ = "0.1.0"
