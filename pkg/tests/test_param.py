"""Tests for the closed-loop parameterization families and the membership
oracle (the affine-constraint residual)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringsls.ratfun import Poly, RatMatrix, RationalFn, classify
from ringsls.sis import ConvKernel, apply_basis
from ringsls.param import (
    InvalidParameter,
    NotControllable,
    ParamFamily,
    PlantSpec,
    ThetaKernel,
    UnsupportedPlant,
    WrongFamily,
    affine_residual,
    canonical_transform,
    coupled_parameterization,
    family_first_order,
    family_nth_order,
    family_varying_1st,
    family_varying_nth,
    phis_from_theta,
    youla_bridge,
    youla_closed_loops,
    youla_inverse,
)

from helpers import rand_stable_strictly_proper

S = RationalFn.var()

PLATOON_A = np.array([[1.0, -1.0], [1.0, -1.0]])
PLATOON_B2 = np.array([[1.0], [0.0]])


def rand_theta_kernel(rng, N, fam, M):
    m, w = fam.theta_dims()
    offs = rng.choice(2 * M + 1, size=min(2 * M + 1, 3), replace=False) - M
    entries = {int(d): RatMatrix(
        [[rand_stable_strictly_proper(rng, 2) for _ in range(w)]
         for _ in range(m)]) for d in offs}
    return ThetaKernel(ConvKernel(N, entries, block_dims=(m, w)), M)


# -- first-order family -------------------------------------------------------

def test_first_order_integrator_family():
    fam = family_first_order(0.0, 1.0)
    assert fam.chi.equals(S / (S + 1))
    assert fam.eta.a[0, 0].equals(-1 / (S + 1))
    assert fam.F.a[0, 0].equals(1 / (S + 1))
    assert fam.L.a[0, 0].equals(1 / (S + 1))


def test_first_order_zero_theta_closed_loops():
    fam = family_first_order(0.0, 1.0)
    phix, phiu = phis_from_theta(fam, ThetaKernel.zero(5))
    assert phix.get(0).a[0, 0].equals(1 / (S + 1))
    assert phiu.get(0).a[0, 0].equals(-1 / (S + 1))
    plant = PlantSpec.si_invariant_1st(0.0, 5)
    assert affine_residual(plant, phix, phiu).is_zero


def test_first_order_interpolation_point():
    fam = family_first_order(1.0, 2.0)
    theta = ThetaKernel.from_entries(5, {0: 1 / (S + 3)})
    _, phiu = phis_from_theta(fam, theta)
    assert phiu.get(0).a[0, 0](1.0) == pytest.approx(-1.0, abs=1e-12)


def test_first_order_rejects_stable_pole_and_bad_p():
    with pytest.raises(WrongFamily):
        family_first_order(-0.5)
    with pytest.raises(InvalidParameter):
        family_first_order(1.0, p=0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_interpolation_constraint_all_theta(seed):
    rng = np.random.default_rng(seed)
    a = float(rng.uniform(0.0, 3.0))
    p = float(rng.uniform(0.2, 3.0))
    fam = family_first_order(a, p)
    theta = rand_theta_kernel(rng, 9, fam, M=2)
    _, phiu = phis_from_theta(fam, theta)
    col = apply_basis(phiu, 4)
    vals = col.evalm(a)
    want = np.zeros((9, 1))
    want[4, 0] = -1.0
    assert np.allclose(vals, want, atol=1e-9)


# -- canonical transform ------------------------------------------------------

def test_canonical_transform_double_integrator_chain():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B2 = np.array([[0.0], [1.0]])
    T, Ahat, B2hat = canonical_transform(A, B2)
    assert np.allclose(Ahat, PLATOON_A)
    assert np.allclose(B2hat, PLATOON_B2)
    assert np.allclose(T @ A @ np.linalg.inv(T), Ahat)


def test_canonical_transform_identity_on_canonical():
    T, Ahat, B2hat = canonical_transform(PLATOON_A, PLATOON_B2)
    assert np.allclose(T, np.eye(2))
    assert np.allclose(Ahat, PLATOON_A)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_canonical_transform_random_template(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    B2 = rng.normal(size=(3, 1))
    T, Ahat, B2hat = canonical_transform(A, B2)
    Abar = Ahat + np.eye(3)
    assert np.allclose(Abar[1:, :], np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    assert np.allclose(B2hat, np.array([[1.0], [0.0], [0.0]]))
    assert np.allclose(T @ A @ np.linalg.inv(T), Ahat, atol=1e-8)


def test_canonical_transform_uncontrollable():
    with pytest.raises(NotControllable):
        canonical_transform(np.diag([1.0, 2.0]), np.array([[1.0], [0.0]]))


# -- nth-order family ---------------------------------------------------------

def test_platoon_family_formulas():
    fam = family_nth_order(PLATOON_A, PLATOON_B2)
    assert fam.r == 2 and fam.m == 1
    assert fam.a_coeffs == (-2.0, 1.0)
    den2 = Poly.from_roots([-1.0, -1.0]).c
    assert fam.chi.equals(RationalFn((0.0, 0.0, 1.0), den2))
    assert fam.eta.a[0, 0].equals(RationalFn((-1.0, -2.0), den2))
    assert fam.eta.a[0, 1].equals(1 / (S + 1))
    assert fam.F.a[0, 0].equals(1 / (S + 1))
    assert fam.F.a[1, 0].equals(RationalFn((1.0,), den2))
    assert fam.L.a[1, 1].equals(1 / (S + 1))
    assert fam.L.a[0, 1].is_zero


def test_nth_order_reduces_to_first_order():
    # r = 1 with A + I = [-a1]: same family as the first-order form at
    # a = -a1 - 1, p = 1.
    a1 = -3.0
    fam_n = family_nth_order(np.array([[-a1 - 1.0]]), np.array([[1.0]]))
    fam_1 = family_first_order(-a1 - 1.0, p=1.0)
    assert fam_n.chi.equals(fam_1.chi)
    assert fam_n.eta.a[0, 0].equals(fam_1.eta.a[0, 0])
    assert fam_n.F.a[0, 0].equals(fam_1.F.a[0, 0])
    assert fam_n.L.a[0, 0].equals(fam_1.L.a[0, 0])


def test_nth_order_rejects_noncanonical():
    with pytest.raises(WrongFamily):
        family_nth_order(np.array([[0.0, 1.0], [0.0, 0.0]]),
                         np.array([[0.0], [1.0]]))


# -- closed loops from theta ---------------------------------------------------

def test_zero_theta_gives_l_and_eta():
    fam = family_nth_order(PLATOON_A, PLATOON_B2)
    phix, phiu = phis_from_theta(fam, ThetaKernel.zero(7, m=1, r=2))
    assert sorted(phix.entries) == [0]
    assert sorted(phiu.entries) == [0]
    assert phix.get(0).equals(fam.L)
    assert phiu.get(0).equals(fam.eta)


def test_consensus_phix0_closed_form():
    # Optimal band-1 local-error theta at weight 1 pushed through the
    # first-order family: known closed form for the on-site state map.
    alpha = np.sqrt(2.0 - np.sqrt(2.0))
    beta = np.sqrt(2.0 + np.sqrt(2.0))
    den = 2 * (S + alpha) * (S + beta)
    theta0 = (2 * S - 2 * np.sqrt(2.0) - (S - 1) * (alpha + beta)) / den
    theta1 = (beta - alpha) * (S + 1) / (np.sqrt(2.0) * den)
    fam = family_first_order(0.0, 1.0)
    theta = ThetaKernel.from_entries(21, {-1: theta1, 0: theta0, 1: theta1})
    phix, _ = phis_from_theta(fam, theta)
    want = (2 * S + alpha + beta) / (2 * (S + alpha) * (S + beta))
    assert phix.get(0).a[0, 0].equals(want)
    assert phix.get(1).a[0, 0].equals(
        (beta - alpha) / (2 * np.sqrt(2.0) * (S + alpha) * (S + beta)))


def test_band_propagates():
    rng = np.random.default_rng(3)
    fam = family_first_order(0.5)
    theta = ThetaKernel.from_entries(
        11, {m: rand_stable_strictly_proper(rng, 1) for m in (-2, 0, 2)})
    phix, phiu = phis_from_theta(fam, theta)
    assert phix.band_size == 2 and phiu.band_size == 2


def test_phi_entries_stable_strictly_proper():
    rng = np.random.default_rng(4)
    fam = family_nth_order(PLATOON_A, PLATOON_B2)
    theta = rand_theta_kernel(rng, 9, fam, M=2)
    phix, phiu = phis_from_theta(fam, theta)
    for K in (phix, phiu):
        for blk in K.entries.values():
            for g in blk.a.ravel():
                if g.is_zero:
                    continue
                cl = classify(g)
                assert cl.stable and cl.strictly_proper


# -- affine residual -----------------------------------------------------------

def test_residual_zero_first_order():
    rng = np.random.default_rng(5)
    a, p = 1.3, 0.7
    fam = family_first_order(a, p)
    theta = rand_theta_kernel(rng, 9, fam, M=2)
    phix, phiu = phis_from_theta(fam, theta)
    plant = PlantSpec.si_invariant_1st(a, 9)
    assert affine_residual(plant, phix, phiu, p).is_zero


def test_residual_zero_nth_order():
    rng = np.random.default_rng(6)
    fam = family_nth_order(PLATOON_A, PLATOON_B2)
    theta = rand_theta_kernel(rng, 7, fam, M=1)
    phix, phiu = phis_from_theta(fam, theta)
    plant = PlantSpec.si_invariant_nth(PLATOON_A, PLATOON_B2, 7)
    assert affine_residual(plant, phix, phiu).is_zero


def test_residual_detects_infeasible_pair():
    plant = PlantSpec.si_invariant_1st(0.0, 5)
    phix = ConvKernel(5, {0: 1 / (S + 1)})
    phiu = ConvKernel(5, {}, block_dims=(1, 1))
    res = affine_residual(plant, phix, phiu)
    assert not res.is_zero
    assert res.get(0).a[0, 0].equals(S / (S + 1) - 1)


def test_residual_reference_pair_a1_p2():
    fam = family_first_order(1.0, 2.0)
    phix, phiu = phis_from_theta(fam, ThetaKernel.zero(5))
    plant = PlantSpec.si_invariant_1st(1.0, 5)
    assert affine_residual(plant, phix, phiu, p=2.0).is_zero


def test_residual_breaks_under_perturbation():
    rng = np.random.default_rng(7)
    fam = family_first_order(0.0)
    theta = rand_theta_kernel(rng, 7, fam, M=1)
    phix, phiu = phis_from_theta(fam, theta)
    bump = rand_stable_strictly_proper(rng, 1)
    phix_bad = phix + ConvKernel(7, {1: bump})
    plant = PlantSpec.si_invariant_1st(0.0, 7)
    assert not affine_residual(plant, phix_bad, phiu).is_zero


# -- varying first order --------------------------------------------------------

def test_varying_first_order_site_formulas():
    fam = family_varying_1st([-1.0, 0.0], [2.0, 1.0])
    assert fam.alpha[0].equals(RationalFn.one())
    assert fam.beta[0].is_zero
    assert fam.gamma[0].equals(1 / (S + 1))
    assert fam.alpha[1].equals(S / (S + 1))
    assert fam.beta[1].equals(-1 / (S + 1))


def test_varying_mixed_zero_theta():
    fam = family_varying_1st([-2.0, 1.0], [1.0, 1.0])
    phix, phiu = phis_from_theta(fam, None)
    assert phiu.a[0, 0].is_zero
    assert phiu.a[1, 1].equals(-2 / (S + 1))
    plant = PlantSpec.varying_1st([-2.0, 1.0], [1.0, 1.0])
    assert affine_residual(plant, phix, phiu).is_zero


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_varying_first_order_residual_random(seed):
    rng = np.random.default_rng(seed)
    N = 4
    a = rng.uniform(-2.0, 2.0, size=N)
    b = rng.uniform(0.3, 2.5, size=N) * rng.choice([-1.0, 1.0], size=N)
    fam = family_varying_1st(a, b)
    theta = RatMatrix([[rand_stable_strictly_proper(rng, 1)
                        if rng.random() < 0.5 else RationalFn.zero()
                        for _ in range(N)] for _ in range(N)])
    phix, phiu = phis_from_theta(fam, theta)
    plant = PlantSpec.varying_1st(a, b)
    assert affine_residual(plant, phix, phiu).is_zero
    for i in range(N):
        for j in range(N):
            for g in (phix.a[i, j], phiu.a[i, j]):
                if not g.is_zero:
                    cl = classify(g)
                    assert cl.stable and cl.strictly_proper


def test_varying_first_order_uncontrollable():
    with pytest.raises(NotControllable):
        family_varying_1st([1.0, 2.0], [1.0, 0.0])


# -- varying nth order -----------------------------------------------------------

def test_varying_nth_identical_sites_match_kernel_form():
    rng = np.random.default_rng(8)
    N = 3
    fam_si = family_nth_order(PLATOON_A, PLATOON_B2)
    theta = rand_theta_kernel(rng, N, fam_si, M=1)
    phix_k, phiu_k = phis_from_theta(fam_si, theta)

    fam_v = family_varying_nth([PLATOON_A] * N, [PLATOON_B2] * N)
    half = (N - 1) // 2
    blocks = {}
    for i in range(N):
        for j in range(N):
            d = ((i - j + half) % N) - half
            blk = theta.kernel.entries.get(d)
            if blk is not None:
                blocks[(i, j)] = blk
    phix_v, phiu_v = phis_from_theta(fam_v, blocks)
    assert phix_v.equals(phix_k.materialize().tm)
    assert phiu_v.shape == (N, 2 * N)
    for i in range(N):
        for j in range(N):
            d = ((i - j + half) % N) - half
            want = phiu_k.get(d)
            got = RatMatrix(phiu_v.a[i:i + 1, 2 * j:2 * j + 2])
            assert got.equals(want)


def test_varying_nth_heterogeneous_orders():
    A0 = np.array([[1.5]])          # r = 1, A + I = [2.5] => a1 = -2.5
    fam = family_varying_nth([A0, PLATOON_A],
                             [np.array([[1.0]]), PLATOON_B2])
    f0, f1 = fam.site_families
    assert f0.r == 1 and f1.r == 2
    assert f0.chi.equals(1 + (-2.5) / (S + 1))
    assert f1.chi.equals(RationalFn((0, 0, 1.0),
                                    Poly.from_roots([-1.0, -1.0]).c))
    phix, phiu = phis_from_theta(fam, None)
    assert phiu.a[0, 1].is_zero and phiu.a[1, 0].is_zero
    plant = PlantSpec.varying_nth([A0, PLATOON_A],
                                  [np.array([[1.0]]), PLATOON_B2])
    assert affine_residual(plant, phix, phiu).is_zero


def test_varying_nth_random_residual():
    rng = np.random.default_rng(9)
    A0 = np.array([[0.7]])
    B0 = np.array([[1.0]])
    fams = family_varying_nth([A0, PLATOON_A, A0],
                              [B0, PLATOON_B2, B0])
    widths = [1, 2, 1]
    blocks = {}
    for i in range(3):
        for j in range(3):
            if rng.random() < 0.6:
                blocks[(i, j)] = RatMatrix(
                    [[rand_stable_strictly_proper(rng, 1)
                      for _ in range(widths[j])]])
    phix, phiu = phis_from_theta(fams, blocks)
    plant = PlantSpec.varying_nth([A0, PLATOON_A, A0], [B0, PLATOON_B2, B0])
    assert affine_residual(plant, phix, phiu).is_zero


# -- coupled dynamics -------------------------------------------------------------

def test_coupled_stable_trivial():
    A = ConvKernel(5, {0: -1.0})
    B2 = ConvKernel.identity(5)
    plant = PlantSpec.coupled_stable(A, B2)
    theta = ConvKernel(5, {}, block_dims=(1, 1))
    phix, phiu = coupled_parameterization(plant, theta)
    assert phiu.is_zero
    assert sorted(phix.entries) == [0]
    assert phix.get(0).a[0, 0].equals(1 / (S + 1))


def test_coupled_b2_invertible_matches_first_order():
    A = ConvKernel(5, {}, block_dims=(1, 1))
    B2 = ConvKernel.identity(5)
    plant = PlantSpec.coupled_b2_invertible(A, B2)
    theta = ConvKernel(5, {}, block_dims=(1, 1))
    phix, phiu = coupled_parameterization(plant, theta, p=1.0)
    assert phix.get(0).a[0, 0].equals(1 / (S + 1))
    assert phiu.get(0).a[0, 0].equals(-1 / (S + 1))


def test_coupled_stable_banded_residual():
    rng = np.random.default_rng(10)
    N = 7
    A = ConvKernel(N, {0: -2.0, 1: 0.4, -1: 0.4})
    B2 = ConvKernel(N, {0: 1.0, 1: 0.3})
    plant = PlantSpec.coupled_stable(A, B2)
    theta = ConvKernel(N, {m: rand_stable_strictly_proper(rng, 2)
                           for m in (-1, 0, 1)})
    phix, phiu = coupled_parameterization(plant, theta)
    assert affine_residual(plant, phix, phiu).is_zero
    for blk in phix.entries.values():
        cl = classify(blk.a[0, 0])
        assert cl.stable and cl.strictly_proper


def test_coupled_b2_invertible_banded_residual():
    rng = np.random.default_rng(11)
    N = 7
    A = ConvKernel(N, {0: 0.9, 1: -0.5})
    B2 = ConvKernel(N, {0: 2.0, 1: 0.5, -1: 0.5})
    plant = PlantSpec.coupled_b2_invertible(A, B2)
    theta = ConvKernel(N, {m: rand_stable_strictly_proper(rng, 1)
                           for m in (0, 2)})
    phix, phiu = coupled_parameterization(plant, theta, p=1.3)
    assert affine_residual(plant, phix, phiu).is_zero


def test_coupled_error_paths():
    N = 5
    unstable = PlantSpec.coupled_stable(ConvKernel(N, {0: 0.5}),
                                        ConvKernel.identity(N))
    theta0 = ConvKernel(N, {}, block_dims=(1, 1))
    with pytest.raises(UnsupportedPlant):
        coupled_parameterization(unstable, theta0)
    # difference operator has a zero symbol at k=0, hence not invertible
    singular_b2 = PlantSpec.coupled_b2_invertible(
        ConvKernel(N, {0: 1.0}), ConvKernel(N, {0: 1.0, 1: -1.0}))
    with pytest.raises(UnsupportedPlant):
        coupled_parameterization(singular_b2, theta0)
    stable = PlantSpec.coupled_stable(ConvKernel(N, {0: -1.0}),
                                      ConvKernel.identity(N))
    with pytest.raises(InvalidParameter):
        coupled_parameterization(stable, ConvKernel(N, {0: 1 / (S - 1)}))


# -- Youla bridge ------------------------------------------------------------------

def test_youla_zero_q():
    a, p = 1.0, 2.0
    theta = youla_bridge(a, p, RationalFn.zero())
    assert theta.equals((a + p) / (S + p))
    phix, _ = youla_closed_loops(a, p, RationalFn.zero())
    assert phix.equals((S + 2 * p + a) / ((S + p) * (S + p)))


def test_youla_paths_agree():
    a, p = 0.0, 1.0
    Q = 1 / (S + 2)
    theta = youla_bridge(a, p, Q)
    fam = family_first_order(a, p)
    phix_t, phiu_t = phis_from_theta(
        fam, ThetaKernel.from_entries(5, {0: theta}))
    phix_q, phiu_q = youla_closed_loops(a, p, Q)
    assert phix_t.get(0).a[0, 0].equals(phix_q)
    assert phiu_t.get(0).a[0, 0].equals(phiu_q)


def test_youla_roundtrip():
    a, p = 1.7, 0.9
    Q = (3 * S + 1) / ((S + 2) * (S + 4))
    back = youla_inverse(a, p, youla_bridge(a, p, Q))
    assert back.equals(Q)


def test_youla_rejects_unstable_q():
    with pytest.raises(InvalidParameter):
        youla_bridge(1.0, 1.0, 1 / (S - 2))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_youla_equivalence_random(seed):
    rng = np.random.default_rng(seed)
    a = float(rng.uniform(0.0, 2.0))
    p = float(rng.uniform(0.3, 2.5))
    Q = rand_stable_strictly_proper(rng, 2) + float(rng.normal())
    theta = youla_bridge(a, p, Q)
    fam = family_first_order(a, p)
    phix_t, phiu_t = phis_from_theta(
        fam, ThetaKernel.from_entries(5, {0: theta}))
    phix_q, phiu_q = youla_closed_loops(a, p, Q)
    assert phix_t.get(0).a[0, 0].equals(phix_q)
    assert phiu_t.get(0).a[0, 0].equals(phiu_q)


# -- plant JSON ---------------------------------------------------------------------

def test_plant_json_roundtrip():
    plants = [
        PlantSpec.si_invariant_1st(0.5, 7),
        PlantSpec.si_invariant_nth(PLATOON_A, PLATOON_B2, 9),
        PlantSpec.varying_1st([-1.0, 0.5, 2.0], [1.0, 2.0, -1.0]),
        PlantSpec.coupled_stable(ConvKernel(5, {0: -1.0, 1: 0.2}),
                                 ConvKernel.identity(5)),
    ]
    for plant in plants:
        back = PlantSpec.from_json(plant.to_json())
        assert back.kind == plant.kind
        assert back.N == plant.N
    p2 = PlantSpec.from_json(plants[1].to_json())
    assert np.allclose(p2.data["A"], PLATOON_A)


def test_plant_si_nth_requires_controllability():
    with pytest.raises(NotControllable):
        PlantSpec.si_invariant_nth(np.diag([1.0, 2.0]),
                                   np.array([[1.0], [0.0]]), 5)
