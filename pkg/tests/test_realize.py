"""Controller implementation, banded realization, and ring simulation.

Oracles used here are independent of the code paths under test:
  * tilde-kernel algebra is rechecked entry by entry with rational equality
    against -theta_d and s theta_d - delta_d (derived by hand from the
    closed-loop identity for the first-order family at a = 0, p = 1);
  * realization blocks are compared against RatMatrix.evalm on a grid;
  * simulated trajectories are compared against the matrix exponential;
  * the Monte-Carlo energy estimate is compared against the frequency-domain
    cost from the synthesis layer.
"""

import math

import numpy as np
import pytest
import scipy.linalg

from ringsls.apps import (
    ConsensusObjective,
    PlatoonObjective,
    build_consensus,
    build_platoon,
    family_for,
)
from ringsls.h2 import assemble, solve_exact
from ringsls.param import ThetaKernel, family_first_order, phis_from_theta
from ringsls.ratfun import Poly, RationalFn, classify
from ringsls.realize import (
    ControllerImpl,
    Impulse,
    MonteCarloEstimate,
    NotAchievable,
    RealizeError,
    StepTooLarge,
    StructuredRealization,
    UnsupportedBand,
    WhiteNoise,
    ZeroInput,
    closed_loop_symbol,
    controller_taps,
    empirical_h2,
    localization_report,
    make_impl,
    network_symbol,
    simulate,
    structured_realization,
    trajectory_rows,
    write_trajectory_csv,
)
from ringsls.sis import ConvKernel, ShapeError, symbol

from helpers import rand_stable_strictly_proper

ALPHA = math.sqrt(2.0 - math.sqrt(2.0))
BETA = math.sqrt(2.0 + math.sqrt(2.0))

GRID = np.concatenate([[0.0], np.logspace(-2.0, 2.0, 31)])


def le_setup(N=7, gamma=1.0, M=1):
    obj = ConsensusObjective("local_error", gamma=gamma, N=N, M=M)
    plant, C1, g, B1 = build_consensus(obj)
    fam = family_first_order(0.0)
    prob = assemble(plant, C1, g, B1, fam, M)
    res = solve_exact(prob)
    return plant, C1, g, res


def network_symbol_oracle(impl, k, s):
    """x -> u of the diagram from the kernels alone (no state space)."""
    tx = symbol(impl.PhixTilde, k)(s)
    tu = symbol(impl.PhiuTilde, k)(s)
    return tu @ np.linalg.inv(np.eye(tx.shape[0]) - tx)


# ---------------------------------------------------------------------------
# make_impl
# ---------------------------------------------------------------------------


class TestMakeImpl:
    def test_static_example(self):
        # theta = 0, a = 0, p = 1: the diagram collapses to the static gain
        fam = family_first_order(0.0)
        phix, phiu = phis_from_theta(fam, ThetaKernel.zero(7))
        impl = make_impl(phix, phiu, p=1.0)
        assert impl.M == 0
        assert not impl.PhixTilde.entries  # identically zero kernel
        assert impl.PhiuTilde.get(0).a[0, 0].equals(RationalFn.const(-1.0))
        # K = Phiu / Phix = -1 as a transfer function
        taps = controller_taps(phix, phiu, 0.9j)
        assert abs(taps[0, 0, 0] + 1.0) < 1e-12
        assert np.max(np.abs(taps[1:])) < 1e-12

    def test_band1_optimum_tilde_entries(self):
        # PhixTilde_d = -theta_d and PhiuTilde_d = s theta_d - delta_d
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu, p=1.0)
        s = RationalFn.var()
        for d in (-1, 0, 1):
            th = res.theta_opt.kernel.get(d).a[0, 0]
            tx = impl.PhixTilde.get(d).a[0, 0]
            tu = impl.PhiuTilde.get(d).a[0, 0]
            assert tx.equals(-th)
            delta = 1.0 if d == 0 else 0.0
            assert tu.equals(s * th - delta)
            cx, cu = classify(tx), classify(tu)
            assert cx.stable and cx.strictly_proper
            assert cu.stable and cu.proper and not cu.strictly_proper

    def test_band_preserved(self):
        plant, C1, g, res = le_setup(N=9, M=2)
        impl = make_impl(res.Phix, res.Phiu)
        assert impl.M == 2
        assert impl.PhixTilde.band_size == 2
        assert impl.PhiuTilde.band_size == 2

    def test_general_shift_p(self):
        # the identity I - (s+p) Phix stays strictly proper for any p > 0
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu, p=2.5)
        sp = RationalFn(Poly([2.5, 1.0]))
        for d in (-1, 0, 1):
            want = -(sp * res.Phix.get(d).a[0, 0])
            if d == 0:
                want = RationalFn.const(1.0) + want
            assert impl.PhixTilde.get(d).a[0, 0].equals(want)
            assert classify(impl.PhixTilde.get(d).a[0, 0]).strictly_proper

    def test_diagram_equals_controller_map(self):
        # x -> u of the feedback diagram == Phiu (Phix)^{-1} per frequency
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        for k in range(7):
            for w in (0.0, 0.4, 1.3, 6.0):
                want = (symbol(res.Phiu, k)(1j * w)
                        / symbol(res.Phix, k)(1j * w))
                got = network_symbol_oracle(impl, k, 1j * w)
                assert abs(got[0, 0] - want[0, 0]) < 1e-10

    def test_not_achievable_wrong_rolloff(self):
        # (s+p) Phix -> 0 != I at high frequency
        N = 5
        phix = ConvKernel(N, {0: RationalFn([1.0], [1.0, 2.0, 1.0])})
        phiu = ConvKernel(N, {0: RationalFn([-1.0], [1.0, 1.0])})
        with pytest.raises(NotAchievable, match="identity"):
            make_impl(phix, phiu)

    def test_not_achievable_unstable(self):
        N = 5
        phix = ConvKernel(N, {0: RationalFn([1.0], [-1.0, 1.0])})
        phiu = ConvKernel(N, {0: RationalFn([-1.0], [1.0, 1.0])})
        with pytest.raises(NotAchievable, match="unstable"):
            make_impl(phix, phiu)

    def test_not_achievable_improper_control(self):
        N = 5
        phix = ConvKernel(N, {0: RationalFn([1.0], [1.0, 1.0])})
        phiu = ConvKernel(N, {0: RationalFn([0.0, 1.0], [1.0, 1.0])})
        with pytest.raises(NotAchievable, match="improper"):
            make_impl(phix, phiu)

    def test_shape_and_parameter_validation(self):
        fam = family_first_order(0.0)
        phix, phiu = phis_from_theta(fam, ThetaKernel.zero(7))
        phix5, phiu5 = phis_from_theta(fam, ThetaKernel.zero(5))
        with pytest.raises(ShapeError):
            make_impl(phix, phiu5)
        with pytest.raises(RealizeError):
            make_impl(phix, phiu, p=0.0)
        with pytest.raises(RealizeError):
            make_impl(phix, phiu, p=-1.0)

    def test_random_theta_band(self):
        rng = np.random.default_rng(11)
        fam = family_first_order(0.0)
        for trial in range(5):
            entries = {d: 0.1 * rand_stable_strictly_proper(rng, 2)
                       for d in (-2, -1, 0, 1, 2)}
            theta = ThetaKernel.from_entries(7, entries, M=2)
            phix, phiu = phis_from_theta(fam, theta)
            impl = make_impl(phix, phiu)
            assert impl.M == 2


# ---------------------------------------------------------------------------
# structured_realization
# ---------------------------------------------------------------------------


class TestStructuredRealization:
    def test_minimal_dims_band1(self):
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        real = structured_realization(impl)
        # both row families share the degree-2 denominator (s+a)(s+b)
        assert (real.xi_dim, real.zeta_dim) == (2, 2)
        assert real.dim == 4

    def test_padded_shape_band1(self):
        # hand-buildable form: denominators padded by (s+p) -> 3+3 states
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        real = structured_realization(impl, minimal=False)
        assert (real.xi_dim, real.zeta_dim) == (3, 3)
        assert real.dim == 6
        roots = np.sort(np.linalg.eigvals(real.xi_block.A).real)
        assert np.allclose(roots, np.sort([-1.0, -ALPHA, -BETA]), atol=1e-9)

    def test_reference_block_comparison(self, capsys):
        # Compare against an independently tabulated hand-built x-block for
        # this design (band-1 consensus optimum, gamma = 1).  The comparison
        # reports a flag on mismatch instead of failing: our constructed
        # block is primary, and the tabulated entries are known to carry
        # sign slips (their left column should encode the stable
        # characteristic polynomial (s+1)(s+ALPHA)(s+BETA)).
        ref_ax = np.array([
            [-(1.0 + ALPHA + BETA), 1.0, 0.0],
            [ALPHA + BETA + math.sqrt(2.0), 0.0, 1.0],
            [math.sqrt(2.0), 0.0, 0.0],
        ])
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        real = structured_realization(impl, minimal=False)
        ours = real.xi_block.A
        stable_poly = Poly.from_roots([-1.0, -ALPHA, -BETA])
        ours_poly = np.poly(ours)[::-1]  # ascending
        assert np.allclose(ours_poly / ours_poly[-1], stable_poly.c,
                           atol=1e-9)
        if not np.allclose(ours, ref_ax, atol=1e-9):
            mism = np.max(np.abs(ours - ref_ax))
            print(f"REFERENCE-REALIZATION FLAG: tabulated x-block differs "
                  f"from the constructed one (max entry diff {mism:.3f}); "
                  f"rows 2-3 of the tabulated first column are sign-flipped "
                  f"relative to the stable characteristic polynomial.")
        captured = capsys.readouterr()
        assert "REFERENCE-REALIZATION FLAG" in captured.out

    def test_blocks_match_kernels_on_grid(self):
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        for minimal in (True, False):
            real = structured_realization(impl, minimal=minimal)
            for blk, kern in ((real.xi_block, impl.PhixTilde),
                              (real.zeta_block, impl.PhiuTilde)):
                row = [kern.get(d).a[0, 0] for d in (-1, 0, 1)]
                for w in GRID:
                    s = 1j * w
                    if blk.n:
                        resp = blk.C @ np.linalg.solve(
                            s * np.eye(blk.n) - blk.A,
                            blk.B.astype(complex)) + blk.D
                    else:
                        resp = blk.D.astype(complex)
                    want = np.array([[g_(s) for g_ in row]])
                    assert np.max(np.abs(resp - want)) < 1e-8

    def test_network_symbol_matches_diagram(self):
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        real = structured_realization(impl)
        for k in range(7):
            for w in (0.0, 0.7, 3.0, 40.0):
                got = network_symbol(real, k, 1j * w)
                want = network_symbol_oracle(impl, k, 1j * w)
                assert np.max(np.abs(got - want)) < 1e-9

    def test_closed_loop_recovers_phix(self):
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        real = structured_realization(impl)
        for k in range(7):
            for w in GRID[::6]:
                got = closed_loop_symbol(plant, real, k, 1j * w)
                want = symbol(res.Phix, k)(1j * w)
                assert np.max(np.abs(got - want)) < 1e-6

    def test_static_controller_zero_states(self):
        fam = family_first_order(0.0)
        phix, phiu = phis_from_theta(fam, ThetaKernel.zero(7))
        real = structured_realization(make_impl(phix, phiu))
        assert real.dim == 0
        assert np.allclose(real.D_loc[0], [[-1.0]])
        assert abs(network_symbol(real, 2, 0.5j)[0, 0] + 1.0) < 1e-12

    def test_unsupported_band(self):
        rng = np.random.default_rng(3)
        fam = family_first_order(0.0)
        entries = {d: 0.05 * rand_stable_strictly_proper(rng, 2)
                   for d in range(-4, 5)}
        theta = ThetaKernel.from_entries(11, entries, M=4)
        phix, phiu = phis_from_theta(fam, theta)
        impl = make_impl(phix, phiu)
        with pytest.raises(UnsupportedBand):
            structured_realization(impl)

    def test_json_roundtrip(self):
        plant, C1, g, res = le_setup()
        impl = make_impl(res.Phix, res.Phiu)
        real = structured_realization(impl)
        back = StructuredRealization.from_json(real.to_json())
        assert back.N == real.N and back.M == real.M
        assert back.dim == real.dim
        for d in real.offsets:
            assert np.array_equal(back.A_loc[d], real.A_loc[d])
            assert np.array_equal(back.B_loc[d], real.B_loc[d])
            assert np.array_equal(back.C_loc[d], real.C_loc[d])
            assert np.array_equal(back.D_loc[d], real.D_loc[d])
        with pytest.raises(RealizeError):
            StructuredRealization.from_json({"kind": "other"})

    def test_platoon_realization(self):
        obj = PlatoonObjective("local_error_position", gamma=1.0, N=7, M=1)
        plant, C1, g, B1 = build_platoon(obj)
        fam = family_for(obj)
        res = solve_exact(assemble(plant, C1, g, B1, fam, 1))
        impl = make_impl(res.Phix, res.Phiu)
        assert impl.state_dim == 2 and impl.input_dim == 1
        real = structured_realization(impl)
        err = 0.0
        for k in range(7):
            for w in (0.0, 0.8, 5.0):
                got = closed_loop_symbol(plant, real, k, 1j * w, B1=B1)
                want = symbol(res.Phix, k)(1j * w) @ np.atleast_2d(B1)
                err = max(err, float(np.max(np.abs(got - want))))
        assert err < 1e-10

    def test_controller_dense_beyond_band(self):
        # the kernels are banded but K = Phiu (Phix)^{-1} itself is not
        plant, C1, g, res = le_setup()
        taps = controller_taps(res.Phix, res.Phiu, 0.7j)
        N = 7
        for dist in (2, 3):
            assert abs(taps[dist, 0, 0]) > 1e-3
            assert abs(taps[N - dist, 0, 0]) > 1e-3
        # while the implementation kernels stop at the band
        impl = make_impl(res.Phix, res.Phiu)
        assert impl.PhixTilde.band_size == 1
        assert impl.PhiuTilde.band_size == 1


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def le_sim():
    plant, C1, g, res = le_setup(N=11)
    impl = make_impl(res.Phix, res.Phiu)
    real = structured_realization(impl)
    return plant, C1, g, res, real


class TestSimulate:
    def test_rk4_matches_matrix_exponential(self, le_sim):
        # independently assemble the closed loop and propagate with expm
        plant, C1, g, res, real = le_sim
        N = plant.N
        a = 0.0
        A_ring = a * np.eye(N)
        B2_ring = np.eye(N)
        dim = real.dim
        AL = np.zeros((N * dim, N * dim))
        BL = np.zeros((N * dim, N))
        CL = np.zeros((N, N * dim))
        DL = np.zeros((N, N))
        for d in real.offsets:
            for m in range(N):
                j = (m - d) % N
                AL[m * dim:(m + 1) * dim, j * dim:(j + 1) * dim] += \
                    real.A_loc[d]
                BL[m * dim:(m + 1) * dim, j:j + 1] += real.B_loc[d]
                CL[m:m + 1, j * dim:(j + 1) * dim] += real.C_loc[d]
                DL[m, j] += real.D_loc[d][0, 0]
        Acl = np.block([[A_ring + B2_ring @ DL, B2_ring @ CL],
                        [BL, AL]])
        x0 = np.zeros(N + N * dim)
        x0[4] = 1.0
        out = simulate(plant, real, Impulse(site=4), T=1.0)
        tend = out.t[-1]
        ref = scipy.linalg.expm(Acl * tend) @ x0
        got = np.concatenate([out.x[-1].ravel(), out.psi[-1].ravel()])
        assert np.max(np.abs(got - ref)) < 1e-9

    def test_impulse_localization(self, le_sim):
        plant, C1, g, res, real = le_sim
        out = simulate(plant, real, Impulse(site=5), T=30.0)
        rep = localization_report(out, 5, 1)
        assert rep["max_beyond_band"] <= 1e-10
        assert rep["max_within_band"] > 1e-2
        assert set(rep["max_by_distance"]) == set(range(6))

    def test_impulse_localization_band2(self):
        plant, C1, g, res = le_setup(N=11, M=2)
        impl = make_impl(res.Phix, res.Phiu)
        out = simulate(plant, impl, Impulse(site=2), T=30.0)
        rep = localization_report(out, 2, 2)
        assert rep["max_beyond_band"] <= 1e-10

    def test_zero_input_decay(self, le_sim):
        plant, C1, g, res, real = le_sim
        out = simulate(plant, real, ZeroInput(seed=9), T=40.0)
        assert float(np.abs(out.psi[0]).max()) > 0.1  # random start
        assert float(np.abs(out.x[-1]).max()) < 1e-8
        assert float(np.abs(out.psi[-1]).max()) < 1e-8

    def test_white_noise_deterministic(self, le_sim):
        plant, C1, g, res, real = le_sim
        a = simulate(plant, real, WhiteNoise(seed=3), T=2.0)
        b = simulate(plant, real, WhiteNoise(seed=3), T=2.0)
        c = simulate(plant, real, WhiteNoise(seed=4), T=2.0)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)
        assert not np.array_equal(a.x, c.x)
        assert a.energy > 0.0 and not a.weighted

    def test_weighted_energy(self, le_sim):
        plant, C1, g, res, real = le_sim
        D12 = ConvKernel(plant.N, {0: g})
        out = simulate(plant, real, WhiteNoise(seed=3), T=2.0,
                       C1=C1, D12=D12)
        assert out.weighted and out.energy > 0.0

    def test_step_too_large(self, le_sim):
        plant, C1, g, res, real = le_sim
        with pytest.raises(StepTooLarge):
            simulate(plant, real, Impulse(site=0), T=400.0, dt=5.0)

    def test_input_validation(self, le_sim):
        plant, C1, g, res, real = le_sim
        with pytest.raises(RealizeError):
            simulate(plant, real, "boom", T=1.0)
        with pytest.raises(RealizeError):
            simulate(plant, real, Impulse(channel=3), T=1.0)
        with pytest.raises(RealizeError):
            simulate(plant, real, Impulse(), T=-1.0)
        plant5, _, _, res5 = le_setup(N=5)
        with pytest.raises(ShapeError):
            simulate(plant5, real, Impulse(), T=1.0)

    def test_trajectory_csv(self, tmp_path, le_sim):
        plant, C1, g, res, real = le_sim
        out = simulate(plant, real, WhiteNoise(seed=12), T=0.5)
        header, rows = trajectory_rows(out)
        assert header[:2] == ["t", "site"]
        assert header[2:] == (["x0", "u0"]
                              + [f"psi{i}" for i in range(real.dim)])
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_trajectory_csv(out, p1)
        write_trajectory_csv(
            simulate(plant, real, WhiteNoise(seed=12), T=0.5), p2)
        assert p1.read_bytes() == p2.read_bytes()
        lines = p1.read_text().splitlines()
        assert len(lines) == 1 + out.x.shape[0] * plant.N

    def test_empirical_h2_quick(self, le_sim):
        plant, C1, g, res, real = le_sim
        D12 = ConvKernel(plant.N, {0: g})
        mc = empirical_h2(plant, real, C1, D12, runs=40, T=30.0,
                          burn_in=6.0, seed=21)
        assert isinstance(mc, MonteCarloEstimate)
        assert mc.runs == 40
        rel = abs(mc.estimate - res.full_cost) / res.full_cost
        assert rel < 0.12
        assert 0.0 < mc.std_error < 0.1 * mc.estimate
        again = empirical_h2(plant, real, C1, D12, runs=40, T=30.0,
                             burn_in=6.0, seed=21)
        assert again.estimate == mc.estimate

    def test_empirical_h2_validation(self, le_sim):
        plant, C1, g, res, real = le_sim
        D12 = ConvKernel(plant.N, {0: g})
        with pytest.raises(RealizeError):
            empirical_h2(plant, real, C1, D12, runs=0)
        with pytest.raises(RealizeError):
            empirical_h2(plant, real, C1, D12, runs=2, T=5.0, burn_in=5.0)
