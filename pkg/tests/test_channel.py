import numpy as np
import pytest

from taskfuse import adversary as adv
from taskfuse import channel as ch


def make_state(H, p, C_z, P_N, positions=None):
    H = np.asarray(H, dtype=complex)
    p = np.asarray(p, dtype=float)
    if positions is None:
        positions = np.full(H.shape[1], 100.0)
    return ch.ChannelState(H=H, p=p, P_max=p, C_z=np.asarray(C_z, dtype=complex),
                           P_N=P_N, positions=positions)


def random_state(seed, Q=4, NR=6, P_N=5e-5):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(100, 1000, Q)
    H = ch.sample_channels(Q, NR, pos, seed=seed)
    p = np.full(Q, 1e-4)
    C = adv.ideal_covariance(P_N, NR).C_z
    return make_state(H, p, C, P_N, pos)


class TestPathLossAndSampling:
    def test_path_loss_at_reference(self):
        assert ch.path_loss(100.0) == pytest.approx(1.0)

    def test_path_loss_at_1km(self):
        assert ch.path_loss(1000.0) == pytest.approx(10.0 ** -3.5)

    def test_nonpositive_distance_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            ch.path_loss(np.array([100.0, 0.0]))

    def test_same_seed_identical(self):
        pos = np.array([150.0, 700.0])
        a = ch.sample_channels(2, 4, pos, seed=9)
        b = ch.sample_channels(2, 4, pos, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_mean_channel_energy_tracks_path_loss(self):
        # Monte-Carlo oracle: E ||h||^2 = N_R * PL(d) within 5%
        NR = 8
        pos = np.full(16, 100.0)
        acc = []
        for seed in range(150):
            H = ch.sample_channels(16, NR, pos, seed=seed)
            acc.append(np.mean(np.sum(np.abs(H) ** 2, axis=0)))
        assert abs(np.mean(acc) / NR - 1.0) < 0.05


class TestSicOrder:
    def test_spec_example(self):
        # ||h||^2 = [3, 1, 2] with equal powers -> decode order (1, 2, 0)
        H = np.diag([np.sqrt(3.0), 1.0, np.sqrt(2.0)]).astype(complex)
        p = np.ones(3)
        np.testing.assert_array_equal(ch.sic_order(H, p), [1, 2, 0])

    def test_single_user(self):
        H = np.array([[1.0 + 1j]])
        np.testing.assert_array_equal(ch.sic_order(H, np.array([2.0])), [0])

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(4)
        H = rng.standard_normal((5, 6)) + 1j * rng.standard_normal((5, 6))
        p = rng.uniform(0.1, 2.0, 6)
        metric = [p[q] * np.linalg.norm(H[:, q]) ** 2 for q in range(6)]
        expect = sorted(range(6), key=lambda q: metric[q])
        np.testing.assert_array_equal(ch.sic_order(H, p), expect)

    def test_ties_break_by_user_index(self):
        H = np.eye(3, dtype=complex)
        np.testing.assert_array_equal(ch.sic_order(H, np.ones(3)), [0, 1, 2])


class TestUserRate:
    def test_scalar_case_log2(self):
        st = make_state([[1.0]], [1.0], [[1.0]], 1.0)
        assert ch.user_rate(0, st) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_zero_power_zero_rate(self):
        st = make_state([[1.0, 0.5], [0.2, 1.0]], [0.0, 1.0],
                        0.5 * np.eye(2), 1.0)
        assert ch.user_rate(0, st) == 0.0

    def test_two_user_hand_assembled_inverse(self):
        # independent oracle: explicit 2x2 inversion with interference
        h0 = np.array([1.0 + 0j, 0.0])
        h1 = np.array([0.5, 1.0 + 0j])
        p = np.array([1.0, 2.0])
        C = np.array([[0.3, 0.0], [0.0, 0.4]], dtype=complex)
        st = make_state(np.stack([h0, h1], axis=1), p, C, 1.0)
        # SIC metric: p0*1 = 1 < p1*2.5 = 2.5, decode user0 first
        X0 = p[1] * np.outer(h1, h1.conj()) + C
        det = X0[0, 0] * X0[1, 1] - X0[0, 1] * X0[1, 0]
        Xinv = np.array([[X0[1, 1], -X0[0, 1]], [-X0[1, 0], X0[0, 0]]]) / det
        expect0 = np.log(1 + np.real(p[0] * h0.conj() @ Xinv @ h0))
        expect1 = np.log(1 + np.real(p[1] * h1.conj() @ np.linalg.inv(C) @ h1))
        assert ch.user_rate(0, st) == pytest.approx(expect0, rel=1e-12)
        assert ch.user_rate(1, st) == pytest.approx(expect1, rel=1e-12)


class TestSumRate:
    def test_single_user_forms_coincide(self):
        st = random_state(1, Q=1, NR=4)
        logdet, single = ch.sum_rate(st)
        assert logdet == pytest.approx(single, rel=1e-12)

    def test_zero_power_zero_rate(self):
        H = np.ones((3, 2), dtype=complex)
        st = make_state(H, [0.0, 0.0], np.eye(3) / 3, 1.0)
        logdet, single = ch.sum_rate(st)
        assert logdet == pytest.approx(0.0, abs=1e-15)
        assert single == pytest.approx(0.0, abs=1e-15)

    def test_telescoping_identity(self):
        for seed in range(5):
            st = random_state(seed)
            total = sum(ch.user_rate(q, st) for q in range(st.num_users))
            logdet, _ = ch.sum_rate(st)
            assert total == pytest.approx(logdet, rel=1e-9, abs=1e-12)


class TestMmse:
    def test_zero_rate_unit_mse(self):
        st = make_state([[1.0, 1.0], [1.0, -1.0]], [0.0, 1.0],
                        np.eye(2) * 0.5, 1.0)
        assert ch.mmse(0, st) == pytest.approx(1.0)

    def test_scalar_case(self):
        st = make_state([[1.0]], [1.0], [[1.0]], 1.0)
        assert ch.mmse(0, st) == pytest.approx(0.5, abs=1e-15)

    def test_identity_mu_exp_rate(self):
        st = random_state(7)
        for q in range(st.num_users):
            assert ch.mmse(q, st) * np.exp(ch.user_rate(q, st)) == pytest.approx(
                1.0, rel=1e-9)


class TestReportSnr:
    def test_equal_power_zero_db(self):
        H = np.array([[1.0]], dtype=complex)
        st = make_state(H, [1.0], [[1.0]], 1.0)
        assert ch.report_snr(st) == pytest.approx(0.0, abs=1e-12)

    def test_ten_times_signal_plus_10db(self):
        H = np.array([[1.0]], dtype=complex)
        a = ch.report_snr(make_state(H, [1.0], [[1.0]], 1.0))
        b = ch.report_snr(make_state(H, [10.0], [[1.0]], 1.0))
        assert b - a == pytest.approx(10.0, abs=1e-9)

    def test_zero_noise_trace_rejected(self):
        with pytest.raises(ValueError, match="trace"):
            st = make_state([[1.0]], [1.0], [[1e-30]], 1.0)
            object.__setattr__(st, "C_z", np.array([[0.0 + 0j]]))
            ch.report_snr(st)

    def test_three_regime_run(self):
        """Regime separation as implemented: the trace-convention SNR is
        design-invariant (equal traces), the effective SNR and mean MMSE
        order ideal above worst_sum_rate, and the strongest-user attack is
        weaker than the sum-rate attack on both mean metrics."""
        for seed in (0, 1, 2):
            rng = np.random.default_rng(seed)
            Q, NR, P_N = 8, 16, 1e-4
            pos = rng.uniform(100, 1000, Q)
            H = ch.sample_channels(Q, NR, pos, seed=seed)
            p = np.full(Q, 1e-4)
            metrics = {}
            for name, design in [
                ("ideal", adv.ideal_covariance(P_N, NR)),
                ("sr", adv.solve_p1(H, p, P_N)),
                ("su", adv.solve_p2(H, p, P_N)),
            ]:
                st = make_state(H, p, design.C_z, P_N, pos)
                metrics[name] = ch.link_metrics(st)
            assert metrics["ideal"].snr_db == pytest.approx(
                metrics["sr"].snr_db, abs=1e-6)
            assert metrics["ideal"].snr_db == pytest.approx(
                metrics["su"].snr_db, abs=1e-6)
            assert metrics["ideal"].snr_eff_db > metrics["sr"].snr_eff_db
            assert np.mean(metrics["ideal"].mus) < np.mean(metrics["sr"].mus)
            assert np.mean(metrics["su"].mus) <= np.mean(metrics["sr"].mus)
            assert metrics["su"].snr_eff_db >= metrics["sr"].snr_eff_db


class TestStateInvariantsAndMonotonicity:
    def test_rejects_non_hermitian(self):
        with pytest.raises(ValueError, match="Hermitian"):
            make_state(np.eye(2), [1.0, 1.0],
                       np.array([[1.0, 0.5], [0.2, 1.0]]), 3.0)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive semidefinite"):
            make_state(np.eye(2), [1.0, 1.0], np.diag([1.0, -0.5]), 3.0)

    def test_rejects_trace_overflow(self):
        with pytest.raises(ValueError, match="budget"):
            make_state(np.eye(2), [1.0, 1.0], np.eye(2), 1.0)

    def test_rejects_power_above_cap(self):
        with pytest.raises(ValueError, match="P_max"):
            ch.ChannelState(H=np.eye(2, dtype=complex), p=np.array([2.0, 1.0]),
                            P_max=np.array([1.0, 1.0]), C_z=np.eye(2) * 0.4,
                            P_N=1.0, positions=np.array([100.0, 100.0]))

    def test_noise_scaling_monotonicity(self):
        st = random_state(11)
        for t in (1.5, 3.0):
            scaled = make_state(st.H, st.p, st.C_z * t, st.P_N * t, st.positions)
            for q in range(st.num_users):
                assert ch.user_rate(q, scaled) <= ch.user_rate(q, st) + 1e-12
                assert ch.mmse(q, scaled) >= ch.mmse(q, st) - 1e-12

    def test_unitary_invariance(self):
        st = random_state(13)
        rng = np.random.default_rng(0)
        A = rng.standard_normal((st.num_antennas, st.num_antennas)) \
            + 1j * rng.standard_normal((st.num_antennas, st.num_antennas))
        U, _ = np.linalg.qr(A)
        rot = make_state(U @ st.H, st.p, U @ st.C_z @ U.conj().T, st.P_N,
                         st.positions)
        for q in range(st.num_users):
            assert ch.user_rate(q, rot) == pytest.approx(
                ch.user_rate(q, st), rel=1e-9)
