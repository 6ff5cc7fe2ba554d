import numpy as np
import pytest

from gfnvi.evaluate import (
    STATE_DP_CAP,
    TRAJECTORY_ENUM_CAP,
    EnumerationOracle,
    enumerate_trajectories,
    expected_log_weight,
    is_marginal_log_likelihood,
    log_q_terminal_single,
    tv_distance,
)
from gfnvi.nnet import MlpSpec, ParameterStore
from gfnvi.policy import BackwardPolicy, ForwardPolicy, sample_forward_batch
from gfnvi.statespace import all_terminal_bits
from gfnvi.targets import IsingTarget, TabularTarget


def make_setup(dim, hidden=(4,), backward="uniform", seed=0, child_logits=False):
    fwd_spec = MlpSpec(dim, hidden, 2 * dim)
    sizes = {"phi": fwd_spec.n_params, "psi": 1}
    bwd_spec = None
    if backward == "learned":
        bwd_spec = MlpSpec(dim, hidden, dim)
        sizes["theta"] = bwd_spec.n_params
    store = ParameterStore(sizes)
    if seed is not None:
        rng = np.random.default_rng(seed)
        for name in store.names:
            if name != "psi":
                store.view(name)[:] = rng.normal(scale=0.5, size=store.view(name).size)
    fwd = ForwardPolicy(dim, fwd_spec, child_logits=child_logits)
    if backward == "learned":
        bwd = BackwardPolicy(dim, mode="learned", spec=bwd_spec, slice_name="theta")
    else:
        bwd = BackwardPolicy(dim)
    return store, fwd, bwd


def random_target(dim, seed):
    return TabularTarget(dim, np.random.default_rng(seed).normal(size=1 << dim))


def quarter_three_quarter():
    """One-bit sampler putting mass (1/4, 3/4), matching rewards (1, 3)."""
    spec = MlpSpec(1, (), 2)
    store = ParameterStore({"phi": spec.n_params, "psi": 1})
    store.view("phi")[3] = np.log(3.0)  # output bias of the one-bit head
    fwd = ForwardPolicy(1, spec)
    bwd = BackwardPolicy(1)
    target = TabularTarget(1, np.log([1.0, 3.0]))
    return store, fwd, bwd, target


def central_difference(f, params, i, h=1e-6):
    params[i] += h
    hi = f()
    params[i] -= 2 * h
    lo = f()
    params[i] += h
    return (hi - lo) / (2 * h)


class TestTvDistance:
    def test_pins(self):
        assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
        assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert tv_distance([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.25)


class TestOracleStructure:
    def test_dimension_cap(self):
        with pytest.raises(ValueError):
            EnumerationOracle(STATE_DP_CAP + 1)

    def test_edge_and_state_counts(self):
        for dim in (1, 2, 4):
            o = EnumerationOracle(dim)
            assert o.numeric.shape == (3**dim, dim)
            assert o.edge_parent.size == 2 * dim * 3 ** (dim - 1)
            assert o.terminal_state_idx.size == 1 << dim

    def test_reach_probabilities_sum_to_one_per_level(self):
        store, fwd, bwd = make_setup(3, seed=1)
        o = EnumerationOracle(3)
        reach = np.exp(o.reach_log_probs(store, fwd))
        for k in range(4):
            assert reach[o.level == k].sum() == pytest.approx(1.0, rel=1e-12)

    def test_backward_visit_probabilities_sum_to_one_per_level(self):
        store, fwd, bwd = make_setup(3, backward="learned", seed=2)
        t = random_target(3, 3)
        o = EnumerationOracle(3)
        log_pi = np.log(t.probabilities())
        lm = np.exp(o.backward_visit_log_probs(store, bwd, log_pi))
        for k in range(4):
            assert lm[o.level == k].sum() == pytest.approx(1.0, rel=1e-12)


class TestTerminalMarginals:
    def test_uniform_policy_is_uniform(self):
        for dim in (3, 4):
            store, fwd, bwd = make_setup(dim, seed=None)
            got = EnumerationOracle(dim).terminal_log_q(store, fwd)
            np.testing.assert_allclose(got, -dim * np.log(2.0), rtol=1e-14)

    @pytest.mark.parametrize("child_logits", [False, True])
    def test_dp_routes_agree(self, child_logits):
        # Full-state DP vs the subset DP that never builds the 3**D table.
        dim = 4
        store, fwd, bwd = make_setup(dim, seed=4, child_logits=child_logits)
        table = EnumerationOracle(dim).terminal_log_q(store, fwd)
        bits = all_terminal_bits(dim)
        weights = 1 << np.arange(dim)
        for i in (0, 3, 7, 11, 15):
            single = log_q_terminal_single(store, fwd, bits[i])
            assert table[bits[i] @ weights] == pytest.approx(single, rel=1e-12)

    def test_dp_agrees_with_trajectory_sum(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, seed=5)
        table = EnumerationOracle(dim).terminal_log_q(store, fwd)
        batch = enumerate_trajectories(store, fwd, bwd, None, dim)
        idx = batch.terminal_bits() @ (1 << np.arange(dim))
        direct = np.full(1 << dim, -np.inf)
        np.logaddexp.at(direct, idx, batch.log_q)
        np.testing.assert_allclose(table, direct, rtol=1e-12)

    def test_marginal_normalizes(self):
        store, fwd, bwd = make_setup(4, seed=6)
        table = EnumerationOracle(4).terminal_log_q(store, fwd)
        assert np.logaddexp.reduce(table) == pytest.approx(0.0, abs=1e-12)


class TestDivergences:
    def test_matched_one_bit_sampler(self):
        store, fwd, bwd, target = quarter_three_quarter()
        report = EnumerationOracle(1).divergences(store, fwd, bwd, target)
        assert report.log_z == pytest.approx(np.log(4.0), rel=1e-15)
        assert report.kl_qp == pytest.approx(0.0, abs=1e-14)
        assert report.kl_pq == pytest.approx(0.0, abs=1e-14)
        assert report.tv == pytest.approx(0.0, abs=1e-15)
        assert report.mean_log_weight == pytest.approx(np.log(4.0), rel=1e-14)
        assert report.gap == pytest.approx(0.0, abs=1e-14)

    def test_uniform_everything_has_zero_divergence(self):
        dim = 4
        store, fwd, bwd = make_setup(dim, seed=None)
        target = TabularTarget(dim, np.zeros(1 << dim))
        report = EnumerationOracle(dim).divergences(store, fwd, bwd, target)
        assert report.kl_qp == pytest.approx(0.0, abs=1e-13)
        assert report.kl_pq == pytest.approx(0.0, abs=1e-13)
        assert report.tv == pytest.approx(0.0, abs=1e-14)
        assert report.mean_log_weight == pytest.approx(dim * np.log(2.0), rel=1e-14)

    @pytest.mark.parametrize("backward", ["uniform", "learned"])
    def test_edge_dp_matches_trajectory_sums(self, backward):
        dim = 3
        store, fwd, bwd = make_setup(dim, backward=backward, seed=7)
        target = random_target(dim, 8)
        report = EnumerationOracle(dim).divergences(store, fwd, bwd, target)

        batch = enumerate_trajectories(store, fwd, bwd, target, dim)
        q = np.exp(batch.log_q)
        log_z = np.logaddexp.reduce(
            target.log_rewards_numeric(2.0 * all_terminal_bits(dim) - 1.0)
        )
        p = np.exp(batch.log_r - log_z + batch.log_pb)
        logw = batch.log_weight

        assert q.sum() == pytest.approx(1.0, rel=1e-12)
        assert p.sum() == pytest.approx(1.0, rel=1e-12)
        assert report.log_z == pytest.approx(log_z, rel=1e-13)
        assert report.mean_log_weight == pytest.approx(float(q @ logw), rel=1e-12)
        assert report.kl_qp == pytest.approx(log_z - float(q @ logw), rel=1e-12)
        assert report.kl_pq == pytest.approx(float(p @ (logw - log_z)), rel=1e-12)

        idx = batch.terminal_bits() @ (1 << np.arange(dim))
        q_term = np.zeros(1 << dim)
        np.add.at(q_term, idx, q)
        assert report.tv == pytest.approx(
            tv_distance(q_term, target.probabilities()), rel=1e-12
        )

    def test_gap_equals_forward_kl_by_construction(self):
        store, fwd, bwd = make_setup(3, seed=9)
        report = EnumerationOracle(3).divergences(store, fwd, bwd, random_target(3, 10))
        assert report.gap == report.kl_qp


class TestFlows:
    def test_two_flow_routes_agree(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, seed=11)
        o = EnumerationOracle(dim)
        psi = 0.37
        a = o.exact_flows(store, fwd, psi)
        b = o.flows_by_trajectory_sum(store, fwd, bwd, psi)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_root_and_level_totals(self):
        dim = 4
        store, fwd, bwd = make_setup(dim, seed=12)
        o = EnumerationOracle(dim)
        psi = -1.25
        flows = o.exact_flows(store, fwd, psi)
        assert flows[0] == pytest.approx(np.exp(psi), rel=1e-14)
        for k in range(dim + 1):
            assert flows[o.level == k].sum() == pytest.approx(np.exp(psi), rel=1e-12)


class TestExactGradients:
    def test_forward_measure_gradient_is_twice_kl_qp_slope(self):
        # Holds for any flow scalar, not only the matched one.
        dim = 3
        store, fwd, bwd = make_setup(dim, seed=13)
        target = random_target(dim, 14)
        o = EnumerationOracle(dim)
        out = o.expected_tb_gradient(store, fwd, bwd, target, psi=0.3)
        phi = store.view("phi")
        kl = lambda: o.divergences(store, fwd, bwd, target).kl_qp
        for i in np.random.default_rng(15).integers(0, phi.size, size=8):
            slope = central_difference(kl, phi, i)
            start, _ = store.bounds("phi")
            assert out.gradient[start + i] == pytest.approx(2 * slope, rel=2e-5, abs=1e-9)

    def test_backward_measure_gradient_is_twice_kl_pq_slope(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, backward="learned", seed=16)
        target = random_target(dim, 17)
        o = EnumerationOracle(dim)
        out = o.expected_tb_gradient(store, fwd, bwd, target, psi=-0.7, measure="backward")
        theta = store.view("theta")
        kl = lambda: o.divergences(store, fwd, bwd, target).kl_pq
        start, _ = store.bounds("theta")
        for i in np.random.default_rng(18).integers(0, theta.size, size=8):
            slope = central_difference(kl, theta, i)
            assert out.gradient[start + i] == pytest.approx(2 * slope, rel=2e-5, abs=1e-9)

    def test_unknown_measure(self):
        store, fwd, bwd = make_setup(2, seed=19)
        with pytest.raises(ValueError):
            EnumerationOracle(2).expected_tb_gradient(
                store, fwd, bwd, random_target(2, 20), psi=0.0, measure="sideways"
            )

    def test_flow_slot_is_twice_the_mean_residual(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, seed=21)
        target = random_target(dim, 22)
        o = EnumerationOracle(dim)
        psi = 0.9
        out = o.expected_tb_gradient(store, fwd, bwd, target, psi=psi)
        report = o.divergences(store, fwd, bwd, target)
        start, _ = store.bounds("psi")
        assert out.gradient[start] == pytest.approx(
            2 * (psi - report.mean_log_weight), rel=1e-10
        )

    def test_exact_rkl_gradient_is_kl_qp_slope(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, seed=23)
        target = random_target(dim, 24)
        o = EnumerationOracle(dim)
        out = o.exact_rkl_gradient(store, fwd, bwd, target)
        phi = store.view("phi")
        kl = lambda: o.divergences(store, fwd, bwd, target).kl_qp
        start, _ = store.bounds("phi")
        for i in np.random.default_rng(25).integers(0, phi.size, size=8):
            slope = central_difference(kl, phi, i)
            assert out.gradient[start + i] == pytest.approx(slope, rel=2e-5, abs=1e-9)

    def test_exact_fkl_gradient_is_kl_pq_slope(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, backward="learned", seed=26)
        target = random_target(dim, 27)
        o = EnumerationOracle(dim)
        out = o.exact_fkl_gradient(store, fwd, bwd, target)
        kl = lambda: o.divergences(store, fwd, bwd, target).kl_pq
        rng = np.random.default_rng(28)
        for name in ("phi", "theta"):
            view = store.view(name)
            start, _ = store.bounds(name)
            for i in rng.integers(0, view.size, size=6):
                slope = central_difference(kl, view, i)
                assert out.gradient[start + i] == pytest.approx(slope, rel=2e-5, abs=1e-9)

    def test_monte_carlo_loss_approaches_exact_loss(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, seed=29)
        target = random_target(dim, 30)
        o = EnumerationOracle(dim)
        psi = 0.1
        exact = o.expected_tb_gradient(store, fwd, bwd, target, psi=psi)
        batch = sample_forward_batch(
            store, fwd, bwd, target, 4000, rng=np.random.default_rng(31)
        )
        per_sample = (psi - batch.log_weight) ** 2
        se = per_sample.std(ddof=1) / np.sqrt(per_sample.size)
        assert abs(per_sample.mean() - exact.loss) < 4 * se


class TestTrajectoryEnumeration:
    def test_cap(self):
        store, fwd, bwd = make_setup(2, seed=None)
        with pytest.raises(ValueError):
            enumerate_trajectories(store, fwd, bwd, None, TRAJECTORY_ENUM_CAP + 1)

    def test_counts_and_normalization(self):
        dim = 3
        store, fwd, bwd = make_setup(dim, seed=32)
        batch = enumerate_trajectories(store, fwd, bwd, None, dim)
        assert batch.size == 6 * 8
        assert np.logaddexp.reduce(batch.log_q) == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_array_equal(batch.log_r, 0.0)

    def test_rewards_filled_from_target(self):
        dim = 2
        store, fwd, bwd = make_setup(dim, seed=33)
        target = random_target(dim, 34)
        batch = enumerate_trajectories(store, fwd, bwd, target, dim)
        np.testing.assert_allclose(
            batch.log_r, target.log_rewards_numeric(batch.terminal_numeric())
        )


class TestMarginalLikelihoodEstimator:
    def test_uniform_policies_need_one_path(self):
        dim = 5
        store, fwd, bwd = make_setup(dim, seed=None)
        bits = all_terminal_bits(dim)[[0, 9, 31]]
        got = is_marginal_log_likelihood(
            store, fwd, bwd, bits, n_paths=1, rng=np.random.default_rng(35)
        )
        np.testing.assert_allclose(got, -dim * np.log(2.0), rtol=1e-14)

    def test_single_bit_is_exact(self):
        store, fwd, bwd, _ = quarter_three_quarter()
        got = is_marginal_log_likelihood(
            store, fwd, bwd, np.array([[0], [1]]), n_paths=3,
            rng=np.random.default_rng(36),
        )
        np.testing.assert_allclose(got, np.log([0.25, 0.75]), rtol=1e-14)

    def test_converges_to_exact_marginal(self):
        dim = 4
        store, fwd, bwd = make_setup(dim, seed=37)
        table = EnumerationOracle(dim).terminal_log_q(store, fwd)
        bits = all_terminal_bits(dim)
        est = is_marginal_log_likelihood(
            store, fwd, bwd, bits, n_paths=4000, rng=np.random.default_rng(38), chunk=5
        )
        exact = table[bits @ (1 << np.arange(dim))]
        assert np.abs(est - exact).max() < 0.02


class TestExpectedLogWeight:
    def test_never_exceeds_log_z(self):
        dim = 4
        target = random_target(dim, 39)
        o = EnumerationOracle(dim)
        log_z = o.target_log_z(target)
        for seed in range(4):
            store, fwd, bwd = make_setup(dim, seed=seed)
            mean, se = expected_log_weight(
                store, fwd, bwd, target, 2000, rng=np.random.default_rng(40 + seed)
            )
            assert mean <= log_z + 3 * se

    def test_matched_sampler_has_zero_variance(self):
        store, fwd, bwd, target = quarter_three_quarter()
        mean, se = expected_log_weight(
            store, fwd, bwd, target, 64, rng=np.random.default_rng(41)
        )
        assert mean == pytest.approx(np.log(4.0), rel=1e-14)
        assert se == pytest.approx(0.0, abs=1e-14)


class TestIsingOracle:
    def test_free_field_log_z(self):
        t = IsingTarget.torus(3, 0.0)
        o = EnumerationOracle(9)
        assert o.target_log_z(t) == pytest.approx(9 * np.log(2.0), rel=1e-12)
        assert o.target_log_z(t) == pytest.approx(t.log_z(), rel=1e-12)

    def test_uniform_sampler_on_free_field(self):
        store, fwd, bwd = make_setup(9, seed=None)
        report = EnumerationOracle(9).divergences(store, fwd, bwd, IsingTarget.torus(3, 0.0))
        assert report.kl_qp == pytest.approx(0.0, abs=1e-10)
        assert report.tv == pytest.approx(0.0, abs=1e-12)
