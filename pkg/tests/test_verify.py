import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualq.data import collect_dataset, make_behavior_policy
from dualq.envs import (CategoricalEnvConfig, Classifier, block_classifier, make_categorical_env,
                        make_random_env)
from dualq.exceptions import ConfigError, DomainError
from dualq.improve import fit_control_generator
from dualq.mdp import EnvSpec, Policy, exact_action_values, exact_policy_evaluation
from dualq.verify import (coarse_action_values, conditioning_fidelity,
                          dominant_equal_variance_policy, dual_sampler, hypothesis_gap,
                          lumped_category_mdp, oracle_q_error, policy_sampler,
                          premise_violating_policy, theorem1_curve, theorem2_check, write_report)


def dirichlet_policy(S, A, seed):
    return Policy(np.random.default_rng(seed).dirichlet(np.ones(A), size=S))


def detour_env():
    """State 0 chooses between a state whose value improves with L (1) and a
    state with a fixed, slightly better one-step value (2)."""
    T = np.zeros((5, 2, 5))
    R = np.zeros((5, 2))
    T[0, 0, 1] = T[0, 1, 2] = 1.0
    T[1, :, 3] = 1.0
    R[1, 1] = 10.0
    T[2, :, 4] = 1.0
    R[2, :] = 5.2
    T[3, :, 3] = T[4, :, 4] = 1.0
    return EnvSpec(transition=T, reward=R, discount=0.5, terminal_states={3, 4})


@pytest.fixture(scope="module")
def spread():
    env, f = make_categorical_env(CategoricalEnvConfig(num_states=8, num_categories=19,
                                                       actions_per_category=4, seed=3))
    d = collect_dataset(env, make_behavior_policy(env, quality=0.0), 400, 20, seed=0)
    return env, f, d


class TestTheorem1:

    def test_single_L_is_base_value(self, small_env):
        pi = dirichlet_policy(5, 8, 0)
        rep = theorem1_curve(small_env, pi, [1])
        assert np.array_equal(rep.values[1], exact_policy_evaluation(small_env, pi))
        assert rep.monotone and rep.max_violation == 0.0

    def test_uniform_reward_is_flat(self):
        env = make_random_env(6, 5, seed=2)
        flat = EnvSpec(transition=env.transition, reward=np.full((6, 5), 0.7), discount=0.5)
        rep = theorem1_curve(flat, dirichlet_policy(6, 5, 1), [1, 2, 4, 8, 16])
        for L in rep.L_values:
            np.testing.assert_allclose(rep.values[L], rep.values[1], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_envs_monotone(self, seed):
        rng = np.random.default_rng(seed)
        S, A = int(rng.integers(5, 21)), int(rng.integers(2, 51))
        env = make_random_env(S, A, seed)
        rep = theorem1_curve(env, Policy(rng.dirichlet(np.ones(A), size=S)))
        assert rep.monotone and rep.floor_ok and rep.lemma_monotone

    def test_detour_counterexample_flagged(self):
        rep = theorem1_curve(detour_env(), Policy.uniform(5, 2))
        # closed form: V_L(0) = (1 - 2^-L) * 2.6 + 2^-L * 0.5 * 10 * (1 - 2^-L)
        for L in rep.L_values:
            h = 0.5 ** L
            assert rep.values[L][0] == pytest.approx((1 - h) * 2.6 + h * 5 * (1 - h), abs=1e-9)
        assert not rep.monotone
        assert rep.max_violation == pytest.approx(2.8875 - 2.73046875, abs=1e-9)
        assert [v[:2] for v in rep.violations] == [(2, 4), (4, 8), (8, 16)]
        assert rep.lemma_monotone and rep.floor_ok

    @pytest.mark.parametrize("Ls", [[], [0, 1], [4, 2]])
    def test_bad_Ls(self, small_env, Ls):
        with pytest.raises(ConfigError):
            theorem1_curve(small_env, Policy.uniform(5, 8), Ls)

    def test_rows(self, small_env):
        rep = theorem1_curve(small_env, Policy.uniform(5, 8), [1, 2])
        assert len(rep.to_rows()) == 10


class TestTheorem2:

    def test_identical_samplers(self, small_env):
        pi = dirichlet_policy(5, 8, 3)
        rep = theorem2_check(small_env, pi, pi, pi, L=4)
        assert np.array_equal(rep.V1, rep.V2)
        assert rep.conclusion_holds is True

    @pytest.mark.parametrize("seed", range(5))
    def test_dominant_construction(self, seed):
        rng = np.random.default_rng(seed)
        S, A = int(rng.integers(5, 21)), int(rng.integers(2, 51))
        env = make_random_env(S, A, seed)
        pi = Policy(rng.dirichlet(np.ones(A), size=S))
        alpha, changed = dominant_equal_variance_policy(pi, exact_action_values(env, pi))
        for L in (1, 2, 4, 8):
            rep = theorem2_check(env, alpha, pi, pi, L)
            assert not rep.premise_violated
            assert rep.conclusion_holds, rep.max_violation

    def test_premise_violation_flagged(self, small_env):
        pi = dirichlet_policy(5, 8, 4)
        q = exact_action_values(small_env, pi)
        bad = premise_violating_policy(pi, q, state=2)
        rep = theorem2_check(small_env, bad, pi, pi, L=2)
        assert rep.premise_violated and not rep.premise_mean
        assert rep.conclusion_holds is None

    def test_variance_mismatch_flagged(self, small_env):
        pi = dirichlet_policy(5, 8, 5)
        greedy = Policy.deterministic(exact_action_values(small_env, pi).argmax(axis=1), 8)
        rep = theorem2_check(small_env, greedy, pi, pi, L=2)
        assert rep.premise_mean and not rep.premise_variance
        assert rep.conclusion_holds is None

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 100_000), A=st.integers(3, 12), shift=st.floats(0.05, 1.0))
    def test_construction_keeps_variance_raises_mean(self, seed, A, shift):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(A), size=1)
        q = rng.standard_normal((1, A))
        out, changed = dominant_equal_variance_policy(Policy(p), q, shift)
        mean = lambda r: r @ q[0]
        var = lambda r: r @ q[0] ** 2 - mean(r) ** 2
        np.testing.assert_allclose(out.probs.sum(), 1.0, atol=1e-12)
        if changed[0]:
            assert mean(out.probs[0]) > mean(p[0])
            assert abs(var(out.probs[0]) - var(p[0])) <= 1e-9 * max(1.0, var(p[0]))
        else:
            assert np.array_equal(out.probs, p)


class TestLumped:

    def test_rows_stochastic_and_reward_average(self, small_env):
        f = Classifier(np.array([0, 0, 1, 1, 1, 2, 2, 2]), 3)
        pi = dirichlet_policy(5, 8, 6)
        lumped, coarse = lumped_category_mdp(small_env, f, pi)
        np.testing.assert_allclose(lumped.transition.sum(axis=-1), 1.0, atol=1e-12)
        w = pi.probs[0, :2] / pi.probs[0, :2].sum()
        assert lumped.reward[0, 0] == pytest.approx(w @ small_env.reward[0, :2])
        np.testing.assert_allclose(coarse.probs[0], [pi.probs[0, f.assign == c].sum()
                                                     for c in range(3)])

    def test_lumped_value_equals_fine_value(self, small_env):
        f = Classifier(np.array([0, 0, 1, 1, 1, 2, 2, 2]), 3)
        pi = dirichlet_policy(5, 8, 7)
        lumped, coarse = lumped_category_mdp(small_env, f, pi)
        np.testing.assert_allclose(exact_policy_evaluation(lumped, coarse),
                                   exact_policy_evaluation(small_env, pi), atol=1e-9)

    def test_single_category(self, small_env):
        pi = dirichlet_policy(5, 8, 8)
        q = coarse_action_values(small_env, Classifier(np.zeros(8, dtype=int), 1), pi)
        np.testing.assert_allclose(q[:, 0], exact_policy_evaluation(small_env, pi), atol=1e-9)


class TestHypothesisGap:

    def test_point_masses(self):
        q = np.array([[5.0, 4.0]])
        rep = hypothesis_gap(q, Policy(np.array([[1.0, 0.0]])), Policy(np.array([[0.0, 1.0]])),
                             [0], n=10)
        assert rep.gap == 0.25 and rep.se == 0.0
        assert rep.significant

    def test_significance_follows_difference_near_zero_reference(self):
        # reference mean of about 0.01 inflates the ratio's standard error
        # while the difference itself is unmistakable
        q = np.array([[3.0, 1.01, -0.99]])
        a = Policy(np.array([[1.0, 0.0, 0.0]]))
        b = Policy(np.array([[0.0, 0.5, 0.5]]))
        rep = hypothesis_gap(q, a, b, [0], n=400, seed=2)
        assert rep.lower_bound() < 0 < rep.gap
        assert rep.significant

    def test_no_difference_within_noise(self):
        q = np.array([[1.0, 2.0]])
        rep = hypothesis_gap(q, Policy.uniform(1, 2), Policy.uniform(1, 2), [0], n=2000, seed=5)
        assert abs(rep.mean_a - rep.mean_b) <= 3 * rep.diff_se

    def test_identical_samplers_within_noise(self, small_env):
        q = np.random.default_rng(0).standard_normal((5, 8)) + 3.0
        pi = dirichlet_policy(5, 8, 9)
        rep = hypothesis_gap(q, pi, pi, range(5), n=1000, seed=1)
        assert abs(rep.gap) <= 3 * rep.se

    def test_zero_reference(self):
        with pytest.raises(DomainError):
            hypothesis_gap(np.zeros((1, 2)), Policy.uniform(1, 2), Policy.uniform(1, 2), [0], n=5)

    def test_dual_beats_standard(self, spread):
        env, f, d = spread
        base = make_behavior_policy(env, quality=0.0)
        q = exact_action_values(env, base)
        gen = fit_control_generator(d, f, num_states=env.num_states)
        rep = hypothesis_gap(q, dual_sampler(coarse_action_values(env, f, base), gen),
                             policy_sampler(base), range(env.num_states), n=1000)
        assert rep.significant and rep.gap > 0


class TestFidelity:

    @pytest.mark.parametrize("fidelity", [1.0, 0.5, 0.0])
    def test_leak_arithmetic(self, spread, fidelity):
        env, f, d = spread
        gen = fit_control_generator(d, f, fidelity=fidelity, num_states=env.num_states)
        rep = conditioning_fidelity(gen, f, range(env.num_states), range(19), n_per_pair=200)
        expected = fidelity + (1 - fidelity) / 19
        if fidelity == 1.0:
            assert rep.ratio == 1.0
        else:
            assert abs(rep.ratio - expected) <= 3 * np.sqrt(expected * (1 - expected) / rep.draws)
        assert rep.draws == env.num_states * 19 * 200


class TestOracleError:

    def test_identical(self):
        q = np.arange(6.0).reshape(2, 3)
        assert oracle_q_error(q, q) == (0.0, 0.0)

    def test_constant_offset(self):
        q = np.arange(12.0).reshape(3, 4) / 8
        assert oracle_q_error(q + 0.375, q) == (0.375, 0.375)

    def test_mask(self):
        q = np.zeros((2, 2))
        fitted = q.copy()
        fitted[1, 1] = 9.0
        mask = np.array([[True, True], [True, False]])
        assert oracle_q_error(fitted, q, mask) == (0.0, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            oracle_q_error(np.zeros((2, 2)), np.zeros((2, 3)))


def test_write_report(tmp_path):
    write_report([{"check": "a", "value": 1 / 3}, {"check": "b", "value": 2.0}], tmp_path / "r.csv")
    with open(tmp_path / "r.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows == [{"check": "a", "value": "0.333333"}, {"check": "b", "value": "2"}]
