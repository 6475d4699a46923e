import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dualq.data import (Dataset, Transition, coarsen_dataset, collect_dataset,
                        exhaustive_dataset, make_behavior_policy)
from dualq.envs import (CategoricalEnvConfig, Classifier, make_categorical_env,
                        make_rational_env, rational_rows)
from dualq.exceptions import ConfigError, DomainError, NumericError
from dualq.mdp import Policy, exact_action_values, exact_policy_evaluation
from dualq.qlearn import (CoarseQ, FineQ, FitConfig, QFunction, check_convergence,
                          count_ood_queries, fit_coarse_q, fit_fine_q, load_q, q_table_of,
                          save_q, td_step)
from dualq.verify import coarse_action_values

EXACT = FitConfig(learning_rate=1.0, batch_size=10**9, target_sync_interval=1,
                  convergence_delta=1e-12, max_epochs=200)


def rational_problem(S=5, A=4, seed=0, denominator=8):
    env = make_rational_env(S, A, seed)
    pi = Policy(rational_rows(np.random.default_rng(seed), (S,), A, denominator))
    return env, pi


def alternating(step, n):
    """Loss history whose consecutive differences are exactly ``step``."""
    return [0.0 if i % 2 == 0 else step for i in range(n)]


class TestTdStep:

    def test_delta_rule_example(self):
        q = QFunction(2, 1)
        q.target_params[1, 0] = 1.0
        batch = [Transition(0, 0, 0, 0, 1.0, 1, 0, False)]
        loss = td_step(q, batch, FitConfig(learning_rate=0.5, target_sync_interval=100))
        assert loss == 2.25
        assert q.params[0, 0] == 0.75

    def test_done_uses_reward_only(self):
        q = QFunction(2, 1)
        q.target_params[:] = 1e6
        td_step(q, [Transition(0, 0, 0, 0, 2.0, 1, None, True)], FitConfig(learning_rate=1.0))
        assert q.params[0, 0] == 2.0

    def test_non_finite_target_names_transition(self):
        q = QFunction(2, 1)
        q.target_params[1, 0] = np.inf
        with pytest.raises(NumericError, match="s_next=1"):
            td_step(q, [Transition(3, 4, 0, 0, 1.0, 1, 0, False)], FitConfig())

    def test_empty_batch(self):
        with pytest.raises(ConfigError):
            td_step(QFunction(1, 1), [], FitConfig())

    def test_action_outside_domain(self):
        with pytest.raises(DomainError):
            td_step(QFunction(2, 1), [Transition(0, 0, 0, 3, 1.0, 1, 0, False)], FitConfig())

    def test_divergence_detected(self):
        q = QFunction(1, 1)
        q.params[0, 0] = 1e308
        q.target_params[0, 0] = 1e308
        with pytest.raises(NumericError):
            td_step(q, [Transition(0, 0, 0, 0, 0.0, 0, 0, False)],
                    FitConfig(learning_rate=1e10, discount=0.99))

    def test_closed_form_fixed_point(self):
        # two states, one action each way; solve the empirical Bellman system directly
        rows = [Transition(0, 0, 0, 0, 1.0, 1, 0, False), Transition(1, 0, 0, 0, 0.0, 0, 0, False),
                Transition(2, 0, 1, 0, 2.0, 0, 0, False), Transition(3, 0, 1, 0, -1.0, 1, None, True)]
        d = Dataset.from_transitions(rows)
        cfg = FitConfig(learning_rate=0.5, target_sync_interval=1, discount=0.5)
        q = QFunction(2, 1)
        losses = [td_step(q, d, cfg) for _ in range(200)]
        # Q0 = 0.5 + 0.25 (Q1 + Q0) ; Q1 = 0.5 + 0.25 Q0
        M = np.array([[1 - 0.25, -0.25], [-0.25, 1.0]])
        exact = np.linalg.solve(M, [0.5, 0.5])
        np.testing.assert_allclose(q.params[:, 0], exact, atol=1e-12)
        targets = np.array([1 + 0.5 * exact[1], 0.5 * exact[0], 2 + 0.5 * exact[0], -1.0])
        floor = np.mean((targets - exact[[0, 0, 1, 1]]) ** 2)
        assert losses[-1] == pytest.approx(floor, abs=1e-12)

    def test_target_staleness(self):
        env, pi = rational_problem()
        d = exhaustive_dataset(env, pi, 8)
        q = QFunction(env.num_states, env.num_actions)
        cfg = FitConfig(target_sync_interval=3)
        rng = np.random.default_rng(0)
        for step in range(1, 13):
            before = q.target_params.copy()
            td_step(q, d.subset(rng.choice(len(d), 32)), cfg)
            if step % 3:
                assert q.target_params.tobytes() == before.tobytes()
            else:
                assert q.target_params.tobytes() == q.params.tobytes()

    def test_polyak_target(self):
        q = QFunction(1, 1)
        cfg = FitConfig(learning_rate=1.0, target_update_mode="polyak", polyak_rate=0.25)
        td_step(q, [Transition(0, 0, 0, 0, 4.0, 0, None, True)], cfg)
        assert q.target_params[0, 0] == 1.0


class TestConvergenceRule:

    @pytest.mark.parametrize("step, expected", [(0.009, True), (0.010, False), (0.011, False)])
    def test_boundaries(self, step, expected):
        assert check_convergence(alternating(step, 11), 0.01, 10) is expected

    def test_needs_ten_changes(self):
        history = [0.0, 0.02] + [0.02 + 0.009 * (i % 2) for i in range(1, 10)]
        assert len(history) == 11
        assert check_convergence(history, 0.01, 10) is False
        assert check_convergence(history + [0.02], 0.01, 10) is True

    def test_short_history(self):
        assert check_convergence(alternating(0.0, 10), 0.01, 10) is False
        assert check_convergence([], 0.01, 1) is False

    @settings(max_examples=100)
    @given(st.lists(st.floats(0, 10), min_size=0, max_size=30), st.integers(1, 12))
    def test_matches_definition(self, history, patience):
        diffs = [abs(b - a) for a, b in zip(history, history[1:])]
        expected = len(diffs) >= patience and all(x < 0.01 for x in diffs[-patience:])
        assert check_convergence(history, 0.01, patience) == expected


class TestFit:

    def test_oracle_equivalence(self):
        env, pi = rational_problem()
        q = fit_fine_q(exhaustive_dataset(env, pi, 8), env, EXACT)
        exact = exact_action_values(env, pi)
        live = ~env.terminal_mask
        assert q.trained[live].all()
        assert np.abs(q.table() - exact)[live].max() <= 1e-3

    def test_myopic_limit(self, small_env):
        d = collect_dataset(small_env, make_behavior_policy(small_env), 40, 10, seed=0)
        cfg = FitConfig(discount=1e-9, learning_rate=0.5, batch_size=10**9, max_epochs=100,
                        convergence_delta=1e-14)
        q = fit_fine_q(d, small_env, cfg)
        for s, a in {(int(s), int(a)) for s, a in zip(d.s, d.a)}:
            mean = d.r[(d.s == s) & (d.a == a)].mean()
            assert abs(q.params[s, a] - mean) <= 1e-6

    def test_same_seed_same_parameters(self, small_env):
        d = collect_dataset(small_env, make_behavior_policy(small_env), 40, 10, seed=0)
        a = fit_fine_q(d, small_env, FitConfig(max_epochs=20, seed=3))
        b = fit_fine_q(d, small_env, FitConfig(max_epochs=20, seed=3))
        assert a.params.tobytes() == b.params.tobytes()

    def test_non_convergence_flag(self, small_env):
        d = collect_dataset(small_env, make_behavior_policy(small_env), 40, 10, seed=0)
        est = FineQ(max_epochs=2, convergence_delta=1e-12).fit(d, small_env)
        assert not est.converged_ and est.n_epochs_ == 2

    def test_converges_under_rule(self, small_env):
        d = collect_dataset(small_env, make_behavior_policy(small_env), 40, 10, seed=0)
        est = FineQ(learning_rate=1.0, batch_size=10**9, target_sync_interval=1).fit(d, small_env)
        assert est.converged_ and est.n_epochs_ < 200

    def test_coarse_matches_lumped_oracle(self):
        env, pi = rational_problem(S=6, A=6, seed=2, denominator=16)
        f = Classifier(np.array([0, 0, 1, 1, 2, 2]), 3)
        dc = coarsen_dataset(exhaustive_dataset(env, pi, 16, action_weighted=True), f)
        q = fit_coarse_q(dc, env, EXACT, num_categories=3)
        exact = coarse_action_values(env, f, pi)
        live = ~env.terminal_mask
        trained = q.trained[live]
        assert np.abs(q.table() - exact)[live][trained].max() <= 1e-3

    def test_single_category_is_state_value(self):
        env, pi = rational_problem(seed=4)
        f = Classifier(np.zeros(4, dtype=int), 1)
        dc = coarsen_dataset(exhaustive_dataset(env, pi, 8, action_weighted=True), f)
        q = fit_coarse_q(dc, env, EXACT)
        v = exact_policy_evaluation(env, pi)
        live = ~env.terminal_mask
        np.testing.assert_allclose(q.table()[live, 0], v[live], atol=1e-3)

    def test_coarse_determinism(self):
        env, f = make_categorical_env(CategoricalEnvConfig(num_states=4, num_categories=3,
                                                           actions_per_category=2))
        dc = coarsen_dataset(collect_dataset(env, make_behavior_policy(env), 20, 10, 0), f)
        a = CoarseQ(max_epochs=5).fit(dc, env, f).table()
        b = CoarseQ(max_epochs=5).fit(dc, env, f).table()
        assert a.tobytes() == b.tobytes()

    def test_kind_mismatch(self, small_env):
        d = collect_dataset(small_env, Policy.uniform(5, 8), 2, 2, 0)
        with pytest.raises(ConfigError):
            CoarseQ().fit(d, small_env, Classifier(np.zeros(8, dtype=int), 1))

    def test_linear_backing(self):
        env, pi = rational_problem(S=6, A=4, seed=1)
        f = Classifier(np.array([0, 0, 1, 1]), 2)
        cfg = FitConfig(backing="linear", learning_rate=0.5, batch_size=10**9,
                        target_sync_interval=1, max_epochs=400, convergence_delta=1e-12)
        q = fit_fine_q(exhaustive_dataset(env, pi, 8), env, cfg, classifier=f)
        exact = exact_action_values(env, pi)
        assert np.abs(q.table() - exact)[~env.terminal_mask].max() <= 1e-2


class TestLoss:

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), lr=st.floats(0.05, 1.0))
    def test_non_increasing_without_bootstrap(self, seed, lr):
        rng = np.random.default_rng(seed)
        n = 60
        d = Dataset(np.arange(n), np.zeros(n), rng.integers(0, 3, n), rng.integers(0, 2, n),
                    rng.standard_normal(n), rng.integers(0, 3, n), np.full(n, -1), np.ones(n))
        env = make_rational_env(3, 2, seed=0, num_terminal=0)
        est = FineQ(learning_rate=lr, batch_size=10**9, max_epochs=25,
                    convergence_delta=1e-15).fit(d, env)
        h = np.array(est.loss_history_)
        assert np.all(h >= 0)
        assert np.all(np.diff(h) <= 1e-9)

    def test_non_increasing_with_frozen_targets(self):
        env, pi = rational_problem(seed=3)
        d = exhaustive_dataset(env, pi, 8)
        est = FineQ(learning_rate=0.7, batch_size=10**9, target_sync_interval=10**6,
                    max_epochs=40, convergence_delta=1e-15).fit(d, env)
        assert np.all(np.diff(est.loss_history_) <= 1e-9)

    def test_bootstrapped_loss_can_rise(self):
        # with bootstrapping the target variance grows as Q approaches its fixed point
        env, pi = rational_problem(S=6, A=4, seed=0)
        est = FineQ.from_config(EXACT).fit(exhaustive_dataset(env, pi, 8), env)
        assert np.max(np.diff(est.loss_history_)) > 1e-9
        assert est.loss_history_[-1] < est.loss_history_[0]


class TestEstimatorApi:

    def test_clone_and_params(self):
        est = FineQ(learning_rate=0.3, max_epochs=7)
        assert clone(est).get_params() == est.get_params()
        assert est.config() == FitConfig(learning_rate=0.3, max_epochs=7)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            FineQ().predict([0], [0])

    def test_invalid_config(self, small_env):
        d = collect_dataset(small_env, Policy.uniform(5, 8), 2, 2, 0)
        with pytest.raises(ConfigError):
            FineQ(discount=1.0).fit(d, small_env)

    def test_predict_matches_table(self, small_env):
        d = collect_dataset(small_env, make_behavior_policy(small_env), 20, 10, 0)
        est = FineQ(max_epochs=3).fit(d, small_env)
        np.testing.assert_array_equal(est.predict([0, 1], [2, 3]), est.table()[[0, 1], [2, 3]])
        np.testing.assert_array_equal(q_table_of(est), est.table())


class TestOodAndPersistence:

    def test_ood_count(self):
        rows = [Transition(0, 0, 0, 0, 1.0, 1, 1, False), Transition(0, 1, 1, 1, 1.0, 0, 0, False)]
        d = Dataset.from_transitions(rows)
        assert count_ood_queries(d, 2) == 0
        assert count_ood_queries(d.head(1), 2) == 1

    def test_ood_recorded_with_warning(self, small_env, caplog):
        d = Dataset.from_transitions([Transition(0, 0, 0, 0, 1.0, 1, 1, False)])
        with caplog.at_level("WARNING"):
            q = fit_fine_q(d, small_env, FitConfig(max_epochs=2))
        assert q.diagnostics["ood_queries"] == 1
        assert "never trained" in caplog.text

    def test_sarsa_dataset_has_no_ood_pairs(self, small_env):
        d = collect_dataset(small_env, make_behavior_policy(small_env), 200, 20, 0)
        trained = set(zip(d.s.tolist(), d.a.tolist()))
        live = ~d.done
        queried = set(zip(d.s_next[live].tolist(), d.a_next[live].tolist()))
        assert queried <= trained

    def test_round_trip(self, tmp_path, small_env):
        d = collect_dataset(small_env, make_behavior_policy(small_env), 20, 10, 0)
        q = fit_fine_q(d, small_env, FitConfig(max_epochs=3))
        save_q(q, tmp_path / "q.txt")
        back = load_q(tmp_path / "q.txt")
        assert np.array_equal(back.params[q.trained], q.params[q.trained])
        assert np.array_equal(back.trained, q.trained)
        first = (tmp_path / "q.txt").read_text().splitlines()[1].split("\t")
        assert len(first) == 3
