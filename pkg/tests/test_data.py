import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualq.data import (NO_ACTION, CoarseTransition, Dataset, Transition, coarsen_dataset,
                        collect_dataset, exhaustive_dataset, load_dataset, make_behavior_policy,
                        save_dataset)
from dualq.envs import (CategoricalEnvConfig, Classifier, block_classifier, make_categorical_env,
                        make_random_env, make_rational_env, make_token_env)
from dualq.exceptions import ConfigError, DatasetFormatError, DomainError, FingerprintError
from dualq.mdp import EnvSpec, Policy, value_iteration


@pytest.fixture(scope="module")
def cat_env():
    return make_categorical_env(CategoricalEnvConfig(num_states=6, num_categories=4,
                                                     actions_per_category=3, seed=2))


@pytest.fixture(scope="module")
def cat_data(cat_env):
    env, _ = cat_env
    return collect_dataset(env, make_behavior_policy(env), episodes=60, horizon=20, seed=0)


class TestBehaviorPolicy:

    def test_quality_zero_is_uniform(self, small_env):
        pi = make_behavior_policy(small_env, quality=0.0)
        assert np.all(pi.probs == 1.0 / 8)

    def test_quality_one_follows_greedy(self, small_env):
        pi = make_behavior_policy(small_env, quality=1.0, epsilon=1e-6)
        _, greedy = value_iteration(small_env)
        assert np.array_equal(pi.greedy(), greedy.greedy())

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), eps=st.floats(0.01, 1.0))
    def test_mixture_rows_and_floor(self, seed, eps):
        env = make_random_env(4, 6, seed)
        pi = make_behavior_policy(env, quality=0.5, epsilon=eps)
        np.testing.assert_allclose(pi.probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(pi.probs >= eps / 6 - 1e-15)

    @pytest.mark.parametrize("kwargs", [dict(epsilon=0.0), dict(quality=1.5), dict(epsilon=1.2)])
    def test_rejected(self, small_env, kwargs):
        with pytest.raises(ConfigError):
            make_behavior_policy(small_env, **kwargs)


class TestCollect:

    def test_single_step_episode(self, small_env):
        d = collect_dataset(small_env, Policy.uniform(5, 8), episodes=1, horizon=1, seed=0)
        assert len(d) == 1
        assert d.done[0] and d.a_next[0] == NO_ACTION and d[0].a_next is None

    def test_visit_frequencies(self):
        T = np.array([[[0.3, 0.7], [0.9, 0.1]], [[0.5, 0.5], [0.2, 0.8]]])
        env = EnvSpec(transition=T, reward=np.array([[1.0, 0.0], [0.5, 2.0]]), discount=0.5,
                      initial=np.array([0.6, 0.4]))
        pi = Policy(np.array([[0.25, 0.75], [0.6, 0.4]]))
        n, horizon = 100_000, 3
        d = collect_dataset(env, pi, episodes=n, horizon=horizon, seed=3)
        dist = env.initial.copy()
        P = np.einsum("sa,sat->st", pi.probs, T)
        for t in range(horizon):
            expected = dist[:, None] * pi.probs
            at_t = d.t == t
            for s in range(2):
                for a in range(2):
                    count = np.sum(at_t & (d.s == s) & (d.a == a))
                    p = expected[s, a]
                    assert abs(count / n - p) <= 3 * np.sqrt(p * (1 - p) / n), (t, s, a)
            dist = dist @ P

    def test_same_seed_same_bytes(self, tmp_path, small_env):
        pi = make_behavior_policy(small_env)
        for name in ("a", "b"):
            save_dataset(collect_dataset(small_env, pi, 30, 10, seed=4), tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_sarsa_consistency(self, cat_data):
        d = cat_data
        for i in range(len(d) - 1):
            if d.episode_id[i] == d.episode_id[i + 1]:
                assert d.s_next[i] == d.s[i + 1]
                assert d.a_next[i] == d.a[i + 1]
                assert d.t[i + 1] == d.t[i] + 1
                assert not d.done[i]

    def test_horizon_marks_done(self, cat_env):
        env, _ = cat_env
        d = collect_dataset(env, make_behavior_policy(env), episodes=5, horizon=7, seed=1)
        assert np.all(d.done[d.t == 6])
        assert d.t.max() == 6

    def test_terminal_ends_episode(self):
        env = make_rational_env(4, 3, seed=0, num_terminal=1)
        d = collect_dataset(env, Policy.uniform(4, 3), episodes=50, horizon=30, seed=0)
        hit = d.s_next == 3
        assert np.all(d.done[hit])
        assert not np.any(d.s == 3)

    def test_bad_counts(self, small_env):
        with pytest.raises(ConfigError):
            collect_dataset(small_env, Policy.uniform(5, 8), episodes=0, horizon=1, seed=0)

    def test_full_category_support(self):
        env, f = make_categorical_env(CategoricalEnvConfig())
        d = collect_dataset(env, make_behavior_policy(env), episodes=500, horizon=20, seed=0)
        assert len(d) == 10_000
        seen = np.zeros((env.num_states, f.num_categories), dtype=bool)
        seen[d.s, f.assign[d.a]] = True
        assert seen.all()


class TestExhaustive:

    def test_counts_match_probabilities(self):
        env = make_rational_env(4, 2, seed=0, denominator=4)
        pi = Policy(np.full((4, 2), 0.5))
        d = exhaustive_dataset(env, pi, denominator=4)
        for s in range(3):
            for a in range(2):
                cell = (d.s == s) & (d.a == a)
                for s2 in range(4):
                    share = np.sum(cell & (d.s_next == s2)) / np.sum(cell)
                    assert share == pytest.approx(env.transition[s, a, s2])

    def test_rejects_non_rational_policy(self):
        env = make_rational_env(3, 2, seed=0)
        with pytest.raises(ConfigError):
            exhaustive_dataset(env, Policy(np.full((3, 2), 0.5)), denominator=3)


class TestCoarsen:

    def test_example_tuple(self):
        d = Dataset.from_transitions([Transition(0, 0, 0, 7, 1.0, 1, 2, False)])
        (c,) = coarsen_dataset(d, block_classifier(4, 5))
        assert isinstance(c, CoarseTransition)
        assert (c.s, c.a, c.r, c.s_next, c.a_next) == (0, 1, 1.0, 1, 0)

    def test_length_reward_structure(self, cat_env, cat_data):
        _, f = cat_env
        c = coarsen_dataset(cat_data, f)
        assert len(c) == len(cat_data)
        assert c.r.sum() == cat_data.r.sum()
        for col in ("episode_id", "t", "s", "s_next", "done"):
            assert np.array_equal(getattr(c, col), getattr(cat_data, col))

    @settings(max_examples=30, deadline=None)
    @given(k=st.integers(0, 400))
    def test_commutes_with_truncation(self, cat_env, cat_data, k):
        _, f = cat_env
        assert coarsen_dataset(cat_data.head(k), f) == coarsen_dataset(cat_data, f).head(k)

    def test_unclassifiable_action_named(self, cat_data):
        with pytest.raises(DomainError, match="transition 0"):
            coarsen_dataset(cat_data.subset(np.arange(3)), Classifier(np.zeros(1, dtype=int), 1))

    def test_already_coarse(self, cat_env, cat_data):
        c = coarsen_dataset(cat_data, cat_env[1])
        with pytest.raises(ConfigError):
            coarsen_dataset(c, cat_env[1])


class TestPersistence:

    def test_round_trip_thousand(self, tmp_path, cat_env):
        env, f = cat_env
        d = collect_dataset(env, make_behavior_policy(env), episodes=50, horizon=20, seed=9)
        assert len(d) == 1000
        save_dataset(d, tmp_path / "d.tsv")
        assert load_dataset(tmp_path / "d.tsv", env) == d
        c = coarsen_dataset(d, f)
        save_dataset(c, tmp_path / "c.tsv")
        assert load_dataset(tmp_path / "c.tsv", env) == c

    def test_wrong_env(self, tmp_path, cat_env, cat_data, small_env):
        save_dataset(cat_data, tmp_path / "d.tsv")
        with pytest.raises(FingerprintError):
            load_dataset(tmp_path / "d.tsv", small_env)

    def test_hand_written_two_lines(self, tmp_path, small_env):
        text = (f"# dualq-dataset/1\tkind=fine\tfingerprint={small_env.fingerprint()}\tbehavior=hand\n"
                "0\t0\t3\t1\t0.5\t2\t4\t0\n"
                "0\t1\t2\t4\t-1.25\t0\t-\t1\n")
        (tmp_path / "d.tsv").write_text(text, encoding="utf-8")
        d = load_dataset(tmp_path / "d.tsv", small_env)
        assert d.transitions == [Transition(0, 0, 3, 1, 0.5, 2, 4, False),
                                 Transition(0, 1, 2, 4, -1.25, 0, None, True)]
        assert d.behavior == "hand"

    @pytest.mark.parametrize("bad, line", [
        ("0\t0\t3\t1\t0.5\t2\t4", 3),
        ("0\t0\t3\tx\t0.5\t2\t4\t0", 3),
        ("0\t0\t3\t1\t0.5\t2\t-\t0", 3),
        ("0\t0\t9\t1\t0.5\t2\t4\t0", 3),
        ("0\t0\t3\t1\t0.5\t2\t4\t2", 3),
    ])
    def test_malformed_line_number(self, tmp_path, small_env, bad, line):
        text = (f"# dualq-dataset/1\tkind=fine\tfingerprint={small_env.fingerprint()}\tbehavior=\n"
                f"0\t0\t3\t1\t0.5\t2\t4\t0\n{bad}\n")
        (tmp_path / "d.tsv").write_text(text, encoding="utf-8")
        with pytest.raises(DatasetFormatError) as info:
            load_dataset(tmp_path / "d.tsv", small_env)
        assert info.value.line == line

    def test_bad_header(self, tmp_path, small_env):
        (tmp_path / "d.tsv").write_text("episode\tt\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path / "d.tsv", small_env)

    def test_token_actions_quoted(self, tmp_path):
        env, _ = make_token_env()
        d = collect_dataset(env, Policy.uniform(env.num_states, env.num_actions), 5, 5, seed=0)
        save_dataset(d, tmp_path / "d.tsv", env)
        first = (tmp_path / "d.tsv").read_text(encoding="utf-8").splitlines()[1].split("\t")
        assert first[3] == '"' + " ".join(env.responses[d.a[0]]) + '"'
        assert load_dataset(tmp_path / "d.tsv", env) == d
