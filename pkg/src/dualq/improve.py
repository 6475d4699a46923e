"""Policy improvement from fitted critics.

Standard mode draws candidates from the base policy and keeps the fine-Q
argmax. Dual mode first picks the best category with the coarse critic, asks
the control generator for candidates inside it, then keeps the fine-Q argmax.
Either way the chosen actions are cloned into a tabular policy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._sampling import sample_rows
from ._validation import check_index, check_index_array, check_positive_int, check_probability
from .data import coarsen_dataset
from .exceptions import ConfigError, DatasetFormatError, DomainError
from .mdp import Policy
from .qlearn import CoarseQ, FineQ, FitConfig, QFunction, q_table_of

log = logging.getLogger(__name__)

MODES = ("mle", "standard", "dual")
POLICY_FORMAT = "dualq-policy/1"
GENERATOR_FORMAT = "dualq-generator/1"


class ControlGenerator(BaseEstimator):
    """Category-conditioned action sampler estimated from dataset counts.

    ``inblock_[s, c]`` is the tempered, smoothed distribution over the
    actions of category ``c``. With probability ``1 - fidelity`` a draw
    ignores the request and is uniform over every action.
    """

    def __init__(self, temperature=1.5, smoothing=0.0, fidelity=1.0):
        self.temperature = temperature
        self.smoothing = smoothing
        self.fidelity = fidelity

    def _check_params(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature!r}")
        if not self.smoothing >= 0:
            raise ConfigError(f"smoothing must be >= 0, got {self.smoothing!r}")
        check_probability(self.fidelity, "fidelity")

    def fit(self, dataset, classifier, num_states=None):
        self._check_params()
        if len(dataset) == 0:
            raise ConfigError("cannot fit a control generator on an empty dataset")
        if dataset.kind != "fine":
            raise ConfigError("the control generator is fit on fine actions")
        S = int(dataset.s.max()) + 1 if num_states is None else int(num_states)
        A, C = classifier.num_actions, classifier.num_categories
        check_index_array(dataset.a, A, "action")
        counts = np.zeros((S, A))
        np.add.at(counts, (dataset.s, dataset.a), 1.0)
        member = np.zeros((C, A), dtype=bool)
        member[classifier.assign, np.arange(A)] = True
        # (S, C, A) counts restricted to each block, then smoothed
        block = np.where(member[None], counts[:, None, :] + self.smoothing, 0.0)
        tot = block.sum(axis=-1, keepdims=True)
        uniform = member[None] / member.sum(axis=1)[None, :, None]
        cond = np.where(tot > 0, block / np.where(tot > 0, tot, 1.0), uniform)
        if self.temperature != 1.0:
            with np.errstate(divide="ignore"):
                logp = np.where(cond > 0, np.log(cond), -np.inf) / self.temperature
            logp -= logp.max(axis=-1, keepdims=True)
            cond = np.exp(logp)
            cond /= cond.sum(axis=-1, keepdims=True)
        self.inblock_ = cond
        self.assign_ = classifier.assign.copy()
        self.num_categories_ = C
        return self

    @property
    def cond_(self):
        """Full sampling distribution ``(S, C, A)`` including leakage."""
        check_is_fitted(self, "inblock_")
        A = self.inblock_.shape[-1]
        return self.fidelity * self.inblock_ + (1.0 - self.fidelity) / A

    def distribution(self, s, category):
        check_is_fitted(self, "inblock_")
        s = check_index(s, self.inblock_.shape[0], "state")
        category = check_index(category, self.num_categories_, "category")
        return self.cond_[s, category]

    def sample(self, states, categories, n, rng):
        """``n`` i.i.d. draws per ``(state, category)`` pair, shape ``(m, n)``."""
        check_is_fitted(self, "inblock_")
        states = check_index_array(states, self.inblock_.shape[0], "state")
        categories = check_index_array(categories, self.num_categories_, "category")
        return sample_rows(self.cond_[states, categories], rng, n)


def fit_control_generator(d, f, temperature=1.5, smoothing=0.0, fidelity=1.0, num_states=None):
    return ControlGenerator(temperature, smoothing, fidelity).fit(d, f, num_states)


@dataclass(frozen=True)
class CandidateSet:
    state: int
    actions: tuple

    def __post_init__(self):
        if len(self.actions) < 1:
            raise ConfigError("a candidate set needs at least one action")


@dataclass(frozen=True)
class ImprovementConfig:
    num_candidates: int = 5
    mode: str = "dual"
    cloning_smoothing: float = 0.0
    seed: int = 0
    passes: int = 1

    def validate(self):
        check_positive_int(self.num_candidates, "num_candidates")
        check_positive_int(self.passes, "passes")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.cloning_smoothing >= 0:
            raise ConfigError("cloning_smoothing must be >= 0")
        return self


def best_category(q_coarse, s, categories=None):
    """Coarse-Q argmax at ``s``; ties go to the lowest category id."""
    table = q_table_of(q_coarse)
    s = check_index(s, table.shape[0], "state")
    row = table[s]
    if categories is not None:
        cats = check_index_array(sorted(set(int(c) for c in categories)), table.shape[1], "category")
        return int(cats[np.argmax(row[cats])])
    return int(np.argmax(row))


def sample_candidates(source, s, category=None, n=5, rng=None):
    n = check_positive_int(n, "n")
    rng = np.random.default_rng() if rng is None else rng
    if isinstance(source, ControlGenerator):
        if category is None:
            raise DomainError("a control generator needs a category to condition on")
        draws = source.sample([s], [category], n, rng)[0]
    else:
        if category is not None:
            raise DomainError("a policy source takes no category")
        probs = source.probs if isinstance(source, Policy) else np.asarray(source)
        s = check_index(s, probs.shape[0], "state")
        draws = sample_rows(probs[s:s + 1], rng, n)[0]
    return CandidateSet(int(s), tuple(int(a) for a in draws))


def _argmax_lowest(values, actions, num_actions):
    """Row-wise argmax of ``values`` over candidate ``actions``, ties to the lowest id."""
    best = values.max(axis=-1, keepdims=True)
    return np.where(values == best, actions, num_actions).min(axis=-1)


def _flag_untrained(q, states, actions):
    if isinstance(q, QFunction) and q.backing == "tabular":
        miss = int((~q.trained[states, actions]).sum())
        q.diagnostics["untrained_queries"] += miss


def best_action(q_fine, c):
    """Fine-Q argmax among the candidates; ties go to the lowest action id."""
    actions = np.asarray(c.actions, dtype=np.int64)
    if isinstance(q_fine, QFunction):
        check_index_array(actions, q_fine.num_actions, "action")
        states = np.full(actions.shape, c.state)
        values = q_fine.values(states, actions)
        _flag_untrained(q_fine, states, actions)
        A = q_fine.num_actions
    else:
        table = q_table_of(q_fine)
        check_index_array(actions, table.shape[1], "action")
        values = table[c.state, actions]
        A = table.shape[1]
    return int(_argmax_lowest(values, actions, A))


def clone_policy(choices, num_states, num_actions, smoothing=0.0):
    """Smoothed maximum-likelihood policy of ``(state, action)`` choices.

    Rows are ``count + smoothing`` normalized; states never chosen get the
    uniform row.
    """
    pairs = np.asarray(list(choices), dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ConfigError("clone_policy needs at least one choice")
    if not smoothing >= 0:
        raise ConfigError("smoothing must be >= 0")
    check_index_array(pairs[:, 0], num_states, "state")
    check_index_array(pairs[:, 1], num_actions, "action")
    counts = np.zeros((num_states, num_actions))
    np.add.at(counts, (pairs[:, 0], pairs[:, 1]), 1.0)
    counts += smoothing
    tot = counts.sum(axis=1, keepdims=True)
    probs = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), 1.0 / num_actions)
    return Policy(probs)


def improve_policy(env, d, q_fine, q_coarse=None, gen=None, base=None, cfg=ImprovementConfig()):
    """One improvement pass over every dataset state, then cloning.

    Returns the cloned policy. ``mle`` mode clones the dataset actions as-is.
    """
    cfg = cfg.validate()
    if len(d) == 0:
        raise ConfigError("improvement needs a non-empty dataset")
    S, A = env.num_states, env.num_actions
    states = check_index_array(d.s, S, "state")
    if cfg.mode == "mle":
        return clone_policy(np.column_stack([d.s, d.a]), S, A, cfg.cloning_smoothing)
    if cfg.mode == "dual" and (q_coarse is None or gen is None):
        raise ConfigError("dual mode needs a coarse critic and a control generator")
    if cfg.mode == "standard" and base is None:
        raise ConfigError("standard mode needs a base policy to sample candidates from")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_candidates
    policy = base
    for _ in range(cfg.passes):
        if cfg.mode == "dual":
            cats = np.argmax(q_table_of(q_coarse)[states], axis=1)
            cand = gen.sample(states, cats, n, rng)
        else:
            probs = policy.probs if isinstance(policy, Policy) else np.asarray(policy)
            cand = sample_rows(probs[states], rng, n)
        rows = np.repeat(states[:, None], n, axis=1)
        if isinstance(q_fine, QFunction):
            values = q_fine.values(rows, cand)
            _flag_untrained(q_fine, rows, cand)
        else:
            values = q_table_of(q_fine)[rows, cand]
        chosen = _argmax_lowest(values, cand, A)
        policy = clone_policy(np.column_stack([states, chosen]), S, A, cfg.cloning_smoothing)
    return policy


class DualGranularityAgent(BaseEstimator):
    """End-to-end offline agent: critics, optional generator, improvement, cloning.

    ``mode='mle'`` clones the dataset, ``'standard'`` improves by sampling
    from that clone, ``'dual'`` routes candidates through the best category.
    """

    def __init__(self, mode="dual", num_candidates=5, fit_config=None, temperature=1.5,
                 generator_smoothing=0.0, fidelity=1.0, cloning_smoothing=0.0, seed=0):
        self.mode = mode
        self.num_candidates = num_candidates
        self.fit_config = fit_config
        self.temperature = temperature
        self.generator_smoothing = generator_smoothing
        self.fidelity = fidelity
        self.cloning_smoothing = cloning_smoothing
        self.seed = seed

    def _improvement_config(self):
        return ImprovementConfig(self.num_candidates, self.mode, self.cloning_smoothing,
                                 self.seed).validate()

    def fit(self, dataset, env, classifier):
        icfg = self._improvement_config()
        fcfg = self.fit_config if self.fit_config is not None else FitConfig()
        S, A = env.num_states, env.num_actions
        self.base_ = clone_policy(np.column_stack([dataset.s, dataset.a]), S, A,
                                  self.cloning_smoothing)
        self.fine_ = self.coarse_ = self.generator_ = None
        if self.mode != "mle":
            self.fine_ = FineQ.from_config(fcfg).fit(dataset, env, classifier)
        if self.mode == "dual":
            self.coarse_ = CoarseQ.from_config(fcfg).fit(coarsen_dataset(dataset, classifier),
                                                         env, classifier)
            self.generator_ = ControlGenerator(self.temperature, self.generator_smoothing,
                                               self.fidelity).fit(dataset, classifier, S)
        self.policy_ = improve_policy(
            env, dataset,
            q_fine=None if self.fine_ is None else self.fine_.q_,
            q_coarse=None if self.coarse_ is None else self.coarse_.q_,
            gen=self.generator_, base=self.base_, cfg=icfg)
        return self

    def predict_proba(self, states):
        check_is_fitted(self, "policy_")
        states = check_index_array(states, self.policy_.num_states, "state")
        return self.policy_.probs[states]

    def predict(self, states):
        """Most probable action per state, ties to the lowest id."""
        return np.argmax(self.predict_proba(states), axis=1)


# -- text persistence --------------------------------------------------------

def save_policy(policy, path):
    """Write ``state, action, probability`` triples for the non-zero entries."""
    p = policy.probs
    lines = [f"# {POLICY_FORMAT}\tstates={p.shape[0]}\tactions={p.shape[1]}"]
    for s, a in np.argwhere(p > 0):
        lines.append(f"{s}\t{a}\t{float(p[s, a])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_header(lines, fmt):
    if not lines or not lines[0].startswith(f"# {fmt}"):
        raise DatasetFormatError(f"expected header '# {fmt}'", line=1)
    return dict(part.split("=", 1) for part in lines[0].split("\t")[1:])


def load_policy(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = _read_header(lines, POLICY_FORMAT)
    probs = np.zeros((int(meta["states"]), int(meta["actions"])))
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            s, a, p = line.split("\t")
            probs[int(s), int(a)] = float(p)
        except (ValueError, IndexError) as exc:
            raise DatasetFormatError(f"bad policy triple {line!r} ({exc})", line=lineno) from None
    return Policy(probs)


def save_generator(gen, path):
    check_is_fitted(gen, "inblock_")
    S, C, A = gen.inblock_.shape
    lines = [f"# {GENERATOR_FORMAT}\tstates={S}\tcategories={C}\tactions={A}"
             f"\ttemperature={gen.temperature!r}\tsmoothing={gen.smoothing!r}"
             f"\tfidelity={gen.fidelity!r}",
             "assign\t" + " ".join(str(int(c)) for c in gen.assign_)]
    for s, c, a in np.argwhere(gen.inblock_ > 0):
        lines.append(f"{s}\t{c}\t{a}\t{float(gen.inblock_[s, c, a])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_generator(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = _read_header(lines, GENERATOR_FORMAT)
    gen = ControlGenerator(float(meta["temperature"]), float(meta["smoothing"]),
                           float(meta["fidelity"]))
    S, C, A = int(meta["states"]), int(meta["categories"]), int(meta["actions"])
    if len(lines) < 2 or not lines[1].startswith("assign\t"):
        raise DatasetFormatError("expected the category assignment line", line=2)
    gen.assign_ = np.array(lines[1].split("\t", 1)[1].split(), dtype=np.int64)
    gen.num_categories_ = C
    inblock = np.zeros((S, C, A))
    for lineno, line in enumerate(lines[2:], start=3):
        try:
            s, c, a, p = line.split("\t")
            inblock[int(s), int(c), int(a)] = float(p)
        except (ValueError, IndexError) as exc:
            raise DatasetFormatError(f"bad generator entry {line!r} ({exc})", line=lineno) from None
    gen.inblock_ = inblock
    return gen


__all__ = [
    "CandidateSet", "ControlGenerator", "DualGranularityAgent", "ImprovementConfig",
    "best_action", "best_category", "clone_policy", "fit_control_generator",
    "improve_policy", "load_generator", "load_policy", "sample_candidates",
    "save_generator", "save_policy",
]
