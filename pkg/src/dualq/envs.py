"""Environment families and the fine-to-coarse action classifier.

Two families are provided. The categorical family is a synthetic MDP whose
actions come in blocks (categories) that separate expected reward. The token
family is a small dialogue MDP: actions are template-built token responses,
the state is the recent context of a scripted partner, and the reward is the
lexicon total of the response.
"""

from __future__ import annotations

import itertools
import json
import unicodedata
from collections import Counter, deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import check_index, check_index_array, check_positive_int, check_probability
from .exceptions import ConfigError, DomainError, InvalidEnvError
from .mdp import EnvSpec
from .rewards import QUESTION_MARK, Lexicon, RewardWeights

ENV_FORMAT = "dualq-env/1"
START = -1


@dataclass(frozen=True, eq=False)
class Classifier:
    """Total deterministic map from fine action id to category id."""

    assign: np.ndarray
    num_categories: int

    def __post_init__(self):
        assign = np.array(self.assign, dtype=np.int64)
        if assign.ndim != 1 or assign.size == 0:
            raise ConfigError("classifier needs a non-empty 1-D assignment")
        if assign.min() < 0 or assign.max() >= self.num_categories:
            raise ConfigError("classifier assigns a category outside [0, num_categories)")
        assign.setflags(write=False)
        object.__setattr__(self, "assign", assign)
        object.__setattr__(self, "num_categories", int(self.num_categories))

    @property
    def num_actions(self):
        return self.assign.size

    def __call__(self, actions):
        return self.assign[check_index_array(actions, self.num_actions, "action")]

    def block(self, category):
        """Action ids belonging to ``category``."""
        return np.flatnonzero(self.assign == category)

    def to_dict(self):
        return {"num_categories": self.num_categories, "assign": self.assign.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["assign"]), int(data["num_categories"]))

    def __eq__(self, other):
        return (isinstance(other, Classifier) and self.num_categories == other.num_categories
                and np.array_equal(self.assign, other.assign))

    __hash__ = None


def classify(f, a):
    return int(f.assign[check_index(a, f.num_actions, "action")])


def block_classifier(num_categories, actions_per_category):
    return Classifier(np.repeat(np.arange(num_categories), actions_per_category), num_categories)


# -- categorical family ------------------------------------------------------

@dataclass(frozen=True)
class CategoricalEnvConfig:
    num_states: int = 10
    num_categories: int = 19
    actions_per_category: int = 4
    category_value_spread: float = 1.0
    noise_scale: float = 0.5
    discount: float = 0.5
    seed: int = 0
    horizon: int = 20
    transition_concentration: float = 1.0

    def validate(self):
        check_positive_int(self.num_states, "num_states")
        check_positive_int(self.num_categories, "num_categories", minimum=2)
        check_positive_int(self.actions_per_category, "actions_per_category", minimum=2)
        check_positive_int(self.horizon, "horizon")
        check_probability(self.discount, "discount", low_open=True, high_open=True)
        for name in ("category_value_spread", "noise_scale"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.transition_concentration > 0:
            raise ConfigError("transition_concentration must be > 0")
        return self

    @property
    def num_actions(self):
        return self.num_categories * self.actions_per_category


def make_categorical_env(cfg=CategoricalEnvConfig()):
    """Block-structured MDP: each state ranks the categories by a random
    permutation spaced ``category_value_spread`` apart, and actions inside a
    category differ by Gaussian noise of scale ``noise_scale``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    S, C, K = cfg.num_states, cfg.num_categories, cfg.actions_per_category
    ranks = np.stack([rng.permutation(C) for _ in range(S)]).astype(float)
    base = cfg.category_value_spread * (ranks - (C - 1) / 2.0)
    noise = cfg.noise_scale * rng.standard_normal((S, C * K))
    reward = np.repeat(base, K, axis=1) + noise
    transition = rng.dirichlet(np.full(S, cfg.transition_concentration), size=(S, C * K))
    transition /= transition.sum(axis=-1, keepdims=True)
    env = EnvSpec(transition=transition, reward=reward, discount=cfg.discount, horizon=cfg.horizon)
    return env, block_classifier(C, K)


def make_random_env(num_states, num_actions, seed, discount=0.5, concentration=1.0,
                    num_terminal=0, horizon=20):
    """Unstructured random MDP (Dirichlet rows, standard-normal rewards)."""
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
    reward = rng.standard_normal((num_states, num_actions))
    terminals = list(range(num_states - num_terminal, num_states))
    for s in terminals:
        transition[s] = 0.0
        transition[s, :, s] = 1.0
        reward[s] = 0.0
    transition /= transition.sum(axis=-1, keepdims=True)
    return EnvSpec(transition=transition, reward=reward, discount=discount,
                   terminal_states=frozenset(terminals), horizon=horizon)


def rational_rows(rng, shape, size, denominator, max_support=None):
    """Random probability rows whose entries are multiples of ``1/denominator``."""
    out = np.zeros(tuple(shape) + (size,))
    flat = out.reshape(-1, size)
    support = size if max_support is None else min(size, max_support)
    for row in flat:
        cols = rng.choice(size, size=min(support, denominator), replace=False)
        counts = rng.multinomial(denominator - len(cols), np.full(len(cols), 1.0 / len(cols))) + 1
        row[cols] = counts / denominator
    return out


def make_rational_env(num_states, num_actions, seed, denominator=4, discount=0.5,
                      num_terminal=1, horizon=20):
    """Random MDP whose transition rows are multiples of ``1/denominator``.

    Paired with a policy of the same granularity, the exhaustive dataset of
    such an env replicates every tuple an integer number of times.
    """
    rng = np.random.default_rng(seed)
    transition = rational_rows(rng, (num_states, num_actions), num_states, denominator)
    reward = rng.standard_normal((num_states, num_actions))
    for s in range(num_states - num_terminal, num_states):
        transition[s] = 0.0
        transition[s, :, s] = 1.0
        reward[s] = 0.0
    terminals = range(num_states - num_terminal, num_states)
    return EnvSpec(transition=transition, reward=reward, discount=discount,
                   terminal_states=frozenset(terminals), horizon=horizon)


def best_category_by_reward(env, classifier, s):
    """Category with the highest mean one-step reward at state ``s``."""
    means = np.bincount(classifier.assign, weights=env.reward[s],
                        minlength=classifier.num_categories)
    means /= np.bincount(classifier.assign, minlength=classifier.num_categories)
    return int(np.argmax(means))


# -- token family ------------------------------------------------------------

MARKERS = ("SURPRISE", "QUESTION", "DULL")


@dataclass(frozen=True)
class VocabEntry:
    token: str
    topic: int
    marker: str | None = None


def normalize_token(token):
    return unicodedata.normalize("NFC", token.strip())


def parse_vocab(lines, source="<vocab>"):
    """Parse ``token topic [MARKER]`` lines; ``#`` starts a comment line."""
    entries = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ConfigError(f"{source}:{lineno}: expected 'token topic [MARKER]', got {line!r}")
        try:
            topic = int(parts[1])
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: topic must be an integer") from None
        marker = parts[2].upper() if len(parts) == 3 else None
        if marker is not None and marker not in MARKERS:
            raise ConfigError(f"{source}:{lineno}: unknown marker {parts[2]!r}")
        entries.append(VocabEntry(normalize_token(parts[0]), topic, marker))
    return tuple(entries)


def load_vocab(path):
    path = Path(path)
    return parse_vocab(path.read_text(encoding="utf-8").splitlines(), source=str(path))


def _resource_lines(name):
    return resources.files("dualq").joinpath("resources").joinpath(name).read_text("utf-8").splitlines()


def default_vocab():
    return parse_vocab(_resource_lines("default_vocab.txt"), source="default_vocab.txt")


def default_dull_templates():
    return tuple(tuple(normalize_token(t) for t in line.split())
                 for line in _resource_lines("default_dull.txt") if line.strip())


@dataclass(frozen=True)
class TokenEnvConfig:
    """Configuration of the token dialogue MDP.

    ``context_window`` is the number of past partner utterances forming the
    state. The partner answers in the topic of the agent's response with
    probability ``partner_follow`` (plus its share of the uniform remainder).
    """

    vocab: tuple = field(default_factory=default_vocab)
    dull_templates: tuple = field(default_factory=default_dull_templates)
    partner_templates: tuple | None = None
    max_len: int = 16
    context_window: int = 1
    content_lengths: tuple = (2, 6, 10, 14)
    partner_follow: float = 0.7
    end_prob: float = 0.0
    discount: float = 0.5
    horizon: int = 5
    action_cap: int = 10_000
    weights: RewardWeights = field(default_factory=RewardWeights)
    seed: int = 0

    @classmethod
    def from_files(cls, vocab_path, dull_path=None, **kwargs):
        vocab = load_vocab(vocab_path)
        if dull_path is not None:
            from .rewards import load_dull_templates

            dull = tuple(tuple(normalize_token(t) for t in tpl)
                         for tpl in load_dull_templates(dull_path))
        else:
            dull_tokens = tuple(e.token for e in vocab if e.marker == "DULL")
            if not dull_tokens:
                raise ConfigError("vocab has no DULL tokens and no dull template file was given")
            dull = (dull_tokens,)
        return cls(vocab=vocab, dull_templates=dull, **kwargs)

    @property
    def num_topics(self):
        return max(e.topic for e in self.vocab) + 1

    def topic_of(self):
        return {e.token: e.topic for e in self.vocab}

    def validate(self):
        if not self.vocab:
            raise ConfigError("vocab is empty")
        seen = {}
        for e in self.vocab:
            if e.topic < 0:
                raise ConfigError(f"token {e.token!r} has a negative topic")
            if e.token in seen:
                raise ConfigError(f"token {e.token!r} is listed more than once")
            seen[e.token] = e
        ordinary = {e.topic for e in self.vocab if e.marker is None}
        missing = set(range(self.num_topics)) - ordinary
        if missing:
            raise ConfigError(f"topics {sorted(missing)} have no ordinary tokens")
        if not self.dull_templates or not all(self.dull_templates):
            raise ConfigError("dull templates must be non-empty")
        for tpl in self.dull_templates:
            for tok in tpl:
                if tok not in seen:
                    raise ConfigError(f"dull template token {tok!r} is not in the vocab")
        check_positive_int(self.max_len, "max_len")
        check_positive_int(self.context_window, "context_window")
        check_positive_int(self.horizon, "horizon")
        check_positive_int(self.action_cap, "action_cap")
        if not self.content_lengths or min(self.content_lengths) < 1:
            raise ConfigError("content_lengths must be positive")
        check_probability(self.partner_follow, "partner_follow")
        check_probability(self.end_prob, "end_prob", high_open=True)
        check_probability(self.discount, "discount", low_open=True, high_open=True)
        return self


def _ordinary_by_topic(cfg, rng):
    by_topic = {}
    for e in cfg.vocab:
        if e.marker is None:
            by_topic.setdefault(e.topic, []).append(e.token)
    return {t: [toks[i] for i in rng.permutation(len(toks))] for t, toks in by_topic.items()}


def _cycle(tokens, n):
    return tuple(itertools.islice(itertools.cycle(tokens), n))


def token_responses(cfg):
    """Enumerate the response grammar: ``[opener] content [?]`` per topic and
    content length, followed by the dull templates."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    content = _ordinary_by_topic(cfg, rng)
    openers = [()] + [(e.token,) for e in cfg.vocab
                      if e.marker == "SURPRISE" or (e.marker == "QUESTION" and e.token != QUESTION_MARK)]
    has_qmark = any(e.token == QUESTION_MARK for e in cfg.vocab)
    closers = [(), (QUESTION_MARK,)] if has_qmark else [()]
    estimate = (cfg.num_topics * len(cfg.content_lengths) * len(openers) * len(closers)
                + len(cfg.dull_templates))
    if estimate > cfg.action_cap:
        raise ConfigError(
            f"token action space would hold up to {estimate} responses, above the cap of "
            f"{cfg.action_cap}; shrink the vocab (openers/topics), content_lengths or max_len")
    out, seen = [], set()
    for topic in range(cfg.num_topics):
        for n in cfg.content_lengths:
            body = _cycle(content[topic], n)
            for opener in openers:
                for closer in closers:
                    resp = opener + body + closer
                    if len(resp) <= cfg.max_len and resp not in seen:
                        seen.add(resp)
                        out.append(resp)
    for tpl in cfg.dull_templates:
        if len(tpl) <= cfg.max_len and tpl not in seen:
            seen.add(tpl)
            out.append(tuple(tpl))
    if not out:
        raise ConfigError("no response fits within max_len")
    return out


def majority_topic(response, topic_of):
    """Most frequent topic among the response's tokens; ties to the lowest id."""
    counts = Counter(topic_of[tok] for tok in response if tok in topic_of)
    if not counts:
        return 0
    best = max(counts.values())
    return min(t for t, c in counts.items() if c == best)


def _partner_templates(cfg, rng):
    if cfg.partner_templates is not None:
        return [(int(t), tuple(toks)) for t, toks in cfg.partner_templates]
    content = _ordinary_by_topic(cfg, rng)
    return [(t, _cycle(content[t][k:] + content[t][:k], n))
            for t in range(cfg.num_topics) for k, n in ((0, 3), (1, 5))]


def make_token_env(cfg=None):
    """Dialogue MDP over template responses; returns ``(env, classifier)``."""
    cfg = (cfg or TokenEnvConfig()).validate()
    responses = token_responses(cfg)
    topic_of = cfg.topic_of()
    assign = np.array([majority_topic(r, topic_of) for r in responses])
    classifier = Classifier(assign, cfg.num_topics)

    partner = _partner_templates(cfg, np.random.default_rng([cfg.seed, 1]))
    P = len(partner)
    p_topic = np.array([t for t, _ in partner])
    # partner reply distribution per agent topic
    reply = np.empty((cfg.num_topics, P))
    for t in range(cfg.num_topics):
        match = (p_topic == t).astype(float)
        follow = match / match.sum() if match.any() else np.full(P, 1.0 / P)
        reply[t] = cfg.partner_follow * follow + (1.0 - cfg.partner_follow) / P

    start = (START,) * cfg.context_window
    contexts, index, queue = [start], {start: 0}, deque([start])
    while queue:
        ctx = queue.popleft()
        for j in range(P):
            nxt = ctx[1:] + (j,)
            if nxt not in index:
                index[nxt] = len(contexts)
                contexts.append(nxt)
                queue.append(nxt)
    S = len(contexts) + (1 if cfg.end_prob > 0 else 0)
    A = len(responses)
    T = np.zeros((S, A, S))
    for ctx, s in index.items():
        for j in range(P):
            T[s, :, index[ctx[1:] + (j,)]] += (1.0 - cfg.end_prob) * reply[assign, j]
    terminals = frozenset()
    if cfg.end_prob > 0:
        T[:len(contexts), :, S - 1] = cfg.end_prob
        T[S - 1, :, S - 1] = 1.0
        terminals = frozenset({S - 1})
    lexicon = Lexicon(
        surprise=frozenset(e.token for e in cfg.vocab if e.marker == "SURPRISE"),
        question=frozenset(e.token for e in cfg.vocab if e.marker == "QUESTION"),
        dull_templates=tuple(cfg.dull_templates),
        weights=cfg.weights,
    )
    per_action = np.array([lexicon.total(r) for r in responses])
    R = np.tile(per_action, (S, 1))
    if terminals:
        R[S - 1] = 0.0
    initial = np.zeros(S)
    initial[0] = 1.0
    labels = ["|".join("<start>" if j == START else " ".join(partner[j][1]) for j in ctx)
              for ctx in contexts]
    if terminals:
        labels.append("<end>")
    env = EnvSpec(transition=T, reward=R, discount=cfg.discount, terminal_states=terminals,
                  horizon=cfg.horizon, initial=initial, responses=tuple(responses),
                  lexicon=lexicon, state_labels=tuple(labels))
    return env, classifier


# -- stepping and persistence --------------------------------------------------

def env_step(env, s, a, rng):
    """Sample one transition; ``done`` is set when the next state is terminal."""
    s = check_index(s, env.num_states, "state")
    a = check_index(a, env.num_actions, "action")
    if s in env.terminal_states:
        raise DomainError(f"cannot step from terminal state {s}")
    cdf = np.cumsum(env.transition[s, a])
    s_next = int(min(np.searchsorted(cdf, rng.random(), side="right"), env.num_states - 1))
    return s_next, float(env.reward[s, a]), s_next in env.terminal_states


def save_env(path, env, classifier):
    payload = {"format": ENV_FORMAT, "env": env.to_dict(), "classifier": classifier.to_dict()}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_env(path):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidEnvError(f"{path}: not valid JSON ({exc})") from exc
    if payload.get("format") != ENV_FORMAT:
        raise InvalidEnvError(f"{path}: unsupported format {payload.get('format')!r}")
    env = EnvSpec.from_dict(payload["env"])
    classifier = Classifier.from_dict(payload["classifier"])
    if classifier.num_actions != env.num_actions:
        raise InvalidEnvError(f"{path}: classifier and environment disagree on the action count")
    return env, classifier
