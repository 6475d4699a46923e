"""Response-level rewards: dull-response similarity, surprise, length and
question asking, plus their weighted total.

A response is any sequence of string tokens. Token matching is exact; no
case folding happens here.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError

SURPRISE_TOKENS = frozenset({"Aha", "Oh", "Wow", "Whoa", "Gee", "Really?", "Amazing"})
QUESTION_TOKENS = frozenset({"What", "Why", "How", "Where", "When", "Who", "Which", "?"})
QUESTION_MARK = "?"
DEFAULT_DULL = (
    ("I", "don't", "know"),
    ("I'm", "not", "sure"),
    ("ok",),
    ("yeah",),
)


@dataclass(frozen=True)
class RewardWeights:
    """Weights of the signed linear total; the dull term enters negatively."""

    w_dull: float = 1.0
    w_surprise: float = 1.0
    w_length: float = 1.0
    w_question: float = 1.0

    def __post_init__(self):
        for name in ("w_dull", "w_surprise", "w_length", "w_question"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"{name} must be finite, got {value!r}")


def _cosine(a: Counter, b: Counter) -> float:
    dot = sum(count * b[tok] for tok, count in a.items())
    if dot == 0:
        return 0.0
    na = math.sqrt(sum(c * c for c in a.values()))
    nb = math.sqrt(sum(c * c for c in b.values()))
    return min(1.0, dot / (na * nb))


def dull_similarity(response, dull_list) -> float:
    """Largest bag-of-words cosine between ``response`` and any dull template.

    An empty response counts as maximally dull (1.0).
    """
    if not dull_list:
        raise ConfigError("dull_list must contain at least one template")
    if len(response) == 0:
        return 1.0
    bag = Counter(response)
    return max(_cosine(bag, Counter(t)) if len(t) else 0.0 for t in dull_list)


def surprise_reward(response, surprise_tokens=SURPRISE_TOKENS) -> float:
    return 1.0 if any(tok in surprise_tokens for tok in response) else 0.0


def length_reward(response) -> float:
    n = len(response)
    if n < 5:
        return -0.5
    if n < 10:
        return 0.0
    if n < 15:
        return 0.5
    return 1.0


def question_reward(response, question_tokens=QUESTION_TOKENS) -> float:
    return 1.0 if any(tok == QUESTION_MARK or tok in question_tokens for tok in response) else 0.0


def total_reward(response, weights=RewardWeights(), dull_list=DEFAULT_DULL,
                 surprise_tokens=SURPRISE_TOKENS, question_tokens=QUESTION_TOKENS) -> float:
    return combine(weights,
                   dull_similarity(response, dull_list),
                   surprise_reward(response, surprise_tokens),
                   length_reward(response),
                   question_reward(response, question_tokens))


def combine(weights, dull, surprise, length, question):
    return (-weights.w_dull * dull + weights.w_surprise * surprise
            + weights.w_length * length + weights.w_question * question)


def load_dull_templates(path):
    """One whitespace-tokenized template per non-blank line."""
    templates = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            templates.append(tuple(line.split()))
    if not templates:
        raise ConfigError(f"{path}: no dull templates found")
    return tuple(templates)


@dataclass(frozen=True)
class Lexicon:
    """The token sets and weights one environment scores responses with."""

    surprise: frozenset = SURPRISE_TOKENS
    question: frozenset = QUESTION_TOKENS
    dull_templates: tuple = DEFAULT_DULL
    weights: RewardWeights = field(default_factory=RewardWeights)

    def components(self, response):
        """``(dull, surprise, length_reward, question)`` for one response."""
        return (dull_similarity(response, self.dull_templates),
                surprise_reward(response, self.surprise),
                length_reward(response),
                question_reward(response, self.question))

    def total(self, response):
        return combine(self.weights, *self.components(response))

    def to_dict(self):
        return {
            "surprise": sorted(self.surprise),
            "question": sorted(self.question),
            "dull_templates": [" ".join(t) for t in self.dull_templates],
            "weights": [self.weights.w_dull, self.weights.w_surprise,
                        self.weights.w_length, self.weights.w_question],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            surprise=frozenset(data["surprise"]),
            question=frozenset(data["question"]),
            dull_templates=tuple(tuple(t.split()) for t in data["dull_templates"]),
            weights=RewardWeights(*data["weights"]),
        )
