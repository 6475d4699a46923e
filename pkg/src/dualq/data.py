"""Logged SARSA datasets: behavior policies, collection, coarsening and
the tab-separated file format.

A dataset is stored column-wise. ``a_next`` holds ``-1`` on ``done`` rows,
which bootstrap with zero during fitting; episodes cut by the horizon are
marked ``done`` as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._sampling import sample_rows
from ._validation import check_positive_int, check_probability
from .exceptions import ConfigError, DatasetFormatError, DomainError, FingerprintError
from .mdp import Policy, value_iteration

DATASET_FORMAT = "dualq-dataset/1"
NO_ACTION = -1
COLUMNS = ("episode_id", "t", "s", "a", "r", "s_next", "a_next", "done")


@dataclass(frozen=True)
class Transition:
    """One logged ``(s, a, r, s', a')`` record; ``a_next`` is ``None`` when done."""

    episode_id: int
    t: int
    s: int
    a: int
    r: float
    s_next: int
    a_next: int | None
    done: bool


class CoarseTransition(Transition):
    """A :class:`Transition` whose ``a``/``a_next`` are category ids."""


@dataclass(eq=False)
class Dataset:
    episode_id: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    done: np.ndarray
    env_fingerprint: str = ""
    behavior: str = ""
    kind: str = "fine"

    def __post_init__(self):
        ints = ("episode_id", "t", "s", "a", "s_next", "a_next")
        for name in ints:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.r = np.asarray(self.r, dtype=float)
        self.done = np.asarray(self.done, dtype=bool)
        n = len(self.s)
        if any(len(getattr(self, c)) != n for c in COLUMNS):
            raise ConfigError("dataset columns have different lengths")
        if self.kind not in ("fine", "coarse"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if not np.all(np.isfinite(self.r)):
            raise ConfigError("dataset rewards must be finite")
        if np.any((self.a_next == NO_ACTION) != self.done):
            raise ConfigError("a_next must be present exactly on non-done transitions")
        for col in ints:
            getattr(self, col).setflags(write=False)
        self.r.setflags(write=False)
        self.done.setflags(write=False)

    def __len__(self):
        return len(self.s)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(np.arange(len(self))[i])
        cls = CoarseTransition if self.kind == "coarse" else Transition
        a_next = int(self.a_next[i])
        return cls(int(self.episode_id[i]), int(self.t[i]), int(self.s[i]), int(self.a[i]),
                   float(self.r[i]), int(self.s_next[i]),
                   None if a_next == NO_ACTION else a_next, bool(self.done[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def transitions(self):
        return list(self)

    def subset(self, idx):
        return Dataset(*(getattr(self, c)[idx] for c in COLUMNS), env_fingerprint=self.env_fingerprint,
                       behavior=self.behavior, kind=self.kind)

    def head(self, k):
        return self.subset(np.arange(min(k, len(self))))

    @classmethod
    def from_transitions(cls, transitions, env_fingerprint="", behavior="", kind="fine"):
        rows = list(transitions)
        cols = {c: [getattr(tr, c) for tr in rows] for c in COLUMNS}
        cols["a_next"] = [NO_ACTION if x is None else x for x in cols["a_next"]]
        return cls(**cols, env_fingerprint=env_fingerprint, behavior=behavior, kind=kind)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.kind == other.kind and self.env_fingerprint == other.env_fingerprint
                and self.behavior == other.behavior
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in COLUMNS))

    __hash__ = None


def make_behavior_policy(env, quality=0.5, epsilon=0.1):
    """Mix the optimal greedy policy (weight ``quality``) with uniform, then
    smooth so every action keeps probability at least ``epsilon / |A|``."""
    quality = check_probability(quality, "quality")
    epsilon = check_probability(epsilon, "epsilon", low_open=True)
    A = env.num_actions
    _, greedy = value_iteration(env)
    mixed = quality * greedy.probs + (1.0 - quality) / A
    probs = (1.0 - epsilon) * mixed + epsilon / A
    return Policy(probs / probs.sum(axis=1, keepdims=True))


def collect_dataset(env, pi_beta, episodes, horizon, seed, behavior=""):
    """Roll ``episodes`` episodes of ``pi_beta`` and log on-policy SARSA tuples.

    Episodes advance in lock-step; the output is ordered by episode, then step.
    """
    episodes = check_positive_int(episodes, "episodes")
    horizon = check_positive_int(horizon, "horizon")
    if env.num_states == 0 or env.num_actions == 0:
        raise ConfigError("cannot collect from an empty environment")
    probs = pi_beta.probs if isinstance(pi_beta, Policy) else np.asarray(pi_beta)
    rng = np.random.default_rng(seed)
    terminal = env.terminal_mask
    ep = np.arange(episodes)
    s = sample_rows(np.broadcast_to(env.initial, (episodes, env.num_states)), rng)
    a = sample_rows(probs[s], rng)
    cols = {c: [] for c in COLUMNS}
    for t in range(horizon):
        if ep.size == 0:
            break
        s_next = sample_rows(env.transition[s, a], rng)
        done = terminal[s_next] | (t == horizon - 1)
        a_next = np.full(ep.size, NO_ACTION)
        live = ~done
        if live.any():
            a_next[live] = sample_rows(probs[s_next[live]], rng)
        for name, value in zip(COLUMNS, (ep, np.full(ep.size, t), s, a, env.reward[s, a],
                                         s_next, a_next, done)):
            cols[name].append(value)
        ep, s, a = ep[live], s_next[live], a_next[live]
    cols = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.lexsort((cols["t"], cols["episode_id"]))
    return Dataset(**{k: v[order] for k, v in cols.items()}, env_fingerprint=env.fingerprint(),
                   behavior=behavior or f"collect(episodes={episodes},horizon={horizon},seed={seed})")


def _as_counts(row, denominator, what):
    counts = np.rint(np.asarray(row) * denominator)
    if np.max(np.abs(counts - np.asarray(row) * denominator)) > 1e-9:
        raise ConfigError(f"{what} probabilities are not multiples of 1/{denominator}")
    return counts.astype(np.int64)


def exhaustive_dataset(env, pi, denominator, behavior="exhaustive", action_weighted=False):
    """Every ``(s, a, s', a')`` tuple replicated in exact proportion to
    ``T(s'|s, a) * pi(a'|s')``, times ``pi(a|s)`` when ``action_weighted``.

    Requires transition rows and policy rows to be multiples of
    ``1 / denominator``. Each ``(s, a)`` cell then holds the exact one-step
    expectation, so a tabular fit converges to the exact action values.
    """
    denominator = check_positive_int(denominator, "denominator")
    probs = pi.probs if isinstance(pi, Policy) else np.asarray(pi)
    terminal = env.terminal_mask
    pi_counts = [_as_counts(probs[s], denominator, "policy") for s in range(env.num_states)]
    rows = []
    for s in range(env.num_states):
        if terminal[s]:
            continue
        for a in range(env.num_actions):
            w = int(pi_counts[s][a]) if action_weighted else 1
            if w == 0:
                continue
            t_counts = _as_counts(env.transition[s, a], denominator, "transition")
            for s2 in np.flatnonzero(t_counts):
                if terminal[s2]:
                    rows.extend([(s, a, s2, NO_ACTION, True)] * (w * int(t_counts[s2] * denominator)))
                    continue
                for a2 in np.flatnonzero(pi_counts[s2]):
                    rows.extend([(s, a, s2, a2, False)] * (w * int(t_counts[s2] * pi_counts[s2][a2])))
    arr = np.array(rows, dtype=np.int64)
    n = len(arr)
    return Dataset(episode_id=np.arange(n), t=np.zeros(n), s=arr[:, 0], a=arr[:, 1],
                   r=env.reward[arr[:, 0], arr[:, 1]], s_next=arr[:, 2], a_next=arr[:, 3],
                   done=arr[:, 4].astype(bool), env_fingerprint=env.fingerprint(), behavior=behavior)


def coarsen_dataset(d, f):
    """Replace fine actions by their categories; everything else is kept."""
    if d.kind != "fine":
        raise ConfigError("dataset is already coarse")
    for col in ("a", "a_next"):
        vals = getattr(d, col)
        bad = np.flatnonzero((vals >= f.num_actions) | (vals < NO_ACTION)
                             | ((vals == NO_ACTION) & (col == "a")))
        if bad.size:
            i = int(bad[0])
            raise DomainError(f"transition {i} ({d[i]}) has an action outside the classifier domain")
    a_next = np.where(d.done, NO_ACTION, f.assign[np.where(d.done, 0, d.a_next)])
    return Dataset(d.episode_id, d.t, d.s, f.assign[d.a], d.r, d.s_next, a_next, d.done,
                   env_fingerprint=d.env_fingerprint, behavior=d.behavior, kind="coarse")


# -- persistence -------------------------------------------------------------

def _check_field(text, what):
    if any(ch in text for ch in "\t\n\r\""):
        raise ConfigError(f"{what} may not contain tabs, newlines or quotes: {text!r}")
    return text


def _format_action(a, responses):
    if a == NO_ACTION:
        return "-"
    if responses is None:
        return str(int(a))
    return '"' + " ".join(responses[a]) + '"'


def save_dataset(d, path, env=None):
    """Write ``d`` as one header line plus one tab-separated line per transition.

    With a token environment, fine actions are written as quoted, space-joined
    responses instead of ids.
    """
    responses = env.responses if env is not None and d.kind == "fine" else None
    header = "\t".join([f"# {DATASET_FORMAT}", f"kind={d.kind}",
                        f"fingerprint={d.env_fingerprint}",
                        f"behavior={_check_field(d.behavior, 'behavior')}"])
    lines = [header]
    for i in range(len(d)):
        lines.append("\t".join((
            str(int(d.episode_id[i])), str(int(d.t[i])), str(int(d.s[i])),
            _format_action(int(d.a[i]), responses), repr(float(d.r[i])), str(int(d.s_next[i])),
            _format_action(int(d.a_next[i]), responses), "1" if d.done[i] else "0")))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def _parse_header(line):
    parts = line.rstrip("\n").split("\t")
    if not parts or parts[0] != f"# {DATASET_FORMAT}":
        raise DatasetFormatError(f"expected header '# {DATASET_FORMAT}'", line=1)
    meta = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise DatasetFormatError(f"bad header field {part!r}", line=1)
        meta[key] = value
    for key in ("kind", "fingerprint", "behavior"):
        if key not in meta:
            raise DatasetFormatError(f"header lacks {key!r}", line=1)
    return meta


def load_dataset(path, env):
    """Read a dataset written by :func:`save_dataset`, refusing any file whose
    fingerprint does not match ``env``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError("empty file", line=1)
    meta = _parse_header(lines[0])
    if meta["fingerprint"] != env.fingerprint():
        raise FingerprintError(
            f"{path}: dataset was collected on env {meta['fingerprint'][:12]}..., "
            f"not {env.fingerprint()[:12]}...")
    kind = meta["kind"]
    lookup = None
    if kind == "fine" and env.responses is not None:
        lookup = {r: i for i, r in enumerate(env.responses)}

    def action(text, lineno):
        if text == "-":
            return NO_ACTION
        if text.startswith('"'):
            if lookup is None or not text.endswith('"') or len(text) < 2:
                raise DatasetFormatError(f"unexpected quoted action {text!r}", line=lineno)
            key = tuple(text[1:-1].split(" ")) if len(text) > 2 else ()
            if key not in lookup:
                raise DatasetFormatError(f"response {text} is not an action of this env", line=lineno)
            return lookup[key]
        return int(text)

    cols = {c: [] for c in COLUMNS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(COLUMNS):
            raise DatasetFormatError(f"expected {len(COLUMNS)} fields, got {len(parts)}", line=lineno)
        try:
            ep, t, s = int(parts[0]), int(parts[1]), int(parts[2])
            a = action(parts[3], lineno)
            r = float(parts[4])
            s_next = int(parts[5])
            a_next = action(parts[6], lineno)
            if parts[7] not in ("0", "1"):
                raise ValueError(f"done flag {parts[7]!r}")
            done = parts[7] == "1"
        except ValueError as exc:
            raise DatasetFormatError(str(exc), line=lineno) from None
        limit = env.num_actions if kind == "fine" else None
        if not (0 <= s < env.num_states and 0 <= s_next < env.num_states):
            raise DatasetFormatError("state id out of range", line=lineno)
        if a < 0 or (limit is not None and (a >= limit or a_next >= limit)):
            raise DatasetFormatError("action id out of range", line=lineno)
        if (a_next == NO_ACTION) != done:
            raise DatasetFormatError("a_next must be '-' exactly when done", line=lineno)
        for name, value in zip(COLUMNS, (ep, t, s, a, r, s_next, a_next, done)):
            cols[name].append(value)
    return Dataset(**{k: np.asarray(v) for k, v in cols.items()}, env_fingerprint=meta["fingerprint"],
                   behavior=meta["behavior"], kind=kind)

