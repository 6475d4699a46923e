"""Finite MDPs and the exact dynamic-programming oracles used to ground-truth
every learned quantity in the package.

States and actions are integer ids. Value tables are plain ``(S,)`` arrays and
action-value tables ``(S, A)`` arrays; a :class:`Policy` wraps an ``(S, A)``
row-stochastic matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import ROW_SUM_TOL, check_stochastic_rows
from .exceptions import ConfigError, InvalidEnvError, InvalidPolicyError

DEFAULT_TOL = 1e-10
MAX_SWEEPS = 1_000_000


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EnvSpec:
    """A finite discounted MDP.

    ``transition[s, a]`` is the next-state distribution and ``reward[s, a]`` the
    expected immediate reward. Token environments additionally carry the
    response each action id stands for (``responses``) and the reward lexicon.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    terminal_states: frozenset = frozenset()
    horizon: int = 20
    initial: np.ndarray | None = None
    responses: tuple | None = None
    lexicon: object | None = None
    state_labels: tuple | None = None
    _fingerprint: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=float)
        R = np.asarray(self.reward, dtype=float)
        if T.ndim != 3 or R.ndim != 2 or T.shape[:2] != R.shape or T.shape[0] != T.shape[2]:
            raise InvalidEnvError(
                f"transition must be (S, A, S) and reward (S, A); got {T.shape} and {R.shape}")
        if T.shape[0] == 0 or T.shape[1] == 0:
            raise InvalidEnvError("environment needs at least one state and one action")
        if not np.all(np.isfinite(R)):
            raise InvalidEnvError("reward contains non-finite entries")
        check_stochastic_rows(T, name="transition", error=InvalidEnvError)
        if not (0.0 < float(self.discount) < 1.0):
            raise InvalidEnvError(f"discount must lie strictly inside (0, 1), got {self.discount!r}")
        S = T.shape[0]
        terminals = frozenset(int(s) for s in self.terminal_states)
        for s in terminals:
            if not 0 <= s < S:
                raise InvalidEnvError(f"terminal state {s} out of range")
            if np.any(T[s, :, s] != 1.0) or np.any(R[s] != 0.0):
                raise InvalidEnvError(f"terminal state {s} must self-loop with reward 0")
        if self.horizon < 1:
            raise InvalidEnvError("horizon must be >= 1")
        if self.initial is None:
            init = np.zeros(S)
            live = [s for s in range(S) if s not in terminals] or list(range(S))
            init[live] = 1.0 / len(live)
        else:
            init = check_stochastic_rows(self.initial, name="initial", error=InvalidEnvError)
            if init.shape != (S,):
                raise InvalidEnvError("initial distribution must have one entry per state")
        if self.responses is not None and len(self.responses) != T.shape[1]:
            raise InvalidEnvError("responses must list one token sequence per action")
        object.__setattr__(self, "transition", _frozen(T))
        object.__setattr__(self, "reward", _frozen(R))
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "terminal_states", terminals)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "initial", _frozen(init))
        if self.responses is not None:
            object.__setattr__(self, "responses", tuple(tuple(r) for r in self.responses))

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]

    @property
    def actions(self):
        return range(self.num_actions)

    @property
    def terminal_mask(self):
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    def to_dict(self):
        """JSON-ready representation; floats survive a round trip exactly."""
        S, A = self.num_states, self.num_actions
        nz = np.argwhere(self.transition > 0)
        out = {
            "num_states": S,
            "num_actions": A,
            "discount": self.discount,
            "horizon": self.horizon,
            "terminal_states": sorted(self.terminal_states),
            "initial": self.initial.tolist(),
            "reward": self.reward.tolist(),
            "transition": [[int(s), int(a), int(t), float(self.transition[s, a, t])]
                           for s, a, t in nz],
        }
        if self.responses is not None:
            out["responses"] = [" ".join(r) for r in self.responses]
        if self.lexicon is not None:
            out["lexicon"] = self.lexicon.to_dict()
        if self.state_labels is not None:
            out["state_labels"] = list(self.state_labels)
        return out

    @classmethod
    def from_dict(cls, data):
        from .rewards import Lexicon

        try:
            S, A = int(data["num_states"]), int(data["num_actions"])
            T = np.zeros((S, A, S))
            for s, a, t, p in data["transition"]:
                T[int(s), int(a), int(t)] = float(p)
            responses = data.get("responses")
            if responses is not None:
                responses = [tuple(r.split(" ")) if r else () for r in responses]
            lexicon = data.get("lexicon")
            return cls(
                transition=T,
                reward=np.asarray(data["reward"], dtype=float),
                discount=float(data["discount"]),
                terminal_states=frozenset(data.get("terminal_states", ())),
                horizon=int(data.get("horizon", 20)),
                initial=np.asarray(data["initial"], dtype=float),
                responses=responses,
                lexicon=Lexicon.from_dict(lexicon) if lexicon is not None else None,
                state_labels=tuple(data["state_labels"]) if "state_labels" in data else None,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise InvalidEnvError(f"malformed environment record: {exc!r}") from exc

    def fingerprint(self):
        """Hex SHA-256 of the canonical serialization."""
        if not self._fingerprint:
            blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
            self._fingerprint.append(hashlib.sha256(blob.encode()).hexdigest())
        return self._fingerprint[0]


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic ``(S, A)`` matrix; ``A`` may be a category count."""

    probs: np.ndarray

    def __post_init__(self):
        p = check_stochastic_rows(self.probs, name="policy")
        if p.ndim != 2:
            raise InvalidPolicyError(f"policy must be 2-D (states x actions), got {p.shape}")
        object.__setattr__(self, "probs", _frozen(p))

    @classmethod
    def uniform(cls, num_states, num_actions):
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions):
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((len(actions), num_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @property
    def num_states(self):
        return self.probs.shape[0]

    @property
    def num_actions(self):
        return self.probs.shape[1]

    def greedy(self):
        """Most probable action per state, ties to the lowest id."""
        return np.argmax(self.probs, axis=1)

    def __eq__(self, other):
        return isinstance(other, Policy) and np.array_equal(self.probs, other.probs)

    __hash__ = None


def _check_compatible(env, pi):
    if not isinstance(pi, Policy):
        pi = Policy(pi)
    if pi.probs.shape != (env.num_states, env.num_actions):
        raise InvalidPolicyError(
            f"policy shape {pi.probs.shape} does not match env ({env.num_states}, {env.num_actions})")
    return pi


def _check_tol(tol):
    if not tol > 0:
        raise ConfigError(f"tol must be positive, got {tol!r}")


def exact_policy_evaluation(env, pi, tol=DEFAULT_TOL):
    """State values of ``pi``, by iterating the Bellman expectation operator.

    Stops once the max-norm change is at most ``tol`` and returns the last
    iterate, whose own Bellman residual is then at most ``discount * tol``.
    """
    _check_tol(tol)
    pi = _check_compatible(env, pi)
    r_pi = np.einsum("sa,sa->s", pi.probs, env.reward)
    P_pi = np.einsum("sa,sat->st", pi.probs, env.transition)
    v = np.zeros(env.num_states)
    for _ in range(MAX_SWEEPS):
        v_new = r_pi + env.discount * (P_pi @ v)
        if np.max(np.abs(v_new - v)) <= tol:
            return v_new
        v = v_new
    raise RuntimeError("policy evaluation did not reach tolerance")  # pragma: no cover


def bellman_backup(env, v):
    """``R(s, a) + discount * sum_s' T(s'|s, a) v(s')`` for every pair."""
    return env.reward + env.discount * (env.transition @ v)


def exact_action_values(env, pi, tol=DEFAULT_TOL):
    v = exact_policy_evaluation(env, pi, tol)
    return bellman_backup(env, v)


def value_iteration(env, tol=DEFAULT_TOL):
    """Optimal values and the greedy deterministic policy (ties to the lowest id)."""
    _check_tol(tol)
    v = np.zeros(env.num_states)
    for _ in range(MAX_SWEEPS):
        v_new = bellman_backup(env, v).max(axis=1)
        if np.max(np.abs(v_new - v)) <= tol:
            v = v_new
            break
        v = v_new
    greedy = np.argmax(bellman_backup(env, v), axis=1)
    return v, Policy.deterministic(greedy, env.num_actions)


def induced_argmax_policy(pi, q, L, tie_tol=0.0):
    """Exact distribution of "draw ``L`` actions i.i.d. from ``pi``, keep the Q-argmax".

    With ``F`` the c.d.f. of ``q(s, .)`` under ``pi(.|s)``, a group of actions
    sharing the value ``v`` wins with probability ``F(v)**L - F(v-)**L``; that
    mass is split in proportion to ``pi`` inside the group, which is what
    picking uniformly among the tied draws produces. Values closer than
    ``tie_tol`` count as tied.
    """
    if isinstance(L, bool) or not isinstance(L, (int, np.integer)) or L < 1:
        raise ConfigError(f"L must be a positive integer, got {L!r}")
    probs = pi.probs if isinstance(pi, Policy) else check_stochastic_rows(pi)
    q = np.asarray(q, dtype=float)
    if q.shape != probs.shape:
        raise InvalidPolicyError(f"q shape {q.shape} does not match policy shape {probs.shape}")
    if L == 1:
        return Policy(probs.copy())
    out = np.zeros_like(probs)
    for s in range(probs.shape[0]):
        p, qs = probs[s], q[s]
        support = np.flatnonzero(p > 0)
        order = support[np.argsort(qs[support], kind="stable")]
        cdf_below = 0.0
        i = 0
        while i < len(order):
            j = i + 1
            while j < len(order) and qs[order[j]] - qs[order[i]] <= tie_tol:
                j += 1
            group = order[i:j]
            cdf_here = cdf_below + p[group].sum()
            mass = min(cdf_here, 1.0) ** L - cdf_below ** L
            out[s, group] = mass * p[group] / p[group].sum()
            cdf_below = cdf_here
            i = j
        total = out[s].sum()
        if total > 0:
            out[s] /= total
    return Policy(out)


__all__ = [
    "EnvSpec",
    "Policy",
    "ROW_SUM_TOL",
    "bellman_backup",
    "exact_action_values",
    "exact_policy_evaluation",
    "induced_argmax_policy",
    "value_iteration",
]
