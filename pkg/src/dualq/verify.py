"""Exact checks of the sampled-argmax improvement results, and the desk-scale
measurements that compare dual and standard candidate generation.

Everything here runs on exact dynamic programming from :mod:`dualq.mdp`, so
a reported violation is a property of the environment, not of noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._sampling import sample_rows
from ._validation import check_index_array, check_positive_int
from .exceptions import ConfigError, DomainError
from .mdp import (DEFAULT_TOL, EnvSpec, Policy, bellman_backup, exact_policy_evaluation,
                  induced_argmax_policy)
from .qlearn import q_table_of

VIOLATION_TOL = 1e-9


def _expected_q(probs, q):
    return np.einsum("sa,sa->s", probs, q)


@dataclass
class TheoremReport:
    """Values of the induced policies for a sweep of sample sizes.

    ``monotone`` is the value claim itself. ``lemma_monotone`` is the weaker
    one-step claim that the expected Q of the base policy under the induced
    policy grows with ``L``; ``floor_ok`` says every induced policy is at
    least as good as the base policy.
    """

    env_fingerprint: str
    L_values: list
    values: dict
    base_values: np.ndarray
    monotone: bool
    max_violation: float
    lemma_monotone: bool = True
    lemma_max_violation: float = 0.0
    floor_ok: bool = True
    floor_max_violation: float = 0.0
    violations: list = field(default_factory=list)

    def to_rows(self):
        return [{"L": L, "state": s, "value": float(v)}
                for L in self.L_values for s, v in enumerate(self.values[L])]


def _max_drop(curves):
    """Largest decrease between consecutive rows of ``curves`` (shape ``(k, S)``)."""
    if len(curves) < 2:
        return 0.0, []
    drops = curves[:-1] - curves[1:]
    bad = np.argwhere(drops > VIOLATION_TOL)
    return max(0.0, float(drops.max())), [(int(i), int(s)) for i, s in bad]


def theorem1_curve(env, pi, Ls=(1, 2, 4, 8, 16), tol=DEFAULT_TOL):
    """Exact value of the induced argmax policy for each ``L`` in ``Ls``."""
    Ls = [int(L) for L in Ls]
    if not Ls or any(L < 1 for L in Ls) or Ls != sorted(Ls):
        raise ConfigError(f"Ls must be a non-empty ascending list of positive counts, got {Ls}")
    pi = pi if isinstance(pi, Policy) else Policy(pi)
    v_pi = exact_policy_evaluation(env, pi, tol)
    q_pi = bellman_backup(env, v_pi)
    values, lemma = {}, []
    for L in Ls:
        induced = induced_argmax_policy(pi, q_pi, L)
        values[L] = exact_policy_evaluation(env, induced, tol)
        lemma.append(_expected_q(induced.probs, q_pi))
    curves = np.array([values[L] for L in Ls])
    max_violation, bad = _max_drop(curves)
    lemma_violation, _ = _max_drop(np.array(lemma))
    floor = float(np.max(v_pi[None, :] - curves))
    return TheoremReport(
        env_fingerprint=env.fingerprint(), L_values=Ls, values=values, base_values=v_pi,
        monotone=max_violation <= VIOLATION_TOL, max_violation=max_violation,
        lemma_monotone=lemma_violation <= VIOLATION_TOL, lemma_max_violation=lemma_violation,
        floor_ok=floor <= VIOLATION_TOL, floor_max_violation=max(0.0, floor),
        violations=[(Ls[i], Ls[i + 1], s) for i, s in bad])


@dataclass
class Theorem2Report:
    E_alpha: np.ndarray
    E_beta: np.ndarray
    var_alpha: np.ndarray
    var_beta: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    premise_mean: bool
    premise_variance: bool
    lemma_holds: bool
    conclusion_holds: bool | None
    max_violation: float
    violating_states: list

    @property
    def premise_violated(self):
        return not (self.premise_mean and self.premise_variance)


def theorem2_check(env, pi_alpha, pi_beta, pi_eval, L, var_tol=1e-9, tol=DEFAULT_TOL):
    """Compare the induced argmax policies of two samplers under one critic.

    The premise is checked per state: a higher mean of ``Q^{pi_eval}`` under
    ``pi_alpha`` and a variance within ``var_tol`` (relative) of
    ``pi_beta``'s. If it fails anywhere, ``conclusion_holds`` is ``None``.
    """
    L = check_positive_int(L, "L")
    pa, pb = (p if isinstance(p, Policy) else Policy(p) for p in (pi_alpha, pi_beta))
    q = bellman_backup(env, exact_policy_evaluation(env, pi_eval, tol))
    Ea, Eb = _expected_q(pa.probs, q), _expected_q(pb.probs, q)
    Va = _expected_q(pa.probs, q ** 2) - Ea ** 2
    Vb = _expected_q(pb.probs, q ** 2) - Eb ** 2
    scale = np.maximum(1.0, np.maximum(np.abs(Va), np.abs(Vb)))
    premise_mean = bool(np.all(Ea >= Eb - VIOLATION_TOL))
    premise_variance = bool(np.all(np.abs(Va - Vb) <= var_tol * scale))
    ia, ib = induced_argmax_policy(pa, q, L), induced_argmax_policy(pb, q, L)
    lemma_holds = bool(np.all(_expected_q(ia.probs, q) >= _expected_q(ib.probs, q) - VIOLATION_TOL))
    V1 = exact_policy_evaluation(env, ia, tol)
    V2 = exact_policy_evaluation(env, ib, tol)
    gap = V2 - V1
    max_violation = max(0.0, float(gap.max()))
    premise_ok = premise_mean and premise_variance
    return Theorem2Report(
        E_alpha=Ea, E_beta=Eb, var_alpha=Va, var_beta=Vb, V1=V1, V2=V2,
        premise_mean=premise_mean, premise_variance=premise_variance, lemma_holds=lemma_holds,
        conclusion_holds=(max_violation <= VIOLATION_TOL) if premise_ok else None,
        max_violation=max_violation,
        violating_states=[int(s) for s in np.flatnonzero(gap > VIOLATION_TOL)])


def _dominant_row(p, q, shift):
    """Raise the mean of ``q`` under ``p`` while keeping its variance.

    Mass ``shift * p[lo]`` moves from the lowest-Q to the highest-Q action,
    then a mean-preserving spread or contraction through a middle action
    restores the variance (variance is linear in the amount moved). Returns
    ``None`` when the row has no room for that.
    """
    support = np.flatnonzero(p > 0)
    qs = q[support]
    lo, hi = support[np.argmin(qs)], support[np.argmax(qs)]
    q_lo, q_hi = q[lo], q[hi]
    mids = [a for a in support if q_lo < q[a] < q_hi]
    if q_hi - q_lo <= 1e-12 or not mids:
        return None
    mean0 = p @ q
    var0 = p @ q ** 2 - mean0 ** 2
    out = p.copy()
    t = shift * out[lo]
    out[lo] -= t
    out[hi] += t
    mid = max(mids, key=lambda a: (out[a], -a))
    q_mid = q[mid]
    w_hi = (q_mid - q_lo) / (q_hi - q_lo)
    w_lo = 1.0 - w_hi
    mean1 = out @ q
    var1 = out @ q ** 2 - mean1 ** 2
    u = (var0 - var1) / ((q_hi - q_mid) * (q_mid - q_lo))
    # u > 0 takes u from mid and splits it onto the extremes; u < 0 the reverse
    out[mid] -= u
    out[hi] += u * w_hi
    out[lo] += u * w_lo
    if np.any(out < -1e-15) or out @ q <= mean0 + 1e-12:
        return None
    out = np.clip(out, 0.0, None)
    return out / out.sum()


def dominant_equal_variance_policy(pi_beta, q, shift=0.5):
    """A sampler with higher mean Q and the same Q variance as ``pi_beta``.

    States where the construction has no room keep ``pi_beta``'s row.
    Returns the policy and the mask of states that were changed.
    """
    pb = pi_beta.probs if isinstance(pi_beta, Policy) else np.asarray(pi_beta)
    q = np.asarray(q, dtype=float)
    out = pb.copy()
    changed = np.zeros(pb.shape[0], dtype=bool)
    for s in range(pb.shape[0]):
        row = _dominant_row(pb[s], q[s], shift)
        if row is not None:
            out[s] = row
            changed[s] = True
    return Policy(out), changed


def premise_violating_policy(pi_beta, q, state, shift=0.5):
    """Move mass from the best to the worst action at ``state`` (lowers the mean)."""
    pb = np.array(pi_beta.probs if isinstance(pi_beta, Policy) else pi_beta, dtype=float)
    row, qs = pb[state], np.asarray(q, dtype=float)[state]
    support = np.flatnonzero(row > 0)
    hi, lo = support[np.argmax(qs[support])], np.argmin(qs)
    t = shift * row[hi]
    row[hi] -= t
    row[lo] += t
    return Policy(pb)


# -- lumped-category oracle --------------------------------------------------

def lumped_category_mdp(env, classifier, pi_beta):
    """Category-level MDP under ``pi_beta``, and the matching category policy.

    Rewards and transitions are ``pi_beta``-weighted averages over the
    actions of each category; a category ``pi_beta`` never picks at a state
    falls back to the unweighted block average.
    """
    pb = pi_beta.probs if isinstance(pi_beta, Policy) else np.asarray(pi_beta)
    C = classifier.num_categories
    member = np.zeros((C, env.num_actions))
    member[classifier.assign, np.arange(env.num_actions)] = 1.0
    weight = pb[:, None, :] * member[None]  # (S, C, A)
    mass = weight.sum(axis=-1)
    fallback = member[None] / member.sum(axis=1)[None, :, None]
    w = np.where(mass[..., None] > 0, weight / np.where(mass > 0, mass, 1.0)[..., None], fallback)
    reward = np.einsum("sca,sa->sc", w, env.reward)
    transition = np.einsum("sca,sat->sct", w, env.transition)
    transition /= transition.sum(axis=-1, keepdims=True)
    lumped = EnvSpec(transition=transition, reward=reward, discount=env.discount,
                     terminal_states=env.terminal_states, horizon=env.horizon,
                     initial=env.initial)
    coarse_pi = np.where(mass.sum(axis=1, keepdims=True) > 0, mass, 1.0 / C)
    return lumped, Policy(coarse_pi / coarse_pi.sum(axis=1, keepdims=True))


def coarse_action_values(env, classifier, pi_beta, tol=DEFAULT_TOL):
    """Exact category-level action values under ``pi_beta``."""
    lumped, coarse_pi = lumped_category_mdp(env, classifier, pi_beta)
    return bellman_backup(lumped, exact_policy_evaluation(lumped, coarse_pi, tol))


# -- measurements ------------------------------------------------------------

def policy_sampler(policy):
    probs = policy.probs if isinstance(policy, Policy) else np.asarray(policy)
    return lambda states, n, rng: sample_rows(probs[states], rng, n)


def dual_sampler(q_coarse, gen):
    """Best category by the coarse critic, then conditioned generator draws."""
    table = q_table_of(q_coarse)

    def draw(states, n, rng):
        return gen.sample(states, np.argmax(table[states], axis=1), n, rng)
    return draw


def _as_sampler(source):
    if callable(source) and not isinstance(source, Policy):
        return source
    return policy_sampler(source)


@dataclass(frozen=True)
class GapReport:
    gap: float
    se: float
    mean_a: float
    mean_b: float
    diff_se: float = 0.0

    def lower_bound(self, z=1.6448536269514722):
        """One-sided lower confidence bound on the relative gap (95% by default)."""
        return self.gap - z * self.se

    @property
    def significant(self):
        """``gap > 0`` at 95% confidence.

        The gap has the sign of ``mean_a - mean_b``, so the test runs on the
        difference; the ratio's own standard error explodes when ``mean_b``
        is near 0 and would hide a clear difference.
        """
        return self.mean_a - self.mean_b - 1.6448536269514722 * self.diff_se > 0


def hypothesis_gap(q_fine, sampler_a, sampler_b, states, n=1000, seed=0):
    """Relative gap ``(E_a - E_b) / |E_b|`` of mean fitted Q over ``n`` draws per state.

    The standard error is propagated from the per-state sample variances
    with the delta method.
    """
    n = check_positive_int(n, "n")
    table = q_table_of(q_fine)
    states = check_index_array(np.asarray(states), table.shape[0], "state")
    if states.size == 0:
        raise ConfigError("hypothesis_gap needs at least one state")
    rng_a, rng_b = (np.random.default_rng(ss) for ss in np.random.SeedSequence(seed).spawn(2))
    rows = states[:, None]
    va = table[rows, _as_sampler(sampler_a)(states, n, rng_a)]
    vb = table[rows, _as_sampler(sampler_b)(states, n, rng_b)]
    m = len(states)
    A, B = float(va.mean()), float(vb.mean())
    var_a = float(va.var(axis=1, ddof=1).sum()) / (n * m * m) if n > 1 else 0.0
    var_b = float(vb.var(axis=1, ddof=1).sum()) / (n * m * m) if n > 1 else 0.0
    if B == 0:
        raise DomainError("the reference sampler has mean Q exactly 0; the relative gap is undefined")
    gap = (A - B) / abs(B)
    d_a = 1.0 / abs(B)
    d_b = -1.0 / abs(B) - (A - B) * np.sign(B) / B ** 2
    se = float(np.sqrt(d_a ** 2 * var_a + d_b ** 2 * var_b))
    return GapReport(gap=gap, se=se, mean_a=A, mean_b=B, diff_se=float(np.sqrt(var_a + var_b)))


@dataclass(frozen=True)
class FidelityReport:
    ratio: float
    se: float
    draws: int


def conditioning_fidelity(gen, f, states, categories, n_per_pair=1000, seed=0):
    """Fraction of conditioned draws that land in the requested category,
    over every ``(state, category)`` pair."""
    n = check_positive_int(n_per_pair, "n_per_pair")
    states = np.asarray(states, dtype=np.int64)
    categories = np.asarray(categories, dtype=np.int64)
    ss, cc = (g.ravel() for g in np.meshgrid(states, categories, indexing="ij"))
    draws = gen.sample(ss, cc, n, np.random.default_rng(seed))
    hit = f.assign[draws] == cc[:, None]
    total = hit.size
    ratio = float(hit.mean())
    return FidelityReport(ratio=ratio, se=float(np.sqrt(ratio * (1 - ratio) / total)), draws=total)


def oracle_q_error(q_fitted, q_exact, mask=None):
    """``(max_abs, mean_abs)`` error of a fitted table against the exact one."""
    fitted, exact = q_table_of(q_fitted), np.asarray(q_exact, dtype=float)
    if fitted.shape != exact.shape:
        raise DomainError(f"fitted table {fitted.shape} and exact table {exact.shape} differ in shape")
    err = np.abs(fitted - exact)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(err.max()), float(err.mean())


def write_report(rows, path):
    """Write dict rows as CSV with the harness's 6-significant-digit floats."""
    rows = list(rows)
    if not rows:
        raise ConfigError("no rows to write")
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v)
                                 for k, v in row.items()})
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


__all__ = [
    "FidelityReport", "GapReport", "Theorem2Report", "TheoremReport",
    "coarse_action_values", "conditioning_fidelity", "dominant_equal_variance_policy",
    "dual_sampler", "hypothesis_gap", "lumped_category_mdp", "oracle_q_error",
    "policy_sampler", "premise_violating_policy", "theorem1_curve", "theorem2_check",
    "write_report",
]
