"""One-step fitted policy evaluation at two granularities.

Both critics regress ``Q(s, a)`` onto ``r + discount * Q_target(s', a')``
where ``a'`` is the logged next action, so no action outside the dataset is
ever bootstrapped. ``FineQ`` scores concrete actions and ``CoarseQ`` scores
categories; both follow the scikit-learn estimator conventions.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_index_array, check_positive_int, check_probability
from .data import NO_ACTION, Dataset
from .exceptions import ConfigError, DatasetFormatError, DomainError, NumericError

log = logging.getLogger(__name__)

Q_FORMAT = "dualq-q/1"
BACKINGS = ("tabular", "linear")
TARGET_MODES = ("hard", "polyak")


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 0.1
    discount: float = 0.5
    target_sync_interval: int = 30
    target_update_mode: str = "hard"
    polyak_rate: float = 2.4e-5
    batch_size: int = 32
    convergence_delta: float = 0.01
    convergence_patience: int = 10
    max_epochs: int = 200
    backing: str = "tabular"
    seed: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        check_probability(self.discount, "discount", low_open=True, high_open=True)
        check_positive_int(self.target_sync_interval, "target_sync_interval")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.convergence_patience, "convergence_patience")
        check_positive_int(self.max_epochs, "max_epochs")
        if not self.convergence_delta > 0:
            raise ConfigError("convergence_delta must be > 0")
        if self.target_update_mode not in TARGET_MODES:
            raise ConfigError(f"target_update_mode must be one of {TARGET_MODES}")
        if self.target_update_mode == "polyak":
            check_probability(self.polyak_rate, "polyak_rate", low_open=True)
        if self.backing not in BACKINGS:
            raise ConfigError(f"backing must be one of {BACKINGS}")
        return self


def onehot_features(num_states, num_actions, assign=None):
    """Active-feature indices for binary features: one per ``(s, a)`` pair,
    plus one per ``(s, category)`` when ``assign`` maps actions to categories."""
    s = np.arange(num_states)[:, None]
    a = np.arange(num_actions)[None, :]
    idx = [np.broadcast_to(s * num_actions + a, (num_states, num_actions))]
    if assign is not None:
        assign = np.asarray(assign)
        n_cat = int(assign.max()) + 1
        idx.append(num_states * num_actions + s * n_cat + assign[None, :])
    return np.stack(idx, axis=-1).astype(np.int64)


class QFunction:
    """Action-value estimate with a delayed target copy.

    Tabular backing keeps an ``(S, A)`` table; linear backing keeps a weight
    vector over binary features given as active indices ``(S, A, k)``.
    """

    def __init__(self, num_states, num_actions, backing="tabular", feature_index=None):
        if backing not in BACKINGS:
            raise ConfigError(f"backing must be one of {BACKINGS}")
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.backing = backing
        if backing == "tabular":
            self.feature_index = None
            self.params = np.zeros((self.num_states, self.num_actions))
        else:
            if feature_index is None:
                feature_index = onehot_features(num_states, num_actions)
            self.feature_index = np.asarray(feature_index, dtype=np.int64)
            self.params = np.zeros(int(self.feature_index.max()) + 1)
        self.target_params = self.params.copy()
        self.step_counter = 0
        self.trained = np.zeros((self.num_states, self.num_actions), dtype=bool)
        self.converged = False
        self.diagnostics = {"untrained_queries": 0, "ood_queries": 0}

    def values(self, s, a, target=False):
        w = self.target_params if target else self.params
        s = np.asarray(s, dtype=np.int64)
        a = np.asarray(a, dtype=np.int64)
        if self.backing == "tabular":
            return w[s, a]
        return w[self.feature_index[s, a]].sum(axis=-1)

    def table(self, target=False):
        w = self.target_params if target else self.params
        if self.backing == "tabular":
            return w.copy()
        return w[self.feature_index].sum(axis=-1)

    def sync_target(self):
        self.target_params = self.params.copy()

    def copy(self):
        other = QFunction.__new__(QFunction)
        other.__dict__.update(self.__dict__)
        other.params = self.params.copy()
        other.target_params = self.target_params.copy()
        other.trained = self.trained.copy()
        other.diagnostics = dict(self.diagnostics)
        return other


def _as_dataset(batch):
    if isinstance(batch, Dataset):
        return batch
    batch = list(batch)
    kind = "coarse" if batch and type(batch[0]).__name__ == "CoarseTransition" else "fine"
    return Dataset.from_transitions(batch, kind=kind)


def td_step(q, batch, cfg):
    """One update toward ``r + discount * Q_target(s', a')`` (``r`` alone on
    done rows). Returns the mean squared TD error measured before the update.

    Tabular cells move by ``learning_rate`` times their mean TD error in the
    batch; the linear backing takes a semi-gradient step on the batch mean.
    """
    b = _as_dataset(batch)
    if len(b) == 0:
        raise ConfigError("td_step needs a non-empty batch")
    check_index_array(b.s, q.num_states, "state")
    check_index_array(b.s_next, q.num_states, "next state")
    check_index_array(b.a, q.num_actions, "action")
    check_index_array(np.where(b.done, 0, b.a_next), q.num_actions, "next action")
    return _td_update(q, b.s, b.a, b.r, b.s_next, b.a_next, b.done, cfg,
                      describe=lambda i: b[i])


def _td_update(q, s, a, r, s2, a2, done, cfg, describe=None):
    live = ~done
    boot = np.where(live, q.values(s2, np.where(live, a2, 0), target=True), 0.0)
    target = r + cfg.discount * boot
    bad = np.flatnonzero(~np.isfinite(target))
    if bad.size:
        i = int(bad[0])
        what = describe(i) if describe else (int(s[i]), int(a[i]))
        raise NumericError(f"non-finite TD target for transition {i}: {what}")
    lr = cfg.learning_rate
    # overflow surfaces as the NumericError below rather than as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        delta = target - q.values(s, a)
        loss = float(np.mean(delta ** 2))
        if q.backing == "tabular":
            size = q.num_states * q.num_actions
            cell = s * q.num_actions + a
            sums = np.bincount(cell, weights=delta, minlength=size)
            counts = np.bincount(cell, minlength=size)
            hit = counts > 0
            flat = q.params.reshape(-1)
            flat[hit] += lr * sums[hit] / counts[hit]
        else:
            idx = q.feature_index[s, a]
            np.add.at(q.params, idx, (lr / len(s)) * np.repeat(delta[:, None], idx.shape[1], axis=1))
    if not np.all(np.isfinite(q.params)):
        raise NumericError("parameters diverged to non-finite values; lower the learning rate")
    q.trained[s, a] = True
    q.step_counter += 1
    if cfg.target_update_mode == "polyak":
        q.target_params = (1.0 - cfg.polyak_rate) * q.target_params + cfg.polyak_rate * q.params
    elif q.step_counter % cfg.target_sync_interval == 0:
        q.sync_target()
    return loss


def check_convergence(loss_history, delta, patience):
    """True once the last ``patience`` epoch-to-epoch loss changes are all
    strictly below ``delta``."""
    if len(loss_history) < patience + 1:
        return False
    tail = np.asarray(loss_history[-(patience + 1):], dtype=float)
    return bool(np.all(np.abs(np.diff(tail)) < delta))


def count_ood_queries(d, num_actions):
    """Number of distinct bootstrap pairs ``(s', a')`` never trained as ``(s, a)``."""
    live = ~d.done
    trained = np.unique(d.s * num_actions + d.a)
    queried = np.unique(d.s_next[live] * num_actions + d.a_next[live])
    return int(np.setdiff1d(queried, trained, assume_unique=True).size)


class _OneStepQ(BaseEstimator):
    _kind = "fine"

    def __init__(self, learning_rate=0.1, discount=0.5, target_sync_interval=30,
                 target_update_mode="hard", polyak_rate=2.4e-5, batch_size=32,
                 convergence_delta=0.01, convergence_patience=10, max_epochs=200,
                 backing="tabular", seed=0):
        self.learning_rate = learning_rate
        self.discount = discount
        self.target_sync_interval = target_sync_interval
        self.target_update_mode = target_update_mode
        self.polyak_rate = polyak_rate
        self.batch_size = batch_size
        self.convergence_delta = convergence_delta
        self.convergence_patience = convergence_patience
        self.max_epochs = max_epochs
        self.backing = backing
        self.seed = seed

    @classmethod
    def from_config(cls, cfg):
        return cls(**asdict(cfg))

    def config(self):
        return FitConfig(**self.get_params()).validate()

    def _fit(self, d, num_states, num_actions, feature_index=None):
        cfg = self.config()
        if d.kind != self._kind:
            raise ConfigError(f"{type(self).__name__} expects a {self._kind} dataset, got {d.kind}")
        if len(d) == 0:
            raise ConfigError("cannot fit on an empty dataset")
        q = QFunction(num_states, num_actions, cfg.backing, feature_index)
        q.diagnostics["ood_queries"] = count_ood_queries(d, num_actions)
        if q.diagnostics["ood_queries"]:
            log.warning("%d bootstrap pairs are never trained as (s, a); they keep their initial value",
                        q.diagnostics["ood_queries"])
        check_index_array(d.s, num_states, "state")
        check_index_array(d.s_next, num_states, "next state")
        check_index_array(d.a, num_actions, "action")
        check_index_array(np.where(d.done, 0, d.a_next), num_actions, "next action")
        s, a, r, s2, a2, done = d.s, d.a, d.r, d.s_next, d.a_next, d.done
        rng = np.random.default_rng(cfg.seed)
        n = len(d)
        history = []
        for _ in range(cfg.max_epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                i = order[start:start + cfg.batch_size]
                total += _td_update(q, s[i], a[i], r[i], s2[i], a2[i], done[i], cfg,
                                    describe=lambda j, i=i: d[int(i[j])]) * len(i)
            history.append(total / n)
            if check_convergence(history, cfg.convergence_delta, cfg.convergence_patience):
                q.converged = True
                break
        self.q_ = q
        self.loss_history_ = history
        self.converged_ = q.converged
        self.n_epochs_ = len(history)
        return self

    def predict(self, states, actions):
        """Q-values of the given ``(state, action)`` pairs."""
        check_is_fitted(self, "q_")
        states = check_index_array(states, self.q_.num_states, "state")
        actions = check_index_array(actions, self.q_.num_actions, "action")
        return self.q_.values(states, actions)

    def table(self):
        check_is_fitted(self, "q_")
        return self.q_.table()


class FineQ(_OneStepQ):
    """Critic over concrete actions, fit on a fine dataset."""

    def fit(self, dataset, env, classifier=None):
        feats = None
        if self.backing == "linear":
            assign = None if classifier is None else classifier.assign
            feats = onehot_features(env.num_states, env.num_actions, assign)
        return self._fit(dataset, env.num_states, env.num_actions, feats)


class CoarseQ(_OneStepQ):
    """Critic over action categories, fit on a coarsened dataset."""

    _kind = "coarse"

    def fit(self, dataset, env, classifier):
        return self._fit(dataset, env.num_states, classifier.num_categories)


def fit_fine_q(d, env, cfg=FitConfig(), classifier=None):
    return FineQ.from_config(cfg).fit(d, env, classifier).q_


def fit_coarse_q(dc, env, cfg=FitConfig(), num_categories=None):
    if num_categories is None:
        num_categories = int(dc.a.max()) + 1
    est = CoarseQ.from_config(cfg)
    return est._fit(dc, env.num_states, num_categories).q_


# -- text persistence --------------------------------------------------------

def save_q(q, path, kind="fine"):
    """Write ``state, action, value`` triples; tabular saves trained cells only."""
    table = q.table()
    mask = q.trained if q.backing == "tabular" else np.ones_like(q.trained)
    lines = [f"# {Q_FORMAT}\tkind={kind}\tstates={q.num_states}\tactions={q.num_actions}"
             f"\tconverged={int(q.converged)}"]
    for s, a in np.argwhere(mask):
        lines.append(f"{s}\t{a}\t{float(table[s, a])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_q(path):
    """Read triples back into a tabular :class:`QFunction`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(f"# {Q_FORMAT}"):
        raise DatasetFormatError(f"expected header '# {Q_FORMAT}'", line=1)
    meta = dict(part.split("=", 1) for part in lines[0].split("\t")[1:])
    q = QFunction(int(meta["states"]), int(meta["actions"]))
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            s, a, v = line.split("\t")
            s, a = int(s), int(a)
            q.params[s, a] = float(v)
        except (ValueError, IndexError) as exc:
            raise DatasetFormatError(f"bad Q triple {line!r} ({exc})", line=lineno) from None
        q.trained[s, a] = True
    q.sync_target()
    q.converged = meta.get("converged") == "1"
    return q


def q_table_of(q):
    """Dense ``(S, A)`` table from a :class:`QFunction`, an estimator or an array."""
    if isinstance(q, QFunction):
        return q.table()
    if isinstance(q, _OneStepQ):
        return q.table()
    table = np.asarray(q, dtype=float)
    if table.ndim != 2:
        raise DomainError(f"expected a 2-D action-value table, got shape {table.shape}")
    return table


__all__ = [
    "CoarseQ", "FineQ", "FitConfig", "QFunction", "NO_ACTION", "check_convergence",
    "count_ood_queries", "fit_coarse_q", "fit_fine_q", "load_q", "onehot_features",
    "q_table_of", "save_q", "td_step",
]
