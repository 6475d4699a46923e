"""Experiment configuration, the staged offline pipeline, evaluation,
sampling-size sweeps and metric files.

A run is a pure function of its config and seeds. Each stage reads the
previous stage's artifacts from a per-seed directory and writes its own, so
the CLI can re-run any stage on its own.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import math
import shutil
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from ._sampling import sample_rows
from ._validation import check_positive_int, check_probability
from .data import coarsen_dataset, collect_dataset, load_dataset, make_behavior_policy, save_dataset
from .envs import (CategoricalEnvConfig, TokenEnvConfig, default_dull_templates, default_vocab,
                   load_env, load_vocab, make_categorical_env, make_token_env, save_env)
from .exceptions import ConfigError, DualQError, StageError
from .improve import (ControlGenerator, ImprovementConfig, clone_policy, improve_policy,
                      load_generator, load_policy, save_generator, save_policy)
from .mdp import Policy, exact_action_values
from .qlearn import CoarseQ, FineQ, FitConfig, load_q, save_q
from .rewards import RewardWeights, load_dull_templates
from .verify import (conditioning_fidelity, dominant_equal_variance_policy, dual_sampler,
                     hypothesis_gap, policy_sampler, theorem1_curve, theorem2_check, write_report)

log = logging.getLogger(__name__)

METHODS = ("mle", "standard", "dual")
METRICS = ("CS", "SE", "RL", "AQ", "avg_return")
HEADER = ("method", "seed", "L") + METRICS
EVAL_MODES = ("simulator", "dataset")
MANIFEST_FORMAT = "dualq-manifest/1"
NA = "NA"


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    behavior_quality: float = 0.0
    behavior_epsilon: float = 0.1
    episodes: int = 1000
    horizon: int = 20
    heldout_episodes: int = 50

    def validate(self):
        check_probability(self.behavior_quality, "behavior_quality")
        check_probability(self.behavior_epsilon, "behavior_epsilon", low_open=True)
        check_positive_int(self.episodes, "episodes")
        check_positive_int(self.horizon, "horizon")
        check_positive_int(self.heldout_episodes, "heldout_episodes")
        return self


@dataclass(frozen=True)
class ImproveConfig:
    methods: tuple = METHODS
    num_candidates: int = 5
    Ls: tuple = (4, 8, 12, 16)
    cloning_smoothing: float = 0.0
    temperature: float = 1.5
    generator_smoothing: float = 0.0
    fidelity: float = 1.0

    def validate(self):
        bad = [m for m in self.methods if m not in METHODS]
        if not self.methods or bad:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}, got {list(self.methods)}")
        check_positive_int(self.num_candidates, "num_candidates")
        if not self.Ls:
            raise ConfigError("Ls must be non-empty")
        for L in self.Ls:
            check_positive_int(L, "L")
        if not self.cloning_smoothing >= 0 or not self.generator_smoothing >= 0:
            raise ConfigError("smoothing values must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        check_probability(self.fidelity, "fidelity")
        return self


@dataclass(frozen=True)
class EvalConfig:
    num_dialogues: int = 1000
    turns: int = 5
    seeds: tuple = tuple(range(20))
    modes: tuple = EVAL_MODES

    def validate(self):
        check_positive_int(self.num_dialogues, "num_dialogues")
        check_positive_int(self.turns, "turns")
        if not self.seeds:
            raise ConfigError("eval.seeds must be non-empty")
        for s in self.seeds:
            check_positive_int(s, "seed", minimum=0)
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("eval.seeds contains duplicates")
        bad = [m for m in self.modes if m not in EVAL_MODES]
        if not self.modes or bad:
            raise ConfigError(f"eval.modes must be a non-empty subset of {EVAL_MODES}")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    env_kind: str = "categorical"
    env: object = field(default_factory=CategoricalEnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    coarse_fit: FitConfig = field(default_factory=FitConfig)
    improve: ImproveConfig = field(default_factory=ImproveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def validate(self):
        if self.env_kind not in ("categorical", "token"):
            raise ConfigError(f"env.kind must be 'categorical' or 'token', got {self.env_kind!r}")
        self.env.validate()
        self.data.validate()
        self.fit.validate()
        self.coarse_fit.validate()
        self.improve.validate()
        self.eval.validate()
        return self

    def with_overrides(self, seed_offset=0, output_dir=None):
        ev = dataclasses.replace(self.eval, seeds=tuple(s + seed_offset for s in self.eval.seeds))
        return dataclasses.replace(self, eval=ev, output_dir=output_dir or self.output_dir).validate()

    def digest(self):
        """Hash of everything that affects results; the output location does not."""
        raw = {k: v for k, v in self.raw.items() if k != "output_dir"}
        raw["effective_seeds"] = list(self.eval.seeds)
        blob = json.dumps(raw, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def _section(data, name, cls, extra=()):
    data = dict(data or {})
    allowed = {f.name for f in dataclasses.fields(cls)} | set(extra)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return data


def _tuples(data, *names):
    for name in names:
        if name in data and isinstance(data[name], list):
            data[name] = tuple(data[name])
    return data


def _build_env_config(section, base_dir):
    section = dict(section or {})
    kind = section.pop("kind", "categorical")
    if kind == "categorical":
        return kind, CategoricalEnvConfig(**_section(section, "env", CategoricalEnvConfig))
    if kind != "token":
        raise ConfigError(f"env.kind must be 'categorical' or 'token', got {kind!r}")
    section = _section(section, "env", TokenEnvConfig, extra=("vocab_file", "dull_file"))
    vocab_file = section.pop("vocab_file", None)
    dull_file = section.pop("dull_file", None)
    if "vocab" in section or "dull_templates" in section:
        raise ConfigError("give the token vocabulary as env.vocab_file / env.dull_file paths")
    if "weights" in section:
        w = section["weights"]
        section["weights"] = RewardWeights(**w) if isinstance(w, dict) else RewardWeights(*w)
    if "partner_templates" in section and section["partner_templates"] is not None:
        section["partner_templates"] = tuple(
            (int(t), tuple(str(x).split())) for t, x in section["partner_templates"])
    _tuples(section, "content_lengths")
    vocab = load_vocab(base_dir / vocab_file) if vocab_file else default_vocab()
    if dull_file:
        dull = load_dull_templates(base_dir / dull_file)
    elif vocab_file:
        tokens = tuple(e.token for e in vocab if e.marker == "DULL")
        dull = (tokens,) if tokens else default_dull_templates()
    else:
        dull = default_dull_templates()
    return kind, TokenEnvConfig(vocab=vocab, dull_templates=dull, **section)


def config_from_dict(data, base_dir="."):
    """Build and validate an :class:`ExperimentConfig`; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("the config must be a mapping of sections")
    allowed = {"env", "data", "fit", "improve", "eval", "output_dir"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    base_dir = Path(base_dir)
    try:
        kind, env = _build_env_config(data.get("env"), base_dir)
        fit = _section(data.get("fit"), "fit", FitConfig, extra=("coarse",))
        coarse_over = _section(fit.pop("coarse", None), "fit.coarse", FitConfig)
        fine_cfg = FitConfig(**fit)
        coarse_cfg = dataclasses.replace(fine_cfg, **coarse_over)
        cfg = ExperimentConfig(
            env_kind=kind, env=env,
            data=DataConfig(**_section(data.get("data"), "data", DataConfig)),
            fit=fine_cfg, coarse_fit=coarse_cfg,
            improve=ImproveConfig(**_tuples(_section(data.get("improve"), "improve", ImproveConfig),
                                            "methods", "Ls")),
            eval=EvalConfig(**_tuples(_section(data.get("eval"), "eval", EvalConfig),
                                      "seeds", "modes")),
            output_dir=str(data.get("output_dir", "runs/default")),
            raw=data,
        )
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return cfg.validate()


def load_config(path):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data or {}, base_dir=path.parent)


# -- seeds and stages --------------------------------------------------------

def stage_seed(seed, stage):
    """Independent 32-bit seed for one stage of one run."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except (DualQError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        raise StageError(name, exc) from exc


def build_env(cfg, seed):
    """Environment of one seed; the env seed is offset by the run seed."""
    env_cfg = dataclasses.replace(cfg.env, seed=cfg.env.seed + int(seed))
    if cfg.env_kind == "categorical":
        return make_categorical_env(env_cfg)
    return make_token_env(env_cfg)


def seed_dir(root, seed):
    return Path(root) / f"seed_{seed}"


def stage_gen_env(cfg, seed, root):
    d = seed_dir(root, seed)
    d.mkdir(parents=True, exist_ok=True)
    env, clf = build_env(cfg, seed)
    save_env(d / "env.json", env, clf)
    return env, clf


def _load_env(cfg, seed, root):
    path = seed_dir(root, seed) / "env.json"
    if not path.exists():
        raise ConfigError(f"{path} is missing; run the gen-env stage first")
    return load_env(path)


def stage_collect(cfg, seed, root):
    env, _ = _load_env(cfg, seed, root)
    d = seed_dir(root, seed)
    behavior = make_behavior_policy(env, cfg.data.behavior_quality, cfg.data.behavior_epsilon)
    data = collect_dataset(env, behavior, cfg.data.episodes, cfg.data.horizon,
                           stage_seed(seed, "collect"), behavior="behavior")
    heldout = collect_dataset(env, behavior, cfg.data.heldout_episodes, cfg.data.horizon,
                              stage_seed(seed, "heldout"), behavior="heldout")
    save_dataset(data, d / "dataset.tsv", env)
    save_dataset(heldout, d / "heldout.tsv", env)
    return data, heldout


def _load_data(seed, root, env, name="dataset.tsv"):
    path = seed_dir(root, seed) / name
    if not path.exists():
        raise ConfigError(f"{path} is missing; run the collect stage first")
    return load_dataset(path, env)


def _fit_critics(cfg, seed, env, clf, data):
    fine = FineQ.from_config(dataclasses.replace(cfg.fit, seed=stage_seed(seed, "fit-fine")))
    fine.fit(data, env, clf)
    coarse = CoarseQ.from_config(dataclasses.replace(cfg.coarse_fit, seed=stage_seed(seed, "fit-coarse")))
    coarse.fit(coarsen_dataset(data, clf), env, clf)
    gen = ControlGenerator(cfg.improve.temperature, cfg.improve.generator_smoothing,
                           cfg.improve.fidelity).fit(data, clf, env.num_states)
    for name, est in (("fine", fine), ("coarse", coarse)):
        if not est.converged_:
            log.info("seed %s: %s critic stopped at max_epochs without converging", seed, name)
    return fine.q_, coarse.q_, gen


def stage_fit(cfg, seed, root):
    env, clf = _load_env(cfg, seed, root)
    data = _load_data(seed, root, env)
    q_fine, q_coarse, gen = _fit_critics(cfg, seed, env, clf, data)
    d = seed_dir(root, seed)
    save_q(q_fine, d / "q_fine.txt", kind="fine")
    save_q(q_coarse, d / "q_coarse.txt", kind="coarse")
    save_generator(gen, d / "generator.txt")
    return q_fine, q_coarse, gen


def improve_all(cfg, seed, env, data, q_fine, q_coarse, gen, L, methods):
    """Cloned policy of each method at candidate count ``L``."""
    base = clone_policy(np.column_stack([data.s, data.a]), env.num_states, env.num_actions,
                        cfg.improve.cloning_smoothing)
    out = {}
    for method in methods:
        if method == "mle":
            out[method] = base
            continue
        icfg = ImprovementConfig(num_candidates=L, mode=method,
                                 cloning_smoothing=cfg.improve.cloning_smoothing,
                                 seed=stage_seed(seed, f"improve-{method}-{L}"))
        out[method] = improve_policy(env, data, q_fine, q_coarse, gen, base, icfg)
    return out


def stage_improve(cfg, seed, root):
    env, clf = _load_env(cfg, seed, root)
    data = _load_data(seed, root, env)
    d = seed_dir(root, seed)
    for name in ("q_fine.txt", "q_coarse.txt", "generator.txt"):
        if not (d / name).exists():
            raise ConfigError(f"{d / name} is missing; run the fit stage first")
    q_fine, q_coarse, gen = load_q(d / "q_fine.txt"), load_q(d / "q_coarse.txt"), load_generator(
        d / "generator.txt")
    policies = improve_all(cfg, seed, env, data, q_fine, q_coarse, gen,
                           cfg.improve.num_candidates, cfg.improve.methods)
    for method, pol in policies.items():
        save_policy(pol, d / f"policy_{method}.txt")
    return policies


# -- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    method: str
    seed: int
    L: int
    CS: float | None
    SE: float | None
    RL: float | None
    AQ: float | None
    avg_return: float
    n_episodes: int = field(default=0, compare=False)
    n_responses: int = field(default=0, compare=False)
    return_se: float = field(default=0.0, compare=False)

    def sort_key(self):
        return (self.method, self.seed, self.L)

    def get(self, metric):
        return getattr(self, metric)


def response_metrics(env):
    """Per-action ``(CS, SE, RL, AQ)`` arrays, or ``None`` without a lexicon."""
    if env.responses is None or env.lexicon is None:
        return None
    rows = []
    for r in env.responses:
        dull, surprise, _, question = env.lexicon.components(r)
        rows.append((dull, surprise, len(r), question))
    return np.array(rows, dtype=float).T


def _token_means(per_action, actions):
    if per_action is None:
        return (None,) * 4
    return tuple(float(m[actions].mean()) for m in per_action)


def evaluate_agent(agent, env, mode="simulator", num_dialogues=1000, turns=5, seed=0,
                   states=None, method="agent", L=0, run_seed=0):
    """Metrics of ``agent`` on ``env``.

    Simulator mode rolls ``num_dialogues`` episodes of ``turns`` agent turns
    (fewer if a terminal state is reached) sampling from the agent, and
    reports the mean discounted return. Dataset mode plays the agent's
    greedy response once at each of ``states`` and reports the mean reward.
    Token metrics are averages over every emitted response.
    """
    probs = agent.probs if isinstance(agent, Policy) else np.asarray(agent)
    per_action = response_metrics(env)
    rng = np.random.default_rng(seed)
    if mode == "dataset":
        if states is None or len(states) == 0:
            raise ConfigError("dataset mode needs held-out states")
        states = np.asarray(states, dtype=np.int64)
        actions = np.argmax(probs[states], axis=1)
        rewards = env.reward[states, actions]
        cs, se, rl, aq = _token_means(per_action, actions)
        return MetricsRow(method, run_seed, L, cs, se, rl, aq, float(rewards.mean()),
                          n_episodes=len(states), n_responses=len(states),
                          return_se=float(rewards.std(ddof=1) / math.sqrt(len(states)))
                          if len(states) > 1 else 0.0)
    if mode != "simulator":
        raise ConfigError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    num_dialogues = check_positive_int(num_dialogues, "num_dialogues")
    turns = check_positive_int(turns, "turns")
    terminal = env.terminal_mask
    s = sample_rows(np.broadcast_to(env.initial, (num_dialogues, env.num_states)), rng)
    alive = ~terminal[s]
    returns = np.zeros(num_dialogues)
    emitted = []
    for t in range(turns):
        if not alive.any():
            break
        a = sample_rows(probs[s], rng)
        returns += np.where(alive, env.discount ** t * env.reward[s, a], 0.0)
        emitted.append(a[alive])
        s = sample_rows(env.transition[s, a], rng)
        alive &= ~terminal[s]
    actions = np.concatenate(emitted) if emitted else np.zeros(0, dtype=np.int64)
    cs, se, rl, aq = _token_means(per_action, actions) if actions.size else (None,) * 4
    return MetricsRow(method, run_seed, L, cs, se, rl, aq, float(returns.mean()),
                      n_episodes=num_dialogues, n_responses=int(actions.size),
                      return_se=float(returns.std(ddof=1) / math.sqrt(num_dialogues))
                      if num_dialogues > 1 else 0.0)


def _fmt(v):
    return NA if v is None else f"{v:.6g}"


def emit_metrics(rows, path):
    """Write rows as CSV in (method, seed, L) order with 6 significant digits."""
    rows = sorted(rows, key=MetricsRow.sort_key)
    if not rows:
        raise ConfigError("emit_metrics needs at least one row")
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for r in rows:
                w.writerow([r.method, r.seed, r.L] + [_fmt(r.get(m)) for m in METRICS])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write metrics to {path}: {exc.strerror}") from exc


def read_metrics(path):
    out = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = {m: (None if rec[m] == NA else float(rec[m])) for m in METRICS}
            out.append(MetricsRow(rec["method"], int(rec["seed"]), int(rec["L"]), **vals))
    return out


def stage_evaluate(cfg, seed, root):
    env, _ = _load_env(cfg, seed, root)
    d = seed_dir(root, seed)
    heldout = _load_data(seed, root, env, "heldout.tsv")
    rows = {mode: [] for mode in cfg.eval.modes}
    for method in cfg.improve.methods:
        path = d / f"policy_{method}.txt"
        if not path.exists():
            raise ConfigError(f"{path} is missing; run the improve stage first")
        pol = load_policy(path)
        L = 0 if method == "mle" else cfg.improve.num_candidates
        for mode in cfg.eval.modes:
            rows[mode].append(evaluate_agent(
                pol, env, mode, cfg.eval.num_dialogues, cfg.eval.turns,
                seed=stage_seed(seed, f"eval-{mode}"), states=heldout.s, method=method, L=L,
                run_seed=seed))
    return rows


# -- orchestration -----------------------------------------------------------

PIPELINE = (("gen-env", stage_gen_env), ("collect", stage_collect), ("fit", stage_fit),
            ("improve", stage_improve))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(root, cfg):
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "format": MANIFEST_FORMAT,
        "config_sha256": cfg.digest(),
        "seeds": list(cfg.eval.seeds),
        "artifacts": [{"path": p.relative_to(root).as_posix(), "sha256": _sha256(p),
                       "bytes": p.stat().st_size} for p in files],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return manifest


def _replace_dir(tmp, out):
    out = Path(out)
    if out.exists():
        if any(out.iterdir()) and not (out / "manifest.json").exists():
            raise ConfigError(f"{out} exists and is not a previous run directory; refusing to overwrite")
        shutil.rmtree(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    shutil.move(str(tmp), str(out))


@contextlib.contextmanager
def staging_dir(out):
    """Temporary sibling of ``out`` that replaces it on success and is removed on failure."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _replace_dir(tmp, out)


def run_experiment(cfg, stages=None):
    """Run the pipeline for every seed and write metrics plus a manifest.

    Outputs land in ``cfg.output_dir``; a failing stage raises
    :class:`StageError` and leaves no partial output behind.
    """
    cfg = cfg.validate()
    names = [n for n, _ in PIPELINE] + ["evaluate"]
    wanted = names if stages is None else list(stages)
    with staging_dir(cfg.output_dir) as tmp:
        rows = {mode: [] for mode in cfg.eval.modes}
        for seed in cfg.eval.seeds:
            for name, fn in PIPELINE:
                if name in wanted:
                    with stage(name):
                        fn(cfg, seed, tmp)
            if "evaluate" in wanted:
                with stage("evaluate"):
                    for mode, got in stage_evaluate(cfg, seed, tmp).items():
                        rows[mode].extend(got)
        with stage("emit"):
            for mode, got in rows.items():
                if got:
                    emit_metrics(got, tmp / f"metrics_{mode}.csv")
            write_manifest(tmp, cfg)
    return rows


def run_stage(cfg, name, root=None):
    """Run one stage for every seed inside an existing run directory."""
    cfg = cfg.validate()
    root = Path(root or cfg.output_dir)
    fns = dict(PIPELINE)
    rows = {mode: [] for mode in cfg.eval.modes}
    with stage(name):
        for seed in cfg.eval.seeds:
            if name == "evaluate":
                for mode, got in stage_evaluate(cfg, seed, root).items():
                    rows[mode].extend(got)
            elif name in fns:
                fns[name](cfg, seed, root)
            else:
                raise ConfigError(f"unknown stage {name!r}")
        if name == "evaluate":
            for mode, got in rows.items():
                emit_metrics(got, root / f"metrics_{mode}.csv")
        write_manifest(root, cfg)
    return rows


# -- statistics --------------------------------------------------------------

def paired_permutation_pvalue(x, y, n_resamples=10_000, seed=0):
    """One-sided p-value for ``mean(x - y) > 0`` by sign-flipping paired differences."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ConfigError("paired test needs two equal-length samples of size >= 2")
    res = stats.permutation_test(
        (x, y), lambda a, b, axis: np.mean(a - b, axis=axis), permutation_type="samples",
        alternative="greater", n_resamples=n_resamples, random_state=seed, vectorized=True)
    return float(res.pvalue)


def spearman(xs, ys):
    res = stats.spearmanr(xs, ys)
    return float(res.statistic), float(res.pvalue)


# -- sweeps ------------------------------------------------------------------

@dataclass
class SweepResult:
    Ls: list
    rows: list
    summary: list
    returns: dict
    spearman: dict
    dual_vs_standard: dict
    rl_vs_mle: dict

    def curve(self, method):
        """Seed-mean return at the MLE anchor and each ``L``."""
        return [float(np.mean(self.returns[(method, L)])) for L in [0] + list(self.Ls)]


def _sweep_seed(cfg, seed, Ls):
    env, clf = build_env(cfg, seed)
    behavior = make_behavior_policy(env, cfg.data.behavior_quality, cfg.data.behavior_epsilon)
    data = collect_dataset(env, behavior, cfg.data.episodes, cfg.data.horizon,
                           stage_seed(seed, "collect"), behavior="behavior")
    q_fine, q_coarse, gen = _fit_critics(cfg, seed, env, clf, data)
    eval_seed = stage_seed(seed, "eval-simulator")
    rows = []
    base = improve_all(cfg, seed, env, data, q_fine, q_coarse, gen, 1, ("mle",))["mle"]
    rows.append(evaluate_agent(base, env, "simulator", cfg.eval.num_dialogues, cfg.eval.turns,
                               eval_seed, method="mle", L=0, run_seed=seed))
    for L in Ls:
        for method, pol in improve_all(cfg, seed, env, data, q_fine, q_coarse, gen, L,
                                       ("standard", "dual")).items():
            rows.append(evaluate_agent(pol, env, "simulator", cfg.eval.num_dialogues,
                                       cfg.eval.turns, eval_seed, method=method, L=L,
                                       run_seed=seed))
    return rows


def summarize_sweep(rows, Ls):
    """Long-format ``method, L, metric, mean, half_std`` rows; the MLE anchor is
    listed as ``L = 0`` under both RL methods."""
    out = []
    for method in ("dual", "standard"):
        for L in [0] + list(Ls):
            sel = [r for r in rows if (r.method == "mle" if L == 0 else
                                       (r.method == method and r.L == L))]
            for metric in METRICS:
                vals = [r.get(metric) for r in sel]
                if not vals or any(v is None for v in vals):
                    out.append({"method": method, "L": L, "metric": metric, "mean": None,
                                "half_std": None})
                    continue
                arr = np.asarray(vals, dtype=float)
                half = 0.5 * float(arr.std(ddof=1)) if arr.size > 1 else 0.0
                out.append({"method": method, "L": L, "metric": metric,
                            "mean": float(arr.mean()), "half_std": half})
    return out


def sweep_sampling_size(cfg, Ls=None, out_dir=None, n_resamples=10_000):
    """Standard and dual at each candidate count plus the MLE anchor, over all seeds."""
    cfg = cfg.validate()
    Ls = [check_positive_int(L, "L") for L in (Ls or cfg.improve.Ls)]
    if not Ls:
        raise ConfigError("Ls must be non-empty")
    if len(cfg.eval.seeds) < 2:
        raise ConfigError("a sweep needs at least two seeds")
    rows = []
    for seed in cfg.eval.seeds:
        with stage(f"sweep seed {seed}"):
            rows.extend(_sweep_seed(cfg, seed, Ls))
    seeds = list(cfg.eval.seeds)

    def ret(method, L):
        pick = {r.seed: r.avg_return for r in rows
                if (r.method == "mle" if L == 0 else (r.method == method and r.L == L))}
        return np.array([pick[s] for s in seeds])

    returns = {(m, L): ret(m, L) for m in ("standard", "dual") for L in [0] + Ls}
    returns.update({("mle", 0): ret("mle", 0)})
    xs = [0] + Ls
    spear = {m: spearman(xs, [returns[(m, L)].mean() for L in xs]) for m in ("standard", "dual")}
    perm_seed = stage_seed(0, "sweep-permutation")
    dvs = {L: paired_permutation_pvalue(returns[("dual", L)], returns[("standard", L)],
                                        n_resamples, perm_seed) for L in Ls}
    vs_mle = {(m, L): paired_permutation_pvalue(returns[(m, L)], returns[("mle", 0)],
                                                n_resamples, perm_seed)
              for m in ("standard", "dual") for L in Ls}
    summary = summarize_sweep(rows, Ls)
    result = SweepResult(Ls, rows, summary, returns, spear, dvs, vs_mle)
    if out_dir is not None:
        with staging_dir(out_dir) as tmp:
            emit_metrics(rows, tmp / "sweep_metrics.csv")
            write_report(summary, tmp / "sweep_summary.csv")
            stat_rows = [{"test": f"spearman_{m}", "L": "all", "statistic": v[0], "p_value": v[1]}
                         for m, v in spear.items()]
            stat_rows += [{"test": "dual_gt_standard", "L": L, "statistic": float(
                returns[("dual", L)].mean() - returns[("standard", L)].mean()), "p_value": p}
                for L, p in dvs.items()]
            stat_rows += [{"test": f"{m}_gt_mle", "L": L, "statistic": float(
                returns[(m, L)].mean() - returns[("mle", 0)].mean()), "p_value": p}
                for (m, L), p in vs_mle.items()]
            write_report(stat_rows, tmp / "sweep_stats.csv")
            write_manifest(tmp, cfg)
    return result


# -- verification runs -------------------------------------------------------

def run_verify(cfg, out_dir=None, Ls=(1, 2, 4, 8, 16), gap_draws=1000):
    """Exact theorem checks, hypothesis gap and conditioning fidelity per seed."""
    cfg = cfg.validate()
    checks, curves = [], []
    for seed in cfg.eval.seeds:
        with stage(f"verify seed {seed}"):
            env, clf = build_env(cfg, seed)
            behavior = make_behavior_policy(env, cfg.data.behavior_quality, cfg.data.behavior_epsilon)
            t1 = theorem1_curve(env, behavior, Ls)
            curves += [{"seed": seed, **row} for row in t1.to_rows()]
            checks.append({"seed": seed, "check": "theorem1", "ok": t1.monotone,
                           "value": t1.max_violation})
            q = exact_action_values(env, behavior)
            pa, _ = dominant_equal_variance_policy(behavior, q)
            for L in Ls:
                t2 = theorem2_check(env, pa, behavior, behavior, L)
                checks.append({"seed": seed, "check": f"theorem2_L{L}",
                               "ok": "premise-violated" if t2.premise_violated else t2.conclusion_holds,
                               "value": t2.max_violation})
            data = collect_dataset(env, behavior, cfg.data.episodes, cfg.data.horizon,
                                   stage_seed(seed, "collect"), behavior="behavior")
            q_fine, q_coarse, gen = _fit_critics(cfg, seed, env, clf, data)
            base = clone_policy(np.column_stack([data.s, data.a]), env.num_states, env.num_actions,
                                cfg.improve.cloning_smoothing)
            states = np.flatnonzero(~env.terminal_mask)
            gap = hypothesis_gap(q_fine, dual_sampler(q_coarse, gen), policy_sampler(base), states,
                                 gap_draws, stage_seed(seed, "gap"))
            checks.append({"seed": seed, "check": "hypothesis_gap", "ok": gap.significant,
                           "value": gap.gap})
            fid = conditioning_fidelity(gen, clf, states, np.arange(clf.num_categories),
                                        100, stage_seed(seed, "fidelity"))
            checks.append({"seed": seed, "check": "conditioning_fidelity", "ok": True,
                           "value": fid.ratio})
    if out_dir is not None:
        with staging_dir(out_dir) as tmp:
            write_report(checks, tmp / "verify_checks.csv")
            write_report(curves, tmp / "verify_theorem1.csv")
            write_manifest(tmp, cfg)
    return checks


__all__ = [
    "DataConfig", "EvalConfig", "ExperimentConfig", "ImproveConfig", "MetricsRow", "SweepResult",
    "build_env", "config_from_dict", "emit_metrics", "evaluate_agent", "load_config",
    "paired_permutation_pvalue", "read_metrics", "run_experiment", "run_stage", "run_verify",
    "spearman", "stage_seed", "summarize_sweep", "sweep_sampling_size",
]
