"""Experiment orchestration: victim setup, defense sweeps, angular experiments,
ablations, timing, and result emission (CSV, JSON, SVG)."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attacks, data, defenses, nn
from .simplex import Budget, entropy

log = logging.getLogger(__name__)

DEFAULT_EPSILONS = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.1, 1.5, 2.0)
HIST_BINS = 36

CSV_COLUMNS = ("defense_tag", "defense_kind", "param", "attack_tag", "seed", "budget", "queries",
               "acc_defender", "acc_attacker", "mean_l1", "max_l1", "mean_entropy", "std_entropy", "status")


@dataclass
class ExperimentConfig:
    """Everything a sweep needs; JSON round-trippable.

    ``dataset`` is ``mnist`` (IDX files under ``data_dir``) or ``blobs``
    (synthetic clusters, for quick runs).  ``pool`` names the knockoff
    query distribution: ``letters`` (rendered glyphs) or ``blobs``.
    """

    dataset: str = "mnist"
    data_dir: str = ""
    victim_arch: str = "lenet"
    victim_train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(epochs=3))
    victim_path: str = ""
    defenses: list = field(default_factory=lambda: [defenses.DefensePolicy()])
    attacks: list = field(default_factory=lambda: [attacks.AttackConfig(budget=10000)])
    pool: str = "letters"
    pool_size: int = 20000
    pool_seed: int = 0
    eval_size: int = 0
    out_dir: str = "results"
    seed: int = 0
    blobs: dict = field(default_factory=lambda: {"K": 4, "n_per_class": 300, "dim": 8, "spread": 0.6})

    def __post_init__(self):
        if isinstance(self.victim_train, dict):
            self.victim_train = nn.TrainConfig(**self.victim_train)
        self.defenses = [d if isinstance(d, defenses.DefensePolicy) else defenses.DefensePolicy.from_dict(d)
                         for d in self.defenses]
        self.attacks = [a if isinstance(a, attacks.AttackConfig) else attacks.AttackConfig.from_dict(a)
                        for a in self.attacks]
        if not self.defenses or not self.attacks:
            raise ValueError("defense and attack grids must be non-empty")
        if self.dataset not in ("mnist", "blobs"):
            raise ValueError(f"unknown dataset {self.dataset!r}")

    def to_dict(self):
        d = asdict(self)
        d["defenses"] = [p.to_dict() for p in self.defenses]
        d["attacks"] = [a.to_dict() for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def expand_epsilons(kind, epsilons=DEFAULT_EPSILONS, **kw):
    """One policy per epsilon (capped to the L1 diameter for MAD kinds)."""
    return [defenses.DefensePolicy(kind=kind, epsilon=e, **kw) for e in epsilons]


@dataclass
class OperatingPoint:
    defense_tag: str
    defense_kind: str
    param: float
    attack_tag: str
    seed: int
    budget: int
    queries: int = 0
    acc_defender: float = math.nan
    acc_attacker: float = math.nan
    mean_l1: float = math.nan
    max_l1: float = math.nan
    mean_entropy: float = math.nan
    std_entropy: float = math.nan
    wallclock_ms_per_query: float = math.nan
    status: str = "ok"
    error: str = ""

    @property
    def epsilon(self):
        return self.param

    def row(self):
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


@dataclass
class AngularHistogram:
    epsilon: float
    mode: str
    bin_edges: list
    counts: list
    mean_theta: float
    thetas: list = field(default_factory=list)
    test_loss_trace: list = field(default_factory=list)
    trace_steps: list = field(default_factory=list)


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10)) if math.isfinite(v) else "nan"
    return str(v)


# -- workbench: datasets, victim, surrogates ------------------------------------------

class Workbench:
    """Lazily built shared state for one experiment configuration."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._victim = None
        self._pool = None
        self._surrogates = {}
        self._gram_caches = {}
        self._eval_cache = {}
        self._load_data()

    def _load_data(self):
        cfg = self.cfg
        if cfg.dataset == "mnist":
            ddir = Path(cfg.data_dir) if cfg.data_dir else data.data_dir()
            self.train = data.load_mnist("train", ddir / "mnist")
            self.test = data.load_mnist("test", ddir / "mnist")
        else:
            b = cfg.blobs
            full = data.synth_blobs(b["K"], b["n_per_class"], b["dim"], b["spread"], seed=cfg.seed)
            n_test = len(full) // 4
            self.test = full.subset(np.arange(n_test))
            self.test.split_tag = "test"
            self.train = full.subset(np.arange(n_test, len(full)))
        if cfg.eval_size:
            self.test = self.test.subset(np.arange(min(cfg.eval_size, len(self.test))))
        self.n_classes = self.train.n_classes
        self.input_shape = self.train.input_shape

    @property
    def pool(self):
        if self._pool is None:
            cfg = self.cfg
            if cfg.pool == "letters":
                ddir = Path(cfg.data_dir) if cfg.data_dir else data.data_dir()
                self._pool = data.letters_pool(cfg.pool_size, cfg.pool_seed, ddir / "letters")
            elif cfg.pool == "blobs":
                b = self.cfg.blobs
                other = data.synth_blobs(b["K"] + 2, max(1, cfg.pool_size // (b["K"] + 2)), b["dim"],
                                         2 * b["spread"] + 0.5, seed=cfg.pool_seed + 1000)
                self._pool = data.QueryPool(other.inputs, source_tag=f"blobs-{cfg.pool_seed}")
            else:
                raise ValueError(f"unknown pool {cfg.pool!r}")
        return self._pool

    def seed_set(self, n, seed):
        """Attacker seed inputs drawn from the training split."""
        idx = np.random.default_rng([seed, 3]).permutation(len(self.train))[:n]
        return self.train.inputs[idx]

    @property
    def victim(self):
        if self._victim is None:
            path = self.cfg.victim_path
            if path and Path(path).exists():
                self._victim = nn.load_model(path)
            else:
                self._victim = train_victim(self.cfg, self.train)
                if path:
                    Path(path).parent.mkdir(parents=True, exist_ok=True)
                    nn.save_model(self._victim, path)
        return self._victim

    def surrogate(self, spec):
        if spec not in self._surrogates:
            self._surrogates[spec] = defenses.make_surrogate(spec, self.input_shape, self.n_classes,
                                                             self.train, self.test)
        return self._surrogates[spec]

    def endpoint(self, policy, seed=0):
        cache = None
        if policy.kind in ("mad", "mad_argmax"):
            spec = policy.surrogate
            if spec not in self._gram_caches:
                self._gram_caches[spec] = defenses.GramCache(self.surrogate(spec))
            cache = self._gram_caches[spec]
        return defenses.DefendedEndpoint(self.victim, policy, seed=seed, gram_cache=cache)

    def defender_metrics(self, policy, seed=0):
        key = (policy, seed)
        if key not in self._eval_cache:
            self._eval_cache[key] = self.endpoint(policy, seed).evaluate(self.test.inputs, self.test.labels)
        return self._eval_cache[key]


def train_victim(cfg, train):
    model = nn.build_model(cfg.victim_arch, train.input_shape, train.n_classes, seed=cfg.seed)
    return nn.sgd_train(model, train.inputs, train.labels, cfg.victim_train)


# -- sweeps ------------------------------------------------------------------------------

def run_point(bench, policy, acfg):
    """Defender metrics and stolen-model accuracy for one (defense, attack) pair."""
    p = OperatingPoint(policy.tag, policy.kind, float(policy.budget_param), acfg.tag, acfg.seed, acfg.budget)
    try:
        m = bench.defender_metrics(policy, seed=acfg.seed)
        p.acc_defender, p.mean_l1, p.max_l1 = m["accuracy"], m["mean_l1"], m["max_l1"]
        p.mean_entropy, p.std_entropy = m["mean_entropy"], m["std_entropy"]
        ep = bench.endpoint(policy, seed=acfg.seed)
        t0 = time.perf_counter()
        stolen = attacks.steal(ep, acfg, pool=bench.pool if acfg.strategy == "knockoff" else None,
                               seed_set=bench.seed_set(acfg.seed_size, acfg.seed))
        p.queries = ep.n_queries
        p.wallclock_ms_per_query = 1000 * (time.perf_counter() - t0) / max(ep.n_queries, 1)
        p.acc_attacker = attacks.evaluate(stolen, bench.test)
    except Exception as exc:  # persisted as a failed point
        p.status = "failed"
        p.error = f"{type(exc).__name__}: {exc}"
        log.error("point %s / %s failed\n%s", policy.tag, acfg.tag, traceback.format_exc())
    log.info("%s %s def=%.4f att=%.4f l1=%.3f", p.defense_tag, p.attack_tag, p.acc_defender,
             p.acc_attacker, p.mean_l1)
    return p


def sort_points(points):
    return sorted(points, key=lambda p: (p.defense_kind, p.param, p.attack_tag, p.seed))


def run_sweep(cfg, bench=None, out_dir=None):
    """One operating point per (defense, attack); results persisted as they complete."""
    bench = bench or Workbench(cfg)
    out_dir = out_dir or cfg.out_dir
    points = []
    for policy in cfg.defenses:
        for acfg in cfg.attacks:
            points.append(run_point(bench, policy, acfg))
            if out_dir:
                emit_results(sort_points(points), [], out_dir, provenance=_provenance(cfg), charts=False)
    points = sort_points(points)
    if out_dir:
        emit_results(points, [], out_dir, provenance=_provenance(cfg))
    return points


def run_ablation(cfg, bench=None, epsilons=None, seeds=(0,), kinds=defenses.MAD_KINDS, out_dir=None):
    """MAD and its ablations over the same epsilon grid, attack grid and seeds."""
    bench = bench or Workbench(cfg)
    epsilons = DEFAULT_EPSILONS if epsilons is None else epsilons
    points = []
    for seed in seeds:
        for kind in kinds:
            for eps in epsilons:
                policy = defenses.DefensePolicy(kind=kind, epsilon=eps,
                                                surrogate=cfg.defenses[0].surrogate)
                for acfg in cfg.attacks:
                    a = attacks.AttackConfig.from_dict({**acfg.to_dict(), "seed": seed})
                    points.append(run_point(bench, policy, a))
    points = sort_points(points)
    if out_dir or cfg.out_dir:
        emit_results(points, [], out_dir or cfg.out_dir, provenance=_provenance(cfg))
    return points


def attacker_at_defender_accuracy(points, target):
    """Attacker accuracy on a curve, linearly interpolated at defender accuracy ``target``.

    Points are ordered by the swept parameter; the first segment that brackets
    ``target`` is used.  Returns nan when the curve never reaches it.
    """
    pts = sorted((p for p in points if p.status == "ok"), key=lambda p: p.param)
    for a, b in zip(pts, pts[1:]):
        lo, hi = sorted((a.acc_defender, b.acc_defender))
        if lo <= target <= hi:
            if b.acc_defender == a.acc_defender:
                return min(a.acc_attacker, b.acc_attacker)
            t = (target - a.acc_defender) / (b.acc_defender - a.acc_defender)
            return a.acc_attacker + t * (b.acc_attacker - a.acc_attacker)
    exact = [p.acc_attacker for p in pts if p.acc_defender == target]
    return exact[0] if exact else math.nan


# -- angular experiment ---------------------------------------------------------------

def run_angular_experiment(victim, policy, surrogate_mode, N, inputs, test=None, lr=1e-3,
                           seed=0, attacker_arch=None, surrogate=None, trace_every=None, test_size=1000, B=None):
    """Online SGD (batch 1) on the attacker, measuring the angle between the
    clean-label gradient u and the poisoned-label gradient a at every step.

    ``whitebox`` crafts each posterior with the attacker's own current
    parameters; ``blackbox`` uses the fixed ``surrogate``.  The attacker
    follows the poisoned gradient.  Test loss (cross-entropy against true
    labels on up to ``test_size`` test points) is traced every ``trace_every`` steps.
    Each step queries one of ``B`` distinct images drawn up front (default: N
    distinct images, one per step).
    """
    if policy.kind not in ("mad", "mad_argmax"):
        raise ValueError(f"angular experiment needs a mad policy, got {policy.kind!r}")
    if surrogate_mode not in ("whitebox", "blackbox"):
        raise ValueError("surrogate_mode must be whitebox or blackbox")
    if surrogate_mode == "blackbox" and surrogate is None:
        raise ValueError("blackbox mode needs a surrogate")
    budget = Budget(policy.epsilon, policy.norm_p)
    argmax_mode = policy.kind == "mad_argmax"
    rng = np.random.default_rng(seed)
    if B is None:
        order = rng.choice(len(inputs), size=N, replace=N > len(inputs))
    else:
        distinct = rng.choice(len(inputs), size=B, replace=B > len(inputs))
        order = distinct[rng.integers(0, B, size=N)]
    attacker = nn.build_model(attacker_arch or victim.arch_id, victim.input_shape, victim.n_classes, seed=seed)
    w = attacker.params
    trace_every = trace_every or max(N // 10, 1)
    if test is not None:
        tX, tY = test.inputs[:test_size], test.labels[:test_size]

    def test_loss():
        P = nn.predict_proba(attacker, tX)
        return float(np.mean(nn.cross_entropy(P, np.eye(victim.n_classes)[tY])))

    thetas, trace, steps = [], [], []
    for step in range(N):
        if test is not None and step % trace_every == 0:
            trace.append(test_loss())
            steps.append(step)
        x = inputs[order[step]][None]
        y = nn.predict_proba(victim, x)[0]
        source = attacker if surrogate_mode == "whitebox" else surrogate
        M = nn.jacobian_gram(source, x)[0]
        y_tilde = defenses.mad_perturb(y, None, budget, argmax_mode=argmax_mode, M=M)
        u = nn.backward(attacker, x, y[None])
        a = nn.backward(attacker, x, y_tilde[None])
        try:
            thetas.append(defenses.angular_deviation(u, a))
        except defenses.UndefinedAngle:
            thetas.append(0.0)
        w -= lr * a
    if test is not None:
        trace.append(test_loss())
        steps.append(N)
    edges = np.linspace(0.0, 180.0, HIST_BINS + 1)
    counts, _ = np.histogram(np.clip(thetas, 0, 180), bins=edges)
    return AngularHistogram(epsilon=policy.epsilon, mode=surrogate_mode, bin_edges=edges.tolist(),
                            counts=counts.tolist(), mean_theta=float(np.mean(thetas)), thetas=thetas,
                            test_loss_trace=trace, trace_steps=steps)


# -- timing ----------------------------------------------------------------------------------

def timing_report(endpoint, X, n_queries=100):
    """Per-query latency (ms) of single-input queries; returns (mean, std).

    MAD endpoints get a fresh Gram cache so every query pays for its Jacobian.
    """
    if endpoint.gram_cache is not None:
        endpoint.gram_cache = defenses.GramCache(endpoint.gram_cache.surrogate)
    times = []
    for i in range(n_queries):
        x = X[i % len(X)][None]
        t0 = time.perf_counter()
        endpoint.query(x)
        times.append(1000 * (time.perf_counter() - t0))
        if endpoint.gram_cache is not None:
            endpoint.gram_cache._store.clear()
    return float(np.mean(times)), float(np.std(times))


# -- emission -----------------------------------------------------------------------------

def _provenance(cfg):
    return {"config": cfg.to_dict(), "numpy": np.__version__}


def write_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in points:
            w.writerow(p.row())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_results(points, histograms, path, provenance=None, charts=True):
    """Write points.csv, results.json and (optionally) SVG charts under ``path``.

    The CSV excludes wall-clock columns so that repeated runs are byte-identical;
    timings live in the JSON dump.
    """
    if not points and not histograms:
        raise ValueError("nothing to emit")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if points:
        write_csv(points, out / "points.csv")
        files["csv"] = out / "points.csv"
    dump = {"points": [asdict(p) for p in points],
            "histograms": [asdict(h) for h in histograms],
            "provenance": provenance or {}}
    (out / "results.json").write_text(json.dumps(dump, indent=1, sort_keys=True, default=_json_default))
    files["json"] = out / "results.json"
    if charts:
        from . import plotting
        if points:
            plotting.curve_chart(points, out / "curves.svg", floor=_chance(provenance))
            files["curves"] = out / "curves.svg"
        if histograms:
            plotting.histogram_chart(histograms, out / "angular.svg")
            files["angular"] = out / "angular.svg"
    return files


def _chance(provenance):
    try:
        cfg = provenance["config"]
        return 1.0 / (10 if cfg["dataset"] == "mnist" else cfg["blobs"]["K"])
    except (KeyError, TypeError):
        return None


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_results(path):
    """Reload results.json into (points, histograms)."""
    dump = json.loads((Path(path) / "results.json").read_text())
    points = [OperatingPoint(**p) for p in dump["points"]]
    hists = [AngularHistogram(**h) for h in dump["histograms"]]
    return points, hists


def out_dir_from_env(default="results"):
    return os.environ.get("MADPOISON_OUT", default)
