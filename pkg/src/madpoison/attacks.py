"""Model-stealing attacks against a :class:`DefendedEndpoint`.

Knockoff queries random images from an independent pool.  The Jacobian
augmentation family (jbda, jbself, jbtop3) grows a small seed set by
stepping each input along the sign of the attacker's input gradient and
asking the victim to label the new points.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import TransferSet, sample_queries

log = logging.getLogger(__name__)

STRATEGIES = ("knockoff", "jbda", "jbself", "jbtop3")
INPUT_RANGE = (0.0, 1.0)


class BudgetExhausted(RuntimeError):
    pass


def parse_subversion(items):
    """Normalise subversion strings such as ``"nquery:5"`` into a dict."""
    out = {}
    for item in items or ():
        name, _, arg = str(item).partition(":")
        if name in ("argmax_only", "opt_adam"):
            out[name] = True
        elif name in ("nquery", "nquery_aug"):
            n = int(arg) if arg else 5
            if n < 1:
                raise ValueError(f"{name} needs n >= 1")
            out[name] = n
        else:
            raise ValueError(f"unknown subversion {item!r}")
    if "nquery" in out and "nquery_aug" in out:
        raise ValueError("choose one of nquery and nquery_aug")
    return out


@dataclass
class AttackConfig:
    strategy: str = "knockoff"
    budget: int = 10000
    seed_size: int = 100
    lam: float = 0.1
    rounds: int | None = None
    round_epochs: int = 5
    attacker_arch: str = "lenet"
    train_cfg: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    subversion: tuple = ()
    adam_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.budget < 1:
            raise ValueError("budget must be positive")
        if self.strategy != "knockoff":
            if self.seed_size < 1:
                raise ValueError("jb* attacks need seed_size >= 1")
            if self.budget < self.seed_size:
                raise ValueError("budget must cover the seed set")
        if isinstance(self.train_cfg, dict):
            self.train_cfg = nn.TrainConfig(**self.train_cfg)
        self.subversion = tuple(self.subversion)
        self.sub = parse_subversion(self.subversion)

    @property
    def tag(self):
        return "+".join((self.strategy,) + self.subversion)

    def to_dict(self):
        d = asdict(self)
        d["subversion"] = list(self.subversion)
        d.pop("sub", None)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("sub", None)
        return cls(**d)


@dataclass
class StolenModel:
    model: nn.Model
    provenance: dict


# -- querying ------------------------------------------------------------------------

def augment(X, rng, pad=4, flip=True):
    """Pad-then-random-crop and random horizontal flip of NHWC images."""
    n, h, w, _ = X.shape
    P = np.pad(X, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.stack([P[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, ::-1]
    return out


def query_inputs(endpoint, X, sub, rng):
    """Query ``X``, averaging n responses per input under the nquery subversions."""
    if "nquery" in sub:
        n = sub["nquery"]
        return np.mean([endpoint.query(X) for _ in range(n)], axis=0)
    if "nquery_aug" in sub:
        n = sub["nquery_aug"]
        return np.mean([endpoint.query(augment(X, rng)) for _ in range(n)], axis=0)
    return endpoint.query(X)


def _cost(sub):
    return sub.get("nquery", sub.get("nquery_aug", 1))


def _audit(endpoint, start):
    flat = lambda rows: np.concatenate(rows) if rows else np.zeros(0)  # noqa: E731
    return flat(endpoint.audit_l1)[start:], flat(endpoint.audit_choice)[start:]


def run_knockoff(endpoint, pool, B, seed=0, subversion=()):
    """Random-strategy knockoff transfer set of ``B`` victim calls.

    Under nquery subversions each image costs n calls, so B // n images are used.
    """
    sub = parse_subversion(subversion)
    n_images = B // _cost(sub)
    if n_images < 1:
        raise ValueError(f"budget {B} cannot afford one image at {_cost(sub)} calls each")
    idx, X, replaced = sample_queries(pool, n_images, seed)
    start = endpoint.n_queries
    audit_start = sum(len(a) for a in endpoint.audit_l1)
    Y = query_inputs(endpoint, X, sub, np.random.default_rng([seed, 1]))
    used = endpoint.n_queries - start
    assert used <= B
    l1, choice = _audit(endpoint, audit_start)
    return TransferSet(posteriors=Y, input_refs=idx, pool_tag=pool.source_tag, pool_digest=pool.digest,
                       epsilon_used=np.full(len(Y), getattr(endpoint.policy, "epsilon", 0.0)),
                       defense_tag=endpoint.policy.tag,
                       audit_l1=l1 if _cost(sub) == 1 else None,
                       audit_choice=choice if _cost(sub) == 1 else None,
                       provenance={"strategy": "knockoff", "seed": seed, "queries": int(used),
                                   "with_replacement": bool(replaced), "subversion": list(subversion)})


# -- Jacobian-based augmentation -------------------------------------------------------

def jacobian_directions(attacker, X, classes):
    """sign(d log F_A(x)_c / dx) for each input and class; zero where flat."""
    return np.sign(nn.input_gradient(attacker, X, classes, wrt="logprob"))


def _round_classes(variant, attacker, X, Y_victim):
    """Per-input class lists that define the augmentation directions."""
    if variant == "jbda":
        return [np.argmax(Y_victim, axis=1)]
    P = nn.predict_proba(attacker, X)
    if variant == "jbself":
        return [np.argmax(P, axis=1)]
    if variant == "jbtop3":
        top = min(3, P.shape[1])
        order = np.argsort(-P, axis=1, kind="stable")[:, :top]
        return [order[:, j] for j in range(top)]
    raise ValueError(f"unknown variant {variant!r}")


def _augment_set(attacker, X, Y_victim, lam, variant):
    new = []
    for classes in _round_classes(variant, attacker, X, Y_victim):
        step = lam * (INPUT_RANGE[1] - INPUT_RANGE[0]) * jacobian_directions(attacker, X, classes)
        new.append(np.clip(X + step, *INPUT_RANGE))
    return np.concatenate(new)


def jbda_round(X, Y_victim, attacker, endpoint, lam=0.1, budget_left=None, sub=None, rng=None):
    """One doubling round: returns (new inputs, their victim posteriors).

    Truncated to the remaining budget when it cannot cover the full round.
    """
    return jb_variant_round(X, Y_victim, attacker, endpoint, "jbda", lam, budget_left, sub, rng)


def jb_variant_round(X, Y_victim, attacker, endpoint, variant, lam=0.1, budget_left=None, sub=None, rng=None):
    sub = sub or {}
    X_new = _augment_set(attacker, X, Y_victim, lam, variant)
    if budget_left is not None:
        X_new = X_new[:max(budget_left // _cost(sub), 0)]
    if len(X_new) == 0:
        return X_new, np.zeros((0, endpoint.n_classes))
    return X_new, query_inputs(endpoint, X_new, sub, rng or np.random.default_rng(0))


def run_jb(endpoint, seed_set, cfg, input_shape=None):
    """Jacobian-augmentation attack; returns (TransferSet, last round attacker).

    Rounds continue until the budget is spent (or ``cfg.rounds`` is reached);
    between rounds the attacker is trained for ``cfg.round_epochs`` epochs.
    """
    sub = cfg.sub
    rng = np.random.default_rng([cfg.seed, 2])
    n_seed = min(cfg.seed_size, cfg.budget // _cost(sub))
    X = np.asarray(seed_set[:n_seed], dtype=np.float64)
    start = endpoint.n_queries
    Y = query_inputs(endpoint, X, sub, rng)
    input_shape = input_shape or X.shape[1:]
    attacker = nn.build_model(cfg.attacker_arch, input_shape, endpoint.n_classes, seed=cfg.seed)
    round_cfg = _train_cfg(cfg, epochs=cfg.round_epochs)
    rounds = 0
    sizes = [len(X)]
    while cfg.rounds is None or rounds < cfg.rounds:
        attacker = nn.sgd_train(attacker, X, _targets(Y, sub), round_cfg)
        left = cfg.budget - (endpoint.n_queries - start)
        if left < _cost(sub):
            break
        X_new, Y_new = jb_variant_round(X, Y, attacker, endpoint, cfg.strategy, cfg.lam, left, sub, rng)
        if len(X_new) == 0:
            break
        X, Y = np.concatenate([X, X_new]), np.concatenate([Y, Y_new])
        rounds += 1
        sizes.append(len(X))
        log.info("%s round %d: %d records", cfg.strategy, rounds, len(X))
    used = endpoint.n_queries - start
    assert used <= cfg.budget
    ts = TransferSet(posteriors=Y, inputs=X, epsilon_used=np.full(len(Y), getattr(endpoint.policy, "epsilon", 0.0)),
                     defense_tag=endpoint.policy.tag,
                     provenance={"strategy": cfg.strategy, "seed": cfg.seed, "queries": int(used),
                                 "rounds": rounds, "sizes": sizes, "lam": cfg.lam,
                                 "round_epochs": cfg.round_epochs, "subversion": list(cfg.subversion)})
    return ts, attacker


# -- training and evaluation -------------------------------------------------------------

def _targets(Y, sub):
    if sub.get("argmax_only"):
        return np.eye(Y.shape[1])[np.argmax(Y, axis=1)]
    return Y


def _train_cfg(cfg, **over):
    tc = asdict(cfg.train_cfg)
    tc["seed"] = cfg.seed
    if cfg.sub.get("opt_adam"):
        tc.update(optimizer="adam", lr=cfg.adam_lr)
    tc.update(over)
    return nn.TrainConfig(**tc)


def train_attacker(ts, cfg, input_shape=None, n_classes=None, inputs=None):
    """Fit a fresh attacker model to the transfer set by soft-label cross-entropy."""
    X = inputs if inputs is not None else ts.inputs
    if X is None:
        raise ValueError("transfer set inputs are unresolved; call ts.resolve(pool) first")
    if len(ts) == 0:
        raise ValueError("cannot train on an empty transfer set")
    n_classes = n_classes or ts.posteriors.shape[1]
    input_shape = input_shape or X.shape[1:]
    model = nn.build_model(cfg.attacker_arch, input_shape, n_classes, seed=cfg.seed)
    tcfg = _train_cfg(cfg)
    trained = nn.sgd_train(model, X, _targets(ts.posteriors, cfg.sub), tcfg)
    prov = {"attack": cfg.to_dict(), "defense": ts.defense_tag, "records": len(ts),
            "queries": ts.provenance.get("queries", len(ts)), "train": asdict(tcfg),
            "transfer": ts.provenance}
    return StolenModel(trained, prov)


def evaluate(model, test):
    """Top-1 accuracy of ``model`` on a labelled dataset."""
    if isinstance(model, StolenModel):
        model = model.model
    if len(test) == 0:
        raise ValueError("empty test set")
    return nn.accuracy(model, test.inputs, test.labels)


def steal(endpoint, cfg, pool=None, seed_set=None):
    """Run the configured attack end to end and return the stolen model."""
    if cfg.strategy == "knockoff":
        if pool is None:
            raise ValueError("knockoff needs a query pool")
        ts = run_knockoff(endpoint, pool, cfg.budget, cfg.seed, cfg.subversion)
        X = ts.resolve(pool)
    else:
        if seed_set is None:
            raise ValueError(f"{cfg.strategy} needs a seed set")
        ts, _ = run_jb(endpoint, seed_set, cfg)
        X = ts.inputs
    stolen = train_attacker(ts, cfg, inputs=X)
    stolen.transfer = ts
    return stolen
