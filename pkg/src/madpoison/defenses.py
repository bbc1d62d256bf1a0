"""Prediction-perturbation defenses.

MAD picks, per query, the simplex extreme whose induced parameter-gradient
direction G^T y* is farthest in angle from the clean direction G^T y, then
moves the posterior toward it as far as the L_p budget allows.  G is the
log-likelihood Jacobian of a fixed surrogate network.  The baselines
(reverse sigmoid, logit noise, rounding, top-k) live here too, together
with :class:`DefendedEndpoint`, the black box the attacks query.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .simplex import Budget, extremes_matrix, opt_step, opt_step_batch, project_l1_ball

log = logging.getLogger(__name__)

MAD_KINDS = ("mad", "mad_argmax", "mad_identity_G", "mad_rand_ystar")
KINDS = ("none",) + MAD_KINDS + ("reverse_sigmoid", "rand_noise", "rounding", "topk")
INIT_MODES = ("rand", "early", "mid", "late")
INIT_BANDS = {"early": 0.25, "mid": 0.50, "late": 0.75}
PROB_CLAMP = 1e-12
TIE_TOL = 1e-12  # objective values closer than this count as equal


class DegenerateDirection(ValueError):
    """A projected gradient G^T y has zero norm, so its direction is undefined."""


class UndefinedAngle(ValueError):
    """Angle requested between vectors where one has zero length."""


@dataclass(frozen=True)
class SurrogateSpec:
    arch_id: str = "lenet"
    init_mode: str = "rand"
    seed: int = 0

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")


@dataclass(frozen=True)
class DefensePolicy:
    kind: str = "none"
    epsilon: float = 0.0
    beta: float = 0.0
    gamma: float = 0.2
    decimals: int = 2
    k: int = 1
    norm_p: int = 1
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind in MAD_KINDS:
            Budget(self.epsilon, self.norm_p)
        if self.kind == "rand_noise" and self.epsilon < 0:
            raise ValueError("rand_noise needs epsilon >= 0")
        if self.kind == "reverse_sigmoid" and not (0 <= self.beta <= 1 and self.gamma > 0):
            raise ValueError("reverse_sigmoid needs beta in [0, 1] and gamma > 0")
        if self.kind == "rounding" and self.decimals < 0:
            raise ValueError("decimals must be >= 0")
        if self.kind == "topk" and self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def tag(self):
        if self.kind in MAD_KINDS or self.kind == "rand_noise":
            return f"{self.kind}[eps={self.epsilon:g}]"
        if self.kind == "reverse_sigmoid":
            return f"{self.kind}[beta={self.beta:g},gamma={self.gamma:g}]"
        if self.kind == "rounding":
            return f"{self.kind}[decimals={self.decimals}]"
        if self.kind == "topk":
            return f"{self.kind}[k={self.k}]"
        return self.kind

    @property
    def budget_param(self):
        """The knob swept along a defense curve."""
        if self.kind == "reverse_sigmoid":
            return self.beta
        if self.kind == "rounding":
            return float(self.decimals)
        if self.kind == "topk":
            return float(self.k)
        return self.epsilon

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "surrogate" in d and isinstance(d["surrogate"], dict):
            d["surrogate"] = SurrogateSpec(**d["surrogate"])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# -- surrogate and Jacobian ----------------------------------------------------

def make_surrogate(spec, input_shape, n_classes, train=None, test=None, train_cfg=None, check_every=20):
    """Build the defender's surrogate network.

    ``rand`` is a freshly initialised model.  ``early``/``mid``/``late``
    train on ``train`` and keep the first checkpoint (checked every
    ``check_every`` minibatches) whose accuracy on ``test`` reaches about
    25/50/75 percent.
    """
    model = nn.build_model(spec.arch_id, input_shape, n_classes, seed=spec.seed)
    if spec.init_mode == "rand":
        return model
    if train is None or test is None:
        raise ValueError(f"init_mode={spec.init_mode!r} needs train and test data")
    band = INIT_BANDS[spec.init_mode]
    cfg = train_cfg or nn.TrainConfig(lr=0.01, momentum=0.5, epochs=5, seed=spec.seed)
    found = {}

    def probe(step, current):
        if step % check_every:
            return False
        acc = nn.accuracy(current, test.inputs, test.labels)
        if acc >= band:
            found["model"] = current.copy()
            found["acc"] = acc
            return True
        return False

    nn.sgd_train(model, train.inputs, train.labels, cfg, batch_callback=probe)
    if "model" not in found:
        raise RuntimeError(f"surrogate never reached {band:.0%} test accuracy")
    log.info("surrogate %s checkpoint at test accuracy %.3f", spec.init_mode, found["acc"])
    return found["model"]


def estimate_G(surrogate, x):
    """K x D log-likelihood Jacobian of the surrogate at ``x`` (read-only)."""
    return nn.loglik_jacobian(surrogate, x)


class GramCache:
    """Memoises per-input surrogate Gram matrices G G^T keyed by input bytes."""

    def __init__(self, surrogate):
        self.surrogate = surrogate
        self._store = {}

    @staticmethod
    def key(x):
        return hashlib.sha1(np.ascontiguousarray(x).tobytes()).digest()

    def __call__(self, X):
        keys = [self.key(x) for x in X]
        missing = [i for i, k in enumerate(keys) if k not in self._store]
        if missing:
            grams = nn.jacobian_gram(self.surrogate, X[missing])
            for i, g in zip(missing, grams):
                self._store[keys[i]] = g
        return np.stack([self._store[k] for k in keys])

    def __len__(self):
        return len(self._store)


# -- MAD objective and solver -----------------------------------------------------

def mad_objective(y_tilde, y, G):
    """Squared distance between the unit vectors G^T y_tilde and G^T y (in [0, 4])."""
    G = np.asarray(G, dtype=np.float64)
    a = G.T @ np.asarray(y_tilde, dtype=np.float64)
    u = G.T @ np.asarray(y, dtype=np.float64)
    na, nu = np.linalg.norm(a), np.linalg.norm(u)
    if na == 0.0 or nu == 0.0:
        raise DegenerateDirection("zero-norm projected gradient")
    return float(np.sum((a / na - u / nu) ** 2))


def _safe_objective(y_tilde, y, G):
    try:
        return mad_objective(y_tilde, y, G)
    except DegenerateDirection:
        return 0.0


def mad_objectives_gram(V, y, M):
    """Objective for each candidate row of ``V`` using the Gram matrix M = G G^T.

    Uses ||a_hat - u_hat||^2 = 2 - 2 cos(a, u).  Candidates (or y) whose
    projected gradient vanishes score 0.
    """
    V = np.asarray(V, dtype=np.float64)
    My = M @ y
    ny = float(y @ My)
    nv = np.einsum("ck,kj,cj->c", V, M, V)
    scale = max(float(np.trace(M)), np.finfo(float).tiny)
    out = np.zeros(len(V))
    if ny <= 1e-20 * scale:
        return out
    ok = nv > 1e-20 * scale
    cos = (V[ok] @ My) / np.sqrt(nv[ok] * ny)
    out[ok] = np.clip(2.0 - 2.0 * cos, 0.0, 4.0)
    return out


def _keep_argmax(y, y_star, alpha, k):
    """Shrink alpha until np.argmax(h(alpha)) == k (tie vertices can flip it)."""
    if np.argmax((1 - alpha) * y + alpha * y_star) == k:
        return alpha
    lo, hi = 0.0, alpha
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.argmax((1 - mid) * y + mid * y_star) == k:
            lo = mid
        else:
            hi = mid
    return lo


def select_extreme(y, G=None, M=None, argmax_mode=False):
    """Index and vertex maximising the MAD objective (lowest index wins ties).

    Returns (None, None) if every candidate scores 0.
    """
    y = np.asarray(y, dtype=np.float64)
    K = len(y)
    V = extremes_matrix(K, int(np.argmax(y)) if argmax_mode else None)
    if M is not None:
        scores = mad_objectives_gram(V, y, M)
    else:
        scores = np.array([_safe_objective(v, y, G) for v in V])
    best = _best_index(scores)
    return (None, None) if best is None else (best, V[best])


def _best_index(scores):
    """Lowest index within TIE_TOL of the top score; None if all are ~0."""
    top = scores.max()
    if top <= TIE_TOL:
        return None
    return int(np.nonzero(scores >= top - TIE_TOL)[0][0])


def mad_perturb(y, G, budget, argmax_mode=False, M=None):
    """Perturbed posterior for one query.

    The argmax over extremes (argmax-constrained ones when ``argmax_mode``)
    gives y*; the result is y moved toward y* by ``opt_step``.  Pass ``M``
    (= G G^T) instead of ``G`` to skip the D-dimensional products.
    """
    y = np.asarray(y, dtype=np.float64)
    _, y_star = select_extreme(y, G=G, M=M, argmax_mode=argmax_mode)
    if y_star is None:
        return y.copy()
    alpha = opt_step(y, y_star, budget)
    if argmax_mode:
        alpha = _keep_argmax(y, y_star, alpha, int(np.argmax(y)))
    return (1 - alpha) * y + alpha * y_star


def _interpolate_rows(Y, Y_star, epsilon, p, keep_argmax=False):
    alpha = opt_step_batch(Y, Y_star, epsilon, p)
    if keep_argmax:
        ks = Y.argmax(axis=1)
        for i in range(len(Y)):
            alpha[i] = _keep_argmax(Y[i], Y_star[i], alpha[i], ks[i])
    return (1 - alpha)[:, None] * Y + alpha[:, None] * Y_star


def mad_perturb_batch(Y, grams, epsilon, argmax_mode=False, p=1):
    """Row-wise MAD from per-query Gram matrices; returns (Y_tilde, chosen index).

    For argmax mode the index refers to the list from ``extremes_argmax``;
    -1 marks degenerate rows returned unperturbed.
    """
    Y = np.asarray(Y, dtype=np.float64)
    N, K = Y.shape
    grams = np.broadcast_to(grams, (N, K, K))
    Y_star = Y.copy()
    chosen = np.full(N, -1)
    for i in range(N):
        V = extremes_matrix(K, int(np.argmax(Y[i])) if argmax_mode else None)
        best = _best_index(mad_objectives_gram(V, Y[i], grams[i]))
        if best is not None:
            chosen[i] = best
            Y_star[i] = V[best]
    return _interpolate_rows(Y, Y_star, epsilon, p, keep_argmax=argmax_mode), chosen


def mad_ablation_perturb(y, budget, variant, seed=None, rng=None):
    """MAD ablations: ``identity_G`` (G := I) or ``rand_ystar`` (random extreme)."""
    y = np.asarray(y, dtype=np.float64)
    K = len(y)
    if variant == "identity_G":
        return mad_perturb(y, np.eye(K), budget)
    if variant == "rand_ystar":
        rng = rng if rng is not None else np.random.default_rng(seed)
        y_star = np.eye(K)[rng.integers(K)]
        alpha = opt_step(y, y_star, budget)
        return (1 - alpha) * y + alpha * y_star
    raise ValueError(f"unknown ablation variant {variant!r}")


# -- baselines -----------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logit(y):
    y = np.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.log(y) - np.log1p(-y)


def _reverse_sigmoid_raw(y, beta, gamma, eta):
    yc = np.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    r = np.maximum(yc - beta * (_sigmoid(gamma * _logit(yc)) - eta), 0.0)
    total = r.sum(axis=-1, keepdims=True)
    return np.where(total > 0, r / np.where(total > 0, total, 1.0), y)


def reverse_sigmoid_perturb(y, beta, gamma):
    """Soften posteriors: y_k - beta * (sigmoid(gamma * logit(y_k)) - eta), clipped and renormalised.

    eta = sigmoid(gamma * logit(1/K)) makes the uniform posterior a fixed point.
    For gamma < 1 the map boosts near-zero classes by up to beta * eta, which
    can overtake a moderately confident top class; such rows use the largest
    beta' <= beta (found by bisection) that keeps the original top-1.
    """
    y = np.asarray(y, dtype=np.float64)
    if beta == 0:
        return y.copy()
    K = y.shape[-1]
    eta = _sigmoid(gamma * _logit(1.0 / K))
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    out = _reverse_sigmoid_raw(Y, beta, gamma, eta)
    top = Y.argmax(axis=1)
    for i in np.nonzero(out.argmax(axis=1) != top)[0]:
        lo, hi = 0.0, beta
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _reverse_sigmoid_raw(Y[i], mid, gamma, eta).argmax() == top[i]:
                lo = mid
            else:
                hi = mid
        out[i] = _reverse_sigmoid_raw(Y[i], lo, gamma, eta)
    return out[0] if single else out


def rand_noise_perturb(y, eps_z, seed=None, rng=None):
    """Uniform logit noise projected onto the L1 ball of radius ``eps_z``.

    The noisy logistic scores are divided by their sum to land back on the simplex.
    """
    y = np.asarray(y, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(seed)
    z = _logit(y)
    delta = rng.uniform(-eps_z, eps_z, size=y.shape) if eps_z > 0 else np.zeros_like(y)
    if delta.ndim == 1:
        delta = project_l1_ball(delta, eps_z)
    else:
        delta = np.stack([project_l1_ball(d, eps_z) for d in delta])
    s = _sigmoid(z + delta)
    return s / s.sum(axis=-1, keepdims=True)


def rounding_perturb(y, decimals):
    """Round to ``decimals`` places and renormalise, keeping the original top-1.

    If rounding ties the top class with another, the top class gets one extra
    quantum first.
    """
    if decimals < 0:
        raise ValueError("decimals must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    R = np.round(Y, decimals)
    top = Y.argmax(axis=1)
    rows = np.nonzero((R.argmax(axis=1) != top) | (R[np.arange(len(R)), top] <= 0))[0]
    R[rows, top[rows]] += 10.0 ** -decimals
    R = R / R.sum(axis=1, keepdims=True)
    return R[0] if single else R


def topk_perturb(y, k):
    """Zero all but the k largest probabilities (stable on ties) and renormalise."""
    y = np.asarray(y, dtype=np.float64)
    K = y.shape[-1]
    if not 1 <= k <= K:
        raise ValueError(f"k={k} outside [1, {K}]")
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    order = np.argsort(-Y, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(Y)
    np.put_along_axis(out, order, np.take_along_axis(Y, order, axis=1), axis=1)
    total = out.sum(axis=1, keepdims=True)
    out = np.where(total > 0, out / np.where(total > 0, total, 1.0), np.eye(K)[Y.argmax(axis=1)])
    return out[0] if single else out


def angular_deviation(u, a):
    """Angle in degrees between two gradient vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    a = np.asarray(a, dtype=np.float64).ravel()
    nu, na = np.linalg.norm(u), np.linalg.norm(a)
    if nu == 0.0 or na == 0.0:
        raise UndefinedAngle("angle undefined for a zero vector")
    # half-angle form stays accurate near 0 and 180 degrees, unlike acos
    u, a = u / nu, a / na
    return math.degrees(2.0 * math.atan2(np.linalg.norm(u - a), np.linalg.norm(u + a)))


# -- defended black box --------------------------------------------------------------

class DefendedEndpoint:
    """Victim model behind a perturbation policy; counts every query.

    Random policies draw from a stream seeded by (seed, query index), so a
    run is reproducible while repeated queries still see fresh noise.
    """

    def __init__(self, victim, policy=None, surrogate=None, seed=0, gram_cache=None):
        self.victim = victim
        self.policy = policy or DefensePolicy()
        self.seed = seed
        self.n_queries = 0
        self.audit_l1 = []
        self.audit_choice = []
        if self.policy.kind in ("mad", "mad_argmax"):
            if gram_cache is None:
                if surrogate is None:
                    raise ValueError(f"{self.policy.kind} needs a surrogate model")
                gram_cache = GramCache(surrogate)
            self.gram_cache = gram_cache
        else:
            self.gram_cache = None

    @property
    def n_classes(self):
        return self.victim.n_classes

    def clean(self, X):
        return nn.predict_proba(self.victim, X)

    def _rng(self, index):
        return np.random.default_rng([self.seed, index])

    def perturb(self, X, Y, start_index=0):
        """Apply the policy to clean posteriors ``Y`` of inputs ``X``.

        Returns (Y_tilde, chosen) where ``chosen`` holds the y* index for
        MAD-family policies and -1 elsewhere.
        """
        pol = self.policy
        N, K = Y.shape
        chosen = np.full(N, -1)
        if pol.kind == "none":
            return Y.copy(), chosen
        if pol.kind in ("mad", "mad_argmax"):
            return mad_perturb_batch(Y, self.gram_cache(X), pol.epsilon,
                                     argmax_mode=pol.kind == "mad_argmax", p=pol.norm_p)
        if pol.kind == "mad_identity_G":
            return mad_perturb_batch(Y, np.eye(K), pol.epsilon, p=pol.norm_p)
        if pol.kind == "mad_rand_ystar":
            chosen = np.array([self._rng(start_index + i).integers(K) for i in range(N)])
            return _interpolate_rows(Y, np.eye(K)[chosen], pol.epsilon, pol.norm_p), chosen
        if pol.kind == "rand_noise":
            out = np.stack([rand_noise_perturb(Y[i], pol.epsilon, rng=self._rng(start_index + i))
                            for i in range(N)])
            return out, chosen
        if pol.kind == "reverse_sigmoid":
            return reverse_sigmoid_perturb(Y, pol.beta, pol.gamma), chosen
        if pol.kind == "rounding":
            return rounding_perturb(Y, pol.decimals), chosen
        if pol.kind == "topk":
            return topk_perturb(Y, pol.k), chosen
        raise ValueError(pol.kind)

    def query(self, X, batch_size=500):
        """Answer a batch of queries with perturbed posteriors."""
        X = np.asarray(X, dtype=np.float64)
        outs = []
        for s in range(0, len(X), batch_size):
            xb = X[s:s + batch_size]
            Y = self.clean(xb)
            Yt, chosen = self.perturb(xb, Y, start_index=self.n_queries)
            self.n_queries += len(xb)
            self.audit_l1.append(np.abs(Yt - Y).sum(axis=1))
            self.audit_choice.append(chosen)
            outs.append(Yt)
        if not outs:
            return np.zeros((0, self.n_classes))
        return np.concatenate(outs)

    def evaluate(self, X, labels, batch_size=500):
        """Accuracy of the defended predictions plus mean L1 and base-2 entropy.

        Uses a private query counter so that attack accounting is untouched.
        """
        from .simplex import entropy
        saved = (self.n_queries, self.audit_l1, self.audit_choice)
        self.n_queries, self.audit_l1, self.audit_choice = 10 ** 12, [], []  # separate random stream
        Yt = self.query(X, batch_size)
        l1 = np.concatenate(self.audit_l1)
        self.n_queries, self.audit_l1, self.audit_choice = saved
        acc = float(np.mean(Yt.argmax(axis=1) == np.asarray(labels)))
        return {"accuracy": acc, "mean_l1": float(l1.mean()), "max_l1": float(l1.max()),
                "mean_entropy": float(entropy(Yt).mean()), "std_entropy": float(entropy(Yt).std())}
