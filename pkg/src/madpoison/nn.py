"""Small numpy neural-network engine with exact manual backpropagation.

Images are stored channels-last (N, H, W, C).  A :class:`Model` owns one
flat float64 parameter vector; every layer reads its weights through a
slice of it, so gradients, Jacobian rows and checkpoints all share the
same flat layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Input does not match the model's declared input shape."""


# -- layers -------------------------------------------------------------------

class Layer:
    kind = "layer"
    n_params = 0

    def param_shapes(self):
        return []

    def init_params(self, rng):
        return np.zeros(0)

    def out_shape(self, in_shape):
        return in_shape

    def spec(self):
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.n_params = self.n_in * self.n_out + self.n_out

    def param_shapes(self):
        return [(self.n_in, self.n_out), (self.n_out,)]

    def init_params(self, rng):
        bound = 1.0 / math.sqrt(self.n_in)
        return rng.uniform(-bound, bound, self.n_params)

    def out_shape(self, in_shape):
        return (self.n_out,)

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def _split(self, w):
        return w[: self.n_in * self.n_out].reshape(self.n_in, self.n_out), w[self.n_in * self.n_out:]

    def forward(self, w, x):
        W, b = self._split(w)
        return x @ W + b, x

    def backward(self, w, cache, g, want_grad=True):
        W, _ = self._split(w)
        x = cache
        grad = np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)]) if want_grad else None
        return g @ W.T, grad

    def per_example(self, cache, g):
        x = cache
        return np.concatenate([(x[:, :, None] * g[:, None, :]).reshape(len(x), -1), g], axis=1)


class Conv2D(Layer):
    """Valid 2-D convolution, stride 1, channels-last."""

    kind = "conv"

    def __init__(self, c_in, c_out, k):
        self.c_in, self.c_out, self.k = int(c_in), int(c_out), int(k)
        self.fan_in = self.k * self.k * self.c_in
        self.n_params = self.fan_in * self.c_out + self.c_out

    def param_shapes(self):
        return [(self.k, self.k, self.c_in, self.c_out), (self.c_out,)]

    def init_params(self, rng):
        bound = 1.0 / math.sqrt(self.fan_in)
        return rng.uniform(-bound, bound, self.n_params)

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        return (h - self.k + 1, w - self.k + 1, self.c_out)

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "k": self.k}

    def _split(self, w):
        n = self.fan_in * self.c_out
        return w[:n].reshape(self.fan_in, self.c_out), w[n:]

    def _cols(self, x):
        n, h, wd, c = x.shape
        oh, ow = h - self.k + 1, wd - self.k + 1
        win = sliding_window_view(x, (self.k, self.k), axis=(1, 2))  # n, oh, ow, c, k, k
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, self.fan_in)
        return cols, (n, h, wd, c, oh, ow)

    def forward(self, w, x):
        W, b = self._split(w)
        cols, dims = self._cols(x)
        n, _, _, _, oh, ow = dims
        out = (cols @ W + b).reshape(n, oh, ow, self.c_out)
        return out, (cols, dims)

    def backward(self, w, cache, g, want_grad=True):
        W, _ = self._split(w)
        cols, (n, h, wd, c, oh, ow) = cache
        g2 = g.reshape(-1, self.c_out)
        grad = np.concatenate([(cols.T @ g2).ravel(), g2.sum(axis=0)]) if want_grad else None
        dcols = (g2 @ W.T).reshape(n, oh, ow, self.k, self.k, c)
        dx = np.zeros((n, h, wd, c))
        for i in range(self.k):
            for j in range(self.k):
                dx[:, i:i + oh, j:j + ow, :] += dcols[:, :, :, i, j, :]
        return dx, grad

    def per_example(self, cache, g):
        cols, (n, _, _, _, oh, ow) = cache
        p = oh * ow
        g3 = g.reshape(n, p, self.c_out)
        dW = np.matmul(cols.reshape(n, p, self.fan_in).transpose(0, 2, 1), g3)
        return np.concatenate([dW.reshape(n, -1), g3.sum(axis=1)], axis=1)


class MaxPool2D(Layer):
    kind = "pool"

    def out_shape(self, in_shape):
        h, w, c = in_shape
        return (h // 2, w // 2, c)

    def forward(self, w, x):
        n, h, wd, c = x.shape
        h2, w2 = h // 2, wd // 2
        blocks = x[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, w, cache, g):
        idx, shape = cache
        n, h, wd, c = shape
        h2, w2 = h // 2, wd // 2
        scattered = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        scattered = scattered.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(shape)
        dx[:, : 2 * h2, : 2 * w2, :] = scattered.reshape(n, 2 * h2, 2 * w2, c)
        return dx, None


class ReLU(Layer):
    kind = "relu"

    def forward(self, w, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, w, cache, g):
        return g * cache, None


class Tanh(Layer):
    kind = "tanh"

    def forward(self, w, x):
        y = np.tanh(x)
        return y, y

    def backward(self, w, cache, g):
        return g * (1.0 - cache ** 2), None


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, w, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, w, cache, g):
        return g.reshape(cache), None


class Normalize(Layer):
    """Fixed affine input standardisation; carries no trainable parameters."""

    kind = "normalize"

    def __init__(self, mean, std):
        self.mean, self.std = float(mean), float(std)

    def spec(self):
        return {"kind": self.kind, "mean": self.mean, "std": self.std}

    def forward(self, w, x):
        return (x - self.mean) / self.std, None

    def backward(self, w, cache, g):
        return g / self.std, None


def layer_from_spec(spec):
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["n_in"], spec["n_out"])
    if kind == "conv":
        return Conv2D(spec["c_in"], spec["c_out"], spec["k"])
    if kind == "normalize":
        return Normalize(spec["mean"], spec["std"])
    simple = {"pool": MaxPool2D, "relu": ReLU, "tanh": Tanh, "flatten": Flatten}
    if kind not in simple:
        raise ValueError(f"unknown layer kind {kind!r}")
    return simple[kind]()


# -- model --------------------------------------------------------------------

@dataclass
class Model:
    arch_id: str
    layers: list
    input_shape: tuple
    n_classes: int
    params: np.ndarray
    offsets: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.params = np.asarray(self.params, dtype=np.float64)
        self.offsets = []
        pos = 0
        for layer in self.layers:
            self.offsets.append((pos, pos + layer.n_params))
            pos += layer.n_params
        if pos != self.params.size:
            raise ValueError(f"parameter vector has {self.params.size} entries, layers need {pos}")

    @property
    def n_params(self):
        return self.params.size

    def copy(self):
        return replace(self, params=self.params.copy())

    def with_params(self, params):
        return replace(self, params=np.array(params, dtype=np.float64))

    def layer_params(self, i):
        lo, hi = self.offsets[i]
        return self.params[lo:hi]

    def shape_table(self):
        rows = []
        for layer, (lo, hi) in zip(self.layers, self.offsets):
            rows.append({**layer.spec(), "offset": lo, "size": hi - lo,
                         "param_shapes": [list(s) for s in layer.param_shapes()]})
        return rows


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    nd = len(model.input_shape)
    if x.shape == model.input_shape:
        return x[None], True
    if x.ndim == nd + 1 and x.shape[1:] == model.input_shape:
        return x, False
    raise ShapeError(f"input of shape {x.shape} does not match model input {model.input_shape}")


def _forward_cached(model, xb):
    caches = []
    h = xb
    for i, layer in enumerate(model.layers):
        h, cache = layer.forward(model.layer_params(i), h)
        caches.append(cache)
    return h, caches


def _layer_backward(model, i, cache, g, want_grad):
    layer = model.layers[i]
    if layer.n_params:
        return layer.backward(model.layer_params(i), cache, g, want_grad)
    return layer.backward(model.layer_params(i), cache, g)


def _backward_cached(model, caches, g, per_example=False):
    """Backpropagate logit-gradients ``g``; returns per-layer parameter grads.

    With ``per_example`` the grads are (batch, n_params) arrays, else summed.
    """
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.n_params and per_example:
            grads[i] = layer.per_example(caches[i], g)
        summed = bool(layer.n_params) and not per_example
        if i > 0 or summed:
            g, grad = _layer_backward(model, i, caches[i], g, summed)
            if summed:
                grads[i] = grad
    return grads


def forward(model, x):
    """Raw logits for one input (returns shape (K,)) or a batch (N, K)."""
    xb, single = _as_batch(model, x)
    logits, _ = _forward_cached(model, xb)
    return logits[0] if single else logits


def softmax_posterior(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def predict_proba(model, x, batch_size=1000):
    xb, single = _as_batch(model, x)
    out = np.concatenate([softmax_posterior(forward(model, xb[i:i + batch_size]))
                          for i in range(0, len(xb), batch_size)]) if len(xb) else np.zeros((0, model.n_classes))
    return out[0] if single else out


def cross_entropy(pred, target):
    """-sum_k target_k log(pred_k), with log arguments clamped to [1e-12, 1]."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), LOG_FLOOR, 1.0)
    target = np.asarray(target, dtype=np.float64)
    return -(target * np.log(pred)).sum(axis=-1)


def _targets_matrix(target, n, k):
    t = np.asarray(target)
    if t.ndim == 1 and t.shape[0] == n and np.issubdtype(t.dtype, np.integer):
        out = np.zeros((n, k))
        out[np.arange(n), t] = 1.0
        return out
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[None]
    if t.shape != (n, k):
        raise ShapeError(f"target shape {t.shape} does not match ({n}, {k})")
    return t


def loss_and_grad(model, x, target):
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat params."""
    xb, _ = _as_batch(model, x)
    logits, caches = _forward_cached(model, xb)
    t = _targets_matrix(target, len(xb), model.n_classes)
    p = softmax_posterior(logits)
    loss = float(np.mean(cross_entropy(p, t)))
    # d CE / d logits = p * sum(t) - t; targets are normalised so this is p - t
    g = (p * t.sum(axis=1, keepdims=True) - t) / len(xb)
    grads = _backward_cached(model, caches, g)
    flat = np.concatenate([gr if gr is not None else np.zeros(0) for gr in grads])
    return loss, flat


def backward(model, x, target):
    """Gradient of cross_entropy(softmax(forward(x)), target) w.r.t. the params."""
    return loss_and_grad(model, x, target)[1]


def input_gradient(model, x, classes, wrt="prob", chunk=256):
    """d F_c(x) / d x for each row of ``x`` and its class in ``classes``.

    ``wrt`` selects the differentiated output: softmax probability ("prob"),
    raw logit ("logit") or log-probability ("logprob").  Rows are processed
    ``chunk`` at a time to bound activation memory.
    """
    xb, _ = _as_batch(model, x)
    classes = np.broadcast_to(np.asarray(classes, dtype=int), (len(xb),))
    return np.concatenate([_input_gradient(model, xb[s:s + chunk], classes[s:s + chunk], wrt)
                           for s in range(0, len(xb), chunk)]) if len(xb) else np.zeros_like(xb)


def _input_gradient(model, xb, classes, wrt):
    logits, caches = _forward_cached(model, xb)
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), classes] = 1.0
    if wrt == "logit":
        g = onehot
    else:
        p = softmax_posterior(logits)
        g = onehot - p
        if wrt == "prob":
            g = g * p[np.arange(n), classes][:, None]
        elif wrt != "logprob":
            raise ValueError(f"unknown wrt {wrt!r}")
    for i in range(len(model.layers) - 1, -1, -1):
        g, _ = _layer_backward(model, i, caches[i], g, False)
    return g


def _per_class_backward(model, xb):
    """Forward ``xb`` repeated K times and backprop d log F_k / d logits."""
    k = model.n_classes
    n = len(xb)
    xr = np.repeat(xb, k, axis=0)
    logits, caches = _forward_cached(model, xr)
    p = softmax_posterior(logits)
    eye = np.tile(np.eye(k), (n, 1))
    g = eye - p  # row (n, j): gradient of log softmax_j w.r.t. logits
    return caches, g


def loglik_jacobian(model, x):
    """K x D matrix whose row k is d log softmax(forward(x))_k / d w.

    Built from K backward passes (one per class) through the model.
    """
    xb, single = _as_batch(model, x)
    caches, g = _per_class_backward(model, xb)
    grads = _backward_cached(model, caches, g, per_example=True)
    G = np.concatenate([gr for gr in grads if gr is not None], axis=1)
    G = G.reshape(len(xb), model.n_classes, model.n_params)
    return G[0] if single else G


def jacobian_gram(model, x, chunk=64):
    """Per-input K x K Gram matrix G G^T of the log-likelihood Jacobian.

    Dense layers use the rank-one factorisation of per-example weight
    gradients, so the full K x D Jacobian is never materialised for them.
    """
    xb, single = _as_batch(model, x)
    k = model.n_classes
    out = np.zeros((len(xb), k, k))
    for s in range(0, len(xb), chunk):
        part = xb[s:s + chunk]
        n = len(part)
        caches, g = _per_class_backward(model, part)
        M = np.zeros((n, k, k))
        for i in range(len(model.layers) - 1, -1, -1):
            layer = model.layers[i]
            if isinstance(layer, Dense):
                a = caches[i].reshape(n, k, -1)[:, 0, :]
                d = g.reshape(n, k, -1)
                M += np.matmul(d, d.transpose(0, 2, 1)) * ((a * a).sum(axis=1) + 1.0)[:, None, None]
            elif layer.n_params:
                pe = layer.per_example(caches[i], g).reshape(n, k, -1)
                M += np.matmul(pe, pe.transpose(0, 2, 1))
            if i > 0:
                g, _ = _layer_backward(model, i, caches[i], g, False)
        out[s:s + n] = M
    return out[0] if single else out


# -- architectures --------------------------------------------------------------

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081


def _build_layers(arch_id, input_shape, n_classes):
    name, _, arg = arch_id.partition(":")
    layers = []
    if name in ("lenet", "lenet_wide"):
        h, w, c = input_shape
        c1, c2, hid = (20, 50, 500) if name == "lenet" else (32, 64, 1024)
        layers = [Normalize(MNIST_MEAN, MNIST_STD), Conv2D(c, c1, 5), MaxPool2D(), ReLU(),
                  Conv2D(c1, c2, 5), MaxPool2D(), ReLU(), Flatten()]
        shape = input_shape
        for layer in layers:
            shape = layer.out_shape(shape)
        layers += [Dense(shape[0], hid), ReLU(), Dense(hid, n_classes)]
    elif name in ("mlp", "mlp2", "linear"):
        if name == "linear":
            hidden = []
        elif arg:
            hidden = [int(v) for v in arg.split(",") if v]
        else:
            hidden = [64] if name == "mlp" else [64, 64]
        d = int(np.prod(input_shape))
        if len(input_shape) > 1:
            layers.append(Flatten())
        for hdim in hidden:
            layers += [Dense(d, hdim), ReLU()]
            d = hdim
        layers.append(Dense(d, n_classes))
    else:
        raise ValueError(f"unknown architecture {arch_id!r}")
    return layers


def build_model(arch_id, input_shape, n_classes, seed=0):
    """Fresh model with uniform +-1/sqrt(fan_in) weights drawn from ``seed``.

    Known arch ids: ``lenet``, ``lenet_wide``, ``linear``, ``mlp[:h1,h2,...]``,
    ``mlp2`` (two hidden layers of 64).
    """
    layers = _build_layers(arch_id, tuple(input_shape), n_classes)
    rng = np.random.default_rng(seed)
    params = np.concatenate([layer.init_params(rng) for layer in layers]) if layers else np.zeros(0)
    return Model(arch_id, layers, tuple(input_shape), int(n_classes), params)


def save_model(model, path):
    header = {"format": "madpoison-model", "version": 1, "arch_id": model.arch_id,
              "input_shape": list(model.input_shape), "n_classes": model.n_classes,
              "layers": model.shape_table()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 params=model.params)


def load_model(path):
    with np.load(path) as npz:
        header = json.loads(npz["header"].tobytes().decode())
        params = npz["params"].copy()
    if header.get("format") != "madpoison-model" or header.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 model checkpoint")
    layers = [layer_from_spec(spec) for spec in header["layers"]]
    return Model(header["arch_id"], layers, tuple(header["input_shape"]), header["n_classes"], params)


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.5
    epochs: int = 30
    lr_decay: float = 0.1
    lr_decay_every: int = 50
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.lr_decay_every < 1 or self.batch_size < 1:
            raise ValueError("epochs, lr_decay_every and batch_size must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


class _Adam:
    def __init__(self, n, b1=0.9, b2=0.999, eps=1e-8):
        self.m, self.v, self.t = np.zeros(n), np.zeros(n), 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)


def sgd_train(model, inputs, targets, cfg, callback=None, batch_callback=None):
    """Train a copy of ``model`` on (inputs, targets) and return it.

    ``targets`` holds class indices or posterior rows.  ``callback(epoch,
    model, mean_loss)`` runs after each epoch; ``batch_callback(step, model)``
    after every update, and training stops early when it returns True.
    Adam replaces momentum SGD when ``cfg.optimizer == "adam"``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        raise ValueError("cannot train on an empty dataset")
    n = len(inputs)
    T = _targets_matrix(targets, n, model.n_classes)
    trained = model.copy()
    w = trained.params
    rng = np.random.default_rng(cfg.seed)
    velocity = np.zeros_like(w)
    adam = _Adam(w.size) if cfg.optimizer == "adam" else None
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grad = loss_and_grad(trained, inputs[idx], T[idx])
            total += loss * len(idx)
            if adam is not None:
                w -= adam.step(grad, lr)
            else:
                velocity *= cfg.momentum
                velocity += grad
                w -= lr * velocity
            step += 1
            if batch_callback is not None and batch_callback(step, trained):
                trained.train_history = history
                return trained
        history.append(total / n)
        if callback is not None:
            callback(epoch, trained, history[-1])
    trained.train_history = history
    return trained


def accuracy(model, inputs, labels, batch_size=1000):
    inputs = np.asarray(inputs)
    if len(inputs) == 0:
        raise ValueError("empty evaluation set")
    pred = predict_proba(model, inputs, batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))
