"""Independent oracles shared by the unit and acceptance tests."""
import itertools

import numpy as np

from madpoison import nn


def random_small_model(rng, max_params=200):
    """Random tiny MLP or CNN with at most ``max_params`` parameters."""
    while True:
        if rng.random() < 0.5:
            d_in = int(rng.integers(2, 7))
            K = int(rng.integers(2, 5))
            h = int(rng.integers(2, 9))
            act = nn.Tanh() if rng.random() < 0.5 else nn.ReLU()
            layers = [nn.Dense(d_in, h), act, nn.Dense(h, K)]
            shape = (d_in,)
        else:
            K = int(rng.integers(2, 4))
            c = int(rng.integers(1, 3))
            layers = [nn.Normalize(0.2, 0.5), nn.Conv2D(1, c, 3), nn.MaxPool2D(), nn.Tanh(), nn.Flatten(),
                      nn.Dense(c * 4, K)]
            shape = (6, 6, 1)
        D = sum(layer.n_params for layer in layers)
        if D <= max_params:
            params = rng.uniform(-1, 1, D)
            return nn.Model("rand", layers, shape, K, params)


def central_diff(f, w, h=1e-4):
    g = np.zeros_like(w)
    for i in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        g[i] = (f(wp) - f(wm)) / (2 * h)
    return g


def rel_err(a, b):
    """Max-abs error normalised by the larger gradient magnitude."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def naive_forward(model, x):
    """Loop-based forward pass written independently of the engine."""
    h = np.asarray(x, dtype=np.float64)
    for layer, (lo, hi) in zip(model.layers, model.offsets):
        w = model.params[lo:hi]
        if isinstance(layer, nn.Dense):
            W = w[:layer.n_in * layer.n_out].reshape(layer.n_in, layer.n_out)
            b = w[layer.n_in * layer.n_out:]
            h = np.array([sum(h[i] * W[i, j] for i in range(layer.n_in)) + b[j] for j in range(layer.n_out)])
        elif isinstance(layer, nn.Conv2D):
            k = layer.k
            W = w[:layer.fan_in * layer.c_out].reshape(k, k, layer.c_in, layer.c_out)
            b = w[layer.fan_in * layer.c_out:]
            H, Wd, _ = h.shape
            out = np.zeros((H - k + 1, Wd - k + 1, layer.c_out))
            for i, j, o in itertools.product(range(H - k + 1), range(Wd - k + 1), range(layer.c_out)):
                out[i, j, o] = np.sum(h[i:i + k, j:j + k, :] * W[:, :, :, o]) + b[o]
            h = out
        elif isinstance(layer, nn.MaxPool2D):
            H, Wd, C = h.shape
            out = np.zeros((H // 2, Wd // 2, C))
            for i, j, c in itertools.product(range(H // 2), range(Wd // 2), range(C)):
                out[i, j, c] = h[2 * i:2 * i + 2, 2 * j:2 * j + 2, c].max()
            h = out
        elif isinstance(layer, nn.ReLU):
            h = np.maximum(h, 0)
        elif isinstance(layer, nn.Tanh):
            h = np.tanh(h)
        elif isinstance(layer, nn.Flatten):
            h = h.ravel()
        elif isinstance(layer, nn.Normalize):
            h = (h - layer.mean) / layer.std
    return h


def simplex_grid(K, steps=20):
    """All points of the simplex whose coordinates are multiples of 1/steps."""
    pts = []
    for cut in itertools.combinations(range(steps + K - 1), K - 1):
        b = np.diff(np.concatenate([[-1], cut, [steps + K - 1]])) - 1
        pts.append(b / steps)
    return np.array(pts)


def brute_objective(v, y, G):
    """MAD objective from explicit unit vectors, or None when undefined."""
    a, u = G.T @ v, G.T @ y
    if np.linalg.norm(a) == 0 or np.linalg.norm(u) == 0:
        return None
    return float(np.sum((a / np.linalg.norm(a) - u / np.linalg.norm(u)) ** 2))


def enumeration_argmax(y, G, tol=1e-12):
    """Exhaustive best one-hot vertex; ties within ``tol`` go to the lowest index."""
    scores = np.array([brute_objective(v, y, G) or 0.0 for v in np.eye(len(y))])
    if scores.max() <= tol:
        return None, scores
    return int(np.nonzero(scores >= scores.max() - tol)[0][0]), scores
