"""Independent reference implementations used by the tests.

Everything here is written the slow, obvious way (loops, explicit sums,
finite differences) so it shares no code paths with the package.
"""

import itertools
import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def gru_step_loops(x, h, W, U, b):
    """Scalar-loop GRU cell: gates ordered update, reset, candidate."""
    H = len(h)
    out = np.zeros(H)
    pre = [sum(x[i] * W[i, j] for i in range(len(x))) + b[0, j] for j in range(3 * H)]
    z = [sigmoid(pre[j] + sum(h[k] * U[k, j] for k in range(H))) for j in range(H)]
    r = [sigmoid(pre[H + j] + sum(h[k] * U[k, H + j] for k in range(H))) for j in range(H)]
    for j in range(H):
        c = math.tanh(pre[2 * H + j] + sum(r[k] * h[k] * U[k, 2 * H + j] for k in range(H)))
        out[j] = (1 - z[j]) * h[j] + z[j] * c
    return out


def global_reward(yhat, y):
    return 1.0 if yhat == y else -5.0


def local_reward(action, xi_before, xi_after, eta=0.15):
    if action == 1:
        return 0.0
    return 0.05 + math.tanh((xi_before - xi_after) / eta)


def dr_reward(features, kept):
    """Diversity plus representativeness with plain Python loops."""
    kept = list(kept)
    n = len(kept)
    if n > 1:
        total = 0.0
        for i in kept:
            for j in kept:
                if i != j:
                    total += 1.0 - float(np.dot(features[i], features[j]))
        div = total / (n * (n - 1))
    else:
        div = 0.0
    dists = []
    for t in range(len(features)):
        best = math.inf
        for k in kept:
            d = math.sqrt(sum((features[t][c] - features[k][c]) ** 2 for c in range(features.shape[1])))
            best = min(best, d)
        dists.append(best)
    return div + math.exp(-sum(dists) / len(dists))


def knapsack_brute(values, weights, capacity, tol=1e-12):
    """Best subset by enumeration; ties go to the lexicographically largest indicator."""
    n = len(values)
    best_val, best = -1.0, None
    # enumerate indicators from all-ones downwards so the first optimum wins ties
    for bits in itertools.product((1, 0), repeat=n):
        w = sum(wt for wt, s in zip(weights, bits) if s)
        if w > capacity:
            continue
        v = sum(val for val, s in zip(values, bits) if s)
        if v > best_val + tol:
            best_val, best = v, [i for i, s in enumerate(bits) if s]
    return best, best_val


def f_score_counting(machine, human):
    hits = sum(1 for m in machine if m in human)
    if hits == 0 or not machine or not human:
        return 0.0
    p = hits / len(machine)
    r = hits / len(human)
    return 2 * p * r / (p + r)
