"""Independent reference implementations used by the tests.

Everything here is written as plain loops over Python floats so that it shares
no code path with the vectorised package implementation.
"""

from __future__ import annotations

import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def cosine(a, b) -> float:
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def nt_xent_loop(z, T: float) -> float:
    """Literal pairwise form: rows (2k, 2k+1) are positives, 0-based."""
    z = np.asarray(z, dtype=np.float64)
    m = len(z)

    def l(i, j):
        num = math.exp(cosine(z[i], z[j]) / T)
        den = sum(math.exp(cosine(z[i], z[k]) / T) for k in range(m) if k != i)
        return -math.log(num / den)

    n = m // 2
    return sum(l(2 * k, 2 * k + 1) + l(2 * k + 1, 2 * k) for k in range(n)) / (2 * n)


def bce_loop(logits, y, w=None, pos=None) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    total = 0.0
    for i in range(n):
        for j in range(c):
            s = 1.0 / (1.0 + math.exp(-logits[i, j]))
            wij = 1.0 if w is None else float(np.broadcast_to(w, (n, c))[i, j])
            pj = 1.0 if pos is None else float(np.broadcast_to(pos, (c,))[j])
            total += -wij * (pj * y[i][j] * math.log(s) + (1 - y[i][j]) * math.log(1 - s))
    return total / (n * c)


def ce_loop(logits, target) -> float:
    """Class ids in ``target`` are 1-based."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    total = 0.0
    for i in range(n):
        den = sum(math.exp(v) for v in logits[i])
        for j in range(c):
            yij = 1.0 if target[i] == j + 1 else 0.0
            total += yij * math.log(math.exp(logits[i, j]) / den)
    return -total / n


def mse_loop(x, x_hat) -> float:
    a, b = np.ravel(x), np.ravel(x_hat)
    return sum((float(p) - float(q)) ** 2 for p, q in zip(a, b)) / len(a)


def encode_loop(params, x) -> np.ndarray:
    """Per-pixel two-layer ReLU network, one pixel at a time."""
    W1 = params["encoder.layer1.weight"].data.astype(np.float64)
    b1 = params["encoder.layer1.bias"].data.astype(np.float64)
    W2 = params["encoder.layer2.weight"].data.astype(np.float64)
    b2 = params["encoder.layer2.bias"].data.astype(np.float64)
    n, p, q, _ = x.shape
    out = np.zeros((n, p, q, W2.shape[0]))
    for i in range(n):
        for r in range(p):
            for c in range(q):
                v = x[i, r, c].astype(np.float64)
                a = [max(0.0, sum(W1[k, j] * v[j] for j in range(len(v))) + b1[k]) for k in range(W1.shape[0])]
                for k in range(W2.shape[0]):
                    out[i, r, c, k] = max(0.0, sum(W2[k, j] * a[j] for j in range(len(a))) + b2[k])
    return out


def adam_reference(grad, theta: float, lr: float, steps: int, b1=0.9, b2=0.999, eps=1e-8) -> list[float]:
    """Scalar Adam recurrence; returns the trajectory including the start."""
    m = v = 0.0
    traj = [theta]
    for t in range(1, steps + 1):
        g = grad(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(theta)
    return traj


def jaccard_sets(pred, truth) -> float:
    total = 0.0
    for p, t in zip(pred, truth):
        p, t = set(p), set(t)
        if not p and not t:
            total += 1.0
        else:
            total += len(p & t) / len(p | t)
    return 100.0 * total / len(truth)


def tile_loop(gt: np.ndarray, p: int, task: str):
    """Brute-force patch sampling: returns (origins, multi labels, single labels, mixed)."""
    out = []
    for r in range(0, gt.shape[0] - p + 1, p):
        for c in range(0, gt.shape[1] - p + 1, p):
            win = gt[r:r + p, c:c + p]
            values = set(int(v) for v in win.ravel())
            classes = frozenset(v for v in values if v > 0)
            centre = int(win[p // 2, p // 2])
            keep = bool(classes) if task == "multi" else centre > 0
            if keep:
                out.append(((r, c), classes, centre, len(values) >= 2))
    return out
