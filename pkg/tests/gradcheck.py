"""Random small networks for checking autodiff against finite differences."""

from __future__ import annotations

import numpy as np

from hsicl import autodiff as ad
from hsicl.baselines import reconstruction_loss
from hsicl.classifier import bce_logits_loss, cross_entropy_loss
from hsicl.rng import Rng
from hsicl.sscl import nt_xent

from oracles import central_difference

LOSSES = ("bce", "ce", "nt_xent", "mse")


def random_network(seed: int):
    """Parameters, data and a loss closure touching every primitive.

    The loss head cycles through BCE, cross entropy, NT-Xent and MSE. All
    arrays are float64 so the finite-difference reference is accurate.
    """
    g = np.random.default_rng(seed)
    n = 2 * int(g.integers(1, 4))
    d_in, hid, out = (int(v) for v in g.integers(2, 7, size=3))
    kind = LOSSES[seed % len(LOSSES)]
    params = {
        "W1": g.normal(0, 0.8, (hid, d_in)),
        "b1": g.normal(0, 0.3, hid),
        "M": g.normal(0, 0.8, (hid, hid)),
        "s": g.normal(0, 0.5, hid),
        "W2": g.normal(0, 0.8, (out, hid)),
        "b2": g.normal(0, 0.3, out),
    }
    x = g.normal(0, 1, (n, d_in))
    y_multi = (g.random((n, out)) < 0.5).astype(np.float64)
    y_single = g.integers(1, out + 1, n)
    drop_seed = int(g.integers(0, 2**31))

    def forward(p):
        P = {k: ad.Tensor(v) for k, v in p.items()}
        h = ad.relu(ad.affine(ad.Tensor(x), P["W1"], P["b1"]))
        h = ad.dropout(h, 0.25, Rng(drop_seed), True)
        h2 = ad.matmul(h, P["M"])
        h2 = ad.add(h2, ad.mul(h2, P["s"]))
        h2 = ad.sub(h2, ad.scale(h2, 0.5))
        h3 = ad.l2_normalize(ad.add(ad.sigmoid(h2), 0.1))
        h3 = ad.flatten(ad.reshape(h3, (n, 1, hid)))
        logits = ad.affine(h3, P["W2"], P["b2"])
        aux = ad.scale(ad.mean(ad.log_softmax(logits)), 0.1)
        if kind == "bce":
            main = bce_logits_loss(logits, y_multi)
        elif kind == "ce":
            main = cross_entropy_loss(logits, y_single)
        elif kind == "nt_xent":
            main = nt_xent(logits, 0.5)
        else:
            main = reconstruction_loss(ad.Tensor(np.tanh(x[:, :1]).repeat(out, 1)), logits)
        return ad.add(ad.add(main, aux), ad.scale(ad.sum(h3), 0.01)), P

    return params, forward, kind


def relu_masks(forward, p):
    with ad.Tape() as tape:
        forward(p)
    return [node.output.data > 0 for node in tape.nodes if node.op == "relu"]


def check_network(seed: int, h: float = 1e-6) -> float:
    """Largest per-parameter relative error between autodiff and central differences.

    Coordinates whose perturbation flips a ReLU are skipped: the function is
    not differentiable there and the finite difference is meaningless.
    """
    params, forward, _ = random_network(seed)
    with ad.Tape() as tape:
        loss, P = forward(params)
    names = sorted(params)
    grads = dict(zip(names, tape.gradients(loss, [P[k] for k in names])))
    base = relu_masks(forward, params)
    worst = 0.0
    for name in names:
        arr = params[name]
        analytic = grads[name]
        keep = np.ones(arr.shape, dtype=bool)
        for idx in np.ndindex(arr.shape):
            for sign in (1, -1):
                q = {k: v.copy() for k, v in params.items()}
                q[name][idx] += sign * h
                if any((a != b).any() for a, b in zip(base, relu_masks(forward, q))):
                    keep[idx] = False

        def f(v, name=name):
            return forward({**params, name: v})[0].item()

        fd = central_difference(f, arr, h)
        diff = np.abs(analytic - fd)[keep]
        scale = max(np.abs(fd[keep]).max(initial=0.0), 1e-6)
        worst = max(worst, float(diff.max(initial=0.0) / scale))
    return worst


def n_params(seed: int) -> int:
    params, _, _ = random_network(seed)
    return sum(v.size for v in params.values())
