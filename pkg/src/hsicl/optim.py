"""Adam with coupled L2 regularisation, step-decay schedule, mini-batching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .exceptions import NonFiniteError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
        v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
        return cls(m, v, **kw)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    l2_weight: float = 0.0,
) -> dict[str, Tensor]:
    """One bias-corrected Adam update of the entries named in ``grads``.

    The L2 term is folded into the gradient (``g + l2_weight * theta``) before
    the moment updates. Parameters absent from ``grads`` are returned as-is.
    ``state`` is advanced in place.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient for {', '.join(sorted(bad))} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = dict(params)
    for name, g in grads.items():
        theta = params[name].data.astype(np.float64)
        g = np.asarray(g, dtype=np.float64)
        if l2_weight:
            g = g + l2_weight * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(theta - step, dtype=params[name].dtype)
    return out


@dataclass(frozen=True)
class LrSchedule:
    base: float
    step: int = 10
    gamma: float = 0.9


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return schedule.base * schedule.gamma ** (epoch // max(1, int(schedule.step)))


def iter_batches(n: int, batch_size: int, rng=None, drop_last: bool = False):
    """Yield index arrays covering ``range(n)``, shuffled when ``rng`` is given.

    With ``drop_last`` the trailing partial batch is skipped, unless it is the
    only batch.
    """
    order = rng.permutation(n) if rng is not None else np.arange(n)
    n_full = n // batch_size
    stop = n_full * batch_size if drop_last and n_full else n
    for start in range(0, stop, batch_size):
        yield order[start: min(start + batch_size, stop)]


def n_batches(n: int, batch_size: int, drop_last: bool = False) -> int:
    if drop_last and n >= batch_size:
        return n // batch_size
    return math.ceil(n / batch_size)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[dict]
    best_epoch: int
    state: AdamState


def train_epochs(
    params: dict[str, Tensor],
    trainable,
    loss_fn,
    n: int,
    *,
    epochs: int,
    batch_size: int,
    schedule: LrSchedule,
    l2_weight: float = 0.0,
    rng=None,
    select=None,
    drop_last: bool = False,
    state: AdamState | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Mini-batch Adam over ``range(n)``.

    ``loss_fn(params, idx)`` builds a scalar loss for the batch ``idx`` and is
    run under a fresh tape; only the names in ``trainable`` are updated.
    ``select(params)`` scores the model after every epoch (higher is better)
    and the best-scoring parameters are returned; ties keep the earlier epoch.
    Without ``select`` the final parameters are returned.
    """
    names = sorted(trainable)
    state = state if state is not None else AdamState.for_params({k: params[k] for k in names})
    history = []
    best_score, best_params, best_epoch = -np.inf, params, start_epoch + epochs - 1
    for epoch in range(start_epoch, start_epoch + epochs):
        lr = lr_at(schedule, epoch)
        total, count = 0.0, 0
        for idx in iter_batches(n, batch_size, rng, drop_last=drop_last):
            with Tape() as tape:
                loss = loss_fn(params, idx)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"loss became {value} at epoch {epoch}")
            if names:
                grads = tape.gradients(loss, [params[k] for k in names])
                params = adam_step(params, dict(zip(names, grads)), state, lr, l2_weight)
            total += value * len(idx)
            count += len(idx)
        record = {"epoch": epoch, "lr": lr, "train_loss": total / max(count, 1)}
        if select is not None:
            score = float(select(params))
            record["val_score"] = score
            if score > best_score:
                best_score, best_params, best_epoch = score, params, epoch
        history.append(record)
    if select is None:
        best_params = params
    return TrainResult(best_params, history, best_epoch, state)
