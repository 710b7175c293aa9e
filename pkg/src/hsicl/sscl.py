"""Self-supervised contrastive pretraining of a per-pixel spectral encoder.

The encoder applies the same two-layer fully connected map (``bands -> 128 ->
hidden``) at every spatial position of a ``p x p`` patch, so spatial extents
are kept and only the spectral axis shrinks. A projection head maps the
flattened representation to a 64-d unit vector on which the NT-Xent loss is
computed for pairs of flipped views.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .autodiff import Tape, Tensor, affine, as_tensor, dropout, flatten, l2_normalize, primitive, relu, reshape
from .dataset import dedup_index
from .exceptions import CheckpointError, DegenerateInputError, NonFiniteError, ShapeError
from .optim import AdamState, LrSchedule, adam_step, iter_batches, lr_at
from .rng import Rng
from .validation import check_patches

logger = logging.getLogger(__name__)


class ViewPair(NamedTuple):
    view_a: np.ndarray
    view_b: np.ndarray


def _flip(patch: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        patch = patch[:, ::-1]
    if vertical:
        patch = patch[::-1]
    return np.ascontiguousarray(patch)


def augment(patch: np.ndarray, rng: Rng) -> ViewPair:
    """Two views, each with an independent fair-coin horizontal and vertical flip."""
    coins = rng.random(4) < 0.5
    return ViewPair(_flip(patch, coins[0], coins[1]), _flip(patch, coins[2], coins[3]))


def augment_batch(batch: np.ndarray, rng: Rng) -> np.ndarray:
    """Views for a ``(n, p, p, b)`` batch, interleaved as ``a0, b0, a1, b1, ...``.

    Draws coins in the same order as calling :func:`augment` per patch.
    """
    views = np.repeat(batch, 2, axis=0)
    coins = rng.random((len(views), 2)) < 0.5
    views = np.where(coins[:, 0, None, None, None], views[:, :, ::-1], views)
    views = np.where(coins[:, 1, None, None, None], views[:, ::-1], views)
    return np.ascontiguousarray(views)


def init_encoder(rng: Rng, bands: int, hidden_size: int, width: int = 128, dtype=np.float32) -> nn.Params:
    params = nn.init_linear(rng, bands, width, "encoder.layer1", dtype)
    params.update(nn.init_linear(rng, width, hidden_size, "encoder.layer2", dtype))
    return params


def init_projection(rng: Rng, in_features: int, hidden: int = 128, out: int = 64, dtype=np.float32) -> nn.Params:
    params = nn.init_linear(rng, in_features, hidden, "projection.layer1", dtype)
    params.update(nn.init_linear(rng, hidden, out, "projection.layer2", dtype))
    return params


def encode(params: nn.Params, x, *, dropout_rate: float = 0.0, rng: Rng | None = None, training: bool = False) -> Tensor:
    """Map ``(n, p, p, bands)`` patches to ``(n, p, p, hidden)`` representations."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"encode expects (n, p, p, bands), got {x.shape}")
    n, p, q, b = x.shape
    W1, b1 = nn.layer(params, "encoder.layer1")
    W2, b2 = nn.layer(params, "encoder.layer2")
    if W1.shape[1] != b:
        raise ShapeError(f"encoder expects {W1.shape[1]} bands, got {b}")
    a = relu(affine(reshape(x, (n * p * q, b)), W1, b1))
    a = dropout(a, dropout_rate, rng, training)
    hid = relu(affine(a, W2, b2))
    return reshape(hid, (n, p, q, W2.shape[0]))


def project(
    params: nn.Params,
    h,
    *,
    dropout_rate: float = 0.0,
    rng: Rng | None = None,
    training: bool = False,
    normalize: bool = True,
) -> Tensor:
    """Projection head; returns unit-norm rows unless ``normalize`` is False."""
    h = as_tensor(h)
    W1, b1 = nn.layer(params, "projection.layer1")
    W2, b2 = nn.layer(params, "projection.layer2")
    flat = flatten(h)
    if flat.shape[1] != W1.shape[1]:
        raise ShapeError(f"projection expects {W1.shape[1]} features, got {flat.shape[1]}")
    a = dropout(relu(affine(flat, W1, b1)), dropout_rate, rng, training)
    z = affine(a, W2, b2)
    return l2_normalize(z) if normalize else z


def nt_xent(z, temperature: float) -> Tensor:
    """Normalised temperature-scaled cross entropy over ``2N`` projections.

    Rows ``2k`` and ``2k + 1`` (0-based) are positive pairs; every other row
    in the batch is a negative. Similarities are cosines, so rows need not be
    normalised beforehand. Returns a float64 scalar.
    """
    z = as_tensor(z)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z.data.ndim != 2:
        raise ShapeError(f"nt_xent expects a (2N, d) matrix, got {z.shape}")
    m = z.shape[0]
    if m % 2 or m == 0:
        raise ValueError(f"nt_xent needs an even, non-zero number of projections, got {m}")

    raw = z.data.astype(np.float64)
    norm = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("zero-norm projection in nt_xent")
    u = raw / norm
    logits = u @ u.T / temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.arange(m) ^ 1
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    denom = e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    loss = np.mean(lse - logits[np.arange(m), pos])

    def grad(g):
        G = e / denom
        G[np.arange(m), pos] -= 1.0
        G *= float(g) / m
        dU = (G + G.T) @ u / temperature
        dz = (dU - u * (dU * u).sum(axis=1, keepdims=True)) / norm
        return (dz.astype(z.dtype),)

    return primitive("nt_xent", (z,), np.asarray(loss, dtype=np.float64), grad)


class ContrastiveEncoder(TransformerMixin, BaseEstimator):
    """Contrastive pretraining of the spectral encoder and projection head.

    ``fit`` takes normalised, unlabelled patches; ``transform`` returns the
    flattened hidden representation ``(n, p * p * hidden_size)`` in eval mode.
    When ``X_val`` is passed to ``fit`` the epoch with the lowest validation
    loss is kept.
    """

    def __init__(
        self,
        hidden_size: int = 32,
        temperature: float = 0.1,
        epochs: int = 85,
        batch_size: int = 300,
        lr: float = 1e-3,
        gamma: float = 0.9,
        lr_step: int = 10,
        l2_weight: float = 1e-4,
        dropout: float = 0.3,
        encoder_width: int = 128,
        projection_hidden: int = 128,
        projection_dim: int = 64,
        dedup: bool = True,
        random_state: int = 0,
        dtype: str = "float32",
    ):
        self.hidden_size = hidden_size
        self.temperature = temperature
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.lr_step = lr_step
        self.l2_weight = l2_weight
        self.dropout = dropout
        self.encoder_width = encoder_width
        self.projection_hidden = projection_hidden
        self.projection_dim = projection_dim
        self.dedup = dedup
        self.random_state = random_state
        self.dtype = dtype

    def _init_params(self, bands: int, patch_size: int, rng: Rng) -> nn.Params:
        params = init_encoder(rng.spawn("encoder-init"), bands, self.hidden_size, self.encoder_width, self.dtype)
        params.update(
            init_projection(
                rng.spawn("projection-init"),
                patch_size * patch_size * self.hidden_size,
                self.projection_hidden,
                self.projection_dim,
                self.dtype,
            )
        )
        return params

    def _batch_loss(self, params, views, rng, training):
        h = encode(params, views, dropout_rate=self.dropout, rng=rng, training=training)
        z = project(params, h, dropout_rate=self.dropout, rng=rng, training=training, normalize=False)
        return nt_xent(z, self.temperature)

    def _epoch_loss(self, params, X, rng) -> float:
        total, count = 0.0, 0
        for idx in iter_batches(len(X), self.batch_size, drop_last=True):
            batch = X[idx]
            if self.dedup:
                batch = batch[dedup_index(batch)]
            if len(batch) < 2:
                continue
            loss = self._batch_loss(params, augment_batch(batch, rng), None, False)
            total += loss.item() * len(batch)
            count += len(batch)
        return total / count if count else float("nan")

    def fit(self, X, y=None, X_val=None):
        X = check_patches(X, dtype=self.dtype)
        rng = Rng(self.random_state)
        params = self._init_params(X.shape[3], X.shape[1], rng)
        names = sorted(params)
        state = AdamState.for_params(params)
        schedule = LrSchedule(self.lr, self.lr_step, self.gamma)
        shuffle_rng = rng.spawn("shuffle")
        aug_rng = rng.spawn("augment")
        drop_rng = rng.spawn("dropout")
        if X_val is not None:
            X_val = check_patches(X_val, dtype=self.dtype, bands=X.shape[3], patch_size=X.shape[1])

        self.history_ = []
        best = (np.inf, params, -1)
        for epoch in range(self.epochs):
            lr = lr_at(schedule, epoch)
            total, count = 0.0, 0
            for idx in iter_batches(len(X), self.batch_size, shuffle_rng, drop_last=True):
                batch = X[idx]
                if self.dedup:
                    batch = batch[dedup_index(batch)]
                if len(batch) < 2:
                    continue
                views = augment_batch(batch, aug_rng)
                with Tape() as tape:
                    loss = self._batch_loss(params, views, drop_rng, True)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"contrastive loss became {value} at epoch {epoch}")
                grads = tape.gradients(loss, [params[k] for k in names])
                params = adam_step(params, dict(zip(names, grads)), state, lr, self.l2_weight)
                total += value * len(batch)
                count += len(batch)
            record = {"epoch": epoch, "lr": lr, "train_loss": total / count if count else float("nan")}
            if X_val is not None and len(X_val) >= 2:
                record["val_loss"] = self._epoch_loss(params, X_val, rng.spawn("val-augment"))
                if record["val_loss"] < best[0]:
                    best = (record["val_loss"], params, epoch)
            self.history_.append(record)
            logger.debug("pretrain epoch %d lr=%.3g %s", epoch, lr, record)

        if best[2] >= 0:
            params, self.best_epoch_ = best[1], best[2]
        else:
            self.best_epoch_ = self.epochs - 1
        self.params_ = params
        self.n_bands_in_ = X.shape[3]
        self.patch_size_ = X.shape[1]
        return self

    @property
    def encoder_params_(self) -> nn.Params:
        check_is_fitted(self, "params_")
        return nn.subset(self.params_, "encoder")

    def transform(self, X, batch_size: int = 1024) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_patches(X, dtype=self.dtype, bands=self.n_bands_in_)
        return encode_array(self.encoder_params_, X, batch_size)

    def project(self, X, batch_size: int = 1024) -> np.ndarray:
        """Unit-norm projections of ``X`` in eval mode."""
        check_is_fitted(self, "params_")
        X = check_patches(X, dtype=self.dtype, bands=self.n_bands_in_)
        out = []
        for idx in iter_batches(len(X), batch_size):
            out.append(project(self.params_, encode(self.params_, X[idx])).data)
        return np.concatenate(out)

    def manifest(self) -> dict:
        check_is_fitted(self, "params_")
        return {
            "kind": "contrastive-encoder",
            "hidden_size": self.hidden_size,
            "temperature": self.temperature,
            "seed": self.random_state,
            "epoch": int(self.best_epoch_),
            "bands": int(self.n_bands_in_),
            "patch_size": int(self.patch_size_),
            "encoder_width": self.encoder_width,
            "projection_hidden": self.projection_hidden,
            "projection_dim": self.projection_dim,
            "projection_final_activation": "none",
            "estimator_params": self.get_params(),
        }

    def save(self, path, **extra):
        return nn.save_checkpoint(path, self.params_, {**self.manifest(), **extra})

    @classmethod
    def load(cls, path) -> "ContrastiveEncoder":
        params, manifest = nn.load_checkpoint(path)
        if manifest.get("kind") != "contrastive-encoder":
            raise CheckpointError(f"{path} is not a contrastive encoder checkpoint")
        est = cls(**manifest["estimator_params"])
        est.params_ = params
        est.best_epoch_ = manifest["epoch"]
        est.n_bands_in_ = manifest["bands"]
        est.patch_size_ = manifest["patch_size"]
        est.manifest_ = manifest
        return est


def encode_array(encoder_params: nn.Params, X: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode flattened representations, computed in batches."""
    out = [flatten(encode(encoder_params, X[idx])).data for idx in iter_batches(len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 0), dtype=X.dtype)
