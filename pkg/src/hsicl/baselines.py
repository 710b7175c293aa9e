"""Fully supervised autoencoder + classifier training schemes.

``iterative``
    alternate one reconstruction epoch (encoder + decoder) with one
    classification epoch (classifier only, encoder frozen).
``joint``
    one model minimising ``(1 - lam) * reconstruction + lam * task`` end to end.
``cascade``
    train the autoencoder first, then the classifier on the frozen encoder.

All three share the encoder and classifier architecture of the contrastive
pipeline; the decoder mirrors the encoder per pixel (``hidden -> 128 -> bands``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .autodiff import Tensor, add, affine, as_tensor, primitive, relu, reshape, scale
from .classifier import (
    _sigmoid,
    classify,
    init_classifier,
    logits_of,
    predict_single,
    score_logits,
    task_loss,
)
from .exceptions import ShapeError
from .optim import AdamState, LrSchedule, TrainResult, train_epochs
from .rng import Rng
from .sscl import encode, encode_array, init_encoder
from .validation import check_class_ids, check_multilabel_targets, check_patches

SCHEMES = ("iterative", "joint", "cascade")


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "joint"
    joint_lambda: float = 0.5

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not 0.0 < self.joint_lambda <= 1.0:
            raise ValueError(f"joint_lambda must lie in (0, 1], got {self.joint_lambda}")


def init_decoder(rng: Rng, hidden_size: int, bands: int, width: int = 128, dtype=np.float32) -> nn.Params:
    params = nn.init_linear(rng, hidden_size, width, "decoder.layer1", dtype)
    params.update(nn.init_linear(rng, width, bands, "decoder.layer2", dtype))
    return params


def decode(params: nn.Params, h) -> Tensor:
    """Map ``(n, p, p, hidden)`` back to ``(n, p, p, bands)``."""
    h = as_tensor(h)
    n, p, q, k = h.shape
    W1, b1 = nn.layer(params, "decoder.layer1")
    W2, b2 = nn.layer(params, "decoder.layer2")
    a = relu(affine(reshape(h, (n * p * q, k)), W1, b1))
    return reshape(affine(a, W2, b2), (n, p, q, W2.shape[0]))


def reconstruction_loss(x, x_hat) -> Tensor:
    """Mean squared error over every element, as a float64 scalar."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} differs from input {x.shape}")
    diff = x_hat.data.astype(np.float64) - x.data.astype(np.float64)
    n = diff.size

    def grad(g):
        d = 2.0 * float(g) / n * diff
        return (-d).astype(x.dtype), d.astype(x_hat.dtype)

    return primitive("mse", (x, x_hat), np.asarray(np.mean(diff * diff), dtype=np.float64), grad)


def train_scheme(
    config: SchemeConfig,
    params: nn.Params,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    *,
    task: str,
    epochs: int,
    batch_size: int,
    lr: float,
    gamma: float = 0.9,
    lr_step: int = 10,
    l2_weight: float = 0.0,
    dropout_encoder: float = 0.0,
    dropout_classifier: float = 0.0,
    ae_epochs: int | None = None,
    threshold: float = 0.5,
    metric: str = "jaccard",
    rng: Rng | None = None,
    on_phase=None,
) -> TrainResult:
    """Train ``params`` (encoder, decoder and classifier tensors) under a scheme.

    ``ae_epochs`` sets the length of the cascade reconstruction phase
    (defaults to ``epochs``). ``on_phase(name, params)`` is called when a
    phase ends, which lets callers inspect intermediate states.
    """
    rng = rng or Rng(0)
    schedule = LrSchedule(lr, lr_step, gamma)
    drop_rng = rng.spawn("dropout")
    shuffle_rng = rng.spawn("shuffle")
    enc_dec = [k for k in params if k.startswith(("encoder.", "decoder."))]
    head = [k for k in params if k.startswith("classifier.")]
    n = len(X_train)

    def recon(p, idx):
        x = X_train[idx]
        h = encode(p, x, dropout_rate=dropout_encoder, rng=drop_rng, training=True)
        return reconstruction_loss(x, decode(p, h))

    def classify_frozen(p, idx):
        h = encode(p, X_train[idx])
        logits = classify(p, h, dropout_rate=dropout_classifier, rng=drop_rng, training=True)
        return task_loss(task, logits, y_train[idx])

    def joint(p, idx):
        x = X_train[idx]
        h = encode(p, x, dropout_rate=dropout_encoder, rng=drop_rng, training=True)
        cls = task_loss(task, classify(p, h, dropout_rate=dropout_classifier, rng=drop_rng, training=True), y_train[idx])
        lam = config.joint_lambda
        if lam == 1.0:
            return cls
        return add(scale(reconstruction_loss(x, decode(p, h)), 1.0 - lam), scale(cls, lam))

    def val_score(p):
        return score_logits(task, logits_of(p, X_val), y_val, threshold, metric)

    select = val_score if X_val is not None and len(X_val) else None

    common = dict(batch_size=batch_size, schedule=schedule, l2_weight=l2_weight, rng=shuffle_rng)

    if config.scheme == "joint":
        trainable = list(params) if config.joint_lambda < 1.0 else [k for k in params if not k.startswith("decoder.")]
        result = train_epochs(params, trainable, joint, n, epochs=epochs, select=select, **common)
        if on_phase:
            on_phase("joint", result.params)
        return result

    if config.scheme == "cascade":
        ae = train_epochs(params, enc_dec, recon, n, epochs=ae_epochs or epochs, **common)
        if on_phase:
            on_phase("autoencoder", ae.params)
        result = train_epochs(ae.params, head, classify_frozen, n, epochs=epochs, select=select, **common)
        result.history = ae.history + result.history
        if on_phase:
            on_phase("classifier", result.params)
        return result

    ae_state = AdamState.for_params({k: params[k] for k in enc_dec})
    cls_state = AdamState.for_params({k: params[k] for k in head})
    history = []
    best = (-np.inf, params, epochs - 1)
    for epoch in range(epochs):
        ae = train_epochs(params, enc_dec, recon, n, epochs=1, state=ae_state, start_epoch=epoch, **common)
        cls = train_epochs(ae.params, head, classify_frozen, n, epochs=1, state=cls_state, start_epoch=epoch,
                           select=select, **common)
        params = cls.params
        record = {"epoch": epoch, "lr": ae.history[0]["lr"], "recon_loss": ae.history[0]["train_loss"],
                  "train_loss": cls.history[0]["train_loss"]}
        if select is not None:
            record["val_score"] = cls.history[0]["val_score"]
            if record["val_score"] > best[0]:
                best = (record["val_score"], params, epoch)
        history.append(record)
    if select is None:
        best = (None, params, epochs - 1)
    if on_phase:
        on_phase("iterative", best[1])
    return TrainResult(best[1], history, best[2], cls_state)


class AutoencoderClassifier(ClassifierMixin, BaseEstimator):
    """Supervised encoder/decoder/classifier trained under one of the schemes."""

    def __init__(
        self,
        scheme: str = "joint",
        joint_lambda: float = 0.5,
        task: str = "multi",
        n_classes: int | None = None,
        hidden_size: int = 32,
        classifier_hidden: int = 64,
        epochs: int = 256,
        ae_epochs: int | None = None,
        batch_size: int = 260,
        lr: float = 1e-3,
        gamma: float = 0.9,
        lr_step: int = 10,
        l2_weight: float = 1e-4,
        dropout_encoder: float = 0.3,
        dropout_classifier: float = 0.6,
        threshold: float = 0.5,
        metric: str = "jaccard",
        random_state: int = 0,
        dtype: str = "float32",
    ):
        self.scheme = scheme
        self.joint_lambda = joint_lambda
        self.task = task
        self.n_classes = n_classes
        self.hidden_size = hidden_size
        self.classifier_hidden = classifier_hidden
        self.epochs = epochs
        self.ae_epochs = ae_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.lr_step = lr_step
        self.l2_weight = l2_weight
        self.dropout_encoder = dropout_encoder
        self.dropout_classifier = dropout_classifier
        self.threshold = threshold
        self.metric = metric
        self.random_state = random_state
        self.dtype = dtype

    def _check_y(self, y, n):
        if self.task == "multi":
            return check_multilabel_targets(y, n)
        return check_class_ids(y, n)

    def fit(self, X, y, X_val=None, y_val=None):
        config = SchemeConfig(self.scheme, self.joint_lambda)
        X = check_patches(X, dtype=self.dtype)
        y = self._check_y(y, len(X))
        n_classes = y.shape[1] if self.task == "multi" else (self.n_classes or int(y.max()))
        p, bands = X.shape[1], X.shape[3]
        rng = Rng(self.random_state)
        params = init_encoder(rng.spawn("encoder-init"), bands, self.hidden_size, dtype=self.dtype)
        params.update(init_decoder(rng.spawn("decoder-init"), self.hidden_size, bands, dtype=self.dtype))
        params.update(init_classifier(rng.spawn("classifier-init"), p * p * self.hidden_size, n_classes,
                                      self.classifier_hidden, self.dtype))
        if X_val is not None:
            X_val = check_patches(X_val, dtype=self.dtype, bands=bands, patch_size=p)
            y_val = self._check_y(y_val, len(X_val))
        self.phase_digests_ = {}

        def on_phase(name, p_):
            self.phase_digests_[name] = nn.digest(nn.subset(p_, "encoder"))

        result = train_scheme(
            config, params, X, y, X_val, y_val,
            task=self.task,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            gamma=self.gamma,
            lr_step=self.lr_step,
            l2_weight=self.l2_weight,
            dropout_encoder=self.dropout_encoder,
            dropout_classifier=self.dropout_classifier,
            ae_epochs=self.ae_epochs,
            threshold=self.threshold,
            metric=self.metric,
            rng=rng.spawn("train"),
            on_phase=on_phase,
        )
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_classes_ = n_classes
        self.n_bands_in_ = bands
        self.patch_size_ = p
        self.classes_ = np.arange(1, n_classes + 1)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_patches(X, dtype=self.dtype, bands=self.n_bands_in_, patch_size=self.patch_size_)
        return logits_of(self.params_, X)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        if self.task == "multi":
            return (_sigmoid(logits) >= self.threshold).astype(np.int64)
        return predict_single(logits)

    def score(self, X, y, sample_weight=None) -> float:
        y = self._check_y(y, len(X))
        return score_logits(self.task, self.decision_function(X), y, self.threshold, self.metric)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_patches(X, dtype=self.dtype, bands=self.n_bands_in_, patch_size=self.patch_size_)
        return encode_array(nn.subset(self.params_, "encoder"), X)

    def reconstruct(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_patches(X, dtype=self.dtype, bands=self.n_bands_in_, patch_size=self.patch_size_)
        return decode(self.params_, encode(self.params_, X)).data

    def manifest(self) -> dict:
        check_is_fitted(self, "params_")
        return {
            "kind": "baseline",
            "scheme": self.scheme,
            "joint_lambda": self.joint_lambda,
            "task": self.task,
            "hidden_size": self.hidden_size,
            "n_classes": int(self.n_classes_),
            "bands": int(self.n_bands_in_),
            "patch_size": int(self.patch_size_),
            "seed": self.random_state,
            "epoch": int(self.best_epoch_),
            "estimator_params": self.get_params(),
        }

    def save(self, path, **extra):
        return nn.save_checkpoint(path, self.params_, {**self.manifest(), **extra})
