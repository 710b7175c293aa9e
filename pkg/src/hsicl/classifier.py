"""Supervised heads on top of the spectral encoder.

Multi-label patches are trained with weighted binary cross entropy on logits,
single-label patches with softmax cross entropy. Class ids are 1-based
throughout (0 is the background value of the ground truth and never a
target); column ``c - 1`` of a logit or indicator matrix stands for class
``c``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .autodiff import Tensor, affine, as_tensor, dropout, flatten, primitive, relu
from .exceptions import CheckpointError, ShapeError
from .metrics import hamming_accuracy, multilabel_accuracy, singlelabel_accuracy
from .optim import LrSchedule, TrainResult, iter_batches, train_epochs
from .rng import Rng
from .sscl import ContrastiveEncoder, encode, encode_array, init_encoder
from .validation import check_class_ids, check_multilabel_targets, check_patches


class FineTuneMode(str, enum.Enum):
    CL_TUNE = "cl-tune"
    CL_FREEZE = "cl-freeze"


@dataclass(frozen=True)
class LossWeights:
    """Per-(sample, class) weights ``w`` and per-class positive weights ``pos``."""

    w: np.ndarray | float = 1.0
    pos: np.ndarray | float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.w) <= 0) or np.any(np.asarray(self.pos) <= 0):
            raise ValueError("loss weights must be positive")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def bce_logits_loss(logits, targets, weights: LossWeights | None = None) -> Tensor:
    """Mean over all ``n * C`` terms of the weighted binary cross entropy.

    Each term is ``w * (pos * y * softplus(-x) + (1 - y) * softplus(x))``,
    i.e. ``-w [pos y log s(x) + (1 - y) log(1 - s(x))]`` without overflow.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"targets {y.shape} do not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary cross entropy needs 0/1 targets")
    weights = weights or LossWeights()
    w = np.broadcast_to(np.asarray(weights.w, dtype=np.float64), y.shape)
    pos = np.broadcast_to(np.asarray(weights.pos, dtype=np.float64), y.shape)
    x = logits.data.astype(np.float64)
    terms = w * (pos * y * _softplus(-x) + (1 - y) * _softplus(x))
    count = terms.size

    def grad(g):
        s = _sigmoid(x)
        d = w * (-pos * y * (1 - s) + (1 - y) * s)
        return ((float(g) / count * d).astype(logits.dtype),)

    return primitive("bce_logits", (logits,), np.asarray(terms.mean(), dtype=np.float64), grad)


def cross_entropy_loss(logits, target) -> Tensor:
    """``-(1/N) sum_i log softmax(logits_i)[target_i]`` with 1-based targets."""
    logits = as_tensor(logits)
    t = np.asarray(target)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"need (n, C) logits and n targets, got {logits.shape} and {t.shape}")
    n, C = logits.shape
    if t.size and (t.min() < 1 or t.max() > C):
        raise ValueError(f"targets must lie in [1, {C}]")
    col = t.astype(np.int64) - 1
    x = logits.data.astype(np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), col].mean()

    def grad(g):
        d = np.exp(logp)
        d[np.arange(n), col] -= 1.0
        return ((float(g) / n * d).astype(logits.dtype),)

    return primitive("cross_entropy", (logits,), np.asarray(loss, dtype=np.float64), grad)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def predict_multi(logits, threshold: float = 0.5) -> list[frozenset]:
    """Class ``c`` is predicted when ``sigmoid(logit_c) >= threshold``."""
    on = _sigmoid(np.asarray(logits)) >= threshold
    return [frozenset(int(c) + 1 for c in np.flatnonzero(row)) for row in on]


def predict_single(logits) -> np.ndarray:
    """Arg-max class id; ties go to the lowest id."""
    return np.argmax(np.asarray(logits), axis=1) + 1


def init_classifier(rng: Rng, in_features: int, n_classes: int, hidden: int = 64, dtype=np.float32) -> nn.Params:
    params = nn.init_linear(rng, in_features, hidden, "classifier.layer1", dtype)
    params.update(nn.init_linear(rng, hidden, n_classes, "classifier.layer2", dtype))
    return params


def classify(params: nn.Params, h, *, dropout_rate: float = 0.0, rng: Rng | None = None, training: bool = False) -> Tensor:
    W1, b1 = nn.layer(params, "classifier.layer1")
    W2, b2 = nn.layer(params, "classifier.layer2")
    flat = flatten(as_tensor(h))
    if flat.shape[1] != W1.shape[1]:
        raise ShapeError(f"classifier expects {W1.shape[1]} features, got {flat.shape[1]}")
    a = dropout(relu(affine(flat, W1, b1)), dropout_rate, rng, training)
    return affine(a, W2, b2)


def task_loss(task: str, logits, y, weights: LossWeights | None = None) -> Tensor:
    if task == "multi":
        return bce_logits_loss(logits, y, weights)
    return cross_entropy_loss(logits, y)


def logits_of(params: nn.Params, X: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode logits of an encoder+classifier parameter collection."""
    out = [classify(params, encode(params, X[idx])).data for idx in iter_batches(len(X), batch_size)]
    return np.concatenate(out)


def score_logits(task: str, logits: np.ndarray, y: np.ndarray, threshold: float = 0.5, metric: str = "jaccard") -> float:
    if task == "multi":
        pred = predict_multi(logits, threshold)
        if metric == "hamming":
            return hamming_accuracy(pred, y, y.shape[1])
        return multilabel_accuracy(pred, y)
    return singlelabel_accuracy(predict_single(logits), y)


def finetune(
    encoder_params: nn.Params,
    head_params: nn.Params,
    mode: FineTuneMode | str,
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
    weights: LossWeights | None = None,
    threshold: float = 0.5,
    metric: str = "jaccard",
    rng: Rng | None = None,
) -> TrainResult:
    """Train the head, and the encoder too under ``CL_TUNE``.

    In ``CL_FREEZE`` the encoder runs in eval mode and its tensors are never
    replaced. With validation data the best-scoring epoch is returned.
    """
    mode = FineTuneMode(mode)
    rng = rng or Rng(0)
    params = {**encoder_params, **head_params}
    frozen = mode is FineTuneMode.CL_FREEZE
    trainable = list(head_params) if frozen else list(params)
    drop_rng = rng.spawn("dropout")

    def loss_fn(p, idx):
        h = encode(p, X_train[idx], dropout_rate=dropout_encoder, rng=drop_rng, training=not frozen)
        logits = classify(p, h, dropout_rate=dropout_classifier, rng=drop_rng, training=True)
        w = weights
        if weights is not None and np.ndim(weights.w) == 2:
            w = LossWeights(np.asarray(weights.w)[idx], weights.pos)
        return task_loss(task, logits, y_train[idx], w)

    def val_score(p):
        return score_logits(task, logits_of(p, X_val), y_val, threshold, metric)

    select = val_score if X_val is not None and len(X_val) else None

    return train_epochs(
        params,
        trainable,
        loss_fn,
        len(X_train),
        epochs=epochs,
        batch_size=batch_size,
        schedule=LrSchedule(lr, lr_step, gamma),
        l2_weight=l2_weight,
        rng=rng.spawn("shuffle"),
        select=select,
    )


def resolve_encoder(encoder) -> tuple[nn.Params, dict] | None:
    """Encoder parameters from a fitted estimator, checkpoint path or dict."""
    if encoder is None:
        return None
    if isinstance(encoder, ContrastiveEncoder):
        check_is_fitted(encoder, "params_")
        return encoder.encoder_params_, encoder.manifest()
    if isinstance(encoder, (str, Path)):
        params, manifest = nn.load_checkpoint(encoder)
        return nn.subset(params, "encoder"), manifest
    if isinstance(encoder, dict):
        return nn.subset(encoder, "encoder"), {}
    raise TypeError(f"cannot use {type(encoder).__name__} as an encoder")


class ContrastiveClassifier(ClassifierMixin, BaseEstimator):
    """Encoder + fully connected classifier fine-tuned on labelled patches.

    ``encoder`` may be a fitted :class:`ContrastiveEncoder`, a checkpoint
    directory or a parameter dict; ``None`` starts from a random encoder
    (plain supervised training). ``y`` is an ``n x C`` indicator matrix for
    ``task="multi"`` and a vector of 1-based class ids for ``task="single"``.
    Scores are in percent.
    """

    def __init__(
        self,
        encoder=None,
        task: str = "multi",
        mode: str = "cl-tune",
        n_classes: int | None = None,
        hidden_size: int | None = None,
        classifier_hidden: int = 64,
        epochs: int = 256,
        batch_size: int = 260,
        lr: float = 1e-3,
        gamma: float = 0.9,
        lr_step: int = 10,
        l2_weight: float = 1e-4,
        dropout_encoder: float = 0.3,
        dropout_classifier: float = 0.6,
        threshold: float = 0.5,
        pos_weight=None,
        metric: str = "jaccard",
        random_state: int = 0,
        dtype: str = "float32",
    ):
        self.encoder = encoder
        self.task = task
        self.mode = mode
        self.n_classes = n_classes
        self.hidden_size = hidden_size
        self.classifier_hidden = classifier_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.lr_step = lr_step
        self.l2_weight = l2_weight
        self.dropout_encoder = dropout_encoder
        self.dropout_classifier = dropout_classifier
        self.threshold = threshold
        self.pos_weight = pos_weight
        self.metric = metric
        self.random_state = random_state
        self.dtype = dtype

    def _check_y(self, y, n):
        if self.task == "multi":
            return check_multilabel_targets(y, n)
        return check_class_ids(y, n)

    def fit(self, X, y, X_val=None, y_val=None, sample_weight=None):
        if self.task not in ("multi", "single"):
            raise ValueError(f"task must be 'multi' or 'single', got {self.task!r}")
        X = check_patches(X, dtype=self.dtype)
        y = self._check_y(y, len(X))
        if self.task == "multi":
            n_classes = y.shape[1]
            if self.n_classes is not None and self.n_classes != n_classes:
                raise ShapeError(f"targets have {n_classes} columns, n_classes={self.n_classes}")
        else:
            n_classes = self.n_classes or int(y.max())
            if y.min() < 1 or y.max() > n_classes:
                raise ValueError(f"class ids must lie in [1, {n_classes}]")
        rng = Rng(self.random_state)
        p, bands = X.shape[1], X.shape[3]

        resolved = resolve_encoder(self.encoder)
        if resolved is None:
            hidden = self.hidden_size or 32
            enc = init_encoder(rng.spawn("encoder-init"), bands, hidden, dtype=self.dtype)
        else:
            enc, _ = resolved
            hidden = enc["encoder.layer2.weight"].shape[0]
            if self.hidden_size is not None and self.hidden_size != hidden:
                raise CheckpointError(f"encoder has hidden size {hidden}, classifier configured for {self.hidden_size}")
            if enc["encoder.layer1.weight"].shape[1] != bands:
                raise CheckpointError(
                    f"encoder expects {enc['encoder.layer1.weight'].shape[1]} bands, data has {bands}"
                )
            enc = {k: Tensor(v.data, dtype=self.dtype) for k, v in enc.items()}
        head = init_classifier(rng.spawn("classifier-init"), p * p * hidden, n_classes, self.classifier_hidden, self.dtype)

        weights = None
        if self.task == "multi" and (self.pos_weight is not None or sample_weight is not None):
            weights = LossWeights(
                1.0 if sample_weight is None else np.asarray(sample_weight, dtype=np.float64),
                1.0 if self.pos_weight is None else np.asarray(self.pos_weight, dtype=np.float64),
            )
        if X_val is not None:
            X_val = check_patches(X_val, dtype=self.dtype, bands=bands, patch_size=p)
            y_val = self._check_y(y_val, len(X_val))

        result = finetune(
            enc, head, self.mode, X, y, X_val, y_val,
            task=self.task,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            gamma=self.gamma,
            lr_step=self.lr_step,
            l2_weight=self.l2_weight,
            dropout_encoder=self.dropout_encoder,
            dropout_classifier=self.dropout_classifier,
            weights=weights,
            threshold=self.threshold,
            metric=self.metric,
            rng=rng.spawn("finetune"),
        )
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_classes_ = n_classes
        self.hidden_size_ = hidden
        self.n_bands_in_ = bands
        self.patch_size_ = p
        self.classes_ = np.arange(1, n_classes + 1)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_patches(X, dtype=self.dtype, bands=self.n_bands_in_, patch_size=self.patch_size_)
        return logits_of(self.params_, X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X).astype(np.float64)
        if self.task == "multi":
            return _sigmoid(logits)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        """Indicator matrix (multi) or class ids (single)."""
        logits = self.decision_function(X)
        if self.task == "multi":
            return (_sigmoid(logits) >= self.threshold).astype(np.int64)
        return predict_single(logits)

    def score(self, X, y, sample_weight=None) -> float:
        y = self._check_y(y, len(X))
        return score_logits(self.task, self.decision_function(X), y, self.threshold, self.metric)

    def transform(self, X) -> np.ndarray:
        """Flattened hidden representation from the fine-tuned encoder."""
        check_is_fitted(self, "params_")
        X = check_patches(X, dtype=self.dtype, bands=self.n_bands_in_, patch_size=self.patch_size_)
        return encode_array(nn.subset(self.params_, "encoder"), X)

    def manifest(self) -> dict:
        check_is_fitted(self, "params_")
        params = self.get_params()
        params["encoder"] = None
        if isinstance(params.get("pos_weight"), np.ndarray):
            params["pos_weight"] = params["pos_weight"].tolist()
        return {
            "kind": "classifier",
            "task": self.task,
            "mode": FineTuneMode(self.mode).value,
            "hidden_size": int(self.hidden_size_),
            "n_classes": int(self.n_classes_),
            "bands": int(self.n_bands_in_),
            "patch_size": int(self.patch_size_),
            "seed": self.random_state,
            "epoch": int(self.best_epoch_),
            "estimator_params": params,
        }

    def save(self, path, **extra):
        return nn.save_checkpoint(path, self.params_, {**self.manifest(), **extra})

    @classmethod
    def load(cls, path) -> "ContrastiveClassifier":
        params, manifest = nn.load_checkpoint(path)
        if manifest.get("kind") != "classifier":
            raise CheckpointError(f"{path} is not a classifier checkpoint")
        est = cls(**manifest["estimator_params"])
        est.params_ = params
        est.best_epoch_ = manifest["epoch"]
        est.n_classes_ = manifest["n_classes"]
        est.hidden_size_ = manifest["hidden_size"]
        est.n_bands_in_ = manifest["bands"]
        est.patch_size_ = manifest["patch_size"]
        est.classes_ = np.arange(1, est.n_classes_ + 1)
        return est
