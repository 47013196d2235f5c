"""Convolutional classifier mapping a flow-field image to left / right / both.

Five valid-padded blocks ``Conv -> BatchNorm -> ReLU -> MaxPool(2)`` with
8, 16, 32, 64, 128 filters and kernels 5, 5, 3, 3, 3 reduce a 128x128 image
to a 1x1x128 feature map, followed by ``dense(64) -> ReLU -> dropout(0.5) ->
dense(3)``.  Softmax is applied in the loss and in ``predict_proba``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import CLASSES, metrics
from .errors import ContractError, ShapeError, TrainingDivergedError
from .nn import (Activation, AdamState, BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2D, Sequential,
                 adam_step, softmax, softmax_cross_entropy)
from .nn.checkpoint import load as load_checkpoint
from .nn.checkpoint import save as save_checkpoint
from .nn.layers import conv_output_size
from .tensor import TRAIN_DTYPE, Rng

FILTERS = (8, 16, 32, 64, 128)
KERNELS = (5, 5, 3, 3, 3)
OUTPUT_INIT_STD = 1e-3


def feature_size(image_size, kernels=KERNELS):
    size = image_size
    for k in kernels:
        size = conv_output_size(size, k, 1, 0) // 2
        if size < 1:
            raise ShapeError(f"image size {image_size} is too small for kernels {tuple(kernels)}")
    return size


def build_classifier(filters=FILTERS, kernels=KERNELS, image_size=128, hidden=64, dropout=0.5,
                     n_classes=3, rng=None, dtype=np.float64):
    if len(filters) != len(kernels):
        raise ValueError("filters and kernels must have equal length")
    rng = rng if rng is not None else Rng(0)
    side = feature_size(image_size, kernels)
    layers = []
    chans = [1] + list(filters)
    for i, k in enumerate(kernels):
        layers += [Conv2D(chans[i], chans[i + 1], k, padding="valid", rng=rng, dtype=dtype),
                   BatchNorm(chans[i + 1], dtype=dtype), Activation("relu"), MaxPool2D()]
    logits = Dense(hidden, n_classes, rng=rng, dtype=dtype)
    # small logit weights so an untrained model predicts close to uniform
    logits.params["weight"] = rng.normal((n_classes, hidden), 0.0, OUTPUT_INIT_STD).astype(dtype)
    layers += [Flatten(), Dense(chans[-1] * side * side, hidden, rng=rng, dtype=dtype), Activation("relu"),
               Dropout(dropout, rng=rng.spawn("dropout")), logits]
    return Sequential(layers)


def expected_trace(batch, image_size=128, filters=FILTERS, kernels=KERNELS, hidden=64, n_classes=3):
    trace = [(batch, 1, image_size, image_size)]
    size = image_size
    for f, k in zip(filters, kernels):
        size = size - k + 1
        trace += [(batch, f, size, size)] * 3
        size //= 2
        trace.append((batch, f, size, size))
    flat = filters[-1] * size * size
    return trace + [(batch, flat), (batch, hidden), (batch, hidden), (batch, hidden), (batch, n_classes)]


def _batches(order, batch_size):
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        # BatchNorm needs two samples; fold a singleton tail into the previous batch
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


class FlowNetClassifier(ClassifierMixin, BaseEstimator):
    """Obstruction-site classifier trained with Adam on softmax cross-entropy.

    Parameters
    ----------
    epochs, batch_size, lr : training schedule.
    patience : int
        Stop after this many epochs without a better validation accuracy;
        the weights of the best epoch are restored.
    seed : int
        Seeds initialisation, shuffling and dropout.
    dtype : numpy dtype or None
        ``None`` uses the process precision profile.
    """

    def __init__(self, filters=FILTERS, kernels=KERNELS, hidden=64, dropout=0.5, epochs=60, batch_size=16,
                 lr=1e-3, patience=10, seed=0, dtype=None, verbose=False):
        self.filters = filters
        self.kernels = kernels
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.seed = seed
        self.dtype = dtype
        self.verbose = verbose

    @property
    def _dtype(self):
        return np.dtype(self.dtype) if self.dtype is not None else TRAIN_DTYPE

    def _images(self, X, size=None):
        X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_min_samples=1)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4 or X.shape[1] != 1 or X.shape[2] != X.shape[3]:
            raise ShapeError(f"expected square single-channel images, got {X.shape}")
        if size is not None and X.shape[2] != size:
            raise ShapeError(f"expected {size}x{size} images, got {X.shape[2]}x{X.shape[3]}")
        return X.astype(self._dtype, copy=False)

    def _labels(self, y):
        y = np.asarray(y)
        self._string_labels = y.dtype.kind in "USO"
        return metrics.encode_labels(y)

    def _build(self, image_size):
        root = Rng(self.seed)
        self.model_ = build_classifier(tuple(self.filters), tuple(self.kernels), image_size, self.hidden,
                                       self.dropout, len(CLASSES), rng=root.spawn("init"), dtype=self._dtype)
        self.image_size_ = image_size
        self.classes_ = np.array(CLASSES)
        self.optimizer_ = AdamState(lr=self.lr)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on (X, y); early stopping monitors (X_val, y_val) when given,
        otherwise training accuracy."""
        if self.batch_size < 2:
            raise ContractError("batch_size must be at least 2 (BatchNorm needs batch statistics)")
        if len(X) == 0:
            raise ContractError("empty training set")
        X = self._images(X)
        y = self._labels(y)
        if len(y) != len(X):
            raise ContractError("X and y have different lengths")
        has_val = X_val is not None and len(X_val) > 0
        if has_val:
            X_val = self._images(X_val, X.shape[2])
            y_val = metrics.encode_labels(y_val)
        self._build(X.shape[2])
        root = Rng(self.seed)
        shuffle, drop = root.spawn("shuffle"), root.spawn("dropout-masks")
        self.history_ = {"epoch": [], "train_loss": [], "train_acc": [], "val_acc": []}
        best, best_state, since = -1.0, None, 0
        step = 0
        for epoch in range(1, self.epochs + 1):
            total_loss, correct = 0.0, 0
            for idx in _batches(shuffle.permutation(len(X)), self.batch_size):
                step += 1
                logits, cache = self.model_.forward(X[idx], mode="train", rng=drop)
                loss, dlogits = softmax_cross_entropy(logits, y[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"classifier loss is not finite in epoch {epoch}", step)
                _, grads = self.model_.backward(dlogits.astype(logits.dtype, copy=False), cache)
                adam_step(self.model_.params, grads, self.optimizer_)
                total_loss += loss * len(idx)
                correct += int((logits.argmax(axis=1) == y[idx]).sum())
            train_acc = correct / len(X)
            val_acc = float(np.mean(self._predict_index(X_val) == y_val)) if has_val else float("nan")
            for key, value in zip(self.history_, (epoch, total_loss / len(X), train_acc, val_acc)):
                self.history_[key].append(value)
            if self.verbose:
                print(f"epoch {epoch}: loss {total_loss / len(X):.4f} train {train_acc:.4f} val {val_acc:.4f}",
                      flush=True)
            monitor = val_acc if has_val else train_acc
            # ties keep the later epoch, whose BatchNorm running statistics are more settled;
            # only a strict improvement resets the patience counter
            if monitor >= best:
                best_state = {k: v.copy() for k, v in self.model_.state_dict().items()}
                self.best_epoch_ = epoch
            if monitor > best:
                best, since = monitor, 0
            else:
                since += 1
                if self.patience is not None and since >= self.patience:
                    break
        self.model_.load_state_dict(best_state)
        self.n_epochs_ = len(self.history_["epoch"])
        return self

    def first_batch_loss(self, X, y):
        """Train-mode loss of an untrained model on one batch (no update)."""
        X = self._images(X)
        self._build(X.shape[2])
        logits, _ = self.model_.forward(X, mode="train", rng=Rng(self.seed).spawn("dropout-masks"))
        return softmax_cross_entropy(logits, metrics.encode_labels(y))[0]

    def _predict_logits(self, X, batch_size=64):
        return self.model_.predict(X, batch_size=batch_size)

    def _predict_index(self, X):
        return self._predict_logits(X).argmax(axis=1)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._images(X, self.image_size_)
        return softmax(self._predict_logits(X).astype(np.float64))

    def predict(self, X):
        """Most probable class; ties go to the lowest class index."""
        idx = self.predict_proba(X).argmax(axis=1)
        return self.classes_[idx] if getattr(self, "_string_labels", True) else idx

    def evaluate(self, X, y):
        """Metrics report on a labelled test set (class order left, right, both)."""
        if len(X) == 0:
            raise ContractError("empty test set")
        probs = self.predict_proba(X)
        return metrics.evaluate_predictions(metrics.encode_labels(y), probs.argmax(axis=1), probs)

    def history_rows(self):
        h = self.history_
        return list(zip(h["epoch"], h["train_loss"], h["train_acc"], h["val_acc"]))

    def write_history(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("epoch,train_loss,train_acc,val_acc\n")
            for epoch, loss, tr, va in self.history_rows():
                fh.write(f"{epoch},{loss:.6f},{tr:.6f},{va:.6f}\n")

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_.state_dict())

    def load(self, path, image_size=128):
        state = load_checkpoint(path)
        self._build(image_size)
        try:
            self.model_.load_state_dict(state)
        except (ContractError, ShapeError) as exc:
            raise ContractError(f"{path}: checkpoint does not match the classifier configuration ({exc})") from exc
        self._string_labels = True
        return self
