"""Per-class DCGAN-style generators for rebalancing the flow-image dataset.

The generator projects a latent vector with a dense layer, reshapes it to a
small feature map and doubles the resolution four times with stride-2
transposed convolutions.  The discriminator mirrors it with stride-2
convolutions and ends in a sigmoid.  One ``FlowGAN`` is trained per class.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import pgm
from .errors import ContractError, ShapeError, TrainingDivergedError
from .nn import (Activation, AdamState, BatchNorm, Conv2D, Dense, Dropout, Flatten, Reshape, Sequential,
                 TransposedConv2D, adam_step, bce_with_logits)
from .nn.checkpoint import load as load_checkpoint
from .nn.checkpoint import save as save_checkpoint
from .tensor import TRAIN_DTYPE, Rng

LATENT_DIM = 100
GENERATOR_WIDTHS = (256, 128, 64, 32)
DISCRIMINATOR_WIDTHS = (32, 64, 128, 256)
KERNEL = 4
ALPHA = 0.2


def build_generator(latent_dim=LATENT_DIM, widths=GENERATOR_WIDTHS, image_size=128, rng=None,
                    dtype=np.float64):
    """dense -> reshape -> [tconv(4, s2) -> BN -> leaky ReLU] x3 -> tconv(4, s2) -> tanh."""
    if image_size % 16:
        raise ValueError("image_size must be a multiple of 16")
    rng = rng if rng is not None else Rng(0)
    base = image_size // 16
    layers = [Dense(latent_dim, widths[0] * base * base, rng=rng, init="dcgan", dtype=dtype),
              Reshape((widths[0], base, base))]
    chans = list(widths) + [1]
    for i in range(4):
        layers.append(TransposedConv2D(chans[i], chans[i + 1], KERNEL, stride=2, padding=1, rng=rng,
                                       init="dcgan", dtype=dtype))
        if i < 3:
            layers += [BatchNorm(chans[i + 1], dtype=dtype), Activation("leaky_relu", ALPHA)]
        else:
            layers.append(Activation("tanh"))
    return Sequential(layers)


def build_discriminator(widths=DISCRIMINATOR_WIDTHS, image_size=128, dropout=0.3, rng=None,
                        dtype=np.float64):
    """[conv(4, s2) -> (BN) -> leaky ReLU] x4 -> flatten -> dropout -> dense(1) -> sigmoid.

    BatchNorm is applied on blocks 2-4.  "same" padding halves the size exactly.
    """
    if image_size % 16:
        raise ValueError("image_size must be a multiple of 16")
    rng = rng if rng is not None else Rng(0)
    layers = []
    chans = [1] + list(widths)
    for i in range(4):
        layers.append(Conv2D(chans[i], chans[i + 1], KERNEL, stride=2, padding="same", rng=rng,
                             init="dcgan", dtype=dtype))
        if i > 0:
            layers.append(BatchNorm(chans[i + 1], dtype=dtype))
        layers.append(Activation("leaky_relu", ALPHA))
    side = image_size // 16
    layers += [Flatten(), Dropout(dropout, rng=rng.spawn("dropout")),
               Dense(widths[-1] * side * side, 1, rng=rng, init="dcgan", dtype=dtype),
               Activation("sigmoid")]
    return Sequential(layers)


def expected_generator_trace(batch, latent_dim=LATENT_DIM, widths=GENERATOR_WIDTHS, image_size=128):
    base = image_size // 16
    trace = [(batch, latent_dim), (batch, widths[0] * base * base), (batch, widths[0], base, base)]
    chans = list(widths) + [1]
    size = base
    for i in range(4):
        size *= 2
        shape = (batch, chans[i + 1], size, size)
        trace += [shape] * (3 if i < 3 else 2)
    return trace


def expected_discriminator_trace(batch, widths=DISCRIMINATOR_WIDTHS, image_size=128):
    trace = [(batch, 1, image_size, image_size)]
    size = image_size
    for i, w in enumerate(widths):
        size //= 2
        trace += [(batch, w, size, size)] * (3 if i > 0 else 2)
    flat = widths[-1] * size * size
    return trace + [(batch, flat), (batch, flat), (batch, 1), (batch, 1)]


@dataclass
class TaggedImage:
    image: np.ndarray
    label: str
    provenance: str = "synthetic"


def _as_images(X, image_size):
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (1, image_size, image_size):
        raise ShapeError(f"expected images of shape (n, {image_size}, {image_size}), got {X.shape}")
    if X.shape[0] == 0:
        raise ContractError("cannot train on an empty image set")
    if X.min() < -1 or X.max() > 1:
        raise ContractError("real images must lie in [-1, 1]")
    return X


class FlowGAN(BaseEstimator):
    """Adversarially trained image generator for a single class.

    Parameters
    ----------
    steps : int
        Number of alternating discriminator/generator updates.
    batch_size : int
        Real images per step; the same number of fakes is drawn per phase.
    lr, beta1 : float
        Adam settings shared by both networks.
    seed : int
        Seeds initialisation, latent draws, batch sampling and dropout.
    dtype : numpy dtype or None
        Parameter precision; ``None`` uses the process precision profile.

    Attributes
    ----------
    generator_, discriminator_ : Sequential
    history_ : list of (d_loss, g_loss)
        One entry per completed step.
    """

    def __init__(self, latent_dim=LATENT_DIM, image_size=128, generator_widths=GENERATOR_WIDTHS,
                 discriminator_widths=DISCRIMINATOR_WIDTHS, dropout=0.3, steps=3000, batch_size=16,
                 lr=2e-4, beta1=0.5, seed=0, dtype=None):
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.generator_widths = generator_widths
        self.discriminator_widths = discriminator_widths
        self.dropout = dropout
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.seed = seed
        self.dtype = dtype

    @property
    def _dtype(self):
        return np.dtype(self.dtype) if self.dtype is not None else TRAIN_DTYPE

    def _build(self):
        root = Rng(self.seed)
        self.generator_ = build_generator(self.latent_dim, tuple(self.generator_widths), self.image_size,
                                          rng=root.spawn("generator"), dtype=self._dtype)
        self.discriminator_ = build_discriminator(tuple(self.discriminator_widths), self.image_size,
                                                  self.dropout, rng=root.spawn("discriminator"),
                                                  dtype=self._dtype)
        self.g_opt_ = AdamState(lr=self.lr, beta1=self.beta1)
        self.d_opt_ = AdamState(lr=self.lr, beta1=self.beta1)
        self.history_ = []
        self.rng_ = root.spawn("train")

    def _trunk(self):
        # everything except the final sigmoid; losses are computed on logits
        return Sequential(self.discriminator_.layers[:-1])

    def _latent(self, n, rng):
        return rng.normal((n, self.latent_dim)).astype(self._dtype)

    def fit(self, X, y=None, callback=None):
        """Train from scratch for ``steps`` steps on images ``X`` in [-1, 1]."""
        X = _as_images(X, self.image_size).astype(self._dtype)
        self._build()
        for _ in range(self.steps):
            idx = self.rng_.integers(len(X), self.batch_size)
            self.train_step(X[idx])
            if callback is not None:
                callback(self)
        return self

    def train_step(self, real_batch):
        """One discriminator update then one generator update; returns (d_loss, g_loss)."""
        if not hasattr(self, "generator_"):
            self._build()
        real = _as_images(real_batch, self.image_size).astype(self._dtype, copy=False)
        step = len(self.history_) + 1
        d_loss = self.d_step(real, step)
        g_loss = self.g_step(len(real), step)
        self.history_.append((d_loss, g_loss))
        return d_loss, g_loss

    def d_step(self, real, step=None):
        """Discriminator update: real -> 1, fresh fakes -> 0.  The generator is only read."""
        trunk, rng = self._trunk(), self.rng_
        with self.generator_.frozen_stats():
            fake, _ = self.generator_.forward(self._latent(len(real), rng), mode="train")
        logits, cache = trunk.forward(real, mode="train", rng=rng)
        loss_real, dlog = bce_with_logits(logits, 1.0)
        _, grads = trunk.backward(dlog, cache)
        logits, cache = trunk.forward(fake, mode="train", rng=rng)
        loss_fake, dlog = bce_with_logits(logits, 0.0)
        _, grads_fake = trunk.backward(dlog, cache)
        for k in grads:
            grads[k] = grads[k] + grads_fake[k]
        d_loss = loss_real + loss_fake
        if not np.isfinite(d_loss):
            raise TrainingDivergedError("discriminator loss is not finite", step)
        adam_step(trunk.params, grads, self.d_opt_)
        return d_loss

    def g_step(self, n, step=None):
        """Generator update: fakes -> 1 through the discriminator, whose weights and stats stay fixed."""
        gen, trunk, rng = self.generator_, self._trunk(), self.rng_
        fake, g_cache = gen.forward(self._latent(n, rng), mode="train")
        with trunk.frozen_stats():
            logits, cache = trunk.forward(fake, mode="train", rng=rng)
        g_loss, dlog = bce_with_logits(logits, 1.0)
        if not np.isfinite(g_loss):
            raise TrainingDivergedError("generator loss is not finite", step)
        dfake, _ = trunk.backward(dlog, cache)
        _, grads = gen.backward(dfake, g_cache)
        adam_step(gen.params, grads, self.g_opt_)
        return g_loss

    def _check_trained(self):
        if not hasattr(self, "generator_") or not (self.history_ or getattr(self, "loaded_", False)):
            raise ContractError("GAN has not been trained")

    def generate(self, z):
        """Images [batch, 1, size, size] for latent codes ``z`` (inference mode)."""
        if not hasattr(self, "generator_"):
            raise ContractError("GAN has not been built; call fit or load first")
        z = np.asarray(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent codes must have shape (batch, {self.latent_dim}), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ContractError("latent codes must be finite")
        return self.generator_.predict(z.astype(self._dtype))

    def sample(self, count, rng):
        """``count`` generated images as a (count, size, size) array."""
        self._check_trained()
        if count == 0:
            return np.empty((0, self.image_size, self.image_size), dtype=self._dtype)
        return self.generate(self._latent(count, rng))[:, 0]

    def discriminate(self, images):
        return self.discriminator_.predict(_as_images(images, self.image_size).astype(self._dtype))[:, 0]

    def save(self, path):
        state = {f"g.{k}": v for k, v in self.generator_.state_dict().items()}
        state.update({f"d.{k}": v for k, v in self.discriminator_.state_dict().items()})
        state["meta.steps"] = np.array([len(self.history_)], dtype=np.float32)
        save_checkpoint(path, state)

    def load(self, path):
        """Restore weights written by ``save``; the constructor parameters must match."""
        state = load_checkpoint(path)
        self._build()
        try:
            self.generator_.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("g.")})
            self.discriminator_.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("d.")})
        except (ContractError, ShapeError) as exc:
            raise ContractError(f"{path}: checkpoint does not match the GAN configuration ({exc})") from exc
        self.loaded_ = True
        return self


def synthesize_class(gan, class_label, count, rng):
    """``count`` synthetic images for ``class_label`` tagged with their provenance."""
    if count < 0:
        raise ValueError("count must be non-negative")
    gan._check_trained()
    images = gan.sample(count, rng)
    return [TaggedImage(np.clip(im, -1.0, 1.0), class_label) for im in images]


def write_history(path, history):
    with open(path, "w", newline="\n") as fh:
        fh.write("step,d_loss,g_loss\n")
        for step, (d, g) in enumerate(history, start=1):
            fh.write(f"{step},{d:.6f},{g:.6f}\n")


def write_sample_grid(path, gan, rng, count=16, columns=4):
    pgm.write_image(path, pgm.tile(gan.sample(count, rng), columns=columns))
