"""
Adaptive purification: gradient steps on the input image that reduce, or
pull towards clean levels, the reconstruction error of a trained DAE.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from scripts import tensor_autodiff as ops
from scripts.exceptions import ConfigurationError, DimensionError
from scripts.nn_models import frozen
from scripts.tensor_autodiff import Tensor, no_grad
from scripts.training import Adam, ReconStats, reconstruction_errors


# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


class PurifyVariant(str, Enum):
    DIRECT = "direct"
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"
    F = "F"
    G = "G"


STATS_VARIANTS = {PurifyVariant.C, PurifyVariant.D, PurifyVariant.E, PurifyVariant.F, PurifyVariant.G}
SUM_OF_SQUARES_VARIANTS = {PurifyVariant.A, PurifyVariant.B, PurifyVariant.C}


def _as_range(value, name):
    if np.isscalar(value):
        return (float(value), float(value))
    low, high = (float(v) for v in value)
    if low > high:
        raise ConfigurationError(f"{name} range ({low}, {high}) is empty")
    return (low, high)


@dataclass
class PurifySpec:
    """
    One purification configuration.

    Attributes:
        variant (PurifyVariant): Update rule.
        n_iters (int): Gradient steps.
        alpha (float): Step size; 0 leaves the input untouched.
        beta (float): Momentum of the gradient average (ignored by variant A).
        gamma (float): Scale of the Gaussian jitter at the gradient point (variant F).
        resize_factor (tuple): Range of the random resize factor (variant G).
        rotation (tuple): Range of the random rotation in degrees (variant G).
        stats (ReconStats | None): Clean reconstruction statistics, required by C-G.
        use_adam (bool): Replace the momentum average by Adam with bias correction.
        seed (int): Seed for jitter and transforms.
        label (str): Column name in reports.
    """

    variant: PurifyVariant
    n_iters: int = 15
    alpha: float = 0.01
    beta: float = 0.9
    gamma: float = 0.02
    resize_factor: tuple = (0.9, 1.1)
    rotation: tuple = (-10.0, 10.0)
    stats: ReconStats = None
    use_adam: bool = False
    seed: int = 0
    label: str = None

    def __post_init__(self):
        try:
            self.variant = PurifyVariant(self.variant)
        except ValueError:
            raise ConfigurationError(f"Unknown purification variant '{self.variant}'") from None
        if self.n_iters < 1:
            raise ConfigurationError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in [0, 1), got {self.beta}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        self.resize_factor = _as_range(self.resize_factor, "resize_factor")
        if self.resize_factor[0] <= 0:
            raise ConfigurationError(f"resize_factor must be positive, got {self.resize_factor}")
        self.rotation = _as_range(self.rotation, "rotation")
        if self.label is None:
            self.label = "direct" if self.variant is PurifyVariant.DIRECT else f"purify-{self.variant.value}"

    def with_stats(self, stats):
        """Copy of this spec carrying ``stats``."""
        return replace(self, stats=stats)

    def to_dict(self):
        return {
            "variant": self.variant.value,
            "n_iters": self.n_iters,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "resize_factor": list(self.resize_factor),
            "rotation": list(self.rotation),
            "stats": None if self.stats is None else {"mu": self.stats.mu, "sigma": self.stats.sigma},
            "use_adam": self.use_adam,
            "seed": self.seed,
            "label": self.label,
        }


@dataclass
class PurifyTrace:
    """
    Reconstruction errors along one purification run.

    Attributes:
        recon_errors (np.ndarray): [n_iters + 1, N] per-image pixel-mean errors,
            row 0 for the starting image and row i after update i.
        initial (np.ndarray): Starting images (after the variant G transform).
        final (np.ndarray): Purified images.
    """

    recon_errors: np.ndarray
    initial: np.ndarray
    final: np.ndarray

    def __len__(self):
        return self.recon_errors.shape[0]

    @property
    def mean_errors(self):
        """Batch-mean error per iteration."""
        return self.recon_errors.mean(axis=1)


def random_transform(images, resize_factor, rotation, rng):
    """
    Resizes and rotates each image about its centre with bilinear resampling,
    keeping the native resolution.

    Args:
        images (np.ndarray): [N, C, H, W] images.
        resize_factor (tuple): (low, high) range of the zoom factor.
        rotation (tuple): (low, high) range of the angle in degrees.
        rng (np.random.Generator): Source of the per-image draws.

    Returns:
        np.ndarray: Transformed float32 images in [0, 1].
    """
    out = np.empty_like(images)
    centre = (np.asarray(images.shape[2:], dtype=np.float64) - 1.0) / 2.0
    for index, image in enumerate(images):
        factor = rng.uniform(*resize_factor)
        theta = np.deg2rad(rng.uniform(*rotation))
        cos, sin = np.cos(theta), np.sin(theta)
        # output -> input coordinates: inverse rotation, then inverse zoom
        matrix = np.array([[cos, sin], [-sin, cos]]) / factor
        offset = centre - matrix @ centre
        for channel in range(image.shape[0]):
            out[index, channel] = ndimage.affine_transform(
                image[channel], matrix, offset=offset, order=1, mode="nearest"
            )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


class Purifier:
    """
    Purifies images with one trained DAE.

    The DAE is always evaluated frozen (eval-mode batch norm, no weight
    gradients), so each image in a batch is purified independently.
    """

    def __init__(self, dae):
        self.dae = dae

    def recon_error(self, x):
        """Elementwise (x - dae(x))^2, differentiable in x."""
        x = ops.as_tensor(x)
        with frozen(self.dae):
            return ops.square(x - self.dae(x))

    def recon_scalar(self, x):
        """Pixel mean of the reconstruction error over the whole batch."""
        return float(self.recon_scalars(x).mean())

    def recon_scalars(self, x):
        """Per-image pixel-mean reconstruction errors as float64 [N]."""
        images = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
        return reconstruction_errors(self.dae, images)

    def purify_direct(self, x):
        """The DAE output itself."""
        x = ops.as_tensor(x)
        with frozen(self.dae), no_grad():
            return Tensor(self.dae(x).data)

    def purify(self, x, spec, seed=None):
        """
        Runs ``spec.n_iters`` update steps on x.

        Args:
            x (Tensor): Images [N, C, H, W] in [0, 1].
            spec (PurifySpec): Variant and hyperparameters.
            seed (int | tuple | None): Overrides ``spec.seed`` for the random components.

        Returns:
            tuple[Tensor, PurifyTrace]: Purified images (no graph) and the error trace.
        """
        x = ops.as_tensor(x)
        if x.ndim != 4:
            raise DimensionError(f"purify expects [N,C,H,W] images, got {x.shape}")
        variant = spec.variant
        if variant is PurifyVariant.DIRECT:
            purified = self.purify_direct(x)
            errors = np.stack([self.recon_scalars(x), self.recon_scalars(purified)])
            return purified, PurifyTrace(errors, x.data.copy(), purified.data.copy())
        if variant in STATS_VARIANTS and spec.stats is None:
            raise ConfigurationError(f"Variant {variant.value} needs fitted reconstruction stats")

        rng = np.random.default_rng(spec.seed if seed is None else seed)
        current = x.data.copy()
        if variant is PurifyVariant.G:
            current = random_transform(current, spec.resize_factor, spec.rotation, rng)
        initial = current.copy()

        beta = 0.0 if variant is PurifyVariant.A else spec.beta
        use_adam = spec.use_adam and variant is not PurifyVariant.A
        velocity = np.zeros_like(current)
        holder = Tensor(current)
        optimizer = Adam([holder], lr=spec.alpha, beta1=beta) if use_adam else None

        rows = []
        with frozen(self.dae):
            for step in range(spec.n_iters):
                if variant is PurifyVariant.F:
                    point = current + np.float32(spec.gamma) * rng.standard_normal(current.shape).astype(np.float32)
                    grad, _ = self._objective_gradient(point, spec)
                    rows.append(self.recon_scalars(current))
                else:
                    grad, errors = self._objective_gradient(current, spec)
                    rows.append(errors)
                step_size = self._step_size(rows[-1], spec)

                if optimizer is not None:
                    holder.data = current
                    holder.grad = grad
                    optimizer.state.lr = step_size
                    optimizer.step()
                    current = np.clip(holder.data, 0.0, 1.0).astype(np.float32)
                else:
                    velocity = beta * velocity + (1.0 - beta) * grad
                    current = np.clip(current - step_size * velocity, 0.0, 1.0).astype(np.float32)
                logging.debug(f"Purify {spec.label} step {step + 1}/{spec.n_iters}: mean error {rows[-1].mean():.6g}")
        rows.append(self.recon_scalars(current))

        trace = PurifyTrace(np.stack(rows), initial, current.copy())
        return Tensor(current), trace

    def _objective_gradient(self, images, spec):
        """
        Gradient of the variant's purification loss at ``images``.

        Returns:
            tuple[np.ndarray, np.ndarray]: float32 gradient and the float64
            per-image pixel-mean errors at ``images``.
        """
        x = Tensor(images, requires_grad=True)
        recon = self.dae(x)
        squared = ops.square(x - recon)
        errors = ((images - recon.data) ** 2).mean(axis=(1, 2, 3), dtype=np.float64)
        if spec.variant in SUM_OF_SQUARES_VARIANTS:
            loss = ops.sum(squared)
        else:
            # Sign (D) and hinge (E-G) of r - mu use the float64 errors; r <= mu
            # yields an exactly zero gradient.
            deviation = errors - spec.stats.mu
            if spec.variant is PurifyVariant.D:
                weights = np.sign(deviation)
            else:
                weights = (deviation > 0).astype(np.float64)
            if not weights.any():
                return np.zeros_like(images), errors
            per_image = ops.mean(squared, axis=(1, 2, 3)) * weights.astype(np.float32)
            loss = ops.sum(per_image) * (1.0 / spec.stats.sigma)
        loss.backward()
        return x.grad, errors

    @staticmethod
    def _step_size(errors, spec):
        """Scalar alpha, or per-image alpha_i = alpha * (1 - exp(-z^2)) for variant C."""
        if spec.variant is not PurifyVariant.C:
            return np.float32(spec.alpha)
        return variable_step_size(errors, spec.alpha, spec.stats).astype(np.float32).reshape(-1, 1, 1, 1)

    def purify_many(self, images, spec, batch_size=128, base_seed=None):
        """
        Purifies any number of images in batches.

        Batch b uses seed (spec.seed, b), or (base_seed, spec.seed, b) when an
        experiment-level seed is given.

        Args:
            images (LabeledImageSet | Tensor | np.ndarray): Images to purify.
            spec (PurifySpec): Purification configuration.
            batch_size (int): Images per purify call.
            base_seed (int | None): Experiment seed mixed into every batch seed.

        Returns:
            np.ndarray: Purified float32 images.
        """
        data = getattr(images, "images", images)
        data = data.data if isinstance(data, Tensor) else np.asarray(data, dtype=np.float32)
        prefix = () if base_seed is None else (base_seed,)
        parts = []
        for batch_index, start in enumerate(range(0, data.shape[0], batch_size)):
            batch = Tensor(data[start:start + batch_size])
            if spec.variant is PurifyVariant.DIRECT:
                purified = self.purify_direct(batch)
            else:
                purified, _ = self.purify(batch, spec, seed=(*prefix, spec.seed, batch_index))
            parts.append(purified.data)
        return np.concatenate(parts) if parts else data[:0].copy()

    def classify_purified(self, classifier, images, spec, batch_size=128, base_seed=None):
        """
        Purifies then classifies every image.

        Returns:
            np.ndarray: Predicted labels [N].
        """
        return classifier.predict(self.purify_many(images, spec, batch_size, base_seed), batch_size)


def variable_step_size(errors, alpha, stats):
    """alpha * (1 - exp(-((r - mu) / sigma)^2)) for per-image errors r."""
    z = (np.asarray(errors, dtype=np.float64) - stats.mu) / stats.sigma
    return alpha * (1.0 - np.exp(-z * z))


def recon_error(dae, x):
    return Purifier(dae).recon_error(x)


def recon_scalar(dae, x):
    return Purifier(dae).recon_scalar(x)


def purify_direct(dae, x):
    return Purifier(dae).purify_direct(x)


def purify(dae, x, spec):
    return Purifier(dae).purify(x, spec)


def classify_purified(dae, classifier, images, spec):
    return Purifier(dae).classify_purified(classifier, images, spec)
