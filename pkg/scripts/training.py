import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import accuracy_score
from tqdm import tqdm

from scripts.data_loader import ImageDataLoader
from scripts.exceptions import ConfigurationError, DegenerateStatsError, DivergenceError
from scripts.nn_models import frozen
from scripts.tensor_autodiff import Tensor, cross_entropy, mse_loss, no_grad


# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


@dataclass(frozen=True)
class NoiseSchedule:
    """Gaussian noise levels drawn uniformly from [0, sigma_max] (pixel units)."""

    sigma_max: float

    def __post_init__(self):
        if not self.sigma_max > 0:
            raise ConfigurationError(f"sigma_max must be > 0, got {self.sigma_max}")

    def sample(self, rng, size):
        return rng.uniform(0.0, self.sigma_max, size=size)


@dataclass
class AdamState:
    """Moment buffers and hyperparameters of an Adam optimizer."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    first_moments: list = field(default_factory=list)
    second_moments: list = field(default_factory=list)
    step_count: int = 0


class Adam:
    """
    Adam with bias correction over a list of Tensors.

    Parameters whose ``grad`` is None are skipped.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            first_moments=[np.zeros_like(p.data) for p in self.params],
            second_moments=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        state = self.state
        state.step_count += 1
        bias1 = 1.0 - state.beta1 ** state.step_count
        bias2 = 1.0 - state.beta2 ** state.step_count
        for param, m, v in zip(self.params, state.first_moments, state.second_moments):
            if param.grad is None:
                continue
            grad = param.grad
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * (grad * grad)
            update = (state.lr / bias1) * m / (np.sqrt(v / bias2) + state.eps)
            param.data = (param.data - update).astype(np.float32)


@dataclass(frozen=True)
class ReconStats:
    """
    Mean and (population) standard deviation of clean per-image reconstruction errors.

    Attributes:
        mu (float): Mean error.
        sigma (float): Standard deviation, strictly positive.
        fingerprint (str): Identifies the dataset/model pair the stats came from.
    """

    mu: float
    sigma: float
    fingerprint: str = ""

    def __post_init__(self):
        if not self.sigma > 0:
            raise DegenerateStatsError(
                f"Reconstruction error spread is {self.sigma}; the DAE looks untrained or constant"
            )

    @classmethod
    def from_errors(cls, errors, fingerprint=""):
        errors = np.asarray(errors, dtype=np.float64)
        return cls(mu=float(errors.mean()), sigma=float(errors.std()), fingerprint=fingerprint)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"mu={self.mu!r}\nsigma={self.sigma!r}\nfingerprint={self.fingerprint}\n")
        logging.info(f"Saved reconstruction stats (mu={self.mu:.6g}, sigma={self.sigma:.6g}) to {path}")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Reconstruction stats file {path} does not exist")
        fields = {}
        for line in path.read_text().splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
        try:
            return cls(mu=float(fields["mu"]), sigma=float(fields["sigma"]), fingerprint=fields.get("fingerprint", ""))
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"Malformed reconstruction stats file {path}: {exc}") from None


def reconstruction_errors(dae, images, batch_size=256):
    """
    Per-image pixel-mean squared reconstruction error.

    Args:
        dae (DaeModel): Trained autoencoder; evaluated in eval mode.
        images (np.ndarray): [N, C, H, W] images.

    Returns:
        np.ndarray: float64 errors [N].
    """
    images = np.asarray(images, dtype=np.float32)
    errors = []
    with frozen(dae), no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start:start + batch_size]
            recon = dae(Tensor(batch)).data
            errors.append(((batch - recon) ** 2).mean(axis=(1, 2, 3), dtype=np.float64))
    return np.concatenate(errors) if errors else np.zeros(0)


class Trainer:
    """
    Training loops for the DAE and the target classifier.

    Attributes:
        history (list[dict]): Per-epoch metrics of the most recent run.
    """

    def __init__(self, batch_size=128, learning_rate=1e-3, validation_fraction=0.05, show_progress=True):
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.show_progress = show_progress
        self.history = []

    def train_dae(self, model, train, schedule, epochs, seed, validation=None):
        """
        Trains the DAE to map noisy images back to clean ones.

        Each image receives Gaussian noise with its own sigma ~ U[0, sigma_max];
        the noisy input is clipped to [0, 1] before the forward pass.

        Args:
            model (DaeModel): Model to train in place.
            train (LabeledImageSet): Clean training images.
            schedule (NoiseSchedule): Noise level distribution.
            epochs (int): Passes over the training split.
            seed (int): Seed for noise, shuffling and the validation split.
            validation (LabeledImageSet | None): Held-out images; split off ``train`` when omitted.

        Returns:
            DaeModel: The trained model, left in eval mode.
        """
        rng = np.random.default_rng(seed)
        if validation is None:
            train, validation = ImageDataLoader.train_validation_split(train, self.validation_fraction, seed)
        optimizer = Adam(model.parameters(), lr=self.learning_rate)
        self.history = []
        for epoch in range(epochs):
            model.train()
            losses = []
            batches = ImageDataLoader.batch_iter(train, self.batch_size, shuffle=True, seed=seed + epoch)
            for batch, _ in tqdm(batches, desc=f"DAE epoch {epoch + 1}", leave=False, disable=not self.show_progress):
                sigma = schedule.sample(rng, (len(batch), 1, 1, 1))
                noisy = np.clip(batch.data + sigma * rng.standard_normal(batch.shape), 0.0, 1.0)
                optimizer.zero_grad()
                loss = mse_loss(model(Tensor(noisy)), batch)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"DAE loss became {value} in epoch {epoch + 1}")
                loss.backward()
                optimizer.step()
                losses.append(value)
            val_loss = self.reconstruction_loss(model, validation)
            self.history.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
            logging.info(f"DAE epoch {epoch + 1}/{epochs} - train loss {np.mean(losses):.6f} - validation loss {val_loss:.6f}")
        return model.eval()

    def train_classifier(self, model, train, epochs, seed, test=None):
        """
        Trains the classifier with cross-entropy and reports accuracy each epoch.

        Args:
            model (ClassifierModel): Model to train in place.
            train (LabeledImageSet): Training examples.
            epochs (int): Passes over ``train``.
            seed (int): Shuffling seed.
            test (LabeledImageSet | None): Set used for the reported accuracy.

        Returns:
            ClassifierModel: The trained model, left in eval mode.
        """
        optimizer = Adam(model.parameters(), lr=self.learning_rate)
        self.history = []
        for epoch in range(epochs):
            model.train()
            losses = []
            batches = ImageDataLoader.batch_iter(train, self.batch_size, shuffle=True, seed=seed + epoch)
            for batch, labels in tqdm(batches, desc=f"Classifier epoch {epoch + 1}", leave=False, disable=not self.show_progress):
                optimizer.zero_grad()
                loss = cross_entropy(model(batch), labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"Classifier loss became {value} in epoch {epoch + 1}")
                loss.backward()
                optimizer.step()
                losses.append(value)
            record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
            if test is not None:
                record["test_accuracy"] = self.accuracy(model, test)
            self.history.append(record)
            logging.info(f"Classifier epoch {epoch + 1}/{epochs} - " + " - ".join(f"{k} {v:.4f}" for k, v in record.items() if k != "epoch"))
        return model.eval()

    def reconstruction_loss(self, model, image_set):
        """Mean pixel MSE between images and their reconstructions."""
        return float(reconstruction_errors(model, image_set.images, self.batch_size).mean())

    @staticmethod
    def accuracy(model, image_set, batch_size=256):
        return float(accuracy_score(image_set.labels, model.predict(image_set.images, batch_size)))

    @staticmethod
    def fit_recon_stats(dae, clean, fingerprint="", batch_size=256):
        """
        Fits ReconStats on clean images.

        Args:
            dae (DaeModel): Trained autoencoder.
            clean (LabeledImageSet): Clean (training) images.
            fingerprint (str): Provenance tag stored with the stats.

        Returns:
            ReconStats: Sample mean and population standard deviation of per-image errors.
        """
        errors = reconstruction_errors(dae, clean.images, batch_size)
        stats = ReconStats.from_errors(errors, fingerprint=fingerprint)
        logging.info(f"Fitted reconstruction stats on {len(errors)} images: mu={stats.mu:.6g}, sigma={stats.sigma:.6g}")
        return stats


def train_dae(model, train, schedule, epochs, seed, **kwargs):
    return Trainer(**kwargs).train_dae(model, train, schedule, epochs, seed)


def train_classifier(model, train, epochs, seed, test=None, **kwargs):
    return Trainer(**kwargs).train_classifier(model, train, epochs, seed, test=test)


def fit_recon_stats(dae, clean, fingerprint=""):
    return Trainer.fit_recon_stats(dae, clean, fingerprint=fingerprint)
