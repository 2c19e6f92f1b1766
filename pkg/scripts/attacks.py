"""
White-box L-infinity attacks against the target classifier, plus the two
counter-attacks that also see the denoising autoencoder.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from scripts import tensor_autodiff as ops
from scripts.exceptions import ConfigurationError
from scripts.nn_models import frozen
from scripts.tensor_autodiff import Tensor, cross_entropy
from scripts.training import Adam


class AttackKind(str, Enum):
    CLEAN = "clean"
    RANDOM = "random"
    FGSM = "fgsm"
    RFGSM = "rfgsm"
    BIM = "bim"
    CW = "cw"
    COUNTER_A = "counter_a"
    COUNTER_B = "counter_b"


ITERATIVE_KINDS = {AttackKind.BIM, AttackKind.COUNTER_A, AttackKind.COUNTER_B}


def default_iterations(epsilon, alpha):
    """floor(2 * epsilon / alpha + 2), the usual BIM iteration count."""
    return int(math.floor(2.0 * epsilon / alpha + 2.0 + 1e-9))


@dataclass
class AttackSpec:
    """
    One attack configuration.

    Attributes:
        kind (AttackKind): Attack family.
        epsilon (float): L-infinity budget in pixel units.
        alpha (float): Per-step size for iterative kinds.
        n_iters (int | None): Iterations; defaults to floor(2 * epsilon / alpha + 2).
        cw_c (float): Initial CW trade-off constant.
        cw_steps (int): Inner optimisation steps per CW search step.
        cw_search_steps (int): Binary-search halvings of the CW constant.
        cw_bounds (tuple): Search bracket for the CW constant.
        cw_lr (float): Adam step size for the CW inner loop.
        beta_recon (float): Weight of the reconstruction penalty (counter_b).
        beta_grid (list): Alternative beta values; the harness keeps the worst case.
        seed (int): Seed for the random components.
        label (str): Display name in reports.
    """

    kind: AttackKind
    epsilon: float = 0.1
    alpha: float = 0.01
    n_iters: int = None
    cw_c: float = 0.1
    cw_steps: int = 100
    cw_search_steps: int = 5
    cw_bounds: tuple = (1e-3, 10.0)
    cw_lr: float = 0.01
    beta_recon: float = 1.0
    beta_grid: list = field(default_factory=list)
    seed: int = 0
    label: str = None

    def __post_init__(self):
        try:
            self.kind = AttackKind(self.kind)
        except ValueError:
            raise ConfigurationError(
                f"Unknown attack kind '{self.kind}'; expected one of {[k.value for k in AttackKind]}"
            ) from None
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind in ITERATIVE_KINDS and not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0 for {self.kind.value}, got {self.alpha}")
        if self.n_iters is None:
            self.n_iters = default_iterations(self.epsilon, self.alpha) if self.alpha > 0 else 1
        if self.n_iters < 1:
            raise ConfigurationError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.beta_recon < 0:
            raise ConfigurationError(f"beta_recon must be >= 0, got {self.beta_recon}")
        self.cw_bounds = tuple(self.cw_bounds)
        if self.label is None:
            self.label = self.kind.value

    def to_dict(self):
        data = asdict(self)
        data["kind"] = self.kind.value
        data["cw_bounds"] = list(self.cw_bounds)
        return data


def project(candidate, origin, epsilon):
    """Clips into the epsilon L-infinity ball around ``origin`` intersected with [0, 1]."""
    lower = np.maximum(origin - epsilon, 0.0)
    upper = np.minimum(origin + epsilon, 1.0)
    return np.clip(candidate, lower, upper).astype(np.float32)


class AdversarialAttacker:
    """
    Generates adversarial images for one classifier (and optionally one DAE).

    All gradients are taken with the models frozen in eval mode, so batch-norm
    uses running statistics and the attacks are well defined per example.
    """

    def __init__(self, classifier, dae=None):
        self.classifier = classifier
        self.dae = dae

    def generate(self, x, y, spec, seed=None):
        """
        Dispatches on ``spec.kind``.

        Args:
            x (Tensor): Clean images [N, C, H, W] in [0, 1].
            y (np.ndarray): True labels [N].
            spec (AttackSpec): Attack configuration.
            seed (int | tuple | None): Overrides ``spec.seed`` for the random kinds.

        Returns:
            Tensor: Adversarial images, same shape, no graph attached.
        """
        handlers = {
            AttackKind.CLEAN: lambda: Tensor(x.data.copy()),
            AttackKind.RANDOM: lambda: self.attack_random(x, spec, seed),
            AttackKind.FGSM: lambda: self.attack_fgsm(x, y, spec),
            AttackKind.RFGSM: lambda: self.attack_rfgsm(x, y, spec, seed),
            AttackKind.BIM: lambda: self.attack_bim(x, y, spec),
            AttackKind.CW: lambda: self.attack_cw(x, y, spec),
            AttackKind.COUNTER_A: lambda: self.attack_counter_a(x, y, spec),
            AttackKind.COUNTER_B: lambda: self.attack_counter_b(x, y, spec),
        }
        return handlers[spec.kind]()

    def _require_dae(self, kind):
        if self.dae is None:
            raise ConfigurationError(f"{kind} needs the DAE; construct AdversarialAttacker with dae=")

    def _input_gradient(self, images, objective):
        """Gradient of ``objective(Tensor)`` with respect to the images, models frozen."""
        models = [self.classifier] + ([self.dae] if self.dae is not None else [])
        with frozen(*models):
            x = Tensor(images, requires_grad=True)
            objective(x).backward()
        return x.grad

    def _classifier_loss(self, y):
        return lambda x: cross_entropy(self.classifier(x), y)

    def attack_random(self, x, spec, seed=None):
        """Adds U(-epsilon, epsilon) noise to every pixel, then clips to [0, 1]."""
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        noise = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape).astype(np.float32)
        return Tensor(project(x.data + noise, x.data, spec.epsilon))

    def attack_fgsm(self, x, y, spec):
        """One signed-gradient step of size epsilon."""
        grad = self._input_gradient(x.data, self._classifier_loss(y))
        return Tensor(project(x.data + spec.epsilon * np.sign(grad), x.data, spec.epsilon))

    def attack_rfgsm(self, x, y, spec, seed=None):
        """Random start within epsilon/2, then an FGSM step of epsilon/2."""
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        half = spec.epsilon / 2.0
        start = project(x.data + rng.uniform(-half, half, size=x.shape).astype(np.float32), x.data, spec.epsilon)
        grad = self._input_gradient(start, self._classifier_loss(y))
        return Tensor(project(start + half * np.sign(grad), x.data, spec.epsilon))

    def _iterate_sign_steps(self, x, spec, objective):
        adversarial = x.data.copy()
        for step in range(spec.n_iters):
            grad = self._input_gradient(adversarial, objective)
            adversarial = project(adversarial + spec.alpha * np.sign(grad), x.data, spec.epsilon)
            logging.debug(f"{spec.label} step {step + 1}/{spec.n_iters}")
        return Tensor(adversarial)

    def attack_bim(self, x, y, spec):
        """Iterated FGSM with step alpha, projected each step."""
        return self._iterate_sign_steps(x, spec, self._classifier_loss(y))

    def attack_counter_a(self, x, y, spec):
        """BIM through the end-to-end DAE -> classifier pipeline."""
        self._require_dae(spec.kind.value)
        return self._iterate_sign_steps(x, spec, lambda t: cross_entropy(self.classifier(self.dae(t)), y))

    def attack_counter_b(self, x, y, spec):
        """
        BIM on the classifier loss minus a weighted reconstruction penalty.

        Ascending J(x, y) - beta * mean((x - dae(x))^2) raises the classifier
        loss while holding the reconstruction error near clean levels. beta = 0
        is plain BIM.
        """
        self._require_dae(spec.kind.value)
        beta = spec.beta_recon

        def objective(t):
            loss = cross_entropy(self.classifier(t), y)
            penalty = ops.mean(ops.square(t - self.dae(t)))
            return loss - penalty * beta

        return self._iterate_sign_steps(x, spec, objective)

    def attack_cw(self, x, y, spec):
        """
        Carlini-Wagner L2 with a margin surrogate, binary search on c, then
        projection to the epsilon L-infinity ball.

        The box constraint is handled by optimising w with x_adv = (tanh(w) + 1) / 2.
        Each example keeps its smallest-L2 misclassifying iterate; examples the
        search never flips keep the iterate with the lowest margin.
        """
        origin = x.data
        labels = np.asarray(y, dtype=np.int64)
        n = origin.shape[0]
        num_classes = self.classifier.num_classes
        one_hot = np.eye(num_classes, dtype=np.float32)[labels]

        predictions = self.classifier.predict(origin)
        done = predictions != labels
        best = origin.copy()
        best_l2 = np.full(n, np.inf)
        best_margin = np.full(n, np.inf)

        lower = np.full(n, spec.cw_bounds[0])
        upper = np.full(n, spec.cw_bounds[1])
        c = np.clip(np.full(n, spec.cw_c), lower, upper)
        w_start = np.arctanh(np.clip(origin * 2.0 - 1.0, -1 + 1e-6, 1 - 1e-6)).astype(np.float32)

        with frozen(self.classifier):
            for search_step in range(spec.cw_search_steps):
                w = Tensor(w_start.copy(), requires_grad=True)
                optimizer = Adam([w], lr=spec.cw_lr)
                c_tensor = Tensor(c.astype(np.float32))
                succeeded = np.zeros(n, dtype=bool)
                for _ in range(spec.cw_steps):
                    adversarial = (ops.tanh(w) + 1.0) * 0.5
                    l2 = ops.sum(ops.square(adversarial - origin), axis=(1, 2, 3))
                    logits = self.classifier(adversarial)
                    true_logit = ops.sum(logits * one_hot, axis=1)
                    other_logit = ops.amax(logits - one_hot * 1e4, axis=1)
                    margin = true_logit - other_logit
                    loss = ops.sum(l2 + c_tensor * ops.relu(margin))
                    if not np.isfinite(loss.item()):
                        logging.warning("CW objective diverged; keeping the best iterate found")
                        break
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()

                    flipped = margin.data < 0
                    improved = flipped & (l2.data < best_l2) & ~done
                    best[improved] = adversarial.data[improved]
                    best_l2[improved] = l2.data[improved]
                    fallback = ~flipped & (best_l2 == np.inf) & (margin.data < best_margin) & ~done
                    best[fallback] = adversarial.data[fallback]
                    best_margin[fallback] = margin.data[fallback]
                    succeeded |= flipped

                upper = np.where(succeeded, np.minimum(upper, c), upper)
                lower = np.where(succeeded, lower, np.maximum(lower, c))
                c = np.sqrt(lower * upper)
                logging.debug(f"CW search step {search_step + 1}: {succeeded.sum()}/{n} flipped")

        best[done] = origin[done]
        return Tensor(project(best, origin, spec.epsilon))


def attack_random(x, spec):
    return AdversarialAttacker(None).attack_random(x, spec)


def attack_fgsm(x, y, classifier, spec):
    return AdversarialAttacker(classifier).attack_fgsm(x, y, spec)


def attack_rfgsm(x, y, classifier, spec):
    return AdversarialAttacker(classifier).attack_rfgsm(x, y, spec)


def attack_bim(x, y, classifier, spec):
    return AdversarialAttacker(classifier).attack_bim(x, y, spec)


def attack_cw(x, y, classifier, spec):
    return AdversarialAttacker(classifier).attack_cw(x, y, spec)


def attack_counter_a(x, y, classifier, dae, spec):
    return AdversarialAttacker(classifier, dae).attack_counter_a(x, y, spec)


def attack_counter_b(x, y, classifier, dae, spec):
    return AdversarialAttacker(classifier, dae).attack_counter_b(x, y, spec)
