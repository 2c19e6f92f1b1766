import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scripts import tensor_autodiff as ops
from scripts.attacks import (
    AdversarialAttacker,
    AttackKind,
    AttackSpec,
    attack_bim,
    attack_counter_b,
    attack_cw,
    attack_fgsm,
    default_iterations,
    project,
)
from scripts.exceptions import ConfigurationError
from scripts.nn_models import ClassifierModel, DaeModel, Linear
from scripts.tensor_autodiff import Tensor, cross_entropy, no_grad
from scripts.training import reconstruction_errors


class TinyClassifier(ClassifierModel):
    """Linear classifier on 4x4 single-channel images."""

    kind = "tiny"

    def __init__(self):
        super().__init__()
        self.fc = Linear(16, 10, rng=np.random.default_rng(0))

    def forward(self, x):
        return self.fc(ops.flatten(x))


@pytest.fixture
def tiny_classifier():
    return TinyClassifier().eval()


@pytest.fixture
def tiny_dae():
    return DaeModel(channels=1, depth=1, width=2, seed=0).eval()


def tiny_batch(seed, count=4):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(count, 1, 4, 4)).astype(np.float32)
    return Tensor(images), rng.integers(0, 10, size=count)


def test_default_iterations():
    assert default_iterations(0.1, 0.01) == 22
    assert AttackSpec("bim", epsilon=0.1, alpha=0.01).n_iters == 22
    assert AttackSpec("bim", epsilon=8 / 255, alpha=1 / 255).n_iters == 18


def test_project_clips_to_ball_and_box():
    origin = np.array([0.0, 0.5, 0.95], dtype=np.float32)
    out = project(np.array([-1.0, 0.9, 2.0]), origin, 0.1)
    np.testing.assert_allclose(out, [0.0, 0.6, 1.0], rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(
    kind=st.sampled_from(["random", "fgsm", "rfgsm", "bim", "counter_a", "counter_b"]),
    epsilon=st.floats(min_value=0.0, max_value=0.3),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_attacks_stay_in_ball_and_box(kind, epsilon, seed):
    x, y = tiny_batch(seed)
    spec = AttackSpec(kind, epsilon=epsilon, alpha=0.05, n_iters=3, seed=seed)
    attacker = AdversarialAttacker(TinyClassifier().eval(), DaeModel(channels=1, depth=1, width=2).eval())
    adversarial = attacker.generate(x, y, spec).data
    assert adversarial.shape == x.shape
    assert adversarial.min() >= 0.0 and adversarial.max() <= 1.0
    assert np.abs(adversarial.astype(np.float64) - x.data).max() <= epsilon + 1e-6


@pytest.mark.parametrize("kind", ["random", "fgsm", "rfgsm", "bim", "cw", "counter_a", "counter_b"])
def test_zero_budget_is_identity(tiny_classifier, tiny_dae, kind):
    x, y = tiny_batch(1)
    adversarial = AdversarialAttacker(tiny_classifier, tiny_dae).generate(x, y, AttackSpec(kind, epsilon=0.0))
    np.testing.assert_array_equal(adversarial.data, x.data)


def test_clean_attack_copies(tiny_classifier):
    x, y = tiny_batch(2)
    out = AdversarialAttacker(tiny_classifier).generate(x, y, AttackSpec(AttackKind.CLEAN))
    np.testing.assert_array_equal(out.data, x.data)
    assert out.data is not x.data


def test_fgsm_does_not_lower_linear_model_loss(tiny_classifier):
    x, y = tiny_batch(3, count=8)
    adversarial = attack_fgsm(x, y, tiny_classifier, AttackSpec("fgsm", epsilon=0.1))
    with no_grad():
        clean_loss = cross_entropy(tiny_classifier(x), y).item()
        adversarial_loss = cross_entropy(tiny_classifier(adversarial), y).item()
    assert adversarial_loss >= clean_loss - 1e-6


def test_counter_b_without_penalty_matches_bim(tiny_classifier, tiny_dae):
    x, y = tiny_batch(4)
    bim = attack_bim(x, y, tiny_classifier, AttackSpec("bim", epsilon=0.1, alpha=0.01))
    counter = attack_counter_b(x, y, tiny_classifier, tiny_dae, AttackSpec("counter_b", epsilon=0.1, alpha=0.01, beta_recon=0.0))
    np.testing.assert_array_equal(counter.data, bim.data)


@pytest.mark.parametrize("kind", ["random", "rfgsm"])
def test_random_kinds_are_seeded(tiny_classifier, kind):
    x, y = tiny_batch(8)
    attacker = AdversarialAttacker(tiny_classifier)
    first = attacker.generate(x, y, AttackSpec(kind, epsilon=0.1, seed=11)).data
    again = attacker.generate(x, y, AttackSpec(kind, epsilon=0.1, seed=11)).data
    other = attacker.generate(x, y, AttackSpec(kind, epsilon=0.1, seed=12)).data
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)


def test_seed_override_replaces_spec_seed(tiny_classifier):
    x, y = tiny_batch(9)
    attacker = AdversarialAttacker(tiny_classifier)
    spec = AttackSpec("random", epsilon=0.1, seed=11)
    overridden = attacker.generate(x, y, spec, seed=(3, 11, 0)).data
    np.testing.assert_array_equal(overridden, attacker.generate(x, y, spec, seed=(3, 11, 0)).data)
    assert not np.array_equal(overridden, attacker.generate(x, y, spec).data)


def test_counter_b_keeps_reconstruction_error_below_bim(tiny_classifier, tiny_dae):
    x, y = tiny_batch(10, count=8)
    bim = attack_bim(x, y, tiny_classifier, AttackSpec("bim", epsilon=0.1, alpha=0.01))
    counter = attack_counter_b(
        x, y, tiny_classifier, tiny_dae, AttackSpec("counter_b", epsilon=0.1, alpha=0.01, beta_recon=1e4)
    )
    bim_error = reconstruction_errors(tiny_dae, bim.data).mean()
    counter_error = reconstruction_errors(tiny_dae, counter.data).mean()
    assert counter_error < bim_error


def test_counter_attacks_need_the_dae(tiny_classifier):
    x, y = tiny_batch(5)
    with pytest.raises(ConfigurationError, match="DAE"):
        AdversarialAttacker(tiny_classifier).generate(x, y, AttackSpec("counter_a"))


def test_cw_leaves_misclassified_inputs_alone(tiny_classifier):
    x, _ = tiny_batch(6)
    wrong = (tiny_classifier.predict(x.data) + 1) % 10
    spec = AttackSpec("cw", epsilon=0.1, cw_steps=3, cw_search_steps=2)
    np.testing.assert_array_equal(attack_cw(x, wrong, tiny_classifier, spec).data, x.data)


def test_cw_respects_budget(tiny_classifier):
    x, _ = tiny_batch(7)
    labels = tiny_classifier.predict(x.data)
    spec = AttackSpec("cw", epsilon=0.05, cw_steps=5, cw_search_steps=2, cw_lr=0.1)
    adversarial = attack_cw(x, labels, tiny_classifier, spec).data
    assert np.abs(adversarial.astype(np.float64) - x.data).max() <= 0.05 + 1e-6
    assert adversarial.min() >= 0.0 and adversarial.max() <= 1.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "bim", "epsilon": -0.1},
        {"kind": "bim", "alpha": 0.0},
        {"kind": "bim", "n_iters": 0},
        {"kind": "counter_b", "beta_recon": -1.0},
    ],
)
def test_attack_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        AttackSpec(**kwargs)


def test_attack_spec_to_dict_is_plain():
    data = AttackSpec("cw", label="cw-strong").to_dict()
    assert data["kind"] == "cw"
    assert data["cw_bounds"] == [1e-3, 10.0]
    assert data["label"] == "cw-strong"


def test_unknown_attack_kind():
    with pytest.raises(ConfigurationError, match="Unknown attack kind"):
        AttackSpec("pgd-l2")
