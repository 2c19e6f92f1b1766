import numpy as np
import pytest
from scipy import stats as scipy_stats

from scripts.data_loader import LabeledImageSet
from scripts.exceptions import ConfigurationError, DegenerateStatsError, DivergenceError
from scripts.nn_models import DaeModel
from scripts.tensor_autodiff import Tensor, cross_entropy, no_grad
from scripts.training import (
    Adam,
    NoiseSchedule,
    ReconStats,
    Trainer,
    reconstruction_errors,
)


def test_adam_first_step_moves_by_learning_rate():
    param = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    optimizer = Adam([param], lr=0.1)
    (param * param).sum().backward()
    optimizer.step()
    np.testing.assert_allclose(param.data, [0.9, -1.9], atol=1e-6)
    assert optimizer.state.step_count == 1


def test_adam_skips_parameters_without_gradient():
    param = Tensor(np.array([1.0]), requires_grad=True)
    Adam([param], lr=0.1).step()
    np.testing.assert_array_equal(param.data, [1.0])


def test_noise_schedule_needs_positive_sigma():
    with pytest.raises(ConfigurationError):
        NoiseSchedule(0.0)


def test_recon_stats_use_population_std():
    stats = ReconStats.from_errors([1.0, 2.0, 3.0, 4.0])
    assert stats.mu == pytest.approx(2.5)
    assert stats.sigma == pytest.approx(np.sqrt(1.25))


def test_recon_stats_reject_zero_spread():
    with pytest.raises(DegenerateStatsError):
        ReconStats.from_errors([0.25, 0.25, 0.25])


def test_recon_stats_file_round_trip(tmp_path):
    original = ReconStats(mu=0.0123456789, sigma=0.00456, fingerprint="abc")
    assert ReconStats.load(original.save(tmp_path / "stats.txt")) == original


def test_recon_stats_malformed_file(tmp_path):
    path = tmp_path / "stats.txt"
    path.write_text("mu=0.1\n")
    with pytest.raises(ConfigurationError, match="Malformed"):
        ReconStats.load(path)
    with pytest.raises(ConfigurationError):
        ReconStats.load(tmp_path / "absent.txt")


def test_reconstruction_errors_per_image(small_dae, digit_images):
    errors = reconstruction_errors(small_dae, digit_images.images, batch_size=4)
    assert errors.shape == (6,)
    assert errors.dtype == np.float64
    assert np.all(errors >= 0.0)


def test_fit_recon_stats_matches_errors(small_dae, digit_images):
    stats = Trainer.fit_recon_stats(small_dae, digit_images, fingerprint="digits")
    errors = reconstruction_errors(small_dae, digit_images.images)
    assert stats.mu == pytest.approx(errors.mean())
    assert stats.fingerprint == "digits"


def test_train_dae_records_history(small_dae, digit_images):
    trainer = Trainer(batch_size=3, show_progress=False)
    model = trainer.train_dae(small_dae, digit_images, NoiseSchedule(0.3), epochs=1, seed=0, validation=digit_images)
    assert not model.training
    assert len(trainer.history) == 1
    assert np.isfinite(trainer.history[0]["train_loss"])
    assert np.isfinite(trainer.history[0]["val_loss"])


def test_train_classifier_reports_accuracy(classifier, digit_images):
    trainer = Trainer(batch_size=3, show_progress=False)
    trainer.train_classifier(classifier, digit_images, epochs=1, seed=0, test=digit_images)
    assert 0.0 <= trainer.history[0]["test_accuracy"] <= 1.0


def test_train_classifier_detects_divergence(monkeypatch, classifier, digit_images):
    monkeypatch.setattr("scripts.training.cross_entropy", lambda logits, labels: Tensor(np.array(np.nan)))
    with pytest.raises(DivergenceError):
        Trainer(batch_size=3, show_progress=False).train_classifier(classifier, digit_images, epochs=1, seed=0)


def test_adam_zero_gradient_leaves_parameters():
    param = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    optimizer = Adam([param], lr=0.1)
    for _ in range(3):
        param.grad = np.zeros(2, dtype=np.float32)
        optimizer.step()
    np.testing.assert_array_equal(param.data, np.array([0.5, -1.5], dtype=np.float32))


def test_adam_minimises_a_quadratic():
    param = Tensor(np.array([0.0]), requires_grad=True)
    optimizer = Adam([param], lr=0.1)
    for _ in range(500):
        optimizer.zero_grad()
        ((param - 3.0) * (param - 3.0)).sum().backward()
        optimizer.step()
    assert param.data[0] == pytest.approx(3.0, abs=1e-2)


def test_noise_schedule_ks_statistic():
    samples = NoiseSchedule(0.5).sample(np.random.default_rng(1), 10_000)
    assert samples.min() >= 0.0 and samples.max() <= 0.5
    assert scipy_stats.kstest(samples, "uniform", args=(0.0, 0.5)).statistic < 0.02


def test_train_dae_is_deterministic(digit_images):
    def run():
        model = DaeModel(channels=1, depth=2, width=4, seed=1)
        Trainer(batch_size=3, show_progress=False).train_dae(
            model, digit_images, NoiseSchedule(0.3), epochs=2, seed=1, validation=digit_images
        )
        return model.state_dict()

    first, second = run(), run()
    assert first.keys() == second.keys()
    for name in first:
        np.testing.assert_array_equal(first[name], second[name], err_msg=name)


def test_classifier_step_lowers_single_example_loss(classifier, digit_images):
    example = LabeledImageSet(digit_images.images[:1], digit_images.labels[:1], "one")

    def loss():
        with no_grad():
            return cross_entropy(classifier(Tensor(example.images)), example.labels).item()

    before = loss()
    Trainer(batch_size=1, learning_rate=1e-4, show_progress=False).train_classifier(classifier, example, epochs=1, seed=0)
    assert loss() < before
