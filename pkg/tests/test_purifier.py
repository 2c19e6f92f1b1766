import numpy as np
import pytest

from scripts.exceptions import ConfigurationError, DimensionError
from scripts.purifier import (
    PurifySpec,
    PurifyVariant,
    Purifier,
    random_transform,
    variable_step_size,
)
from scripts.tensor_autodiff import Tensor
from scripts.training import ReconStats, reconstruction_errors


@pytest.fixture
def purifier(small_dae):
    return Purifier(small_dae)


def test_recon_error_is_elementwise(purifier, digit_images):
    errors = purifier.recon_error(Tensor(digit_images.images))
    assert errors.shape == digit_images.images.shape
    assert purifier.recon_scalar(digit_images.images) == pytest.approx(float(errors.data.mean()), rel=1e-5)


def test_direct_returns_dae_output(purifier, small_dae, digit_images):
    purified, trace = purifier.purify(Tensor(digit_images.images), PurifySpec("direct"))
    assert len(trace) == 2
    np.testing.assert_array_equal(purified.data, purifier.purify_direct(digit_images.images).data)


@pytest.mark.parametrize("n_iters", [1, 4])
def test_trace_has_one_row_per_step_plus_start(purifier, digit_images, n_iters):
    _, trace = purifier.purify(Tensor(digit_images.images), PurifySpec("B", n_iters=n_iters))
    assert trace.recon_errors.shape == (n_iters + 1, 6)
    np.testing.assert_allclose(trace.recon_errors[0], reconstruction_errors(purifier.dae, digit_images.images), rtol=1e-5)


def test_variant_a_is_b_without_momentum(purifier, digit_images):
    x = Tensor(digit_images.images)
    a, _ = purifier.purify(x, PurifySpec("A", n_iters=3, alpha=0.05, beta=0.7))
    b, _ = purifier.purify(x, PurifySpec("B", n_iters=3, alpha=0.05, beta=0.0))
    np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("variant", ["A", "B", "C", "D", "E", "F"])
@pytest.mark.parametrize("use_adam", [False, True])
def test_zero_step_is_identity(purifier, digit_images, stats, variant, use_adam):
    spec = PurifySpec(variant, n_iters=2, alpha=0.0, stats=stats, use_adam=use_adam)
    purified, _ = purifier.purify(Tensor(digit_images.images), spec)
    np.testing.assert_array_equal(purified.data, digit_images.images)


@pytest.mark.parametrize("variant", ["E", "F"])
def test_hinge_variants_ignore_images_below_mean(purifier, digit_images, variant):
    spec = PurifySpec(variant, n_iters=3, alpha=0.5, stats=ReconStats(mu=10.0, sigma=1.0))
    purified, _ = purifier.purify(Tensor(digit_images.images), spec)
    np.testing.assert_array_equal(purified.data, digit_images.images)


@pytest.mark.parametrize("relative_margin", [0.0, 1e-8])
@pytest.mark.parametrize("use_adam", [False, True])
def test_hinge_variant_keeps_images_at_the_mean(purifier, small_dae, relative_margin, use_adam):
    images = np.random.default_rng(21).uniform(size=(20, 1, 1, 28, 28)).astype(np.float32)
    for image in images:
        mu = float(reconstruction_errors(small_dae, image)[0]) * (1.0 + relative_margin)
        spec = PurifySpec("E", n_iters=2, alpha=0.5, stats=ReconStats(mu=mu, sigma=0.01), use_adam=use_adam)
        purified, _ = purifier.purify(Tensor(image), spec)
        np.testing.assert_array_equal(purified.data, image)


def test_absolute_variant_rests_exactly_at_the_mean(purifier, small_dae):
    image = np.random.default_rng(22).uniform(size=(1, 1, 28, 28)).astype(np.float32)
    mu = float(reconstruction_errors(small_dae, image)[0])
    spec = PurifySpec("D", n_iters=2, alpha=0.5, stats=ReconStats(mu=mu, sigma=0.01))
    purified, _ = purifier.purify(Tensor(image), spec)
    np.testing.assert_array_equal(purified.data, image)


@pytest.mark.parametrize("variant", ["A", "B", "C", "D", "E", "F", "G"])
def test_output_stays_in_unit_box(purifier, digit_images, stats, variant):
    spec = PurifySpec(variant, n_iters=3, alpha=5.0, stats=stats)
    purified, trace = purifier.purify(Tensor(digit_images.images), spec)
    assert purified.shape == digit_images.images.shape
    assert purified.data.min() >= 0.0 and purified.data.max() <= 1.0
    np.testing.assert_array_equal(trace.final, purified.data)


def test_gradient_steps_lower_reconstruction_error(purifier, digit_images):
    _, trace = purifier.purify(Tensor(digit_images.images), PurifySpec("A", n_iters=5, alpha=1e-3))
    assert trace.mean_errors[-1] < trace.mean_errors[0]


@pytest.mark.parametrize("variant", ["C", "D", "E", "F", "G"])
def test_stats_variants_need_stats(purifier, digit_images, variant):
    with pytest.raises(ConfigurationError, match="stats"):
        purifier.purify(Tensor(digit_images.images), PurifySpec(variant))


def test_purify_rejects_flat_input(purifier):
    with pytest.raises(DimensionError):
        purifier.purify(Tensor(np.zeros((2, 784))), PurifySpec("A"))


def test_seeded_variants_are_reproducible(purifier, digit_images, stats):
    spec = PurifySpec("F", n_iters=2, stats=stats, seed=3)
    first, _ = purifier.purify(Tensor(digit_images.images), spec)
    second, _ = purifier.purify(Tensor(digit_images.images), spec)
    np.testing.assert_array_equal(first.data, second.data)


def test_variable_step_size_limits():
    stats = ReconStats(mu=0.05, sigma=0.01)
    steps = variable_step_size([0.05, 0.06, 1.0], alpha=0.2, stats=stats)
    assert steps[0] == 0.0
    assert steps[1] == pytest.approx(0.2 * (1.0 - np.exp(-1.0)))
    assert steps[2] == pytest.approx(0.2)


def test_random_transform_identity_range(digit_images):
    rng = np.random.default_rng(0)
    out = random_transform(digit_images.images, (1.0, 1.0), (0.0, 0.0), rng)
    np.testing.assert_allclose(out, digit_images.images, atol=1e-6)


def test_random_transform_keeps_shape(digit_images):
    out = random_transform(digit_images.images, (0.8, 1.2), (-30.0, 30.0), np.random.default_rng(1))
    assert out.shape == digit_images.images.shape
    assert out.dtype == np.float32


def test_classify_purified_composes(purifier, classifier, digit_images):
    spec = PurifySpec("A", n_iters=2, seed=5)
    purified, _ = purifier.purify(Tensor(digit_images.images), spec, seed=(5, 0))
    expected = classifier.predict(purified.data)
    np.testing.assert_array_equal(purifier.classify_purified(classifier, digit_images, spec), expected)


def test_purify_many_matches_batched_calls(purifier, digit_images, stats):
    spec = PurifySpec("G", n_iters=1, stats=stats, seed=2)
    together = purifier.purify_many(digit_images, spec, batch_size=4)
    first, _ = purifier.purify(Tensor(digit_images.images[:4]), spec, seed=(2, 0))
    second, _ = purifier.purify(Tensor(digit_images.images[4:]), spec, seed=(2, 1))
    np.testing.assert_array_equal(together, np.concatenate([first.data, second.data]))


def test_purify_many_mixes_in_the_experiment_seed(purifier, digit_images):
    spec = PurifySpec("F", n_iters=1, stats=ReconStats(mu=0.0, sigma=0.01), seed=2)
    seeded = purifier.purify_many(digit_images, spec, batch_size=6, base_seed=7)
    expected, _ = purifier.purify(Tensor(digit_images.images), spec, seed=(7, 2, 0))
    np.testing.assert_array_equal(seeded, expected.data)
    assert not np.array_equal(seeded, purifier.purify_many(digit_images, spec, batch_size=6, base_seed=8))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_iters": 0},
        {"alpha": -0.1},
        {"beta": 1.0},
        {"gamma": -1.0},
        {"resize_factor": (1.2, 0.8)},
    ],
)
def test_purify_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        PurifySpec(PurifyVariant.B, **kwargs)


def test_purify_spec_labels_and_dict(stats):
    assert PurifySpec("direct").label == "direct"
    spec = PurifySpec("E", stats=stats)
    assert spec.label == "purify-E"
    assert spec.to_dict()["stats"] == {"mu": 0.05, "sigma": 0.01}
    assert PurifySpec("B").with_stats(stats).stats is stats


def test_unknown_variant():
    with pytest.raises(ConfigurationError, match="variant"):
        PurifySpec("Z")
