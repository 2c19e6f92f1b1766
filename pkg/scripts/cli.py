"""
Command-line interface of the purification lab.

    python -m scripts.cli train-classifier --dataset mnist --out models/mnist_classifier.ckpt
    python -m scripts.cli train-dae --dataset mnist --out models/mnist_dae.ckpt
    python -m scripts.cli fit-stats --dataset mnist --dae models/mnist_dae.ckpt --out models/mnist_stats.txt
    python -m scripts.cli eval --config configs/mnist.yaml
"""

import logging
import sys
from pathlib import Path

import click
import numpy as np

from scripts.artifacts import file_fingerprint, load_tensor_dump, save_tensor_dump
from scripts.attacks import AdversarialAttacker, AttackKind, AttackSpec
from scripts.config import configure_logging, dataset_defaults, resolve_data_dir
from scripts.data_loader import ImageDataLoader
from scripts.data_visualizer import DataVisualizer
from scripts.evaluation import ExperimentConfig, ExperimentRunner, ReportWriter, counter_attack_table, emit_report
from scripts.exceptions import ConfigurationError, LabError
from scripts.nn_models import ModelCheckpoint, build_classifier, build_dae
from scripts.purifier import Purifier, PurifySpec, PurifyVariant
from scripts.tensor_autodiff import Tensor
from scripts.training import NoiseSchedule, ReconStats, Trainer

DATASETS = click.Choice(["mnist", "cifar10"])


def _load_split(dataset, data_dir, split):
    train, test = ImageDataLoader(resolve_data_dir(data_dir)).load(dataset)
    return train if split == "train" else test


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log per-iteration detail.")
@click.option("--quiet", "-q", is_flag=True, help="Only log warnings and errors.")
def cli(verbose, quiet):
    """Train, attack, purify and evaluate."""
    configure_logging(verbose=verbose, quiet=quiet)


@cli.command("train-dae")
@click.option("--dataset", type=DATASETS, required=True)
@click.option("--data-dir", default=None, help="Dataset root (falls back to PURIFYLAB_DATA_DIR).")
@click.option("--epochs", type=int, default=None)
@click.option("--sigma-max", type=float, default=None, help="Upper bound of the per-image noise level.")
@click.option("--depth", type=int, default=None, help="Blocks per side of the autoencoder.")
@click.option("--no-skip", is_flag=True, help="Train without skip connections.")
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--plot", type=click.Path(dir_okay=False), default=None, help="Save the loss curves here.")
def train_dae_command(dataset, data_dir, epochs, sigma_max, depth, no_skip, batch_size, lr, seed, out, plot):
    """Train the denoising autoencoder on clean training images."""
    defaults = dataset_defaults(dataset)
    train = _load_split(dataset, data_dir, "train")
    overrides = {"skip_connections": not no_skip}
    if depth is not None:
        overrides["depth"] = depth
    model = build_dae(dataset, seed=seed, **overrides)
    trainer = Trainer(batch_size=batch_size or defaults["batch_size"], learning_rate=lr or defaults["learning_rate"])
    schedule = NoiseSchedule(sigma_max or defaults["sigma_max"])
    trainer.train_dae(model, train, schedule, epochs or defaults["dae_epochs"], seed)
    ModelCheckpoint.save(model, out)
    logging.info(f"Saved DAE to {out}")
    if plot:
        DataVisualizer.plot_training_history(trainer.history, plot, title=f"{dataset} DAE")


@cli.command("train-classifier")
@click.option("--dataset", type=DATASETS, required=True)
@click.option("--data-dir", default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--plot", type=click.Path(dir_okay=False), default=None)
def train_classifier_command(dataset, data_dir, epochs, batch_size, lr, seed, out, plot):
    """Train the target classifier and report its test accuracy."""
    defaults = dataset_defaults(dataset)
    train, test = ImageDataLoader(resolve_data_dir(data_dir)).load(dataset)
    model = build_classifier(dataset, seed=seed)
    trainer = Trainer(batch_size=batch_size or defaults["batch_size"], learning_rate=lr or defaults["learning_rate"])
    trainer.train_classifier(model, train, epochs or defaults["classifier_epochs"], seed, test=test)
    ModelCheckpoint.save(model, out)
    logging.info(f"Saved classifier to {out} (test accuracy {trainer.accuracy(model, test):.4f})")
    if plot:
        DataVisualizer.plot_training_history(trainer.history, plot, title=f"{dataset} classifier")


@cli.command("fit-stats")
@click.option("--dataset", type=DATASETS, required=True)
@click.option("--data-dir", default=None)
@click.option("--dae", "dae_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--limit", type=int, default=None, help="Fit on a seeded subset of this many training images.")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def fit_stats_command(dataset, data_dir, dae_path, limit, seed, out):
    """Fit the clean reconstruction-error statistics of a trained DAE."""
    dae = ModelCheckpoint.load(dae_path, expected_kind="dae")
    train = _load_split(dataset, data_dir, "train")
    if limit is not None:
        train = ImageDataLoader.subset(train, limit, seed)
    stats = Trainer.fit_recon_stats(dae, train, fingerprint=file_fingerprint(dae_path))
    stats.save(out)


@cli.command("attack")
@click.option("--kind", type=click.Choice([k.value for k in AttackKind]), required=True)
@click.option("--eps", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--beta", type=float, default=1.0, help="Reconstruction penalty weight (counter_b).")
@click.option("--seed", type=int, default=0)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dae", "dae_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--dataset", type=DATASETS, required=True)
@click.option("--data-dir", default=None)
@click.option("--in", "in_path", type=click.Path(), default=None, help="Tensor dump to attack instead of the test set.")
@click.option("--subset", "subset_size", type=int, default=1000)
@click.option("--out", type=click.Path(), required=True)
def attack_command(kind, eps, alpha, iters, beta, seed, model_path, dae_path, dataset, data_dir, in_path, subset_size, out):
    """Generate adversarial images and save them as a tensor dump."""
    defaults = dataset_defaults(dataset)
    spec = AttackSpec(
        kind=kind,
        epsilon=defaults["epsilon"] if eps is None else eps,
        alpha=defaults["attack_alpha"] if alpha is None else alpha,
        n_iters=iters,
        beta_recon=beta,
        seed=seed,
    )
    classifier = ModelCheckpoint.load(model_path)
    dae = ModelCheckpoint.load(dae_path, expected_kind="dae") if dae_path else None
    if in_path:
        images, labels, _ = load_tensor_dump(in_path)
        if labels is None:
            raise ConfigurationError(f"{in_path} has no labels; attacks need the true labels")
    else:
        test = ImageDataLoader.subset(_load_split(dataset, data_dir, "test"), subset_size, seed)
        images, labels = test.images, test.labels
    adversarial = AdversarialAttacker(classifier, dae).generate(Tensor(images), labels, spec)
    accuracy = float(np.mean(classifier.predict(adversarial) == labels))
    logging.info(f"{spec.kind.value} (eps={spec.epsilon}): undefended accuracy {accuracy:.4f}")
    save_tensor_dump(adversarial, out, labels=labels, **spec.to_dict())


@cli.command("purify")
@click.option("--variant", type=click.Choice([v.value for v in PurifyVariant]), required=True)
@click.option("--iters", type=int, default=15)
@click.option("--alpha", type=float, default=0.01)
@click.option("--beta", type=float, default=0.9)
@click.option("--gamma", type=float, default=0.02)
@click.option("--use-adam", is_flag=True)
@click.option("--seed", type=int, default=0)
@click.option("--dae", "dae_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--stats", "stats_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--classifier", "classifier_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Report the accuracy of the purified images.")
@click.option("--in", "in_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
def purify_command(variant, iters, alpha, beta, gamma, use_adam, seed, dae_path, stats_path, classifier_path, in_path, out):
    """Purify a tensor dump."""
    stats = ReconStats.load(stats_path) if stats_path else None
    spec = PurifySpec(variant, n_iters=iters, alpha=alpha, beta=beta, gamma=gamma, stats=stats, use_adam=use_adam, seed=seed)
    dae = ModelCheckpoint.load(dae_path, expected_kind="dae")
    images, labels, _ = load_tensor_dump(in_path)
    purifier = Purifier(dae)
    purified = purifier.purify_many(images, spec)
    logging.info(
        f"Variant {spec.variant.value}: mean reconstruction error "
        f"{purifier.recon_scalar(images):.6g} -> {purifier.recon_scalar(purified):.6g}"
    )
    if classifier_path and labels is not None:
        classifier = ModelCheckpoint.load(classifier_path)
        logging.info(f"Accuracy after purification: {np.mean(classifier.predict(purified) == labels):.4f}")
    save_tensor_dump(purified, out, labels=labels, **spec.to_dict())


@cli.command("eval")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--data-dir", default=None, help="Overrides data_dir from the config.")
@click.option("--workers", type=int, default=None, help="Overrides workers from the config.")
@click.option("--format", "formats", type=click.Choice(["text", "csv"]), multiple=True, default=["text", "csv"])
@click.option("--histograms", is_flag=True, help="Also emit reconstruction-error histograms for the first attack.")
def eval_command(config_path, data_dir, workers, formats, histograms):
    """Run the attack x defense grid of an experiment config."""
    config = ExperimentConfig.from_yaml(config_path)
    if data_dir:
        config.data_dir = data_dir
    if workers:
        config.workers = workers
    runner = ExperimentRunner(config)
    report = runner.run_experiment()
    writer = ReportWriter(config.output_dir)
    for fmt in formats:
        writer.emit_report(report, fmt)
    DataVisualizer.plot_accuracy_grid(report.grid, Path(config.output_dir) / "report.png", title=f"{config.dataset} accuracy")
    click.echo(report.to_text())

    if histograms and config.attacks:
        runner.emit_recon_histograms(writer)


@cli.command("report")
@click.argument("reports", nargs=-1, required=True)
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None)
@click.option("--counter-table", is_flag=True, help="Summarise counter-attack rows across reports.")
def report_command(reports, fmt, output_dir, counter_table):
    """
    Re-render saved CSV reports. Each argument is a CSV path, optionally
    prefixed by a name, e.g. mnist=results/mnist/report.csv.
    """
    loaded = {}
    for item in reports:
        name, _, path = item.rpartition("=")
        loaded[name or Path(path).parent.name] = ReportWriter.read_report(path)
    if counter_table:
        click.echo(counter_attack_table(loaded).to_string())
        return
    for name, report in loaded.items():
        if output_dir:
            emit_report(report, fmt, Path(output_dir) / name)
        click.echo(f"[{name}]\n{report.to_text()}")


def main(argv=None):
    """Entry point; returns the process exit code."""
    try:
        cli.main(args=argv, prog_name="purifylab", standalone_mode=False)
    except LabError as exc:
        logging.error(str(exc))
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
