"""
Experiment orchestration: attack a subset of the test set, run every defense
on each adversarial set and collect the accuracies into a report grid.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from sklearn.metrics import accuracy_score
from tqdm import tqdm

from scripts.artifacts import file_fingerprint, spec_fingerprint
from scripts.attacks import AdversarialAttacker, AttackKind, AttackSpec
from scripts.config import dataset_defaults, resolve_data_dir
from scripts.data_loader import ImageDataLoader
from scripts.data_visualizer import DataVisualizer
from scripts.exceptions import ConfigurationError
from scripts.nn_models import ModelCheckpoint
from scripts.purifier import STATS_VARIANTS, Purifier, PurifySpec, PurifyVariant
from scripts.tensor_autodiff import Tensor
from scripts.training import ReconStats


# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

NO_DEFENSE = "none"
DIRECT_DEFENSE = "direct"

_TOP_LEVEL_KEYS = {
    "dataset", "seed", "subset_size", "output_dir", "data_dir", "workers",
    "batch_size", "histogram_bins", "checkpoints", "attacks", "defenses",
}
_CHECKPOINT_KEYS = {"classifier", "dae", "stats"}
_ATTACK_KEYS = {f.name for f in fields(AttackSpec)}
_DEFENSE_KEYS = {f.name for f in fields(PurifySpec)} - {"stats"}


def _reject_unknown(section, mapping, allowed):
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"{section} must be a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigurationError(f"Unknown key(s) {unknown} in {section}; allowed: {sorted(allowed)}")


@dataclass
class ExperimentConfig:
    """
    Everything needed to reproduce one accuracy grid.

    Attributes:
        dataset (str): "mnist" or "cifar10".
        classifier_checkpoint (Path): Target classifier checkpoint.
        dae_checkpoint (Path): DAE checkpoint.
        stats_path (Path | None): ReconStats file, required when a defense uses variants C-G.
        attacks (list[AttackSpec]): Grid rows, in order.
        defenses (list[PurifySpec]): Purification columns after the "none" and "direct" baselines.
        subset_size (int): Test images evaluated.
        seed (int): Seed of the subset selection.
        output_dir (Path): Where reports and histograms go.
        data_dir (str | None): Dataset root; falls back to the environment variable.
        workers (int): Attack rows evaluated concurrently.
        batch_size (int): Images per attack/purify call.
        histogram_bins (int): Bins of the reconstruction-error histograms.
    """

    dataset: str
    classifier_checkpoint: Path
    dae_checkpoint: Path
    stats_path: Path = None
    attacks: list = field(default_factory=list)
    defenses: list = field(default_factory=list)
    subset_size: int = 1000
    seed: int = 0
    output_dir: Path = Path("results")
    data_dir: str = None
    workers: int = 1
    batch_size: int = 128
    histogram_bins: int = 30

    def __post_init__(self):
        dataset_defaults(self.dataset)
        if self.subset_size < 1:
            raise ConfigurationError(f"subset_size must be >= 1, got {self.subset_size}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        for kind, labels in (("attack", [a.label for a in self.attacks]), ("defense", self.column_labels)):
            duplicates = sorted({label for label in labels if labels.count(label) > 1})
            if duplicates:
                raise ConfigurationError(f"Duplicate {kind} label(s) {duplicates}")
        if self.stats_path is None and any(d.variant in STATS_VARIANTS for d in self.defenses):
            raise ConfigurationError("Defenses of variants C-G need checkpoints.stats")

    @property
    def column_labels(self):
        return [NO_DEFENSE, DIRECT_DEFENSE] + [d.label for d in self.defenses]

    @classmethod
    def from_dict(cls, mapping, check_files=True):
        """
        Builds a config from parsed YAML; unknown keys at any level are rejected.

        Attack and defense entries that omit epsilon/alpha or the purification
        hyperparameters take the dataset defaults.
        """
        _reject_unknown("experiment config", mapping, _TOP_LEVEL_KEYS)
        if "dataset" not in mapping or "checkpoints" not in mapping:
            raise ConfigurationError("Experiment config needs 'dataset' and 'checkpoints'")
        checkpoints = mapping["checkpoints"]
        _reject_unknown("checkpoints", checkpoints, _CHECKPOINT_KEYS)
        defaults = dataset_defaults(mapping["dataset"])

        attacks = []
        for index, entry in enumerate(mapping.get("attacks") or []):
            _reject_unknown(f"attacks[{index}]", entry, _ATTACK_KEYS)
            entry = {"epsilon": defaults["epsilon"], "alpha": defaults["attack_alpha"], **entry}
            attacks.append(AttackSpec(**entry))

        defenses = []
        for index, entry in enumerate(mapping.get("defenses") or []):
            _reject_unknown(f"defenses[{index}]", entry, _DEFENSE_KEYS)
            entry = {
                "n_iters": defaults["purify_iters"],
                "alpha": defaults["purify_alpha"],
                "beta": defaults["purify_beta"],
                "gamma": defaults["purify_gamma"],
                **entry,
            }
            defenses.append(PurifySpec(**entry))

        config = cls(
            dataset=mapping["dataset"],
            classifier_checkpoint=Path(checkpoints.get("classifier", "")),
            dae_checkpoint=Path(checkpoints.get("dae", "")),
            stats_path=Path(checkpoints["stats"]) if checkpoints.get("stats") else None,
            attacks=attacks,
            defenses=defenses,
            subset_size=int(mapping.get("subset_size", 1000)),
            seed=int(mapping.get("seed", 0)),
            output_dir=Path(mapping.get("output_dir", "results")),
            data_dir=mapping.get("data_dir"),
            workers=int(mapping.get("workers", 1)),
            batch_size=int(mapping.get("batch_size", 128)),
            histogram_bins=int(mapping.get("histogram_bins", 30)),
        )
        if check_files:
            config.check_files()
        return config

    @classmethod
    def from_yaml(cls, path, check_files=True):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Experiment config {path} does not exist")
        try:
            mapping = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"Cannot parse {path}: {exc}") from None
        logging.info(f"Loaded experiment config from {path}")
        return cls.from_dict(mapping or {}, check_files=check_files)

    def check_files(self):
        for name, path in (
            ("classifier checkpoint", self.classifier_checkpoint),
            ("DAE checkpoint", self.dae_checkpoint),
            ("stats file", self.stats_path),
        ):
            if path is not None and not Path(path).is_file():
                raise ConfigurationError(f"The {name} {path} does not exist")

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "seed": self.seed,
            "subset_size": self.subset_size,
            "output_dir": str(self.output_dir),
            "data_dir": self.data_dir,
            "workers": self.workers,
            "batch_size": self.batch_size,
            "histogram_bins": self.histogram_bins,
            "checkpoints": {
                "classifier": str(self.classifier_checkpoint),
                "dae": str(self.dae_checkpoint),
                "stats": None if self.stats_path is None else str(self.stats_path),
            },
            "attacks": [spec.to_dict() for spec in self.attacks],
            "defenses": [spec.to_dict() for spec in self.defenses],
        }


@dataclass
class EvalReport:
    """
    Accuracy grid plus provenance.

    Attributes:
        grid (pd.DataFrame): Rows are attack labels, columns are defense labels,
            cells are accuracy fractions in [0, 1].
        metadata (dict): Seeds, spec dictionaries and hashes, checkpoint
            fingerprints and per-attack timings.
    """

    grid: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = self.grid.astype(np.float64)
        self.grid.index.name = "attack"
        values = self.grid.to_numpy()
        if np.isnan(values).any():
            raise ConfigurationError("Report grid has missing cells")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ConfigurationError("Report grid holds accuracies outside [0, 1]")

    def accuracy(self, attack, defense):
        return float(self.grid.loc[attack, defense])

    def to_text(self):
        if self.grid.empty:
            return "  ".join([self.grid.index.name, *map(str, self.grid.columns)]) + "\n"
        return self.grid.to_string(float_format=lambda value: f"{float(value)!r}") + "\n"


class ExperimentRunner:
    """
    Runs the (attack x defense) grid for one ExperimentConfig.

    Models, stats and the test set are loaded from the config unless passed in.
    """

    def __init__(self, config, test_set=None, classifier=None, dae=None, stats=None, show_progress=True):
        self.config = config
        self.test_set = test_set
        self.classifier = classifier
        self.dae = dae
        self.stats = stats
        self.show_progress = show_progress

    def _load(self):
        config = self.config
        if self.classifier is None:
            self.classifier = ModelCheckpoint.load(config.classifier_checkpoint)
        if self.dae is None:
            self.dae = ModelCheckpoint.load(config.dae_checkpoint, expected_kind="dae")
        if self.stats is None and config.stats_path is not None:
            self.stats = ReconStats.load(config.stats_path)
        if self.test_set is None:
            _, self.test_set = ImageDataLoader(resolve_data_dir(config.data_dir)).load(config.dataset)
        # Shared read-only across worker threads from here on.
        for model in (self.classifier, self.dae):
            model.eval().requires_grad_(False)

    def _defenses(self):
        columns = [(NO_DEFENSE, None), (DIRECT_DEFENSE, PurifySpec(PurifyVariant.DIRECT, label=DIRECT_DEFENSE))]
        for spec in self.config.defenses:
            if spec.variant in STATS_VARIANTS and spec.stats is None:
                if self.stats is None:
                    raise ConfigurationError(f"Defense {spec.label} needs reconstruction stats")
                spec = spec.with_stats(self.stats)
            columns.append((spec.label, spec))
        return columns

    def run_experiment(self):
        """
        Evaluates every defense column against every attack row.

        Returns:
            EvalReport: Grid in config order with provenance metadata.
        """
        self._load()
        config = self.config
        subset = ImageDataLoader.subset(self.test_set, config.subset_size, config.seed)
        defenses = self._defenses()
        logging.info(
            f"Running {len(config.attacks)} attacks x {len(defenses)} defenses on {len(subset)} {config.dataset} test images"
        )

        def evaluate(spec):
            return self._evaluate_attack(spec, subset, defenses)

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(pool.map(evaluate, config.attacks))
        else:
            results = [evaluate(spec) for spec in config.attacks]

        grid = pd.DataFrame(
            [row for row, _, _ in results],
            index=pd.Index([spec.label for spec in config.attacks], name="attack"),
            columns=[label for label, _ in defenses],
        )
        metadata = self._metadata(defenses, subset, results)
        return EvalReport(grid, metadata)

    def _evaluate_attack(self, spec, subset, defenses):
        started = time.perf_counter()
        attacker = AdversarialAttacker(self.classifier, self.dae)
        candidates = [spec]
        if spec.kind is AttackKind.COUNTER_B and spec.beta_grid:
            candidates = [replace(spec, beta_recon=float(beta), beta_grid=[]) for beta in spec.beta_grid]

        row, worst_beta = {}, {}
        for candidate in candidates:
            adversarial = self._generate(attacker, candidate, subset)
            columns = tqdm(defenses, desc=f"{candidate.label} defenses", leave=False, disable=not self.show_progress)
            for label, defense in columns:
                accuracy = float(accuracy_score(subset.labels, self._predict(defense, adversarial)))
                if label not in row or accuracy < row[label]:
                    row[label] = accuracy
                    worst_beta[label] = candidate.beta_recon
        elapsed = time.perf_counter() - started
        logging.info(f"{spec.label}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items()) + f" ({elapsed:.1f}s)")
        return row, (worst_beta if len(candidates) > 1 else None), elapsed

    def _generate(self, attacker, spec, subset):
        """Attacks the subset batch by batch; batch b draws from seed (config.seed, spec.seed, b)."""
        batch_size = self.config.batch_size
        starts = range(0, len(subset), batch_size)
        parts = []
        for batch_index, start in enumerate(
            tqdm(starts, desc=f"{spec.label} batches", leave=False, disable=not self.show_progress)
        ):
            images = Tensor(subset.images[start:start + batch_size])
            seed = (self.config.seed, spec.seed, batch_index)
            parts.append(attacker.generate(images, subset.labels[start:start + batch_size], spec, seed=seed).data)
        return np.concatenate(parts) if parts else subset.images[:0]

    def _predict(self, defense, images):
        if defense is None:
            return self.classifier.predict(images)
        purifier = Purifier(self.dae)
        return purifier.classify_purified(
            self.classifier, images, defense, batch_size=self.config.batch_size, base_seed=self.config.seed
        )

    def emit_recon_histograms(self, writer, attack_index=0):
        """
        Histograms for clean and adversarial subset images of one attack, plus
        both populations after the first purification defense (if any).
        """
        self._load()
        config = self.config
        subset = ImageDataLoader.subset(self.test_set, config.subset_size, config.seed)
        attacker = AdversarialAttacker(self.classifier, self.dae)
        adversarial = self._generate(attacker, config.attacks[attack_index], subset)
        purifier = Purifier(self.dae)
        purified = {}
        for label, spec in self._defenses()[2:3]:
            purified[f"clean {label}"] = purifier.purify_many(subset.images, spec, config.batch_size, config.seed)
            purified[f"adversarial {label}"] = purifier.purify_many(adversarial, spec, config.batch_size, config.seed)
        return writer.emit_recon_histograms(self.dae, subset.images, adversarial, purified, bins=config.histogram_bins)

    def _metadata(self, defenses, subset, results):
        config = self.config

        def fingerprint(path):
            return file_fingerprint(path) if path is not None and Path(path).is_file() else "in-memory"

        attacks = [spec.to_dict() for spec in config.attacks]
        defense_dicts = [{"label": label, **(spec.to_dict() if spec else {})} for label, spec in defenses]
        return {
            "dataset": config.dataset,
            "seed": config.seed,
            "subset_size": len(subset),
            "subset": subset.name,
            "created": datetime.now(timezone.utc).isoformat(),
            "attacks": [{**spec, "hash": spec_fingerprint(spec)} for spec in attacks],
            "defenses": [{**spec, "hash": spec_fingerprint(spec)} for spec in defense_dicts],
            "checkpoints": {
                "classifier": fingerprint(config.classifier_checkpoint),
                "dae": fingerprint(config.dae_checkpoint),
                "stats": fingerprint(config.stats_path),
            },
            "worst_beta": {
                spec.label: beta for spec, (_, beta, _) in zip(config.attacks, results) if beta is not None
            },
            "timings": {spec.label: round(elapsed, 3) for spec, (_, _, elapsed) in zip(config.attacks, results)},
            "config": config.to_dict(),
        }


def counter_attack_table(reports):
    """
    Counter-attack summary: one row per (dataset, counter attack), columns
    no defense, direct DAE output and the best adaptive purification.

    Args:
        reports (dict[str, EvalReport]): Reports keyed by dataset name.

    Returns:
        pd.DataFrame: Indexed by (dataset, attack) with attack in {"A", "B"}.
    """
    names = {AttackKind.COUNTER_A.value: "A", AttackKind.COUNTER_B.value: "B"}
    rows = []
    for dataset, report in reports.items():
        adaptive = [c for c in report.grid.columns if c not in (NO_DEFENSE, DIRECT_DEFENSE)]
        for attack in report.metadata.get("attacks", []):
            if attack["kind"] not in names:
                continue
            cells = report.grid.loc[attack["label"]]
            rows.append({
                "dataset": dataset,
                "attack": names[attack["kind"]],
                "No defense": cells[NO_DEFENSE],
                "Direct": cells[DIRECT_DEFENSE],
                "Best": cells[adaptive].max() if adaptive else np.nan,
            })
    table = pd.DataFrame(rows, columns=["dataset", "attack", "No defense", "Direct", "Best"])
    return table.set_index(["dataset", "attack"])


class ReportWriter:
    """Writes reports and reconstruction-error histograms under one directory."""

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)

    def emit_report(self, report, fmt="text", name="report"):
        """
        Renders the grid as a text table or as CSV (plus a JSON metadata file).

        Returns:
            list[Path]: Files written.
        """
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if fmt == "text":
            path = self.output_dir / f"{name}.txt"
            path.write_text(report.to_text())
            written = [path]
        elif fmt == "csv":
            path = self.output_dir / f"{name}.csv"
            report.grid.to_csv(path)
            meta_path = self.output_dir / f"{name}.json"
            meta_path.write_text(json.dumps(report.metadata, indent=2, default=str))
            written = [path, meta_path]
        else:
            raise ConfigurationError(f"Unknown report format '{fmt}'; expected 'text' or 'csv'")
        logging.info(f"Wrote {fmt} report to {written[0]}")
        return written

    @staticmethod
    def read_report(csv_path):
        """Parses a CSV report (and its JSON metadata, when present) back into an EvalReport."""
        csv_path = Path(csv_path)
        if not csv_path.exists():
            raise ConfigurationError(f"Report {csv_path} does not exist")
        grid = pd.read_csv(csv_path, index_col=0, float_precision="round_trip")
        grid.index = grid.index.astype(str)
        meta_path = csv_path.with_suffix(".json")
        metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return EvalReport(grid, metadata)

    def emit_recon_histograms(self, dae, clean, adversarial, purified=None, bins=30, name="recon_histograms"):
        """
        Histograms of per-image reconstruction errors over shared bin edges.

        Args:
            dae (DaeModel): Trained autoencoder.
            clean (np.ndarray): Clean images.
            adversarial (np.ndarray): Adversarial images.
            purified (dict[str, np.ndarray] | None): Extra populations, e.g. purified clean/adversarial pairs.
            bins (int): Number of bins.

        Returns:
            tuple[pd.DataFrame, list[Path]]: Table with bin_left, bin_right and one
            count column per population, and the CSV/PNG files written.
        """
        if bins < 1:
            raise ConfigurationError(f"bins must be >= 1, got {bins}")
        purifier = Purifier(dae)
        populations = {"clean": clean, "adversarial": adversarial, **(purified or {})}
        errors = {label: purifier.recon_scalars(images) for label, images in populations.items()}
        edges = np.histogram_bin_edges(np.concatenate(list(errors.values())), bins=bins)
        table = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:]})
        for label, values in errors.items():
            table[label] = np.histogram(values, bins=edges)[0]

        self.output_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.output_dir / f"{name}.csv"
        table.to_csv(csv_path, index=False)
        png_path = DataVisualizer.plot_recon_histograms(table, self.output_dir / f"{name}.png")
        logging.info(
            "Mean reconstruction error: " + ", ".join(f"{k}={v.mean():.6g}" for k, v in errors.items())
        )
        return table, [csv_path, png_path]


def run_experiment(config, **kwargs):
    return ExperimentRunner(config, **kwargs).run_experiment()


def emit_report(report, fmt, output_dir, name="report"):
    return ReportWriter(output_dir).emit_report(report, fmt, name)


def emit_recon_histograms(dae, clean, adversarial, purified=None, bins=30, output_dir="results"):
    return ReportWriter(output_dir).emit_recon_histograms(dae, clean, adversarial, purified, bins)
