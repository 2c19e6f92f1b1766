import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


class DataVisualizer:
    """
    A class to render reconstruction-error histograms, accuracy grids and
    training curves to image files.
    """

    @staticmethod
    def plot_recon_histograms(table, path, title="Reconstruction errors"):
        """
        Plots one step histogram per population over shared bin edges.

        Parameters:
        ----------
        table : pd.DataFrame
            Columns bin_left, bin_right and one count column per population.
        path : str | Path
            Output image file.
        title : str
            Title of the plot.
        """
        populations = [c for c in table.columns if c not in ("bin_left", "bin_right")]
        centres = (table["bin_left"] + table["bin_right"]) / 2.0
        palette = sns.color_palette("viridis", max(len(populations), 1))

        fig, ax = plt.subplots(figsize=(10, 5))
        for i, label in enumerate(populations):
            sns.histplot(
                x=centres, weights=table[label], bins=list(table["bin_left"]) + [table["bin_right"].iloc[-1]],
                element="step", fill=False, color=palette[i], label=label, ax=ax,
            )
        ax.set_title(title)
        ax.set_xlabel("Per-image reconstruction error")
        ax.set_ylabel("Count")
        ax.legend()
        return DataVisualizer._save(fig, path)

    @staticmethod
    def plot_accuracy_grid(grid, path, title="Accuracy by attack and defense"):
        """
        Plots the report grid as an annotated heatmap.

        Parameters:
        ----------
        grid : pd.DataFrame
            Attacks as rows, defenses as columns, accuracies as values.
        path : str | Path
            Output image file.
        """
        fig, ax = plt.subplots(figsize=(1.6 * max(len(grid.columns), 2) + 2, 0.6 * max(len(grid), 2) + 2))
        sns.heatmap(grid.astype(float), annot=True, fmt=".3f", cmap="viridis", vmin=0.0, vmax=1.0, linewidths=0.5, ax=ax)
        ax.set_title(title)
        ax.set_xlabel("Defense")
        ax.set_ylabel("Attack")
        return DataVisualizer._save(fig, path)

    @staticmethod
    def plot_training_history(history, path, title="Training history"):
        """
        Plots per-epoch metrics of a training run.

        Parameters:
        ----------
        history : list[dict]
            Records with an "epoch" key and one key per metric.
        path : str | Path
            Output image file.
        """
        frame = pd.DataFrame(history).melt(id_vars="epoch", var_name="metric", value_name="value")
        fig, ax = plt.subplots(figsize=(8, 4))
        sns.lineplot(data=frame, x="epoch", y="value", hue="metric", marker="o", ax=ax)
        ax.set_title(title)
        return DataVisualizer._save(fig, path)

    @staticmethod
    def _save(fig, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        logging.info(f"Saved plot to {path}")
        return path
