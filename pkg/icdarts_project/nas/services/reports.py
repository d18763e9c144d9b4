"""Report bundle over persisted run directories: curves, tables, charts and a contact sheet."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

import matplotlib
import matplotlib.pyplot as plt
from PIL import Image
from scipy import stats as scipy_stats

from .errors import DataError
from .genotypes import Genotype
from .networks import NetworkTemplate
from .runs import CONFIG_FILE, FINAL_GENOTYPE_FILE, RunRecord
from .stats import genotype_stats
from .tournament import STATE_FILE

logger = logging.getLogger(__name__)

matplotlib.use("Agg")

MISSING = "—"
CONFIDENCE = 0.95
FIGURE_DPI = 120


def format_mean_std(values: Sequence[float], scale: float = 100.0, decimals: int = 2) -> str:
    """``"97.13 (0.11)"``; the stddev reads ``—`` when it is undefined for a single value."""
    values = [float(v) * scale for v in values if v is not None and not np.isnan(v)]
    if not values:
        return MISSING
    mean = np.mean(values)
    if len(values) < 2:
        return f"{mean:.{decimals}f} ({MISSING})"
    return f"{mean:.{decimals}f} ({np.std(values, ddof=1):.{decimals}f})"


def confidence_band(values: Sequence[float], confidence: float = CONFIDENCE) -> tuple:
    """Mean with a Student-t interval; the interval collapses to the mean for fewer than two values."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if values.size < 2:
        return mean, mean, mean
    low, high = scipy_stats.t.interval(confidence, values.size - 1, loc=mean, scale=scipy_stats.sem(values))
    if np.isnan(low):
        return mean, mean, mean
    return mean, float(low), float(high)


@dataclass
class RunSummary:
    path: Path
    label: str
    seed: int
    config: Dict
    metrics: pd.DataFrame
    genotype: Optional[Genotype] = None
    retrain: Optional[Dict] = None
    latency: Optional[Dict] = None

    @property
    def final_search_acc(self) -> float:
        return float(self.metrics["eval_test_acc"].iloc[-1]) if len(self.metrics) else float("nan")

    @property
    def final_retrain_acc(self) -> Optional[float]:
        return None if self.retrain is None else float(self.retrain["final_test_acc"])

    @property
    def template(self) -> NetworkTemplate:
        return NetworkTemplate.from_dict(self.config["template"]) if "template" in self.config else NetworkTemplate()


def load_run(path: Path) -> RunSummary:
    record = RunRecord(path)
    metrics = record.metrics()
    config = record.read_json(CONFIG_FILE) if record.file(CONFIG_FILE).exists() else {}
    label = config.get("label") or config.get("loss_config", {}).get("name") or record.path.name
    summary = RunSummary(record.path, str(label), int(config.get("seed", 0)), config, metrics)
    if record.file(FINAL_GENOTYPE_FILE).exists():
        summary.genotype = record.final_genotype()
    if record.file("retrain.json").exists():
        summary.retrain = record.read_json("retrain.json")
    if record.file("latency.json").exists():
        summary.latency = record.read_json("latency.json")
    return summary


def group_runs(runs: Iterable[RunSummary]) -> Dict[str, List[RunSummary]]:
    groups: Dict[str, List[RunSummary]] = {}
    for run in runs:
        groups.setdefault(run.label, []).append(run)
    return dict(sorted(groups.items()))


# =============================================================================
# CURVES AND TABLES
# =============================================================================


def curves_frame(runs: Sequence[RunSummary]) -> pd.DataFrame:
    """Long format, one row per run and search epoch."""
    frames = []
    for run in runs:
        frame = run.metrics.copy()
        frame.insert(0, "seed", run.seed)
        frame.insert(0, "run", run.path.name)
        frame.insert(0, "label", run.label)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def curve_bands(curves: pd.DataFrame, column: str = "eval_test_acc") -> pd.DataFrame:
    rows = []
    for (label, epoch), group in curves.groupby(["label", "epoch"], sort=True):
        mean, low, high = confidence_band(group[column].dropna().to_numpy())
        rows.append({"label": label, "epoch": epoch, "mean": mean, "low": low, "high": high, "n": len(group)})
    return pd.DataFrame(rows)


def plot_curves(bands: pd.DataFrame, target: Path, ylabel: str = "Eval network test accuracy") -> Path:
    plt.figure(figsize=(8, 5))
    for label, band in bands.groupby("label", sort=True):
        plt.plot(band["epoch"], band["mean"], label=label)
        plt.fill_between(band["epoch"], band["low"], band["high"], alpha=0.25)
    plt.xlabel("Search epoch")
    plt.ylabel(ylabel)
    plt.title(f"Search-phase accuracy ({int(CONFIDENCE * 100)}% CI)")
    plt.legend()
    plt.tight_layout()
    plt.savefig(target, dpi=FIGURE_DPI)
    plt.close()
    return target


def accuracy_table(groups: Dict[str, List[RunSummary]]) -> pd.DataFrame:
    rows = []
    for label, runs in groups.items():
        retrained = [r.final_retrain_acc for r in runs if r.final_retrain_acc is not None]
        rows.append(
            {
                "label": label,
                "runs": len(runs),
                "search_test_acc": format_mean_std([r.final_search_acc for r in runs]),
                "retrain_test_acc": format_mean_std(retrained),
            }
        )
    return pd.DataFrame(rows, columns=["label", "runs", "search_test_acc", "retrain_test_acc"])


def latency_table(groups: Dict[str, List[RunSummary]]) -> pd.DataFrame:
    rows = []
    for label, runs in groups.items():
        means = [r.latency["mean_s_per_batch"] for r in runs if r.latency]
        if not means:
            continue
        rows.append({"label": label, "runs": len(means), "latency_s_per_batch": format_mean_std(means, scale=1.0, decimals=4)})
    return pd.DataFrame(rows, columns=["label", "runs", "latency_s_per_batch"])


def stability_comparison(
    groups: Dict[str, List[RunSummary]],
    baseline: str = "cdarts",
    candidate: str = "icdarts",
) -> Dict:
    """Across-seed stddev of final retrain accuracy (search accuracy when a run was not retrained)."""

    def spread(label: str) -> Optional[float]:
        values = [r.final_retrain_acc if r.final_retrain_acc is not None else r.final_search_acc for r in groups.get(label, [])]
        return float(np.std(values, ddof=1)) if len(values) >= 2 else None

    base, cand = spread(baseline), spread(candidate)
    verdict = "improved" if base is not None and cand is not None and cand <= base else "inconclusive"
    return {
        "baseline": baseline,
        "candidate": candidate,
        "baseline_std": base,
        "candidate_std": cand,
        "baseline_runs": len(groups.get(baseline, [])),
        "candidate_runs": len(groups.get(candidate, [])),
        "verdict": verdict,
    }


# =============================================================================
# GENOTYPE CHARTS
# =============================================================================


def frequency_frame(runs: Sequence[RunSummary]) -> pd.DataFrame:
    rows = []
    for run in runs:
        if run.genotype is None:
            continue
        stats = genotype_stats(run.genotype, run.template)
        for op, count in stats.frequencies.items():
            rows.append({"label": run.label, "run": run.path.name, "op": op, "count": count, "depth": stats.depth})
    return pd.DataFrame(rows, columns=["label", "run", "op", "count", "depth"])


def plot_frequencies(frame: pd.DataFrame, target: Path, title: str = "Layer type frequencies") -> Path:
    totals = frame.pivot_table(index="op", columns="label", values="count", aggfunc="sum", fill_value=0)
    ax = totals.plot.bar(figsize=(10, 5))
    ax.set_xlabel("Operation")
    ax.set_ylabel("Total per evaluation network")
    ax.set_title(title)
    plt.tight_layout()
    plt.savefig(target, dpi=FIGURE_DPI)
    plt.close()
    return target


def plot_depths(frame: pd.DataFrame, target: Path, title: str = "Cell depth frequencies") -> Path:
    depths = frame.drop_duplicates(["label", "run"]).dropna(subset=["depth"])
    plt.figure(figsize=(6, 4))
    for label, group in depths.groupby("label", sort=True):
        bins = np.arange(depths["depth"].min(), depths["depth"].max() + 2) - 0.5
        plt.hist(group["depth"], bins=bins, alpha=0.5, label=label)
    plt.xlabel("Cell depth")
    plt.ylabel("Runs")
    plt.title(title)
    plt.legend()
    plt.tight_layout()
    plt.savefig(target, dpi=FIGURE_DPI)
    plt.close()
    return target


def tier_frequency_frame(state_path: Path) -> pd.DataFrame:
    try:
        document = json.loads(Path(state_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{state_path} is not valid JSON: {exc}") from exc
    rows = []
    for tier in document.get("tiers", []):
        for slot in tier.get("runs", []):
            stats = slot.get("stats") or {}
            for op, count in stats.get("frequencies", {}).items():
                rows.append({"label": f"tier {tier['tier']}", "run": slot["run"], "op": op, "count": count, "depth": stats.get("depth")})
    return pd.DataFrame(rows, columns=["label", "run", "op", "count", "depth"])


def contact_sheet(images: Sequence[Path], target: Path, columns: int = 2) -> Optional[Path]:
    """Tile the rendered charts into one PNG."""
    opened = [Image.open(path).convert("RGB") for path in images]
    if not opened:
        return None
    width = max(img.width for img in opened)
    height = max(img.height for img in opened)
    rows = (len(opened) + columns - 1) // columns
    sheet = Image.new("RGB", (width * columns, height * rows), "white")
    for i, img in enumerate(opened):
        sheet.paste(img, ((i % columns) * width, (i // columns) * height))
        img.close()
    sheet.save(target)
    return target


# =============================================================================
# BUNDLE
# =============================================================================


@dataclass
class ReportBundle:
    out_dir: Path
    files: Dict[str, Path] = field(default_factory=dict)
    stability: Optional[Dict] = None


def report(
    run_dirs: Sequence[Path],
    out_dir: Path,
    baseline: str = "cdarts",
    candidate: str = "icdarts",
) -> ReportBundle:
    """Render every artifact for the given runs; tournament directories add per-tier charts."""
    if not run_dirs:
        raise DataError("report needs at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out_dir)

    tournaments = [Path(p) for p in run_dirs if (Path(p) / STATE_FILE).exists()]
    runs = [load_run(Path(p)) for p in run_dirs if Path(p) not in tournaments]
    if runs:
        groups = group_runs(runs)
        curves = curves_frame(runs)
        bundle.files["curves_csv"] = out_dir / "curves.csv"
        curves.to_csv(bundle.files["curves_csv"], index=False)
        bands = curve_bands(curves)
        bands.to_csv(out_dir / "curve_bands.csv", index=False)
        bundle.files["curves_png"] = plot_curves(bands, out_dir / "curves.png")

        bundle.files["accuracy_csv"] = out_dir / "accuracy_table.csv"
        accuracy_table(groups).to_csv(bundle.files["accuracy_csv"], index=False)
        latency = latency_table(groups)
        if len(latency):
            bundle.files["latency_csv"] = out_dir / "latency_table.csv"
            latency.to_csv(bundle.files["latency_csv"], index=False)

        frequencies = frequency_frame(runs)
        if len(frequencies):
            bundle.files["frequencies_csv"] = out_dir / "layer_frequencies.csv"
            frequencies.to_csv(bundle.files["frequencies_csv"], index=False)
            bundle.files["frequencies_png"] = plot_frequencies(frequencies, out_dir / "layer_frequencies.png")
            bundle.files["depth_png"] = plot_depths(frequencies, out_dir / "cell_depth.png")

        bundle.stability = stability_comparison(groups, baseline, candidate)
        bundle.files["stability_json"] = out_dir / "stability.json"
        bundle.files["stability_json"].write_text(json.dumps(bundle.stability, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    for i, path in enumerate(tournaments):
        tiers = tier_frequency_frame(path / STATE_FILE)
        if len(tiers):
            bundle.files[f"tiers_{i}_png"] = plot_frequencies(
                tiers, out_dir / f"tournament_{i}_tiers.png", title=f"Per-tier layer type frequencies ({path.name})"
            )
            bundle.files[f"tiers_{i}_depth_png"] = plot_depths(
                tiers, out_dir / f"tournament_{i}_tier_depths.png", title=f"Per-tier cell depth ({path.name})"
            )

    charts = [p for key, p in sorted(bundle.files.items()) if key.endswith("_png")]
    sheet = contact_sheet(charts, out_dir / "contact_sheet.png")
    if sheet is not None:
        bundle.files["contact_sheet"] = sheet
    logger.info("Report over %d run(s) and %d tournament(s) written to %s", len(runs), len(tournaments), out_dir)
    return bundle
