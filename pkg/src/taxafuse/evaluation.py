"""Metrics and reports: micro/macro accuracy, per-level rollups, unseen
species, taxonomy-ordered confusion matrices, frequency-band deltas.

Macro top-k averages the per-class top-k hit rate over the classes present
in the evaluation set, giving every species the same weight regardless of
its sample count; micro accuracy is the plain fraction correct, so the two
diverge exactly when frequent classes are easier.  Per-level predictions
come either from the argmax of the marginalised distribution at that level
or from the ancestor chain of the species argmax; only the latter is
guaranteed monotone in accuracy toward coarser levels.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .taxonomy import LEVEL_NAMES, N_LEVELS, SPECIES, TaxonomyTree

ROLLUP_MODES = ("marginalise", "ancestor")
TOPK_TABLE = (1, 3, 5)


class EvaluationError(ValueError):
    """Invalid metric inputs."""


@dataclass(frozen=True)
class MetricsReport:
    """Micro accuracy plus species-weighted (macro) top-k accuracies, in %."""

    micro_accuracy: float
    macro_top1: float
    macro_top3: float
    macro_top5: float
    n_samples: int

    def as_dict(self) -> dict:
        return {
            "micro_accuracy": self.micro_accuracy,
            "macro_top1": self.macro_top1,
            "macro_top3": self.macro_top3,
            "macro_top5": self.macro_top5,
            "n_samples": self.n_samples,
        }


def micro_accuracy(predictions, labels) -> float:
    """Fraction of exact matches, in percent."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise EvaluationError(f"prediction/label shapes differ: {preds.shape} vs {labs.shape}")
    if preds.size == 0:
        raise EvaluationError("cannot compute accuracy of an empty prediction set")
    return float((preds == labs).mean() * 100.0)


def topk_indices(posteriors: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-probability classes per row; ties broken by
    ascending class index (stable sort on the negated scores)."""
    order = np.argsort(-posteriors, axis=1, kind="stable")
    return order[:, :k]


def macro_topk(posteriors, labels, k: int) -> float:
    """Per-class top-k hit rate averaged over the classes present, percent.

    Classes with no evaluation samples are skipped rather than counted as 0.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    labs = np.asarray(labels)
    if post.ndim != 2 or post.shape[0] != labs.shape[0]:
        raise EvaluationError(f"posterior shape {post.shape} vs labels {labs.shape}")
    if post.shape[0] == 0:
        raise EvaluationError("cannot compute macro top-k of an empty set")
    if k < 1 or k > post.shape[1]:
        raise EvaluationError(f"k={k} outside 1..{post.shape[1]}")
    top = topk_indices(post, k)
    hits = (top == labs[:, None]).any(axis=1)
    per_class: dict[int, list[bool]] = {}
    for label, hit in zip(labs.tolist(), hits.tolist()):
        per_class.setdefault(label, []).append(hit)
    rates = [np.mean(v) for v in per_class.values()]
    return float(np.mean(rates) * 100.0)


def per_species_accuracy(predictions, labels) -> dict[int, float]:
    """Top-1 hit rate per class present in the evaluation set (fractions)."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    out: dict[int, float] = {}
    for label in np.unique(labs):
        mask = labs == label
        out[int(label)] = float((preds[mask] == label).mean())
    return out


def metrics_report(posteriors, labels) -> MetricsReport:
    post = np.asarray(posteriors, dtype=np.float64)
    labs = np.asarray(labels)
    preds = post.argmax(axis=1)
    n_classes = post.shape[1]
    values = {}
    for k in TOPK_TABLE:
        # k above the class count is trivially a hit for every sample
        values[k] = 100.0 if k > n_classes else macro_topk(post, labs, k)
    return MetricsReport(
        micro_accuracy=micro_accuracy(preds, labs),
        macro_top1=values[1],
        macro_top3=values[3],
        macro_top5=values[5],
        n_samples=int(labs.shape[0]),
    )


# ---------------------------------------------------------------------------
# per-level evaluation
# ---------------------------------------------------------------------------


def _ancestor_rollup_ranking(species_posterior: np.ndarray, ancestors: np.ndarray, n_coarse: int) -> np.ndarray:
    """Pseudo-distribution at a coarse level induced by the species ranking:
    each coarse class takes the probability of its best-ranked species."""
    n, _ = species_posterior.shape
    out = np.zeros((n, n_coarse))
    np.maximum.at(out.T, ancestors, species_posterior.T)
    return out


def per_level_metrics(
    species_posteriors,
    species_labels,
    tree: TaxonomyTree,
    rollup_mode: str = "marginalise",
) -> dict[str, MetricsReport]:
    """MetricsReport per taxonomy level under the chosen rollup.

    ``marginalise`` scores the argmax of the exactly marginalised
    distribution at each level; ``ancestor`` scores the ancestor chain of
    the species argmax (micro accuracy is then non-decreasing toward coarser
    levels, exactly).
    """
    if rollup_mode not in ROLLUP_MODES:
        raise EvaluationError(f"rollup_mode must be one of {ROLLUP_MODES}, got {rollup_mode!r}")
    post = np.asarray(species_posteriors, dtype=np.float64)
    labs = np.asarray(species_labels, dtype=np.int64)
    reports: dict[str, MetricsReport] = {}
    if rollup_mode == "marginalise":
        dists = tree.marginalise_all(post)
        for lvl in range(N_LEVELS):
            level_labels = tree.ancestors[lvl, labs]
            reports[LEVEL_NAMES[lvl]] = metrics_report(dists[lvl], level_labels)
    else:
        for lvl in range(N_LEVELS):
            level_labels = tree.ancestors[lvl, labs]
            ranking = _ancestor_rollup_ranking(
                post, tree.ancestors[lvl], tree.level_size(lvl)
            )
            reports[LEVEL_NAMES[lvl]] = metrics_report(ranking, level_labels)
    return reports


# ---------------------------------------------------------------------------
# unseen species
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnseenLevelResult:
    accuracy: float | None   # None marks an uninformative level
    chance: float
    n_evaluated: int
    n_skipped: int
    flagged: bool = False    # single-class level: accuracy == chance == 100

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "chance": self.chance,
            "n_evaluated": self.n_evaluated,
            "n_skipped": self.n_skipped,
            "flagged": self.flagged,
        }


@dataclass(frozen=True)
class UnseenReport:
    """Per-level accuracies for species never seen in training.

    The species level carries no defined accuracy (every prediction is
    necessarily wrong) and is reported as the marker '-'.
    """

    levels: dict[str, UnseenLevelResult | None]

    SPECIES_MARKER = "-"

    def as_dict(self) -> dict:
        return {
            name: (self.SPECIES_MARKER if result is None else result.as_dict())
            for name, result in self.levels.items()
        }


def unseen_species_eval(
    species_posteriors,
    unseen_lineages: list[tuple[str, ...]],
    tree: TaxonomyTree,
) -> UnseenReport:
    """Coarse-level evaluation of observations of never-trained species.

    ``unseen_lineages[i]`` is the full 6-name lineage of observation i's
    true species (which is absent from ``tree``).  An observation counts at
    a level only when its true ancestor name exists in the model taxonomy;
    others are skipped and counted.  Chance level is the frequency of the
    most common true class among the evaluated observations at that level.
    """
    post = np.asarray(species_posteriors, dtype=np.float64)
    if post.ndim != 2 or post.shape[1] != tree.n_species:
        raise EvaluationError(
            f"posterior shape {post.shape} does not match taxonomy ({tree.n_species} species)"
        )
    if post.shape[0] != len(unseen_lineages):
        raise EvaluationError("one lineage per posterior row required")
    dists = tree.marginalise_all(post)
    levels: dict[str, UnseenLevelResult | None] = {LEVEL_NAMES[SPECIES]: None}
    for lvl in range(1, N_LEVELS):
        name_to_id = tree.name_to_id(lvl)
        true_names = [lin[lvl] for lin in unseen_lineages]
        evaluable = [i for i, nm in enumerate(true_names) if nm in name_to_id]
        n_skipped = len(true_names) - len(evaluable)
        if not evaluable:
            levels[LEVEL_NAMES[lvl]] = UnseenLevelResult(
                accuracy=None, chance=0.0, n_evaluated=0, n_skipped=n_skipped, flagged=True
            )
            continue
        true_ids = np.array([name_to_id[true_names[i]] for i in evaluable])
        preds = dists[lvl][evaluable].argmax(axis=1)
        acc = float((preds == true_ids).mean() * 100.0)
        most_common = Counter(true_ids.tolist()).most_common(1)[0][1]
        chance = float(most_common / len(true_ids) * 100.0)
        flagged = len(set(true_ids.tolist())) == 1
        levels[LEVEL_NAMES[lvl]] = UnseenLevelResult(
            accuracy=acc,
            chance=chance,
            n_evaluated=len(evaluable),
            n_skipped=n_skipped,
            flagged=flagged,
        )
    return UnseenReport(levels=levels)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows/columns in the taxonomy's depth-first species order."""

    counts: np.ndarray          # (C, C): rows true, columns predicted
    species_names: tuple[str, ...]
    level_blocks: dict[str, list[int]]  # level name -> block start indices

    def within_group_fraction(self, tree: TaxonomyTree, level) -> float:
        """Share of off-diagonal confusion mass that stays inside one
        level-``level`` group (e.g. within-genus confusions)."""
        from .taxonomy import level_index

        anc = tree.ancestors[level_index(level)]
        off = self.counts.copy()
        np.fill_diagonal(off, 0)
        total = off.sum()
        if total == 0:
            return 0.0
        same = (anc[:, None] == anc[None, :]) & ~np.eye(len(anc), dtype=bool)
        return float(off[same].sum() / total)


def confusion_matrix(predictions, labels, tree: TaxonomyTree) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape:
        raise EvaluationError(f"prediction/label shapes differ: {preds.shape} vs {labs.shape}")
    c = tree.n_species
    if preds.size and (preds.min() < 0 or preds.max() >= c or labs.min() < 0 or labs.max() >= c):
        raise EvaluationError("species id out of range for the taxonomy")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (labs, preds), 1)
    blocks: dict[str, list[int]] = {}
    for lvl in range(1, N_LEVELS):
        anc = tree.ancestors[lvl]
        starts = [0] + (np.flatnonzero(np.diff(anc)) + 1).tolist()
        blocks[LEVEL_NAMES[lvl]] = starts
    return ConfusionMatrix(
        counts=counts, species_names=tree.names[SPECIES], level_blocks=blocks
    )


def write_confusion(matrix: ConfusionMatrix, counts_path, sidecar_path) -> None:
    """Counts as delimiter-separated text plus a JSON ordering sidecar."""
    with open(counts_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in matrix.counts:
            writer.writerow(row.tolist())
    sidecar = {
        "species_order": list(matrix.species_names),
        "level_blocks": matrix.level_blocks,
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# frequency bands
# ---------------------------------------------------------------------------

DEFAULT_BANDS = ((10, 50), (50, 100), (100, 500), (500, None))


@dataclass(frozen=True)
class BandResult:
    band: tuple[int, int | None]
    n_species: int
    baseline_accuracy: float
    model_accuracy: float

    @property
    def delta(self) -> float:
        return self.model_accuracy - self.baseline_accuracy

    def as_dict(self) -> dict:
        return {
            "band": list(self.band),
            "n_species": self.n_species,
            "baseline_accuracy": self.baseline_accuracy,
            "model_accuracy": self.model_accuracy,
            "delta": self.delta,
        }


def accuracy_by_frequency_band(
    baseline_predictions,
    model_predictions,
    labels,
    train_counts: dict[int, int],
    bands=DEFAULT_BANDS,
) -> list[BandResult]:
    """Mean per-species accuracy and delta per training-frequency band.

    Bands are [lo, hi) with ``hi=None`` meaning unbounded; bands containing
    no species are omitted from the result rather than reported as zero.
    """
    labs = np.asarray(labels)
    base_acc = per_species_accuracy(baseline_predictions, labs)
    model_acc = per_species_accuracy(model_predictions, labs)
    results = []
    for lo, hi in bands:
        members = [
            s
            for s in base_acc
            if s in train_counts and train_counts[s] >= lo and (hi is None or train_counts[s] < hi)
        ]
        if not members:
            continue
        results.append(
            BandResult(
                band=(lo, hi),
                n_species=len(members),
                baseline_accuracy=float(np.mean([base_acc[s] for s in members]) * 100.0),
                model_accuracy=float(np.mean([model_acc[s] for s in members]) * 100.0),
            )
        )
    return results


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def format_report_lines(payload: dict, prefix: str = "") -> list[str]:
    """Flatten nested dicts into deterministic 'key value' lines."""
    lines = []
    for key in payload:
        value = payload[key]
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            lines.extend(format_report_lines(value, prefix=f"{full}."))
        elif isinstance(value, float):
            lines.append(f"{full} {value:.6f}")
        else:
            lines.append(f"{full} {value}")
    return lines


def write_report(payload: dict, text_path, json_path) -> None:
    """Key-value text plus machine-readable JSON; both byte-deterministic."""
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(format_report_lines(payload)) + "\n")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
