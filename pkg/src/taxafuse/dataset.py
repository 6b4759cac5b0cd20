"""Observation ingestion, filtering/splitting, balanced sampling, k-fold.

Mirrors the data protocol used throughout: species below a minimum image
count are dropped from training; species with almost enough images form a
held-out "unseen" set (a fixed number of images sampled per species); the
remaining observations are split by seeded stratified k-fold.  Balanced
sampling weights every observation inversely to its class count.
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodingError, RawContext
from .taxonomy import TaxonomyTree

OBSERVATION_COLUMNS = (
    "id",
    "image_path",
    "longitude",
    "latitude",
    "altitude",
    "day_of_year",
    "species",
)


class DataError(ValueError):
    """Malformed observation file or invalid split parameters."""


@dataclass(frozen=True)
class Observation:
    """One community-science record; image_path may be a synthetic token."""

    id: str
    image_path: str
    context: RawContext
    species: str
    patch_ref: str | None = None


@dataclass(frozen=True)
class ParseResult:
    observations: list[Observation]
    rejected: list[tuple[int, str]]  # (1-based data row number, reason)


@dataclass(frozen=True)
class DatasetSplit:
    """Selected training pool, unseen evaluation pool, optional fold labels."""

    selected: list[Observation]
    unseen: list[Observation]
    folds: np.ndarray | None = None  # fold id per selected observation

    @property
    def selected_species(self) -> set:
        return {o.species for o in self.selected}

    @property
    def unseen_species(self) -> set:
        return {o.species for o in self.unseen}


def parse_observations(path, delimiter: str = ",") -> ParseResult:
    """Read an observation CSV; keep valid rows, report rejected ones.

    The header must contain every mandatory column (extra columns are
    ignored).  Rows with unparseable coordinates are rejected individually
    with a reason instead of failing the whole file.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty observation file") from None
        missing = [c for c in OBSERVATION_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing mandatory columns {missing}")
        col = {name: header.index(name) for name in OBSERVATION_COLUMNS}
        patch_col = header.index("patch_ref") if "patch_ref" in header else None

        observations: list[Observation] = []
        rejected: list[tuple[int, str]] = []
        for row_no, row in enumerate(reader, start=1):
            if not row or not any(f.strip() for f in row):
                continue
            if len(row) < len(header):
                rejected.append((row_no, f"expected {len(header)} fields, got {len(row)}"))
                continue
            try:
                context = RawContext(
                    longitude=float(row[col["longitude"]]),
                    latitude=float(row[col["latitude"]]),
                    altitude=float(row[col["altitude"]]),
                    day_of_year=float(row[col["day_of_year"]]),
                )
            except (ValueError, EncodingError) as exc:
                rejected.append((row_no, str(exc)))
                continue
            species = row[col["species"]].strip()
            if not species:
                rejected.append((row_no, "empty species label"))
                continue
            observations.append(
                Observation(
                    id=row[col["id"]].strip(),
                    image_path=row[col["image_path"]].strip(),
                    context=context,
                    species=species,
                    patch_ref=row[patch_col].strip() or None if patch_col is not None else None,
                )
            )
    return ParseResult(observations=observations, rejected=rejected)


def write_observations(path, observations: list[Observation], delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(OBSERVATION_COLUMNS)
        for o in observations:
            writer.writerow(
                [
                    o.id,
                    o.image_path,
                    repr(o.context.longitude),
                    repr(o.context.latitude),
                    repr(o.context.altitude),
                    repr(o.context.day_of_year),
                    o.species,
                ]
            )


def filter_and_split(
    observations: list[Observation],
    taxonomy: TaxonomyTree,
    min_count: int = 10,
    unseen_min: int = 6,
    unseen_take: int = 5,
    seed: int = 0,
) -> DatasetSplit:
    """Partition observations into the selected pool and the unseen pool.

    Species with at least ``min_count`` images are selected in full; species
    with counts in [unseen_min, min_count-1] contribute exactly
    ``unseen_take`` randomly chosen observations each.  Everything else is
    dropped.  Labels must resolve in the taxonomy.
    """
    if min_count <= unseen_take:
        raise DataError(f"min_count {min_count} must exceed unseen_take {unseen_take}")
    known = set(taxonomy.names[0])
    unknown = sorted({o.species for o in observations} - known)
    if unknown:
        raise DataError(f"labels not in taxonomy: {unknown[:5]}{'...' if len(unknown) > 5 else ''}")

    counts = Counter(o.species for o in observations)
    by_species: dict[str, list[Observation]] = defaultdict(list)
    for o in observations:
        by_species[o.species].append(o)

    rng = np.random.default_rng(seed)
    selected: list[Observation] = []
    unseen: list[Observation] = []
    for species in sorted(by_species):
        group = by_species[species]
        n = counts[species]
        if n >= min_count:
            selected.extend(group)
        elif unseen_min <= n <= min_count - 1:
            picked = rng.choice(len(group), size=unseen_take, replace=False)
            unseen.extend(group[i] for i in sorted(picked))
    return DatasetSplit(selected=selected, unseen=unseen)


def sampling_weights(labels: list) -> np.ndarray:
    """Inverse class-frequency weight per observation: W_i = 1 / N_{y_i}."""
    if len(labels) == 0:
        raise DataError("cannot weight an empty label list")
    counts = Counter(labels)
    return np.array([1.0 / counts[y] for y in labels])


def draw_balanced_indices(
    weights: np.ndarray, n_draws: int, rng: np.random.Generator
) -> np.ndarray:
    """With-replacement weighted draws; one epoch uses n_draws = len(weights)."""
    w = np.asarray(weights, dtype=np.float64)
    if (w <= 0).any():
        raise DataError("sampling weights must be positive")
    return rng.choice(len(w), size=n_draws, replace=True, p=w / w.sum())


def stratified_kfold(labels: list, k: int = 5, seed: int = 0) -> np.ndarray:
    """Deterministic stratified fold assignment; per-class spread <= 1.

    Within every class the (seeded-shuffled) members are dealt round-robin
    starting from a per-class offset, so no fold systematically collects the
    remainders.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    labels = list(labels)
    groups: dict = defaultdict(list)
    for i, y in enumerate(labels):
        groups[y].append(i)
    for y in sorted(groups, key=str):
        if len(groups[y]) < k:
            raise DataError(
                f"class {y!r} has only {len(groups[y])} observations; needs >= {k} for {k}-fold"
            )
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    for class_no, y in enumerate(sorted(groups, key=str)):
        idx = np.array(groups[y])
        rng.shuffle(idx)
        start = class_no % k
        for j, i in enumerate(idx):
            folds[i] = (start + j) % k
    return folds


def stratified_holdout(labels: list, fraction: float, seed: int = 0) -> np.ndarray:
    """Boolean mask marking a stratified holdout of roughly ``fraction``.

    Every class contributes at least one held-out member.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"holdout fraction must be in (0, 1), got {fraction}")
    groups: dict = defaultdict(list)
    for i, y in enumerate(labels):
        groups[y].append(i)
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(labels), dtype=bool)
    for y in sorted(groups, key=str):
        idx = np.array(groups[y])
        if len(idx) < 2:
            raise DataError(f"class {y!r} has fewer than 2 observations; cannot hold out")
        rng.shuffle(idx)
        take = max(1, int(round(fraction * len(idx))))
        take = min(take, len(idx) - 1)
        mask[idx[:take]] = True
    return mask
