"""Six-level taxonomic hierarchy with exact bottom-up marginalisation.

The hierarchy is the fixed chain species > genus > family > order > class >
phylum (level 0 = species, level 5 = phylum).  A tree is built from full
lineage records, assigns dense per-level integer ids in a deterministic
depth-first order, and supports summing a species-level probability vector
into the distribution at any coarser level.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

LEVEL_NAMES = ("species", "genus", "family", "order", "class", "phylum")
N_LEVELS = len(LEVEL_NAMES)

SPECIES, GENUS, FAMILY, ORDER, CLASS, PHYLUM = range(N_LEVELS)


class TaxonomyError(ValueError):
    """Invalid taxonomy input (empty, duplicated, or out of range)."""


class LineageConflictError(TaxonomyError):
    """The same node is claimed under two different parents."""

    def __init__(self, level: int, name: str, parents: tuple[str, str]):
        self.level = level
        self.name = name
        self.parents = parents
        super().__init__(
            f"{LEVEL_NAMES[level]} '{name}' claimed under two "
            f"{LEVEL_NAMES[level + 1]} parents: {parents[0]!r} and {parents[1]!r}"
        )


def level_index(level: int | str) -> int:
    """Normalise a level given as index 0..5 or name to its index."""
    if isinstance(level, str):
        try:
            return LEVEL_NAMES.index(level)
        except ValueError:
            raise TaxonomyError(f"unknown level name {level!r}") from None
    if not 0 <= level < N_LEVELS:
        raise TaxonomyError(f"level index {level} outside 0..{N_LEVELS - 1}")
    return int(level)


@dataclass(frozen=True)
class TaxonNode:
    """One taxon: dense id within its level plus a parent link one level up."""

    id: int
    level: int
    name: str
    parent: int | None  # id at level+1; None only at phylum level


@dataclass(frozen=True)
class TaxonomyTree:
    """Immutable hierarchy: per-level name arrays, parent vectors, ancestor table.

    ``names[l][i]`` is the name of node ``i`` at level ``l``.  ``parents[l]``
    maps level-``l`` ids to level-``l+1`` ids (defined for l = 0..4).
    ``ancestors[l][s]`` is the level-``l`` ancestor of species ``s``; row 0 is
    the identity.  Node ids follow a depth-first traversal with lexicographic
    tie-breaking on names, so species of one genus (and genera of one family,
    and so on) occupy contiguous id blocks.
    """

    names: tuple[tuple[str, ...], ...]
    parents: tuple[np.ndarray, ...]  # len 5, int64, read-only
    ancestors: np.ndarray  # (6, C) int64, read-only

    @property
    def n_species(self) -> int:
        return len(self.names[SPECIES])

    def level_size(self, level: int | str) -> int:
        return len(self.names[level_index(level)])

    def level_sizes(self) -> tuple[int, ...]:
        return tuple(len(n) for n in self.names)

    def node(self, level: int | str, node_id: int) -> TaxonNode:
        lvl = level_index(level)
        if not 0 <= node_id < len(self.names[lvl]):
            raise TaxonomyError(
                f"node id {node_id} out of range for level {LEVEL_NAMES[lvl]} "
                f"(size {len(self.names[lvl])})"
            )
        parent = None if lvl == PHYLUM else int(self.parents[lvl][node_id])
        return TaxonNode(id=node_id, level=lvl, name=self.names[lvl][node_id], parent=parent)

    def name_to_id(self, level: int | str) -> dict[str, int]:
        lvl = level_index(level)
        return {name: i for i, name in enumerate(self.names[lvl])}

    def ancestor_at_level(self, species_id: int, level: int | str) -> int:
        """Id of the unique level-``level`` ancestor of ``species_id``."""
        lvl = level_index(level)
        if not 0 <= species_id < self.n_species:
            raise TaxonomyError(
                f"species id {species_id} out of range (C={self.n_species})"
            )
        return int(self.ancestors[lvl, species_id])

    def ancestors_at_level(self, species_ids: np.ndarray, level: int | str) -> np.ndarray:
        """Vectorised :meth:`ancestor_at_level` for an id array."""
        lvl = level_index(level)
        ids = np.asarray(species_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_species):
            raise TaxonomyError("species id out of range")
        return self.ancestors[lvl, ids]

    def species_lineage(self, species_id: int) -> tuple[str, ...]:
        """Names of the full ancestor chain, species first."""
        return tuple(
            self.names[lvl][self.ancestor_at_level(species_id, lvl)]
            for lvl in range(N_LEVELS)
        )

    def marginalise(self, dist: np.ndarray, level: int | str = SPECIES) -> np.ndarray:
        """Sum a level-``level`` distribution into the next-coarser level.

        Accepts a single vector or a batch with class entries on the last
        axis.  Entry ``i`` of the output is the sum of input entries over the
        children of coarse node ``i``; total mass is conserved up to
        floating-point summation order.
        """
        lvl = level_index(level)
        if lvl == PHYLUM:
            raise TaxonomyError("phylum is the coarsest level; cannot marginalise")
        d = np.asarray(dist, dtype=np.float64)
        n_fine = len(self.names[lvl])
        if d.shape[-1] != n_fine:
            raise TaxonomyError(
                f"distribution length {d.shape[-1]} does not match level "
                f"{LEVEL_NAMES[lvl]} cardinality {n_fine}"
            )
        _check_distribution(d)
        parent = self.parents[lvl]
        n_coarse = len(self.names[lvl + 1])
        flat = d.reshape(-1, n_fine)
        out = np.zeros((flat.shape[0], n_coarse))
        # scatter-add per parent index: O(n_fine) per row and exact
        np.add.at(out.T, parent, flat.T)
        return out.reshape(d.shape[:-1] + (n_coarse,))

    def marginalise_all(self, species_dist: np.ndarray) -> list[np.ndarray]:
        """Distributions at every level, finest first; element 0 is the input."""
        d = np.asarray(species_dist, dtype=np.float64)
        dists = [d]
        for lvl in range(PHYLUM):
            d = self.marginalise(d, lvl)
            dists.append(d)
        return dists

    def fingerprint(self) -> str:
        """Content hash over the canonical lineage rows (input-order independent)."""
        h = hashlib.sha256()
        for s in range(self.n_species):
            h.update("\x1f".join(self.species_lineage(s)).encode("utf-8"))
            h.update(b"\x1e")
        return h.hexdigest()


def _check_distribution(d: np.ndarray) -> None:
    if not np.isfinite(d).all():
        raise TaxonomyError("distribution contains non-finite entries")
    if (d < 0).any():
        raise TaxonomyError("distribution contains negative entries")
    sums = d.reshape(-1, d.shape[-1]).sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9:
        worst = float(sums[np.abs(sums - 1.0).argmax()])
        raise TaxonomyError(f"distribution does not sum to 1 (got {worst!r})")


def build_taxonomy(records: list[tuple[str, ...]]) -> TaxonomyTree:
    """Build a :class:`TaxonomyTree` from (species, genus, ..., phylum) rows.

    Rows may arrive in any order; the resulting node ordering is the
    depth-first lexicographic order and therefore input-order independent.
    Conflicting lineages (one node claimed under two parents) and duplicate
    species names are hard errors.
    """
    if not records:
        raise TaxonomyError("no taxonomy records given")
    rows = []
    for rec in records:
        rec = tuple(str(x).strip() for x in rec)
        if len(rec) != N_LEVELS:
            raise TaxonomyError(
                f"expected {N_LEVELS} lineage fields, got {len(rec)}: {rec!r}"
            )
        if any(not x for x in rec):
            raise TaxonomyError(f"empty lineage field in record {rec!r}")
        rows.append(rec)

    seen_species: dict[str, tuple[str, ...]] = {}
    for rec in rows:
        if seen_species.get(rec[SPECIES]) == rec:
            raise TaxonomyError(f"duplicate species record {rec[SPECIES]!r}")
        seen_species[rec[SPECIES]] = rec

    # one parent per node: walk each row bottom-up and record claimed parents
    claimed: list[dict[str, str]] = [dict() for _ in range(PHYLUM)]
    for rec in rows:
        for lvl in range(PHYLUM):
            name, parent_name = rec[lvl], rec[lvl + 1]
            prev = claimed[lvl].get(name)
            if prev is None:
                claimed[lvl][name] = parent_name
            elif prev != parent_name:
                raise LineageConflictError(lvl, name, (prev, parent_name))

    # depth-first lexicographic order == rows sorted by lineage from the root
    rows.sort(key=lambda rec: rec[::-1])
    names: list[list[str]] = [[] for _ in range(N_LEVELS)]
    index: list[dict[str, int]] = [dict() for _ in range(N_LEVELS)]
    parent_lists: list[list[int]] = [[] for _ in range(PHYLUM)]
    for rec in rows:
        for lvl in range(PHYLUM, -1, -1):
            name = rec[lvl]
            if name not in index[lvl]:
                index[lvl][name] = len(names[lvl])
                names[lvl].append(name)
                if lvl < PHYLUM:
                    parent_lists[lvl].append(index[lvl + 1][rec[lvl + 1]])
    parents = [np.asarray(p, dtype=np.int64) for p in parent_lists]

    n_species = len(names[SPECIES])
    ancestors = np.empty((N_LEVELS, n_species), dtype=np.int64)
    ancestors[SPECIES] = np.arange(n_species)
    for lvl in range(PHYLUM):
        ancestors[lvl + 1] = parents[lvl][ancestors[lvl]]

    for arr in parents:
        arr.setflags(write=False)
    ancestors.setflags(write=False)
    return TaxonomyTree(
        names=tuple(tuple(n) for n in names),
        parents=tuple(parents),
        ancestors=ancestors,
    )


def read_taxonomy_file(path, delimiter: str = ",") -> TaxonomyTree:
    """Load a taxonomy from delimiter-separated text with a required header.

    Columns must be exactly species,genus,family,order,class,phylum.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise TaxonomyError(f"{path}: empty taxonomy file") from None
        header = [h.strip().lower() for h in header]
        if header != list(LEVEL_NAMES):
            raise TaxonomyError(
                f"{path}: expected header {','.join(LEVEL_NAMES)}, got {','.join(header)}"
            )
        records = [tuple(row) for row in reader if row and any(f.strip() for f in row)]
    return build_taxonomy(records)


def write_taxonomy_file(path, tree: TaxonomyTree, delimiter: str = ",") -> None:
    """Write the tree back out as one lineage row per species, header first."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(LEVEL_NAMES)
        for s in range(tree.n_species):
            writer.writerow(tree.species_lineage(s))
