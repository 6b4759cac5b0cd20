"""Experiment orchestration: dataset IO, cross-validation, evaluation, prediction.

This is the glue between the dataset/model layers and the CLI.  Every run
resolves a flat key=value configuration, echoes it into the output
directory, and writes deterministic reports, so a run can be reproduced
bit-for-bit from its own echo.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .dataset import (
    DataError,
    Observation,
    filter_and_split,
    parse_observations,
    stratified_holdout,
    stratified_kfold,
    write_observations,
)
from .encoding import AugmentConfig
from .evaluation import (
    DEFAULT_BANDS,
    MetricsReport,
    accuracy_by_frequency_band,
    confusion_matrix,
    metrics_report,
    per_level_metrics,
    unseen_species_eval,
    write_confusion,
    write_report,
)
from .model import FusionMode, ModelBundle, ModelConfig, ModelError
from .rasters import ALLOWED_EXTENTS, read_raster, write_raster
from .synthetic import SyntheticConfig, SyntheticWorld, load_world
from .taxonomy import TaxonomyTree, build_taxonomy, read_taxonomy_file, write_taxonomy_file
from .training import (
    ObservationArrays,
    OptimizerSettings,
    TrainSettings,
    eval_posteriors,
    materialize,
    train,
    write_training_log,
)


class ConfigError(ValueError):
    """Bad configuration file or option value."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run, flat so it maps 1:1 onto config keys and flags."""

    # dataset paths
    observations: str = ""
    taxonomy: str = ""
    raster: str = ""
    ground_truth: str = ""
    outdir: str = "runs/exp"

    # synthetic generation
    synth_n_genera: int = 8
    synth_seen_per_genus: int = 2
    synth_unseen_per_genus: int = 0
    synth_genera_per_family: int = 2
    synth_families_per_order: int = 2
    synth_orders_per_class: int = 2
    synth_classes_per_phylum: int = 2
    synth_count_min: int = 10
    synth_count_max: int = 60
    synth_count_exponent: float = 1.0
    synth_unseen_count_min: int = 6
    synth_unseen_count_max: int = 9
    synth_image_size: int = 24
    synth_image_noise: float = 0.9
    synth_family_signal: float = 0.7
    synth_genus_signal: float = 1.0
    synth_species_signal: float = 0.35
    synth_ambiguity_pairs: int = 8
    synth_pair_separation: float = 6.0
    synth_cluster_spread: float = 0.12
    synth_genus_coherence: bool = False
    synth_season_spread: float = 25.0
    synth_raster_inner_px: int = 256
    synth_raster_pad_px: int = 256

    # model / fusion
    fusion: str = "late"
    use_context: bool = True
    loss: str = "marginalisation"
    balanced: bool = True
    satellite: bool = False
    extent: int = 128
    dropout: bool = False
    dropout_rate: float = 0.5
    image_widths: str = "8,16,32"
    context_hidden: str = "64,64"
    satellite_widths: str = "8,16,32"
    kernel: int = 3

    # optimisation
    lr_conv: float = 0.02
    lr_head: float = 0.1
    batch_size: int = 32
    epochs: int = 30
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_lr: float = 1e-4

    # preprocessing / augmentation
    resize_to: int = 24
    crop_to: int = 24
    rotation_degrees: float = 15.0
    hflip_prob: float = 0.5
    jitter: float = 0.15

    # splitting / protocol
    min_count: int = 10
    unseen_min: int = 6
    unseen_take: int = 5
    k_folds: int = 5
    holdout_fraction: float = 0.25
    rollup: str = "marginalise"
    seed: int = 0

    def validate(self) -> None:
        if self.satellite and self.extent not in ALLOWED_EXTENTS:
            raise ConfigError(f"extent must be one of {ALLOWED_EXTENTS}, got {self.extent}")
        if self.fusion not in ("early", "separate", "late"):
            raise ConfigError(f"fusion must be early|separate|late, got {self.fusion!r}")
        if self.loss not in ("ce", "marginalisation"):
            raise ConfigError(f"loss must be ce|marginalisation, got {self.loss!r}")
        if self.rollup not in ("marginalise", "ancestor"):
            raise ConfigError(f"rollup must be marginalise|ancestor, got {self.rollup!r}")
        if self.k_folds < 1:
            raise ConfigError(f"k_folds must be >= 1, got {self.k_folds}")


def _parse_value(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"expected {target_type.__name__}, got {raw!r}") from None


def config_field_types() -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else _TYPE_NAMES[f.type] for f in fields(ExperimentConfig)}


_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}


def load_config_file(path) -> dict:
    """Parse 'key = value' lines; '#' starts a comment."""
    types = config_field_types()
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = _parse_value(raw, types[key])
    return values


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """defaults < config file < command-line overrides."""
    merged: dict = {}
    if file_values:
        merged.update(file_values)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    config = ExperimentConfig(**merged)
    config.validate()
    return config


def write_config_echo(config: ExperimentConfig, path) -> None:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _int_tuple(csv_value: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in csv_value.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {csv_value!r}") from None


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------


def synthetic_config(cfg: ExperimentConfig) -> SyntheticConfig:
    return SyntheticConfig(
        n_genera=cfg.synth_n_genera,
        seen_per_genus=cfg.synth_seen_per_genus,
        unseen_per_genus=cfg.synth_unseen_per_genus,
        genera_per_family=cfg.synth_genera_per_family,
        families_per_order=cfg.synth_families_per_order,
        orders_per_class=cfg.synth_orders_per_class,
        classes_per_phylum=cfg.synth_classes_per_phylum,
        count_min=cfg.synth_count_min,
        count_max=cfg.synth_count_max,
        count_exponent=cfg.synth_count_exponent,
        unseen_counts=(cfg.synth_unseen_count_min, cfg.synth_unseen_count_max),
        image_size=cfg.synth_image_size,
        family_signal=cfg.synth_family_signal,
        genus_signal=cfg.synth_genus_signal,
        species_signal=cfg.synth_species_signal,
        image_noise=cfg.synth_image_noise,
        ambiguity_pairs=cfg.synth_ambiguity_pairs,
        pair_separation=cfg.synth_pair_separation,
        cluster_spread=cfg.synth_cluster_spread,
        genus_spatial_coherence=cfg.synth_genus_coherence,
        season_spread=cfg.synth_season_spread,
        raster_inner_px=cfg.synth_raster_inner_px,
        raster_pad_px=cfg.synth_raster_pad_px,
        seed=cfg.seed,
    )


def make_image_loader(world: SyntheticWorld | None, base_dir: Path):
    """Loader for observation image references: synth tokens or .npy files."""

    def load(image_path: str) -> np.ndarray:
        if image_path.startswith("synth://"):
            if world is None:
                raise DataError(
                    "observation references a synthetic image but no ground-truth "
                    "sidecar was configured (set ground_truth)"
                )
            return world.load_image(image_path)
        path = Path(image_path)
        if not path.is_absolute():
            path = base_dir / path
        if path.suffix != ".npy":
            raise DataError(f"unsupported image format {path.suffix!r} (use .npy or synth://)")
        return np.load(path)

    return load


@dataclass
class LoadedDataset:
    tree_full: TaxonomyTree
    observations: list[Observation]
    world: SyntheticWorld | None
    image_loader: object
    raster: object | None


def load_dataset(cfg: ExperimentConfig, need_raster: bool | None = None) -> LoadedDataset:
    if not cfg.observations or not cfg.taxonomy:
        raise ConfigError("observations and taxonomy paths are required")
    tree_full = read_taxonomy_file(cfg.taxonomy)
    parsed = parse_observations(cfg.observations)
    world = load_world(cfg.ground_truth) if cfg.ground_truth else None
    raster = None
    if need_raster is None:
        need_raster = cfg.satellite
    if need_raster:
        if not cfg.raster:
            raise ConfigError("satellite mode requires a raster path")
        raster = read_raster(cfg.raster)
    loader = make_image_loader(world, Path(cfg.observations).resolve().parent)
    return LoadedDataset(tree_full, parsed.observations, world, loader, raster)


def training_settings(cfg: ExperimentConfig) -> TrainSettings:
    return TrainSettings(
        mode=FusionMode(cfg.fusion, satellite=cfg.satellite, dropout=cfg.dropout),
        use_context=cfg.use_context,
        loss=cfg.loss,
        balanced=cfg.balanced,
        optimizer=OptimizerSettings(
            lr_conv=cfg.lr_conv,
            lr_head=cfg.lr_head,
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            plateau_patience=cfg.plateau_patience,
            plateau_factor=cfg.plateau_factor,
            min_lr=cfg.min_lr,
        ),
        resize_to=cfg.resize_to,
        crop_to=cfg.crop_to,
        augment=AugmentConfig(
            rotation_degrees=cfg.rotation_degrees,
            hflip_prob=cfg.hflip_prob,
            jitter=cfg.jitter,
        ),
        seed=cfg.seed,
    )


def model_config(cfg: ExperimentConfig, n_species: int) -> ModelConfig:
    return ModelConfig(
        n_species=n_species,
        image_widths=_int_tuple(cfg.image_widths),
        kernel=cfg.kernel,
        context_hidden=_int_tuple(cfg.context_hidden),
        satellite_widths=_int_tuple(cfg.satellite_widths),
        dropout_rate=cfg.dropout_rate,
    )


def subtree_for(tree_full: TaxonomyTree, species_names: set[str]) -> TaxonomyTree:
    """Taxonomy restricted to the given species (the model's label space)."""
    ids = tree_full.name_to_id("species")
    records = [tree_full.species_lineage(ids[name]) for name in sorted(species_names)]
    return build_taxonomy(records)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_synth(cfg: ExperimentConfig) -> dict:
    """Generate a synthetic dataset on disk: observations, taxonomy, raster,
    ground-truth sidecar.  Byte-identical for identical config."""
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    world = SyntheticWorld(synthetic_config(cfg))
    obs_path = outdir / "observations.csv"
    tax_path = outdir / "taxonomy.csv"
    gt_path = outdir / "ground_truth.json"
    raster_path = outdir / "raster.bin"
    write_observations(obs_path, world.observations)
    write_taxonomy_file(tax_path, world.tree)
    world.write_ground_truth(gt_path)
    raster = world.make_raster()
    write_raster(raster_path, raster.data, raster.transform)
    write_config_echo(cfg, outdir / "config.txt")
    return {
        "observations": str(obs_path),
        "taxonomy": str(tax_path),
        "ground_truth": str(gt_path),
        "raster": str(raster_path),
        "n_observations": len(world.observations),
        "n_species": world.tree.n_species,
    }


def _materialize_split(dataset: LoadedDataset, observations, tree, cfg: ExperimentConfig):
    return materialize(
        observations,
        tree,
        dataset.image_loader,
        raster=dataset.raster if cfg.satellite else None,
        patch_extent=cfg.extent if cfg.satellite else None,
    )


def _fold_report(bundle, arrays: ObservationArrays, tree) -> tuple[MetricsReport, np.ndarray]:
    post = eval_posteriors(bundle, arrays)
    return metrics_report(post, arrays.labels), post


def _aggregate_reports(reports: list[MetricsReport]) -> dict:
    return {
        "micro_accuracy": float(np.mean([r.micro_accuracy for r in reports])),
        "macro_top1": float(np.mean([r.macro_top1 for r in reports])),
        "macro_top3": float(np.mean([r.macro_top3 for r in reports])),
        "macro_top5": float(np.mean([r.macro_top5 for r in reports])),
        "n_samples": int(sum(r.n_samples for r in reports)),
        "n_folds": len(reports),
    }


def run_cv(cfg: ExperimentConfig, write_outputs: bool = True) -> dict:
    """Stratified k-fold cross-validation; k=1 uses a stratified holdout.

    Bounds and image statistics are fit inside each fold's training split
    only.  Returns per-fold and aggregated species-level metrics.
    """
    cfg.validate()
    dataset = load_dataset(cfg)
    split = filter_and_split(
        dataset.observations,
        dataset.tree_full,
        min_count=cfg.min_count,
        unseen_min=cfg.unseen_min,
        unseen_take=cfg.unseen_take,
        seed=cfg.seed,
    )
    if not split.selected:
        raise DataError("no species passed the minimum-count filter")
    tree = subtree_for(dataset.tree_full, split.selected_species)
    labels = [o.species for o in split.selected]
    if cfg.k_folds == 1:
        val_mask = stratified_holdout(labels, cfg.holdout_fraction, seed=cfg.seed)
        fold_ids = np.where(val_mask, 0, -1)
        fold_range = [0]
    else:
        fold_ids = stratified_kfold(labels, k=cfg.k_folds, seed=cfg.seed)
        fold_range = list(range(cfg.k_folds))

    outdir = Path(cfg.outdir)
    if write_outputs:
        outdir.mkdir(parents=True, exist_ok=True)
        write_config_echo(cfg, outdir / "config.txt")
        write_taxonomy_file(outdir / "taxonomy_train.csv", tree)

    selected = split.selected
    settings = training_settings(cfg)
    mconfig = model_config(cfg, tree.n_species)
    fold_reports: list[MetricsReport] = []
    fold_payload: dict = {}
    bundles = []
    for fold in fold_range:
        train_obs = [o for o, f in zip(selected, fold_ids) if f != fold]
        val_obs = [o for o, f in zip(selected, fold_ids) if f == fold]
        train_arrays = _materialize_split(dataset, train_obs, tree, cfg)
        val_arrays = _materialize_split(dataset, val_obs, tree, cfg)
        bundle, log = train(tree, train_arrays, val_arrays, settings, mconfig)
        report, _ = _fold_report(bundle, val_arrays, tree)
        fold_reports.append(report)
        bundles.append(bundle)
        if write_outputs:
            fold_dir = outdir / f"fold_{fold}"
            fold_dir.mkdir(exist_ok=True)
            bundle.save(fold_dir / "checkpoint.ckpt")
            write_training_log(fold_dir / "training_log.jsonl", log)
            write_report(
                {"fold": fold, "species": report.as_dict()},
                fold_dir / "metrics.txt",
                fold_dir / "metrics.json",
            )
    aggregate = _aggregate_reports(fold_reports)
    payload = {
        "aggregate": aggregate,
        "folds": {f"fold_{i}": r.as_dict() for i, r in zip(fold_range, fold_reports)},
    }
    if write_outputs:
        write_report(payload, outdir / "metrics_aggregate.txt", outdir / "metrics_aggregate.json")
    payload["_bundles"] = bundles
    payload["_tree"] = tree
    payload["_split"] = split
    payload["_fold_ids"] = fold_ids
    return payload


def run_train(cfg: ExperimentConfig) -> dict:
    """Single training run with a stratified holdout for validation."""
    cfg.validate()
    dataset = load_dataset(cfg)
    split = filter_and_split(
        dataset.observations,
        dataset.tree_full,
        min_count=cfg.min_count,
        unseen_min=cfg.unseen_min,
        unseen_take=cfg.unseen_take,
        seed=cfg.seed,
    )
    if not split.selected:
        raise DataError("no species passed the minimum-count filter")
    tree = subtree_for(dataset.tree_full, split.selected_species)
    labels = [o.species for o in split.selected]
    val_mask = stratified_holdout(labels, cfg.holdout_fraction, seed=cfg.seed)
    train_obs = [o for o, m in zip(split.selected, val_mask) if not m]
    val_obs = [o for o, m in zip(split.selected, val_mask) if m]
    train_arrays = _materialize_split(dataset, train_obs, tree, cfg)
    val_arrays = _materialize_split(dataset, val_obs, tree, cfg)
    settings = training_settings(cfg)
    bundle, log = train(tree, train_arrays, val_arrays, settings, model_config(cfg, tree.n_species))

    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, outdir / "config.txt")
    write_taxonomy_file(outdir / "taxonomy_train.csv", tree)
    bundle.save(outdir / "checkpoint.ckpt")
    write_training_log(outdir / "training_log.jsonl", log)
    report, _ = _fold_report(bundle, val_arrays, tree)
    write_report(
        {"holdout": report.as_dict()}, outdir / "metrics.txt", outdir / "metrics.json"
    )
    return {
        "checkpoint": str(outdir / "checkpoint.ckpt"),
        "taxonomy_train": str(outdir / "taxonomy_train.csv"),
        "holdout": report.as_dict(),
    }


@dataclass(frozen=True)
class EvalOptions:
    checkpoint: str
    per_level: bool = False
    unseen: bool = False
    confusion: bool = False
    bands: bool = False
    baseline_checkpoint: str = ""
    full_taxonomy: str = ""
    train_observations: str = ""


def _materialize_unlabeled(observations, image_loader, raster, cfg: ExperimentConfig):
    images = [np.asarray(image_loader(o.image_path), dtype=np.float64) for o in observations]
    patches = None
    if raster is not None and cfg.satellite:
        from .rasters import extract_patch

        patches = np.stack(
            [
                extract_patch(raster, o.context.longitude, o.context.latitude, cfg.extent)
                for o in observations
            ]
        )
    labels = np.full(len(observations), -1, dtype=np.int64)
    return ObservationArrays(list(observations), labels, images, patches)


def run_eval(cfg: ExperimentConfig, opts: EvalOptions) -> dict:
    """Evaluate a checkpoint on an observation file; optional reports."""
    cfg.validate()
    bundle = ModelBundle.load(opts.checkpoint)
    tree = read_taxonomy_file(cfg.taxonomy)
    if tree.fingerprint() != bundle.fingerprint:
        raise DataError(
            "taxonomy fingerprint mismatch: the checkpoint was trained on a "
            "different label space than the given taxonomy file"
        )
    dataset_raster_needed = cfg.satellite
    dataset = load_dataset(cfg, need_raster=dataset_raster_needed)
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    payload: dict = {}

    if opts.unseen:
        full_tree = (
            read_taxonomy_file(opts.full_taxonomy) if opts.full_taxonomy else dataset.tree_full
        )
        full_ids = full_tree.name_to_id("species")
        missing = sorted({o.species for o in dataset.observations} - set(full_ids))
        if missing:
            raise DataError(f"unseen species missing from the full taxonomy: {missing[:5]}")
        arrays = _materialize_unlabeled(
            dataset.observations, dataset.image_loader, dataset.raster, cfg
        )
        post = eval_posteriors(bundle, arrays)
        lineages = [full_tree.species_lineage(full_ids[o.species]) for o in dataset.observations]
        report = unseen_species_eval(post, lineages, tree)
        payload["unseen"] = report.as_dict()
        write_report(payload, outdir / "unseen_metrics.txt", outdir / "unseen_metrics.json")
        return payload

    name_to_id = tree.name_to_id("species")
    unknown = sorted({o.species for o in dataset.observations} - set(name_to_id))
    if unknown:
        raise DataError(
            f"evaluation labels not in the model taxonomy: {unknown[:5]} "
            "(use --unseen for never-trained species)"
        )
    arrays = materialize(
        dataset.observations,
        tree,
        dataset.image_loader,
        raster=dataset.raster if cfg.satellite else None,
        patch_extent=cfg.extent if cfg.satellite else None,
    )
    post = eval_posteriors(bundle, arrays)
    preds = post.argmax(axis=1)
    payload["species"] = metrics_report(post, arrays.labels).as_dict()

    if opts.per_level:
        reports = per_level_metrics(post, arrays.labels, tree, rollup_mode=cfg.rollup)
        payload["per_level"] = {name: r.as_dict() for name, r in reports.items()}
        payload["rollup_mode"] = cfg.rollup
    if opts.confusion:
        matrix = confusion_matrix(preds, arrays.labels, tree)
        write_confusion(matrix, outdir / "confusion.csv", outdir / "confusion_order.json")
        payload["confusion"] = {
            "path": str(outdir / "confusion.csv"),
            "total": int(matrix.counts.sum()),
        }
    if opts.bands:
        if not opts.baseline_checkpoint:
            raise ConfigError("--bands requires --baseline-checkpoint")
        baseline = ModelBundle.load(opts.baseline_checkpoint)
        if baseline.fingerprint != bundle.fingerprint:
            raise DataError("baseline checkpoint taxonomy fingerprint mismatch")
        base_post = eval_posteriors(baseline, arrays)
        counts_path = opts.train_observations or cfg.observations
        train_parsed = parse_observations(counts_path)
        from collections import Counter as _Counter

        count_by_name = _Counter(o.species for o in train_parsed.observations)
        train_counts = {
            name_to_id[name]: count for name, count in count_by_name.items() if name in name_to_id
        }
        bands = accuracy_by_frequency_band(
            base_post.argmax(axis=1), preds, arrays.labels, train_counts
        )
        payload["bands"] = {f"{b.band[0]}-{b.band[1] or 'inf'}": b.as_dict() for b in bands}

    write_report(payload, outdir / "eval_metrics.txt", outdir / "eval_metrics.json")
    return payload


@dataclass(frozen=True)
class PredictOptions:
    checkpoint: str
    image: str
    longitude: float | None = None
    latitude: float | None = None
    altitude: float | None = None
    day_of_year: float | None = None


def run_predict(cfg: ExperimentConfig, opts: PredictOptions) -> dict:
    """Rank the top-5 species for one observation; lineage of the winner.

    Joint fusion modes require the full metadata; separate mode falls back
    to the image-only posterior when metadata is missing.
    """
    from .encoding import ImageStats, RawContext, preprocess_image
    from .training import _context_matrix, bundle_bounds

    bundle = ModelBundle.load(opts.checkpoint)
    tree = read_taxonomy_file(cfg.taxonomy)
    if tree.fingerprint() != bundle.fingerprint:
        raise DataError("taxonomy fingerprint mismatch between checkpoint and taxonomy file")
    world = load_world(cfg.ground_truth) if cfg.ground_truth else None
    loader = make_image_loader(world, Path(cfg.observations or ".").resolve().parent)
    image = np.asarray(loader(opts.image), dtype=np.float64)

    metadata = (opts.longitude, opts.latitude, opts.altitude, opts.day_of_year)
    have_metadata = all(v is not None for v in metadata)
    if not have_metadata and bundle.mode.tag in ("early", "late") and bundle.use_context:
        raise ConfigError(
            f"fusion mode {bundle.mode.tag!r} requires longitude/latitude/altitude/"
            "day_of_year metadata at inference"
        )
    pre = bundle.preprocess
    stats = ImageStats(mean=pre.image_mean, std=pre.image_std)
    img = preprocess_image(
        image, "eval", stats, resize_to=pre.resize_to, crop_to=pre.crop_to
    )[None]
    ctx = None
    if have_metadata and bundle.use_context:
        raw = RawContext(opts.longitude, opts.latitude, opts.altitude, opts.day_of_year)
        obs = Observation(id="query", image_path=opts.image, context=raw, species="?")
        ctx = _context_matrix([obs], bundle_bounds(bundle))
    post = bundle.eval_posterior(img, ctx)[0]
    order = np.argsort(-post, kind="stable")[:5]
    top = [
        {"rank": i + 1, "species": tree.names[0][int(s)], "probability": float(post[s])}
        for i, s in enumerate(order)
    ]
    lineage = tree.species_lineage(int(order[0]))
    result = {
        "top5": top,
        "lineage": {level: name for level, name in zip(
            ("species", "genus", "family", "order", "class", "phylum"), lineage
        )},
        "used_metadata": bool(ctx is not None),
    }
    return result
