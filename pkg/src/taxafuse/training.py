"""Training loops for every fusion strategy.

Joint strategies (early/late fusion) optimise all branches through the
fused posterior with a single loss; separate training runs one loop per
branch with independent seeded streams, so the image branch trajectory is
bit-identical whether or not auxiliary branches exist.  Balanced sampling
draws one epoch of with-replacement weighted samples (epoch length equals
the dataset size); plain shuffling is the unbalanced alternative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndiff as nd
from .dataset import Observation, sampling_weights
from .encoding import (
    AugmentConfig,
    ImageStats,
    NormalizationBounds,
    compute_image_stats,
    fit_bounds,
    normalize_context,
    preprocess_image,
)
from .model import (
    FusionError,
    FusionMode,
    ModelBundle,
    ModelConfig,
    ModelError,
    PreprocessState,
    binary_cross_entropy,
    cross_entropy,
    fuse_early_features,
    fuse_late,
    marginalisation_loss,
)
from .ndiff import DivergenceError, ParameterGroup, ReduceLROnPlateau, SGD, Tensor
from .taxonomy import TaxonomyTree

LOSS_CHOICES = ("ce", "marginalisation")
_PHASES = {"image": 0, "context": 1, "satellite": 2, "joint": 3}


@dataclass(frozen=True)
class OptimizerSettings:
    """Two learning-rate groups (convolutional vs fully-connected), plateau
    reduction, and the batching/epoch budget."""

    lr_conv: float = 0.02
    lr_head: float = 0.1
    batch_size: int = 32
    epochs: int = 30
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_lr: float = 1e-5


@dataclass(frozen=True)
class TrainSettings:
    mode: FusionMode = FusionMode("late")
    use_context: bool = True
    loss: str = "marginalisation"
    balanced: bool = True
    optimizer: OptimizerSettings = OptimizerSettings()
    resize_to: int = 32
    crop_to: int = 32
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_CHOICES:
            raise ModelError(f"loss must be one of {LOSS_CHOICES}, got {self.loss!r}")


@dataclass
class ObservationArrays:
    """Materialised model inputs for a fixed observation list."""

    observations: list[Observation]
    labels: np.ndarray                  # species ids in taxonomy order
    images: list[np.ndarray]            # raw HxWxC arrays
    patches: np.ndarray | None = None   # raw (N, bands, E, E)

    def __len__(self) -> int:
        return len(self.observations)


def materialize(
    observations: list[Observation],
    tree: TaxonomyTree,
    image_loader,
    raster=None,
    patch_extent: int | None = None,
) -> ObservationArrays:
    """Load raw images (and patches, when a raster is given) for observations."""
    name_to_id = tree.name_to_id("species")
    labels = np.array([name_to_id[o.species] for o in observations], dtype=np.int64)
    images = [np.asarray(image_loader(o.image_path), dtype=np.float64) for o in observations]
    patches = None
    if raster is not None:
        if patch_extent is None:
            raise ModelError("patch_extent required when a raster is supplied")
        from .rasters import extract_patch

        patches = np.stack(
            [
                extract_patch(raster, o.context.longitude, o.context.latitude, patch_extent)
                for o in observations
            ]
        )
    return ObservationArrays(list(observations), labels, images, patches)


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float | None
    val_accuracy: float | None
    lr_conv: float
    lr_head: float

    def as_dict(self) -> dict:
        return {
            "phase": self.phase,
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "lr_conv": self.lr_conv,
            "lr_head": self.lr_head,
        }


def write_training_log(path, records: list[EpochRecord]) -> None:
    """One structured record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _stream(seed: int, kind: int, phase: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(seed, 0xA0 + kind, _PHASES[phase]))
    )


def _context_matrix(observations, bounds: NormalizationBounds) -> np.ndarray:
    return np.stack(
        [normalize_context(o.context, bounds).as_array() for o in observations]
    )


def _standardize_patches(patches, mean, std) -> np.ndarray:
    return (patches - mean[None, :, None, None]) / std[None, :, None, None]


def _patch_stats(patches: np.ndarray, eps: float = 1e-8):
    mean = patches.mean(axis=(0, 2, 3))
    std = patches.std(axis=(0, 2, 3)) + eps
    return mean, std


def _assemble_images(
    arrays: ObservationArrays,
    idxs: np.ndarray,
    stats: ImageStats,
    settings: TrainSettings,
    rng: np.random.Generator | None,
    train: bool,
) -> np.ndarray:
    mode = "train" if train else "eval"
    return np.stack(
        [
            preprocess_image(
                arrays.images[i],
                mode,
                stats,
                resize_to=settings.resize_to,
                crop_to=settings.crop_to,
                augment=settings.augment,
                rng=rng,
            )
            for i in idxs
        ]
    )


def _epoch_order(
    n: int, labels: np.ndarray, balanced: bool, rng: np.random.Generator
) -> np.ndarray:
    if balanced:
        weights = sampling_weights(labels.tolist())
        return rng.choice(n, size=n, replace=True, p=weights / weights.sum())
    return rng.permutation(n)


def _loss_for(posterior: Tensor, labels: np.ndarray, settings: TrainSettings, tree: TaxonomyTree) -> Tensor:
    if settings.loss == "marginalisation":
        return marginalisation_loss(posterior, labels, tree)
    return cross_entropy(posterior, labels)


def _check_finite(loss: Tensor, phase: str, epoch: int, step: int) -> None:
    if not np.isfinite(loss.data):
        raise DivergenceError(
            f"{phase} training diverged: non-finite loss at epoch {epoch}, step {step}"
        )


class _Evaluator:
    """Cached eval-mode inputs for a validation split."""

    def __init__(self, bundle, arrays, stats, settings, ctx, patches):
        self.bundle = bundle
        self.labels = arrays.labels
        self.ctx = ctx
        self.patches = patches
        idx = np.arange(len(arrays))
        self.images = _assemble_images(arrays, idx, stats, settings, None, train=False)

    def posterior(self) -> np.ndarray:
        out = []
        for lo in range(0, len(self.labels), 256):
            hi = lo + 256
            out.append(
                self.bundle.eval_posterior(
                    self.images[lo:hi],
                    self.ctx[lo:hi] if self.ctx is not None else None,
                    self.patches[lo:hi] if self.patches is not None else None,
                )
            )
        return np.concatenate(out)

    def metrics(self, settings: TrainSettings, tree: TaxonomyTree) -> tuple[float, float]:
        post = self.posterior()
        loss = _loss_for(Tensor(post), self.labels, settings, tree)
        accuracy = float((post.argmax(axis=1) == self.labels).mean())
        return float(loss.data), accuracy


def bundle_bounds(bundle: ModelBundle) -> NormalizationBounds:
    """Reconstruct the coordinate bounds frozen into a trained bundle."""
    if bundle.preprocess is None:
        raise ModelError("bundle carries no preprocessing state; train or load it first")
    b = bundle.preprocess.bounds_array
    return NormalizationBounds(
        longitude=(float(b[0, 0]), float(b[0, 1])),
        latitude=(float(b[1, 0]), float(b[1, 1])),
        altitude=(float(b[2, 0]), float(b[2, 1])),
    )


def eval_posteriors(
    bundle: ModelBundle, arrays: ObservationArrays, batch: int = 256
) -> np.ndarray:
    """Eval-mode species posteriors for materialised observations, using the
    preprocessing state frozen into the bundle."""
    pre = bundle.preprocess
    if pre is None:
        raise ModelError("bundle carries no preprocessing state; train or load it first")
    stats = ImageStats(mean=pre.image_mean, std=pre.image_std)
    images = np.stack(
        [
            preprocess_image(img, "eval", stats, resize_to=pre.resize_to, crop_to=pre.crop_to)
            for img in arrays.images
        ]
    )
    ctx = None
    if bundle.use_context:
        ctx = _context_matrix(arrays.observations, bundle_bounds(bundle))
    patches = None
    if bundle.mode.satellite:
        if arrays.patches is None:
            raise ModelError("satellite bundle needs materialised patches for evaluation")
        patches = _standardize_patches(arrays.patches, pre.patch_mean, pre.patch_std)
    out = []
    for lo in range(0, len(arrays), batch):
        hi = lo + batch
        out.append(
            bundle.eval_posterior(
                images[lo:hi],
                ctx[lo:hi] if ctx is not None else None,
                patches[lo:hi] if patches is not None else None,
            )
        )
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(
    tree: TaxonomyTree,
    train_arrays: ObservationArrays,
    val_arrays: ObservationArrays | None,
    settings: TrainSettings,
    model_config: ModelConfig | None = None,
) -> tuple[ModelBundle, list[EpochRecord]]:
    """Fit a model bundle on the training arrays per the fusion strategy.

    Preprocessing state (coordinate bounds, image/patch statistics) is fit
    on the training split only and frozen into the returned bundle.  With
    zero epochs the bundle is returned at initialisation, untouched.
    """
    if model_config is None:
        model_config = ModelConfig(n_species=tree.n_species)
    if model_config.n_species != tree.n_species:
        raise ModelError(
            f"model expects {model_config.n_species} species, taxonomy has {tree.n_species}"
        )
    if settings.mode.satellite and train_arrays.patches is None:
        raise ModelError("satellite mode enabled but no patches materialised")

    bounds = fit_bounds([o.context for o in train_arrays.observations])
    stats = compute_image_stats(train_arrays.images)
    patch_mean = patch_std = None
    if train_arrays.patches is not None:
        patch_mean, patch_std = _patch_stats(train_arrays.patches)

    bundle = ModelBundle(
        model_config,
        settings.mode,
        use_context=settings.use_context,
        fingerprint=tree.fingerprint(),
        seed=settings.seed,
    )
    bundle.preprocess = PreprocessState(
        bounds_array=np.array([bounds.longitude, bounds.latitude, bounds.altitude]),
        image_mean=stats.mean,
        image_std=stats.std,
        resize_to=settings.resize_to,
        crop_to=settings.crop_to,
        patch_mean=patch_mean,
        patch_std=patch_std,
        patch_extent=(
            train_arrays.patches.shape[-1] if train_arrays.patches is not None else None
        ),
    )

    train_ctx = _context_matrix(train_arrays.observations, bounds) if settings.use_context else None
    train_patches = (
        _standardize_patches(train_arrays.patches, patch_mean, patch_std)
        if settings.mode.satellite
        else None
    )
    evaluator = None
    if val_arrays is not None and len(val_arrays):
        val_ctx = _context_matrix(val_arrays.observations, bounds) if settings.use_context else None
        val_patches = (
            _standardize_patches(val_arrays.patches, patch_mean, patch_std)
            if settings.mode.satellite and val_arrays.patches is not None
            else None
        )
        evaluator = _Evaluator(bundle, val_arrays, stats, settings, val_ctx, val_patches)

    records: list[EpochRecord] = []
    if settings.optimizer.epochs <= 0:
        return bundle, records

    if settings.mode.tag in ("late", "early"):
        if settings.use_context:
            records += _run_joint(bundle, tree, train_arrays, train_ctx, train_patches, stats, settings, evaluator)
        else:
            # joint tags without context degenerate to the image-only loop
            records += _run_image(bundle, tree, train_arrays, stats, settings, evaluator)
    else:
        records += _run_image(bundle, tree, train_arrays, stats, settings, evaluator)
        if settings.use_context:
            records += _run_presence(
                bundle, "context", train_arrays, train_ctx, stats, settings, evaluator
            )
        if settings.mode.satellite:
            records += _run_presence(
                bundle, "satellite", train_arrays, train_patches, stats, settings, evaluator
            )
    return bundle, records


def _make_optimizer(conv_params, dense_params, opt: OptimizerSettings) -> SGD:
    groups = []
    if conv_params:
        groups.append(ParameterGroup(conv_params, lr=opt.lr_conv, name="conv"))
    if dense_params:
        groups.append(ParameterGroup(dense_params, lr=opt.lr_head, name="head"))
    return SGD(groups)


def _record(
    phase: str,
    epoch: int,
    train_loss: float,
    opt: SGD,
    settings: TrainSettings,
    tree: TaxonomyTree,
    evaluator: _Evaluator | None,
) -> EpochRecord:
    val_loss = val_acc = None
    if evaluator is not None:
        val_loss, val_acc = evaluator.metrics(settings, tree)
    lrs = {g.name: g.lr for g in opt.groups}
    return EpochRecord(
        phase=phase,
        epoch=epoch,
        train_loss=train_loss,
        val_loss=val_loss,
        val_accuracy=val_acc,
        lr_conv=lrs.get("conv", 0.0),
        lr_head=lrs.get("head", 0.0),
    )


def _run_loop(
    phase: str,
    bundle: ModelBundle,
    tree: TaxonomyTree,
    labels: np.ndarray,
    forward,
    conv_params,
    dense_params,
    settings: TrainSettings,
    evaluator: _Evaluator | None,
    n_train: int,
) -> list[EpochRecord]:
    opt = _make_optimizer(conv_params, dense_params, settings.optimizer)
    sched = ReduceLROnPlateau(
        opt,
        patience=settings.optimizer.plateau_patience,
        factor=settings.optimizer.plateau_factor,
        min_lr=settings.optimizer.min_lr,
    )
    order_rng = _stream(settings.seed, 0, phase)
    records = []
    batch = settings.optimizer.batch_size
    for epoch in range(1, settings.optimizer.epochs + 1):
        order = _epoch_order(n_train, labels, settings.balanced, order_rng)
        losses = []
        for step, lo in enumerate(range(0, n_train, batch)):
            idxs = order[lo : lo + batch]
            try:
                loss = forward(idxs, epoch)
                _check_finite(loss, phase, epoch, step)
                loss.backward()
                opt.step()
            except (FusionError, DivergenceError) as exc:
                raise DivergenceError(
                    f"{phase} training diverged at epoch {epoch}, step {step}: {exc}"
                ) from exc
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses)) if losses else float("nan")
        try:
            rec = _record(phase, epoch, train_loss, opt, settings, tree, evaluator)
        except (FusionError, DivergenceError) as exc:
            raise DivergenceError(
                f"{phase} training diverged at epoch {epoch} (validation): {exc}"
            ) from exc
        records.append(rec)
        sched.step(rec.val_loss if rec.val_loss is not None else train_loss)
    return records


def _run_image(bundle, tree, arrays, stats, settings, evaluator) -> list[EpochRecord]:
    aug_rng = _stream(settings.seed, 1, "image")

    def forward(idxs, epoch):
        images = _assemble_images(arrays, idxs, stats, settings, aug_rng, train=True)
        posterior = nd.softmax(bundle.image.logits(Tensor(images)))
        return _loss_for(posterior, arrays.labels[idxs], settings, tree)

    return _run_loop(
        "image",
        bundle,
        tree,
        arrays.labels,
        forward,
        bundle.image.conv_params,
        bundle.image.head_params,
        settings,
        evaluator,
        len(arrays),
    )


def _run_presence(bundle, phase, arrays, inputs, stats, settings, evaluator) -> list[EpochRecord]:
    """Separate-mode presence branch: per-class binary cross-entropy with the
    observed species as the single positive."""
    n_species = bundle.config.n_species
    one_hot = np.zeros((len(arrays), n_species))
    one_hot[np.arange(len(arrays)), arrays.labels] = 1.0
    drop_rng = _stream(settings.seed, 2, phase)

    if phase == "context":
        branch = bundle.context
        conv_params: list = []
        dense_params = branch.params

        def forward(idxs, epoch):
            probs = branch.probabilities(Tensor(inputs[idxs]))
            return binary_cross_entropy(probs, one_hot[idxs])

    else:
        branch = bundle.satellite
        conv_params = branch.conv_params
        dense_params = branch.head_params

        def forward(idxs, epoch):
            probs = branch.probabilities(
                Tensor(inputs[idxs]),
                use_dropout=settings.mode.dropout,
                train=True,
                rng=drop_rng,
            )
            return binary_cross_entropy(probs, one_hot[idxs])

    return _run_loop(
        phase,
        bundle,
        None,  # presence loops never touch the taxonomy
        arrays.labels,
        forward,
        conv_params,
        dense_params,
        settings,
        None,  # per-branch loops skip fused validation; final eval covers it
        len(arrays),
    )


def _run_joint(bundle, tree, arrays, ctx, patches, stats, settings, evaluator) -> list[EpochRecord]:
    aug_rng = _stream(settings.seed, 1, "joint")
    drop_rng = _stream(settings.seed, 2, "joint")

    def forward(idxs, epoch):
        images = _assemble_images(arrays, idxs, stats, settings, aug_rng, train=True)
        img = Tensor(images)
        ctx_t = Tensor(ctx[idxs])
        pat_t = Tensor(patches[idxs]) if patches is not None else None
        if settings.mode.tag == "early":
            feats = bundle.image.features(img)
            sat_feats = (
                bundle.satellite.encoder.features(pat_t) if bundle.satellite is not None else None
            )
            posterior = bundle.early_head.posterior(
                fuse_early_features(feats, ctx_t, sat_feats)
            )
        else:
            logits = bundle.image.logits(img)
            ctx_probs = bundle.context.probabilities(ctx_t)
            sat_probs = None
            if bundle.satellite is not None:
                sat_probs = bundle.satellite.probabilities(
                    pat_t, use_dropout=settings.mode.dropout, train=True, rng=drop_rng
                )
            posterior = fuse_late(logits, ctx_probs, sat_probs)
        return _loss_for(posterior, arrays.labels[idxs], settings, tree)

    return _run_loop(
        "joint",
        bundle,
        tree,
        arrays.labels,
        forward,
        bundle.conv_parameters(),
        bundle.dense_parameters(),
        settings,
        evaluator,
        len(arrays),
    )
