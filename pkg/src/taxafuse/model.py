"""Branch networks, fusion strategies and losses.

Three branches produce species scores: a convolutional image encoder emits
logits, while the context and satellite branches emit per-class presence
probabilities through a final sigmoid (several species can plausibly be
present at one place and time, so a softmax would be wrong there).  Late
fusion multiplies the image softmax with the presence probabilities and
renormalises, computed in the log domain for stability; early fusion
concatenates the context onto pooled image features under a joint head;
separate training keeps branches independent and multiplies only at
inference.

The hierarchical loss sums cross-entropy terms over every taxonomy level,
each coarser distribution obtained by summing the species posterior over
child sets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndiff as nd
from .ndiff import Tensor, parameter
from .taxonomy import TaxonomyTree

FUSION_TAGS = ("early", "separate", "late")
PROB_FLOOR = 1e-12


class ModelError(ValueError):
    """Invalid model configuration or input."""


class FusionError(RuntimeError):
    """Degenerate branch outputs: the fused posterior is undefined."""


@dataclass(frozen=True)
class FusionMode:
    """Training/fusion strategy plus optional satellite branch and dropout."""

    tag: str
    satellite: bool = False
    dropout: bool = False

    def __post_init__(self):
        if self.tag not in FUSION_TAGS:
            raise ModelError(f"fusion tag must be one of {FUSION_TAGS}, got {self.tag!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults match the desk-scale setup."""

    n_species: int
    image_channels: int = 3
    image_widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    context_hidden: tuple[int, ...] = (64, 64)
    satellite_bands: int = 4
    satellite_widths: tuple[int, ...] = (8, 16, 32)
    dropout_rate: float = 0.5


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class DenseLayer:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        std = np.sqrt(2.0 / n_in)
        self.w = parameter(rng.normal(0.0, std, (n_in, n_out)), f"{name}/w")
        self.b = parameter(np.zeros(n_out), f"{name}/b")

    def __call__(self, x: Tensor) -> Tensor:
        return nd.dense(x, self.w, self.b)

    @property
    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class ConvLayer:
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, name: str):
        std = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = parameter(rng.normal(0.0, std, (c_out, c_in, kernel, kernel)), f"{name}/w")
        self.b = parameter(np.zeros(c_out), f"{name}/b")
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return nd.conv2d(x, self.w, self.b, stride=1, padding=self.padding)

    @property
    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class ConvEncoder:
    """Stack of conv-relu-pool blocks followed by a global average pool."""

    def __init__(self, c_in: int, widths, kernel: int, rng: np.random.Generator, name: str):
        self.blocks = []
        prev = c_in
        for i, width in enumerate(widths):
            self.blocks.append(ConvLayer(prev, width, kernel, rng, f"{name}/conv{i}"))
            prev = width
        self.out_dim = prev

    def features(self, images: Tensor) -> Tensor:
        h = images
        for block in self.blocks:
            h = nd.relu(block(h))
            n, c, hh, ww = h.shape
            if hh >= 2 and ww >= 2:
                if hh % 2 or ww % 2:  # trim odd edges so 2x2 pooling tiles
                    h = _crop_even(h)
                h = nd.avg_pool2d(h, 2)
        return nd.global_avg_pool(h)

    @property
    def conv_params(self) -> list[Tensor]:
        return [p for block in self.blocks for p in block.params]


def _crop_even(h: Tensor) -> Tensor:
    n, c, hh, ww = h.shape
    data = h.data[:, :, : hh - hh % 2, : ww - ww % 2]
    out = Tensor._result(
        data.copy(),
        (h,),
        lambda g: h._accumulate(
            np.pad(g, ((0, 0), (0, 0), (0, hh % 2), (0, ww % 2)))
        ),
    )
    return out


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------


class ImageBranch:
    """Convolutional encoder + linear head emitting species logits."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.encoder = ConvEncoder(
            config.image_channels, config.image_widths, config.kernel, rng, "image"
        )
        self.head = DenseLayer(self.encoder.out_dim, config.n_species, rng, "image/head")

    def features(self, images: Tensor) -> Tensor:
        return self.encoder.features(images)

    def logits(self, images: Tensor) -> Tensor:
        return self.head(self.features(images))

    @property
    def conv_params(self) -> list[Tensor]:
        return self.encoder.conv_params

    @property
    def head_params(self) -> list[Tensor]:
        return self.head.params

    @property
    def params(self) -> list[Tensor]:
        return self.conv_params + self.head_params


class ContextBranch:
    """Fully-connected network mapping the 5-d context vector to per-class
    presence probabilities in (0, 1)."""

    IN_DIM = 5

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.layers = []
        prev = self.IN_DIM
        for i, width in enumerate(config.context_hidden):
            self.layers.append(DenseLayer(prev, width, rng, f"context/fc{i}"))
            prev = width
        self.out = DenseLayer(prev, config.n_species, rng, "context/out")

    def scores(self, contexts: Tensor) -> Tensor:
        if contexts.data.ndim != 2 or contexts.shape[1] != self.IN_DIM:
            raise ModelError(f"context input must be (N, {self.IN_DIM}), got {contexts.shape}")
        h = contexts
        for layer in self.layers:
            h = nd.relu(layer(h))
        return self.out(h)

    def probabilities(self, contexts: Tensor) -> Tensor:
        return nd.sigmoid(self.scores(contexts))

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params] + self.out.params


class SatelliteBranch:
    """Convolutional encoder over the 4-band patch; sigmoid presence output.

    Dropout (when enabled) acts on the input of the last fully-connected
    layer, in training mode only.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.encoder = ConvEncoder(
            config.satellite_bands, config.satellite_widths, config.kernel, rng, "satellite"
        )
        self.head = DenseLayer(self.encoder.out_dim, config.n_species, rng, "satellite/head")
        self.dropout_rate = config.dropout_rate

    def scores(
        self,
        patches: Tensor,
        use_dropout: bool = False,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        h = self.encoder.features(patches)
        if use_dropout:
            h = nd.dropout(h, self.dropout_rate, train=train, rng=rng)
        return self.head(h)

    def probabilities(self, patches: Tensor, **kw) -> Tensor:
        return nd.sigmoid(self.scores(patches, **kw))

    @property
    def conv_params(self) -> list[Tensor]:
        return self.encoder.conv_params

    @property
    def head_params(self) -> list[Tensor]:
        return self.head.params

    @property
    def params(self) -> list[Tensor]:
        return self.conv_params + self.head_params


class EarlyFusionHead:
    """Joint classifier over pooled image features concatenated with the
    context vector (and pooled satellite features when enabled)."""

    def __init__(self, config: ModelConfig, feature_dim: int, rng: np.random.Generator):
        self.head = DenseLayer(feature_dim, config.n_species, rng, "early/head")

    def posterior(self, fused_features: Tensor) -> Tensor:
        return nd.softmax(self.head(fused_features))

    @property
    def params(self) -> list[Tensor]:
        return self.head.params


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _check_presence(probs: Tensor, source: str) -> None:
    data = probs.data
    if not np.isfinite(data).all():
        raise FusionError(f"{source} branch produced non-finite probabilities")
    if (data.max(axis=-1) <= 0.0).any():
        raise FusionError(f"{source} branch produced an all-zero probability row")


def fuse_late(
    image_logits: Tensor,
    context_probs: Tensor | None = None,
    satellite_probs: Tensor | None = None,
) -> Tensor:
    """Posterior proportional to softmax(z_I) * p(y|x) [* p(y|S)], renormalised.

    Computed in the log domain and exponentiated through a final softmax;
    the presence probabilities act as a spatio-temporally varying rescaling
    of the image scores, so any constant factor on them cancels.
    """
    if not np.isfinite(image_logits.data).all():
        raise FusionError("image branch produced non-finite logits")
    total = nd.log_softmax(image_logits)
    for probs, source in ((context_probs, "context"), (satellite_probs, "satellite")):
        if probs is None:
            continue
        if probs.shape != image_logits.shape:
            raise ModelError(
                f"{source} output shape {probs.shape} does not match logits {image_logits.shape}"
            )
        _check_presence(probs, source)
        total = nd.add(total, nd.log(nd.clamp_min(probs, PROB_FLOOR)))
    return nd.softmax(total)


def infer_separate(
    image_logits: Tensor,
    context_probs: Tensor | None = None,
    satellite_probs: Tensor | None = None,
) -> Tensor:
    """Independence-assumption fusion for separately trained branches.

    Falls back to the plain image posterior when no auxiliary branch output
    is given, which keeps the image branch usable without metadata.
    """
    if context_probs is None and satellite_probs is None:
        return nd.softmax(image_logits)
    return fuse_late(image_logits, context_probs, satellite_probs)


def fuse_early_features(
    image_features: Tensor,
    contexts: Tensor | None,
    satellite_features: Tensor | None = None,
) -> Tensor:
    """Concatenate context (mandatory) and optional satellite features."""
    if contexts is None:
        raise ModelError("early fusion requires the context vector at inference")
    parts = [image_features, contexts]
    if satellite_features is not None:
        parts.append(satellite_features)
    return nd.concat(parts, axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(posterior: Tensor, labels) -> Tensor:
    """Mean negative log probability of the true labels.

    Zero label probabilities are clamped at 1e-12 (with a warning) so a
    collapsed posterior yields a large finite loss instead of infinity.
    """
    labels = np.asarray(labels, dtype=np.int64)
    picked = nd.gather_rows(posterior, labels)
    if (picked.data < PROB_FLOOR).any():
        warnings.warn(
            f"cross_entropy: clamping {int((picked.data < PROB_FLOOR).sum())} "
            f"label probabilities below {PROB_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
    return nd.mul(nd.tmean(nd.log(nd.clamp_min(picked, PROB_FLOOR))), -1.0)


def binary_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-class BCE against {0,1} targets (presence supervision)."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ModelError(f"BCE target shape {t.shape} does not match probs {probs.shape}")
    p = nd.clamp_min(probs, PROB_FLOOR)
    q = nd.clamp_min(nd.add(nd.mul(probs, -1.0), 1.0), PROB_FLOOR)
    pos = nd.mul(nd.log(p), t)
    neg = nd.mul(nd.log(q), 1.0 - t)
    return nd.mul(nd.tmean(nd.add(pos, neg)), -1.0)


def hierarchical_nll(
    posterior: Tensor,
    labels: np.ndarray,
    parent_vectors: list[np.ndarray],
    level_labels: list[np.ndarray],
) -> Tensor:
    """Cross-entropy summed over a chain of coarser levels.

    ``parent_vectors[l]`` maps level-l class ids to level-(l+1) ids;
    ``level_labels[l]`` holds the batch labels at level l (element 0 must be
    the finest-level labels).  With no parent vectors this reduces exactly
    to the plain cross-entropy.
    """
    loss = cross_entropy(posterior, level_labels[0])
    dist = posterior
    for lvl, parents in enumerate(parent_vectors):
        n_coarse = int(parents.max()) + 1
        dist = nd.segment_sum(dist, parents, n_coarse)
        loss = nd.add(loss, cross_entropy(dist, level_labels[lvl + 1]))
    return loss


def marginalisation_loss(posterior: Tensor, species_labels, tree: TaxonomyTree) -> Tensor:
    """Sum of per-level cross-entropies from species up to phylum.

    The species posterior is folded one level at a time with exact
    scatter-adds; each level contributes the cross-entropy against the
    ancestor of the true species at that level.
    """
    labels = np.asarray(species_labels, dtype=np.int64)
    if posterior.shape[-1] != tree.n_species:
        raise ModelError(
            f"posterior width {posterior.shape[-1]} does not match species count {tree.n_species}"
        )
    level_labels = [tree.ancestors[lvl, labels] for lvl in range(len(tree.names))]
    return hierarchical_nll(posterior, labels, list(tree.parents), level_labels)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


@dataclass
class PreprocessState:
    """Frozen preprocessing fitted on the training split; rides in checkpoints."""

    bounds_array: np.ndarray  # (3, 2): lon/lat/alt min,max
    image_mean: np.ndarray
    image_std: np.ndarray
    resize_to: int
    crop_to: int
    patch_mean: np.ndarray | None = None
    patch_std: np.ndarray | None = None
    patch_extent: int | None = None


class ModelBundle:
    """All learnable branches plus fusion tag, taxonomy fingerprint and the
    frozen preprocessing state; a bundle is self-contained for inference."""

    def __init__(
        self,
        config: ModelConfig,
        mode: FusionMode,
        use_context: bool,
        fingerprint: str,
        seed: int = 0,
    ):
        self.config = config
        self.mode = mode
        self.use_context = use_context
        self.fingerprint = fingerprint
        self.seed = seed
        streams = [
            np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xB0, i)))
            for i in range(4)
        ]
        self.image = ImageBranch(config, streams[0])
        self.context = ContextBranch(config, streams[1]) if use_context else None
        self.satellite = SatelliteBranch(config, streams[2]) if mode.satellite else None
        self.early_head: EarlyFusionHead | None = None
        if mode.tag == "early":
            if not use_context:
                raise ModelError("early fusion requires the context branch")
            dim = self.image.encoder.out_dim + ContextBranch.IN_DIM
            if self.satellite is not None:
                dim += self.satellite.encoder.out_dim
            self.early_head = EarlyFusionHead(config, dim, streams[3])
        self.preprocess: PreprocessState | None = None

    # -- parameter bookkeeping ------------------------------------------------

    def conv_parameters(self) -> list[Tensor]:
        params = list(self.image.conv_params)
        if self.satellite is not None:
            params += self.satellite.conv_params
        return params

    def dense_parameters(self) -> list[Tensor]:
        params = list(self.image.head_params)
        if self.context is not None:
            params += self.context.params
        if self.satellite is not None:
            params += self.satellite.head_params
        if self.early_head is not None:
            params += self.early_head.params
        return params

    def all_parameters(self) -> list[Tensor]:
        return self.conv_parameters() + self.dense_parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.all_parameters()}

    # -- inference --------------------------------------------------------------

    def eval_posterior(
        self,
        images: np.ndarray,
        contexts: np.ndarray | None = None,
        patches: np.ndarray | None = None,
    ) -> np.ndarray:
        """Species posterior for a preprocessed batch, per the fusion mode.

        Joint modes (early/late) require the context; separate mode degrades
        to the image-only posterior when metadata is missing.
        """
        img = Tensor(images)
        ctx = Tensor(contexts) if contexts is not None else None
        pat = Tensor(patches) if patches is not None else None
        if self.mode.tag == "early":
            feats = self.image.features(img)
            sat_feats = self.satellite.encoder.features(pat) if self.satellite is not None else None
            if ctx is None:
                raise ModelError("early fusion requires context metadata at inference")
            fused = fuse_early_features(feats, ctx, sat_feats)
            return self.early_head.posterior(fused).data
        logits = self.image.logits(img)
        ctx_probs = None
        sat_probs = None
        if self.context is not None and ctx is not None:
            ctx_probs = self.context.probabilities(ctx)
        if self.satellite is not None and pat is not None:
            sat_probs = self.satellite.probabilities(
                pat, use_dropout=self.mode.dropout, train=False
            )
        if self.mode.tag == "late":
            if self.context is not None and ctx is None:
                raise ModelError("late fusion requires context metadata at inference")
            return fuse_late(logits, ctx_probs, sat_probs).data
        return infer_separate(logits, ctx_probs, sat_probs).data

    # -- persistence --------------------------------------------------------------

    def _config_tensors(self) -> dict[str, np.ndarray]:
        c = self.config
        out = {
            "config/n_species": np.array([c.n_species], dtype=np.float64),
            "config/image_channels": np.array([c.image_channels], dtype=np.float64),
            "config/image_widths": np.array(c.image_widths, dtype=np.float64),
            "config/kernel": np.array([c.kernel], dtype=np.float64),
            "config/context_hidden": np.array(c.context_hidden, dtype=np.float64),
            "config/satellite_bands": np.array([c.satellite_bands], dtype=np.float64),
            "config/satellite_widths": np.array(c.satellite_widths, dtype=np.float64),
            "config/dropout_rate": np.array([c.dropout_rate], dtype=np.float64),
            "config/flags": np.array(
                [
                    1.0 if self.use_context else 0.0,
                    1.0 if self.mode.satellite else 0.0,
                    1.0 if self.mode.dropout else 0.0,
                ]
            ),
            "config/seed": np.array([self.seed], dtype=np.float64),
        }
        if self.preprocess is not None:
            p = self.preprocess
            out["stats/bounds"] = p.bounds_array
            out["stats/image_mean"] = p.image_mean
            out["stats/image_std"] = p.image_std
            out["stats/resize_crop"] = np.array([p.resize_to, p.crop_to], dtype=np.float64)
            if p.patch_mean is not None:
                out["stats/patch_mean"] = p.patch_mean
                out["stats/patch_std"] = p.patch_std
                out["stats/patch_extent"] = np.array([p.patch_extent], dtype=np.float64)
        return out

    def save(self, path) -> None:
        from .ndiff.checkpoint import CheckpointMeta, save_checkpoint

        tensors = dict(self._config_tensors())
        for name, p in self.named_parameters().items():
            tensors[name] = p.data
        save_checkpoint(path, CheckpointMeta(self.fingerprint, self.mode.tag), tensors)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        from .ndiff.checkpoint import load_checkpoint

        meta, tensors = load_checkpoint(path)
        flags = tensors["config/flags"]
        config = ModelConfig(
            n_species=int(tensors["config/n_species"][0]),
            image_channels=int(tensors["config/image_channels"][0]),
            image_widths=tuple(int(w) for w in tensors["config/image_widths"]),
            kernel=int(tensors["config/kernel"][0]),
            context_hidden=tuple(int(w) for w in tensors["config/context_hidden"]),
            satellite_bands=int(tensors["config/satellite_bands"][0]),
            satellite_widths=tuple(int(w) for w in tensors["config/satellite_widths"]),
            dropout_rate=float(tensors["config/dropout_rate"][0]),
        )
        mode = FusionMode(tag=meta.fusion_tag, satellite=bool(flags[1]), dropout=bool(flags[2]))
        bundle = cls(
            config,
            mode,
            use_context=bool(flags[0]),
            fingerprint=meta.fingerprint,
            seed=int(tensors["config/seed"][0]),
        )
        for name, p in bundle.named_parameters().items():
            if name not in tensors:
                raise ModelError(f"checkpoint missing parameter {name}")
            if tensors[name].shape != p.data.shape:
                raise ModelError(
                    f"checkpoint parameter {name} has shape {tensors[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = tensors[name].copy()
        if "stats/bounds" in tensors:
            patch_extent = (
                int(tensors["stats/patch_extent"][0]) if "stats/patch_extent" in tensors else None
            )
            bundle.preprocess = PreprocessState(
                bounds_array=tensors["stats/bounds"],
                image_mean=tensors["stats/image_mean"],
                image_std=tensors["stats/image_std"],
                resize_to=int(tensors["stats/resize_crop"][0]),
                crop_to=int(tensors["stats/resize_crop"][1]),
                patch_mean=tensors.get("stats/patch_mean"),
                patch_std=tensors.get("stats/patch_std"),
                patch_extent=patch_extent,
            )
        return bundle
