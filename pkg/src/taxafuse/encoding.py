"""Observation metadata encoding and image preprocessing.

Day of year is mapped onto the unit circle so the year wraps smoothly;
longitude, latitude and altitude are rescaled per axis into [-1, 1] using
bounds fit on training data only.  Images follow a resize / centre-crop /
standardise pipeline, with rotation, horizontal flip and colour jitter added
in training mode from a caller-supplied generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DAYS_PER_YEAR = 365.0  # kept in leap years too; <=0.3% phase error accepted


class EncodingError(ValueError):
    """Invalid metadata or image input."""


@dataclass(frozen=True)
class RawContext:
    """Raw observation metadata: degrees, metres, and day of year (1..366 ok)."""

    longitude: float
    latitude: float
    altitude: float
    day_of_year: float

    def __post_init__(self):
        if not all(
            math.isfinite(v)
            for v in (self.longitude, self.latitude, self.altitude, self.day_of_year)
        ):
            raise EncodingError(f"non-finite context value in {self}")
        if not -180.0 <= self.longitude <= 180.0:
            raise EncodingError(f"longitude {self.longitude} outside [-180, 180]")
        if not -90.0 <= self.latitude <= 90.0:
            raise EncodingError(f"latitude {self.latitude} outside [-90, 90]")


@dataclass(frozen=True)
class ContextVector:
    """Encoded auxiliary input (t1, t2, x, y, z); t1,t2 on the unit circle."""

    t1: float
    t2: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2, self.x, self.y, self.z])


@dataclass(frozen=True)
class NormalizationBounds:
    """Per-axis (min, max) for longitude, latitude and altitude."""

    longitude: tuple[float, float]
    latitude: tuple[float, float]
    altitude: tuple[float, float]

    def __post_init__(self):
        for name in ("longitude", "latitude", "altitude"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
                raise EncodingError(f"invalid {name} bounds ({lo}, {hi}): need min < max")

    def as_dict(self) -> dict:
        return {
            "longitude": list(self.longitude),
            "latitude": list(self.latitude),
            "altitude": list(self.altitude),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationBounds":
        return cls(
            longitude=tuple(d["longitude"]),
            latitude=tuple(d["latitude"]),
            altitude=tuple(d["altitude"]),
        )


def encode_day_of_year(t: float) -> tuple[float, float]:
    """Sine-cosine encoding of day of year; period 365 days.

    The mapping is periodic by construction, so the year's last and first
    days land next to each other on the circle.
    """
    if not math.isfinite(t):
        raise EncodingError(f"non-finite day of year {t!r}")
    angle = 2.0 * math.pi * t / DAYS_PER_YEAR
    return math.sin(angle), math.cos(angle)


def fit_bounds(contexts: list[RawContext]) -> NormalizationBounds:
    """Per-axis min/max over the given (training) contexts.

    An axis with no spread cannot be rescaled and is a hard error.
    """
    if not contexts:
        raise EncodingError("cannot fit bounds on an empty set")
    lons = [c.longitude for c in contexts]
    lats = [c.latitude for c in contexts]
    alts = [c.altitude for c in contexts]
    for name, vals in (("longitude", lons), ("latitude", lats), ("altitude", alts)):
        if min(vals) == max(vals):
            raise EncodingError(f"degenerate {name} axis: all values equal {vals[0]}")
    return NormalizationBounds(
        longitude=(min(lons), max(lons)),
        latitude=(min(lats), max(lats)),
        altitude=(min(alts), max(alts)),
    )


def _rescale(value: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    scaled = 2.0 * (value - lo) / (hi - lo) - 1.0
    # test-time observations may fall slightly outside training bounds
    return min(1.0, max(-1.0, scaled))


def normalize_context(raw: RawContext, bounds: NormalizationBounds) -> ContextVector:
    """Encode raw metadata into the 5-dimensional context vector."""
    t1, t2 = encode_day_of_year(raw.day_of_year)
    return ContextVector(
        t1=t1,
        t2=t2,
        x=_rescale(raw.longitude, bounds.longitude),
        y=_rescale(raw.latitude, bounds.latitude),
        z=_rescale(raw.altitude, bounds.altitude),
    )


# ---------------------------------------------------------------------------
# image preprocessing
# ---------------------------------------------------------------------------

MIN_IMAGE_SIDE = 8


@dataclass(frozen=True)
class ImageStats:
    """Per-channel mean/std of the training split, used for standardisation."""

    mean: np.ndarray
    std: np.ndarray

    def as_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageStats":
        return cls(mean=np.asarray(d["mean"], float), std=np.asarray(d["std"], float))


@dataclass(frozen=True)
class AugmentConfig:
    """Training-mode augmentation strengths."""

    rotation_degrees: float = 20.0
    hflip_prob: float = 0.5
    jitter: float = 0.2  # max relative brightness/contrast change


def compute_image_stats(images, eps: float = 1e-8) -> ImageStats:
    """Channel mean/std over an iterable of HxWxC arrays."""
    total = None
    total_sq = None
    count = 0
    for img in images:
        a = np.asarray(img, dtype=np.float64)
        if total is None:
            total = a.sum(axis=(0, 1))
            total_sq = (a * a).sum(axis=(0, 1))
        else:
            total += a.sum(axis=(0, 1))
            total_sq += (a * a).sum(axis=(0, 1))
        count += a.shape[0] * a.shape[1]
    if count == 0:
        raise EncodingError("cannot compute image stats on an empty set")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return ImageStats(mean=mean, std=np.sqrt(var) + eps)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an HxWxC array; identity when sizes already match."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    # align-corners-false convention: sample at pixel centres
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise EncodingError(f"image {h}x{w} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top : top + size, left : left + size]


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre with bilinear sampling; outside fills with the
    per-channel image mean so corners do not inject dark artefacts."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source coordinates
    src_y = cos_t * yy + sin_t * xx + cy
    src_x = -sin_t * yy + cos_t * xx + cx
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    wy = (src_y - y0)[..., None]
    wx = (src_x - x0)[..., None]
    fill = img.mean(axis=(0, 1))

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside[..., None], vals, fill)

    out = (
        sample(y0, x0) * (1 - wy) * (1 - wx)
        + sample(y0, x0 + 1) * (1 - wy) * wx
        + sample(y0 + 1, x0) * wy * (1 - wx)
        + sample(y0 + 1, x0 + 1) * wy * wx
    )
    return out


def _color_jitter(img: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    brightness = 1.0 + rng.uniform(-strength, strength)
    contrast = 1.0 + rng.uniform(-strength, strength)
    saturation = 1.0 + rng.uniform(-strength, strength)
    out = img * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=2, keepdims=True)
    return (out - gray) * saturation + gray


def preprocess_image(
    pixels: np.ndarray,
    mode: str,
    stats: ImageStats,
    resize_to: int = 256,
    crop_to: int = 224,
    augment: AugmentConfig = AugmentConfig(),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Resize, (augment,) centre-crop and standardise one image.

    ``mode='eval'`` is a pure function of its inputs.  ``mode='train'``
    additionally applies random rotation, horizontal flip and colour jitter
    drawn from ``rng``.  Returns a CxHxW tensor ready for the image branch.
    """
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] < 3:
        raise EncodingError(f"expected HxWxC image with >=3 channels, got shape {img.shape}")
    if img.shape[0] < MIN_IMAGE_SIDE or img.shape[1] < MIN_IMAGE_SIDE:
        raise EncodingError(
            f"image {img.shape[0]}x{img.shape[1]} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
        )
    if mode not in ("train", "eval"):
        raise EncodingError(f"unknown preprocessing mode {mode!r}")
    if crop_to > resize_to:
        raise EncodingError(f"crop size {crop_to} exceeds resize size {resize_to}")

    img = resize_bilinear(img, resize_to, resize_to)
    if mode == "train":
        if rng is None:
            raise EncodingError("train-mode preprocessing needs a seeded generator")
        angle = rng.uniform(-augment.rotation_degrees, augment.rotation_degrees)
        if angle != 0.0:
            img = rotate_image(img, angle)
        img = center_crop(img, crop_to)
        if rng.random() < augment.hflip_prob:
            img = img[:, ::-1]
        if augment.jitter > 0:
            img = _color_jitter(img, rng, augment.jitter)
    else:
        img = center_crop(img, crop_to)

    img = (img - stats.mean) / stats.std
    return np.ascontiguousarray(img.transpose(2, 0, 1))
