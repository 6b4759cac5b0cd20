"""Synthetic observation worlds with known ground truth.

A world has a balanced taxonomy over a configurable shape, one Gaussian
spatial range per species, seasonal activity peaks, long-tail image counts
drawn from a power law, and procedurally rendered images built from shared
visual structure at family and genus level plus species detail.  Designated
species pairs ("twins") share an identical visual prototype but disjoint
spatial ranges, so image-only classifiers face a 50% ceiling on them while
spatio-temporal context resolves them fully.

Everything is a pure function of the config (including its seed): two
generations with the same config produce identical observations, images,
rasters and ground-truth evaluations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .dataset import Observation
from .encoding import RawContext
from .rasters import ArrayRaster, GeoTransform
from .taxonomy import TaxonomyTree, build_taxonomy


class SyntheticConfigError(ValueError):
    """Inconsistent synthetic-world configuration."""


@dataclass(frozen=True)
class SyntheticConfig:
    n_genera: int = 8
    seen_per_genus: int = 2        # species with >= count_min images
    unseen_per_genus: int = 0      # extra species with unseen_counts images
    genera_per_family: int = 2
    families_per_order: int = 2
    orders_per_class: int = 2
    classes_per_phylum: int = 2

    count_min: int = 10
    count_max: int = 60
    count_exponent: float = 1.0    # 0 gives uniform counts at count_max
    unseen_counts: tuple[int, int] = (6, 9)

    image_size: int = 32
    family_signal: float = 0.7
    genus_signal: float = 1.0
    species_signal: float = 0.5
    image_noise: float = 0.8

    ambiguity_pairs: int = 0       # twin pairs sharing identical prototypes
    hierarchy_consistent: bool = True  # twins must share a genus
    pair_separation: float = 5.0   # twin range separation in units of sigma

    cluster_spread: float = 0.12   # spatial sigma, degrees
    genus_spatial_coherence: bool = False
    season_spread: float = 25.0    # days around each species' peak

    domain_lon: tuple[float, float] = (6.0, 10.0)
    domain_lat: tuple[float, float] = (45.5, 47.5)
    raster_inner_px: int = 384     # pixels across the lon extent of the domain
    raster_pad_px: int = 256       # margin so 512 px windows stay inside

    seed: int = 0

    @property
    def species_per_genus(self) -> int:
        return self.seen_per_genus + self.unseen_per_genus

    @property
    def n_species(self) -> int:
        return self.n_genera * self.species_per_genus

    def validate(self) -> None:
        if self.n_genera < 1 or self.seen_per_genus < 1:
            raise SyntheticConfigError("need at least one genus with one seen species")
        if self.count_min < 1 or self.count_max < self.count_min:
            raise SyntheticConfigError("invalid count range")
        if self.ambiguity_pairs < 0:
            raise SyntheticConfigError("ambiguity_pairs must be >= 0")
        if self.hierarchy_consistent:
            if self.ambiguity_pairs > 0 and self.seen_per_genus < 2:
                raise SyntheticConfigError(
                    "hierarchy-consistent twin pairs need >= 2 seen species per genus"
                )
            if self.ambiguity_pairs > self.n_genera:
                raise SyntheticConfigError(
                    f"{self.ambiguity_pairs} twin pairs do not fit in {self.n_genera} genera"
                )
        elif self.ambiguity_pairs * 2 > self.n_genera * self.seen_per_genus:
            raise SyntheticConfigError("not enough seen species for the requested pairs")


def _smooth_field(rng: np.random.Generator, grid: int, size: int, channels: int = 3) -> np.ndarray:
    """Low-frequency random pattern with unit RMS, shape (size, size, channels)."""
    coarse = rng.standard_normal((grid, grid, channels))
    ys = np.linspace(0, grid - 1, size)
    xs = np.linspace(0, grid - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, grid - 1)
    x1 = np.minimum(x0 + 1, grid - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    out = (
        coarse[y0][:, x0] * (1 - wy) * (1 - wx)
        + coarse[y0][:, x1] * (1 - wy) * wx
        + coarse[y1][:, x0] * wy * (1 - wx)
        + coarse[y1][:, x1] * wy * wx
    )
    rms = np.sqrt((out**2).mean())
    return out / max(rms, 1e-12)


@dataclass(frozen=True)
class SpeciesParams:
    species_id: int
    name: str
    lineage: tuple[str, ...]
    mu_lon: float
    mu_lat: float
    sigma: float
    peak_day: float
    count: int
    twin_of: int | None  # species id sharing this prototype, or None
    unseen: bool


class SyntheticWorld:
    """Deterministic generator: taxonomy, observations, images, ground truth."""

    def __init__(self, config: SyntheticConfig):
        config.validate()
        self.config = config
        self._build_taxonomy_records()
        self._assign_pairs()
        self._assign_counts()
        self._place_species()
        self.tree: TaxonomyTree = build_taxonomy(self.taxonomy_records)
        self._species_ids = {p.name: p.species_id for p in self.species}
        self._observations: list[Observation] | None = None

    # -- structure ----------------------------------------------------------

    def _build_taxonomy_records(self) -> None:
        c = self.config
        records = []
        lineages = []
        for g in range(c.n_genera):
            f = g // c.genera_per_family
            o = f // c.families_per_order
            cl = o // c.orders_per_class
            ph = cl // c.classes_per_phylum
            for j in range(c.species_per_genus):
                s = g * c.species_per_genus + j
                rec = (
                    f"species_{s:03d}",
                    f"genus_{g:02d}",
                    f"family_{f:02d}",
                    f"order_{o:02d}",
                    f"class_{cl:02d}",
                    f"phylum_{ph:02d}",
                )
                records.append(rec)
                lineages.append(rec)
        self.taxonomy_records = records
        self._lineages = lineages

    def _genus_of(self, species_index: int) -> int:
        return species_index // self.config.species_per_genus

    def _within_genus(self, species_index: int) -> int:
        return species_index % self.config.species_per_genus

    def _assign_pairs(self) -> None:
        c = self.config
        twin_of = [None] * c.n_species
        if c.hierarchy_consistent:
            for p in range(c.ambiguity_pairs):
                a = p * c.species_per_genus
                b = a + 1
                twin_of[a], twin_of[b] = b, a
        else:
            seen = [
                s for s in range(c.n_species) if self._within_genus(s) < c.seen_per_genus
            ]
            for p in range(c.ambiguity_pairs):
                a, b = seen[2 * p], seen[2 * p + 1]
                twin_of[a], twin_of[b] = b, a
        self._twin_of = twin_of

    def check_pairs_hierarchy_consistent(self) -> None:
        for a, b in self.twin_pairs():
            if self._genus_of(a) != self._genus_of(b):
                raise SyntheticConfigError(
                    f"twin pair ({a}, {b}) spans genera "
                    f"{self._genus_of(a)} and {self._genus_of(b)}"
                )

    def twin_pairs(self) -> list[tuple[int, int]]:
        return [(a, b) for a, b in enumerate(self._twin_of) if b is not None and a < b]

    def _assign_counts(self) -> None:
        c = self.config
        rng = self._pattern_rng(10, 0)
        n_seen = c.n_genera * c.seen_per_genus
        by_rank = [
            max(c.count_min, round(c.count_max * (r + 1) ** (-c.count_exponent)))
            for r in range(n_seen)
        ]
        counts = [0] * c.n_species
        unseen = [False] * c.n_species
        for g in range(c.n_genera):
            for j in range(c.species_per_genus):
                s = g * c.species_per_genus + j
                if j < c.seen_per_genus:
                    # interleave head/tail ranks so every genus spans the tail
                    rank = j * c.n_genera + g if j % 2 == 0 else (j + 1) * c.n_genera - 1 - g
                    counts[s] = by_rank[rank]
                else:
                    counts[s] = int(rng.integers(c.unseen_counts[0], c.unseen_counts[1] + 1))
                    unseen[s] = True
        self._counts = counts
        self._unseen = unseen

    def _place_species(self) -> None:
        c = self.config
        rng = self._pattern_rng(11, 0)
        lon_lo, lon_hi = c.domain_lon
        lat_lo, lat_hi = c.domain_lat
        sigma = c.cluster_spread
        margin = 3.0 * sigma
        sep = c.pair_separation * sigma

        def sample_point(center=None, spread=None):
            if center is None:
                return (
                    rng.uniform(lon_lo + margin, lon_hi - margin),
                    rng.uniform(lat_lo + margin, lat_hi - margin),
                )
            lon = np.clip(center[0] + rng.normal(0, spread), lon_lo + margin, lon_hi - margin)
            lat = np.clip(center[1] + rng.normal(0, spread), lat_lo + margin, lat_hi - margin)
            return float(lon), float(lat)

        genus_centers = [sample_point() for _ in range(c.n_genera)]
        mus: list[tuple[float, float] | None] = [None] * c.n_species
        for s in range(c.n_species):
            twin = self._twin_of[s]
            if twin is not None and mus[twin] is not None:
                # place the twin at a disjoint range: sep sigmas away
                angle = rng.uniform(0, 2 * math.pi)
                base = mus[twin]
                lon = float(np.clip(base[0] + sep * math.cos(angle), lon_lo + margin, lon_hi - margin))
                lat = float(np.clip(base[1] + sep * math.sin(angle), lat_lo + margin, lat_hi - margin))
                # clipping both coordinates could collapse the separation
                if math.hypot(lon - base[0], lat - base[1]) < 0.8 * sep:
                    lon = float(np.clip(base[0] - sep * math.cos(angle), lon_lo + margin, lon_hi - margin))
                    lat = float(np.clip(base[1] - sep * math.sin(angle), lat_lo + margin, lat_hi - margin))
                mus[s] = (lon, lat)
            elif c.genus_spatial_coherence:
                mus[s] = sample_point(genus_centers[self._genus_of(s)], 2.0 * sigma)
            else:
                mus[s] = sample_point()

        peaks = rng.uniform(0, 365, size=c.n_species)
        self.species: list[SpeciesParams] = []
        for s in range(c.n_species):
            self.species.append(
                SpeciesParams(
                    species_id=s,
                    name=self._lineages[s][0],
                    lineage=self._lineages[s],
                    mu_lon=mus[s][0],
                    mu_lat=mus[s][1],
                    sigma=sigma,
                    peak_day=float(peaks[s]),
                    count=self._counts[s],
                    twin_of=self._twin_of[s],
                    unseen=self._unseen[s],
                )
            )
        if c.hierarchy_consistent:
            self.check_pairs_hierarchy_consistent()

    # -- visuals ------------------------------------------------------------

    def _pattern_rng(self, kind: int, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=(self.config.seed, 0x7A_FA, kind, index))
        )

    @lru_cache(maxsize=None)
    def _family_pattern(self, family_index: int) -> np.ndarray:
        return _smooth_field(self._pattern_rng(1, family_index), 4, self.config.image_size)

    @lru_cache(maxsize=None)
    def _genus_pattern(self, genus_index: int) -> np.ndarray:
        return _smooth_field(self._pattern_rng(2, genus_index), 6, self.config.image_size)

    @lru_cache(maxsize=None)
    def prototype(self, species_index: int) -> np.ndarray:
        """Noise-free visual prototype; twins share one prototype exactly."""
        c = self.config
        twin = self._twin_of[species_index]
        if twin is not None and twin < species_index:
            return self.prototype(twin)
        g = self._genus_of(species_index)
        f = g // c.genera_per_family
        detail = _smooth_field(self._pattern_rng(3, species_index), 8, c.image_size)
        return (
            c.family_signal * self._family_pattern(f)
            + c.genus_signal * self._genus_pattern(g)
            + c.species_signal * detail
        )

    def render_image(self, species_index: int, obs_index: int) -> np.ndarray:
        """Prototype plus per-observation seeded noise, HxWx3."""
        rng = np.random.default_rng(
            np.random.SeedSequence(
                entropy=(self.config.seed, 0x7A_FA, 4, species_index, obs_index)
            )
        )
        proto = self.prototype(species_index)
        return proto + self.config.image_noise * rng.standard_normal(proto.shape)

    def image_token(self, species_index: int, obs_index: int) -> str:
        return f"synth://{self.config.seed}/{species_index}/{obs_index}"

    def load_image(self, image_path: str) -> np.ndarray:
        """Render the image an observation's synthetic token refers to."""
        if not image_path.startswith("synth://"):
            raise SyntheticConfigError(f"not a synthetic image token: {image_path!r}")
        seed, species_index, obs_index = image_path[len("synth://") :].split("/")
        if int(seed) != self.config.seed:
            raise SyntheticConfigError(
                f"token seed {seed} does not match world seed {self.config.seed}"
            )
        return self.render_image(int(species_index), int(obs_index))

    # -- environment --------------------------------------------------------

    def elevation(self, lon, lat):
        """Smooth synthetic terrain in metres (roughly 600..3700); vectorised."""
        u = (np.asarray(lon) - self.config.domain_lon[0]) / (
            self.config.domain_lon[1] - self.config.domain_lon[0]
        )
        v = (np.asarray(lat) - self.config.domain_lat[0]) / (
            self.config.domain_lat[1] - self.config.domain_lat[0]
        )
        e = (
            2100.0
            + 900.0 * np.sin(2.3 * np.pi * u + 0.7) * np.cos(1.7 * np.pi * v - 0.3)
            + 600.0 * np.sin(1.1 * np.pi * (u + v) + 2.1)
        )
        return float(e) if e.ndim == 0 else e

    def make_raster(self, bands: int = 4) -> ArrayRaster:
        """Synthetic multi-band raster over the padded domain; band 3 is terrain."""
        c = self.config
        lon_lo, lon_hi = c.domain_lon
        lat_lo, lat_hi = c.domain_lat
        px_deg = (lon_hi - lon_lo) / c.raster_inner_px
        pad = c.raster_pad_px
        width = c.raster_inner_px + 2 * pad
        height = int(round((lat_hi - lat_lo) / px_deg)) + 2 * pad
        transform = GeoTransform(
            lon_lo - pad * px_deg, px_deg, 0.0, lat_hi + pad * px_deg, 0.0, -px_deg
        )
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(c.seed, 0x7A_FA, 5))
        )
        size = max(height, width)
        field4 = _smooth_field(rng, 12, size, channels=bands)
        data = field4[:height, :width].transpose(2, 0, 1).copy()
        lons = transform.origin_lon + (np.arange(width) + 0.5) * transform.lon_per_col
        lats = transform.origin_lat + (np.arange(height) + 0.5) * transform.lat_per_row
        elev = self.elevation(lons[None, :], lats[:, None])
        data[bands - 1] = (elev - 2100.0) / 1500.0
        return ArrayRaster(data.astype(np.float32), transform)

    # -- observations -------------------------------------------------------

    @property
    def observations(self) -> list[Observation]:
        if self._observations is None:
            self._observations = self._generate_observations()
        return self._observations

    def _generate_observations(self) -> list[Observation]:
        c = self.config
        obs: list[Observation] = []
        counter = 0
        lon_lo, lon_hi = c.domain_lon
        lat_lo, lat_hi = c.domain_lat
        for sp in self.species:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=(c.seed, 0x7A_FA, 6, sp.species_id))
            )
            for j in range(sp.count):
                lon = float(np.clip(rng.normal(sp.mu_lon, sp.sigma), lon_lo, lon_hi))
                lat = float(np.clip(rng.normal(sp.mu_lat, sp.sigma), lat_lo, lat_hi))
                day = float((sp.peak_day + rng.normal(0, c.season_spread)) % 365.0)
                alt = self.elevation(lon, lat) + float(rng.normal(0, 30.0))
                counter += 1
                obs.append(
                    Observation(
                        id=f"obs_{counter:06d}",
                        image_path=self.image_token(sp.species_id, j),
                        context=RawContext(lon, lat, alt, day),
                        species=sp.name,
                    )
                )
        return obs

    # -- ground truth -------------------------------------------------------

    def posterior(self, lon: float, lat: float, day: float | None = None) -> np.ndarray:
        """Exact p(species | location[, day]) under the generating mixture."""
        weights = np.array([sp.count for sp in self.species], dtype=np.float64)
        dens = np.empty(len(self.species))
        for i, sp in enumerate(self.species):
            d2 = ((lon - sp.mu_lon) ** 2 + (lat - sp.mu_lat) ** 2) / (2 * sp.sigma**2)
            dens[i] = math.exp(-min(d2, 700.0)) / (2 * math.pi * sp.sigma**2)
            if day is not None:
                delta = abs((day - sp.peak_day + 182.5) % 365.0 - 182.5)
                dens[i] *= math.exp(-(delta**2) / (2 * self.config.season_spread**2))
        joint = weights * dens
        total = joint.sum()
        if total <= 0 or not np.isfinite(total):
            # far outside every range: fall back to the count prior
            return weights / weights.sum()
        return joint / total

    # -- serialization ------------------------------------------------------

    def ground_truth_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "species": [
                {
                    "species_id": sp.species_id,
                    "name": sp.name,
                    "lineage": list(sp.lineage),
                    "mu_lon": sp.mu_lon,
                    "mu_lat": sp.mu_lat,
                    "sigma": sp.sigma,
                    "peak_day": sp.peak_day,
                    "count": sp.count,
                    "twin_of": sp.twin_of,
                    "unseen": sp.unseen,
                }
                for sp in self.species
            ],
        }

    def write_ground_truth(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.ground_truth_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def load_world(ground_truth_path) -> SyntheticWorld:
    """Rebuild a world from its ground-truth sidecar (config is sufficient)."""
    with open(ground_truth_path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    cfg = payload["config"]
    for key in ("unseen_counts", "domain_lon", "domain_lat"):
        cfg[key] = tuple(cfg[key])
    return SyntheticWorld(SyntheticConfig(**cfg))
