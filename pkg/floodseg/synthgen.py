"""Procedural flood scenes with exact labels.

Water and cloud are connected blobs cut from smoothed noise, the invalid
region is a straight swath edge, and every pixel spectrum is its class mean
plus Gaussian noise. Scenes are pure functions of their `SceneSpec`.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from structlog import get_logger

from . import ArgumentError, FormatError, make_rng
from .logs import log_state, log_timing
from .raster import (
    S2_WAVELENGTHS_NM,
    ClassCode,
    ClassMask,
    MultiBandImage,
    crop_to_multiple,
    default_bands,
    degrade,
    read_image,
    read_mask,
    write_image,
    write_mask,
)

_log = get_logger(__name__)

MANIFEST_NAME = "manifest.tsv"
MIN_SIDE = 16
SEED_LIMIT = 1 << 64

GREEN_NM = 560
NIR_NM = 842

# Class percentages (water, land, cloud, invalid) of the published splits.
SPLIT_STATISTICS: Dict[str, Dict[ClassCode, float]] = {
    "train": {
        ClassCode.WATER: 2.58,
        ClassCode.LAND: 37.19,
        ClassCode.CLOUD: 56.35,
        ClassCode.INVALID: 3.87,
    },
    "val": {
        ClassCode.WATER: 8.48,
        ClassCode.LAND: 76.17,
        ClassCode.CLOUD: 13.27,
        ClassCode.INVALID: 2.07,
    },
    "test": {
        ClassCode.WATER: 21.14,
        ClassCode.LAND: 59.57,
        ClassCode.CLOUD: 15.98,
        ClassCode.INVALID: 3.31,
    },
}


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    seed: int = 0
    water_fraction: float = 0.2
    cloud_fraction: float = 0.1
    invalid_fraction: float = 0.0
    band_count: int = 13
    noise_sigma: float = 0.045

    def __post_init__(self):
        if self.width < MIN_SIDE or self.height < MIN_SIDE:
            raise ArgumentError(
                f"Scenes must be at least {MIN_SIDE}x{MIN_SIDE}, "
                f"got {self.width}x{self.height}"
            )
        if not 0 <= self.seed < SEED_LIMIT:
            raise ArgumentError(f"seed must be a 64-bit unsigned integer: {self.seed}")
        fractions = (self.water_fraction, self.cloud_fraction, self.invalid_fraction)
        if any(not 0 <= f <= 1 for f in fractions):
            raise ArgumentError(f"Class fractions must lie in [0, 1]: {fractions}")
        if sum(fractions) > 1 + 1e-9:
            raise ArgumentError(
                f"Class fractions sum to {sum(fractions):.4f}, more than the scene"
            )
        if self.band_count < 1:
            raise ArgumentError(f"band_count must be >= 1, got {self.band_count}")
        if self.noise_sigma < 0:
            raise ArgumentError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def pixels(self) -> int:
        return self.width * self.height

    def with_seed(self, seed: int) -> "SceneSpec":
        return replace(self, seed=seed % SEED_LIMIT)

    @classmethod
    def from_split(cls, split: str, **kws) -> "SceneSpec":
        """Template whose class fractions follow a published split."""
        try:
            stats = SPLIT_STATISTICS[split]
        except KeyError:
            raise ArgumentError(
                f"Unknown split {split!r}, expected one of {sorted(SPLIT_STATISTICS)}"
            ) from None
        return cls(
            water_fraction=stats[ClassCode.WATER] / 100,
            cloud_fraction=stats[ClassCode.CLOUD] / 100,
            invalid_fraction=stats[ClassCode.INVALID] / 100,
            **kws,
        )


# Mean top-of-atmosphere reflectance over the 13 Sentinel-2 bands.
_S2_WATER = (
    0.13, 0.13, 0.10, 0.07, 0.06, 0.05, 0.04, 0.03, 0.03, 0.01, 0.002, 0.02, 0.01
)
_S2_LAND = (
    0.11, 0.08, 0.10, 0.09, 0.10, 0.11, 0.12, 0.14, 0.14, 0.04, 0.004, 0.10, 0.07
)
_S2_CLOUD = (
    0.58, 0.57, 0.56, 0.56, 0.57, 0.57, 0.57, 0.57, 0.57, 0.50, 0.35, 0.50, 0.45
)
# Sediment-laden water: bright red and NIR, still dark in SWIR.
_S2_MUDDY = (
    0.14, 0.13, 0.15, 0.16, 0.17, 0.17, 0.17, 0.17, 0.16, 0.05, 0.003, 0.03, 0.02
)


@dataclass(frozen=True)
class SpectralProfile:
    """Per-class mean spectra plus a noise multiplier per class"""

    land: Tuple[float, ...]
    water: Tuple[float, ...]
    cloud: Tuple[float, ...]
    muddy_water: Tuple[float, ...]
    wavelengths_nm: Tuple[float, ...] = S2_WAVELENGTHS_NM
    noise_scale: Dict[ClassCode, float] = field(
        default_factory=lambda: {
            ClassCode.LAND: 1.0,
            ClassCode.WATER: 1.0,
            ClassCode.CLOUD: 1.5,
        }
    )

    def __post_init__(self):
        spectra = {
            "land": self.land,
            "water": self.water,
            "cloud": self.cloud,
            "muddy_water": self.muddy_water,
        }
        count = len(self.wavelengths_nm)
        for name, values in spectra.items():
            if len(values) != count:
                raise ArgumentError(
                    f"{name} profile has {len(values)} bands, expected {count}"
                )
            if min(values) < 0 or max(values) > 1.2:
                raise ArgumentError(f"{name} profile means must lie in [0, 1.2]")
            object.__setattr__(self, name, tuple(float(v) for v in values))
        if list(self.wavelengths_nm) != sorted(self.wavelengths_nm):
            raise ArgumentError("Profile wavelengths must be increasing")

        green = self._at(self.water, GREEN_NM)
        nir = self._at(self.water, NIR_NM)
        if not nir < green:
            raise ArgumentError(
                f"Water must absorb NIR: NIR mean {nir:.3f} >= green mean {green:.3f}"
            )
        cloud = np.asarray(self.cloud)
        if cloud.mean() < 0.3:
            raise ArgumentError(f"Cloud profile too dark: mean {cloud.mean():.3f}")
        if (cloud.max() - cloud.min()) > 0.5 * cloud.max():
            raise ArgumentError("Cloud profile must be spectrally flat")
        missing = {ClassCode.LAND, ClassCode.WATER, ClassCode.CLOUD} - set(
            self.noise_scale
        )
        if missing or any(s < 0 for s in self.noise_scale.values()):
            raise ArgumentError("noise_scale needs a value >= 0 for LAND, WATER, CLOUD")

    def _at(self, values, wavelength) -> float:
        return float(np.interp(wavelength, self.wavelengths_nm, values))

    @property
    def band_count(self) -> int:
        return len(self.wavelengths_nm)

    def mean_of(self, code: ClassCode) -> np.ndarray:
        spectra = {
            ClassCode.LAND: self.land,
            ClassCode.WATER: self.water,
            ClassCode.CLOUD: self.cloud,
        }
        if code == ClassCode.INVALID:
            return np.zeros(self.band_count)
        return np.asarray(spectra[code])

    def resample(self, count: int) -> "SpectralProfile":
        """Profile on `count` evenly spaced wavelengths over the same range."""
        if count < 1:
            raise ArgumentError(f"Band count must be >= 1, got {count}")
        low, high = self.wavelengths_nm[0], self.wavelengths_nm[-1]
        wavelengths = np.linspace(low, high, count)

        def interp(values):
            return tuple(np.interp(wavelengths, self.wavelengths_nm, values))

        return SpectralProfile(
            land=interp(self.land),
            water=interp(self.water),
            cloud=interp(self.cloud),
            muddy_water=interp(self.muddy_water),
            wavelengths_nm=tuple(float(w) for w in wavelengths),
            noise_scale=dict(self.noise_scale),
        )

    @classmethod
    def sentinel2(cls) -> "SpectralProfile":
        return cls(
            land=_S2_LAND, water=_S2_WATER, cloud=_S2_CLOUD, muddy_water=_S2_MUDDY
        )

    @classmethod
    def for_bands(cls, count: int) -> "SpectralProfile":
        profile = cls.sentinel2()
        if count == profile.band_count:
            return profile
        return profile.resample(count)


# --- scenes -----------------------------------------------------------------


def _smooth_field(rng, height: int, width: int) -> np.ndarray:
    sigma = max(2.0, min(height, width) / 10)
    return ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma)


def _top_k(values: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the `k` highest `values` among `candidates`."""
    chosen = np.zeros(values.shape, dtype=bool)
    if k <= 0:
        return chosen
    idx = np.flatnonzero(candidates)
    order = np.argsort(-values.ravel()[idx], kind="stable")
    chosen.flat[idx[order[:k]]] = True
    return chosen


def generate(
    spec: SceneSpec,
    profile: Optional[SpectralProfile] = None,
    muddy_water_fraction: float = 0.0,
) -> Tuple[MultiBandImage, ClassMask]:
    """One labelled scene; bit-identical for identical arguments."""
    profile = profile or SpectralProfile.for_bands(spec.band_count)
    if profile.band_count != spec.band_count:
        raise ArgumentError(
            f"Profile has {profile.band_count} bands, spec asks for {spec.band_count}"
        )
    if not 0 <= muddy_water_fraction <= 1:
        raise ArgumentError(
            f"muddy_water_fraction must lie in [0, 1], got {muddy_water_fraction}"
        )

    rng = make_rng(spec.seed)
    height, width, total = spec.height, spec.width, spec.pixels

    # every draw happens whatever the fractions, so fields depend on the seed only
    angle = rng.uniform(0, 2 * math.pi)
    cloud_field = _smooth_field(rng, height, width)
    water_field = _smooth_field(rng, height, width)
    muddy_field = _smooth_field(rng, height, width)
    noise = rng.standard_normal((spec.band_count, height, width))

    rows, cols = np.mgrid[0:height, 0:width]
    ramp = math.cos(angle) * cols + math.sin(angle) * rows
    n_invalid = round(spec.invalid_fraction * total)
    n_cloud = min(round(spec.cloud_fraction * total), total - n_invalid)
    n_water = min(round(spec.water_fraction * total), total - n_invalid - n_cloud)

    invalid = _top_k(ramp, np.ones((height, width), dtype=bool), n_invalid)
    cloud = _top_k(cloud_field, ~invalid, n_cloud)
    water = _top_k(water_field, ~invalid & ~cloud, n_water)
    muddy = _top_k(muddy_field, water, round(muddy_water_fraction * n_water))

    labels = np.full((height, width), int(ClassCode.LAND), dtype=np.uint8)
    labels[water] = ClassCode.WATER
    labels[cloud] = ClassCode.CLOUD
    labels[invalid] = ClassCode.INVALID

    means = np.zeros((spec.band_count, height, width))
    scale = np.zeros((height, width))
    for code in (ClassCode.LAND, ClassCode.WATER, ClassCode.CLOUD):
        sel = labels == code
        means[:, sel] = profile.mean_of(code)[:, None]
        scale[sel] = profile.noise_scale[code]
    means[:, muddy] = np.asarray(profile.muddy_water)[:, None]

    data = np.maximum(means + noise * (spec.noise_sigma * scale), 0.0)
    image = MultiBandImage(default_bands(spec.band_count), data.astype(np.float32))
    return image, ClassMask(labels)


# --- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    # pixel counts per class code: INVALID, LAND, WATER, CLOUD
    counts: Tuple[int, int, int, int]

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem

    def to_line(self) -> str:
        counts = ",".join(str(c) for c in self.counts)
        return f"{self.image_path}\t{self.mask_path}\t{counts}\n"

    @classmethod
    def from_line(cls, line: str, lineno: int) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise FormatError(
                "manifest", f"line {lineno}: expected 3 tab-separated fields"
            )
        counts = parts[2].split(",")
        if len(counts) != len(ClassCode) or not all(c.isdigit() for c in counts):
            raise FormatError(
                "manifest", f"line {lineno}: counts must be 4 non-negative integers"
            )
        return cls(parts[0], parts[1], tuple(int(c) for c in counts))


@dataclass
class Manifest:
    """Scene pairs, with paths relative to `root` (the manifest's directory)"""

    entries: List[ManifestEntry]
    root: Path

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Tuple[Path, Path]:
        return self.root / entry.image_path, self.root / entry.mask_path

    def load(self, entry: ManifestEntry) -> Tuple[MultiBandImage, ClassMask]:
        image_path, mask_path = self.resolve(entry)
        image, mask = read_image(image_path), read_mask(mask_path)
        if mask.shape != (image.height, image.width):
            raise ArgumentError(
                f"{entry.image_id}: mask {mask.width}x{mask.height} does not match "
                f"image {image.width}x{image.height}"
            )
        return image, mask

    def scenes(self) -> Iterator[Tuple[ManifestEntry, MultiBandImage, ClassMask]]:
        for entry in self.entries:
            image, mask = self.load(entry)
            yield entry, image, mask

    def class_counts(self) -> Tuple[int, int, int, int]:
        totals = np.zeros(len(ClassCode), dtype=np.int64)
        for entry in self.entries:
            totals += entry.counts
        return tuple(int(t) for t in totals)

    def class_fractions(self) -> Tuple[float, float, float]:
        """Observed (LAND, WATER, CLOUD) frequencies over valid pixels"""
        counts = self.class_counts()
        valid = [counts[c] for c in (ClassCode.LAND, ClassCode.WATER, ClassCode.CLOUD)]
        total = sum(valid)
        if total == 0:
            raise ArgumentError("Manifest holds no valid pixels")
        return tuple(c / total for c in valid)

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        with path.open("w") as fp:
            fp.writelines(entry.to_line() for entry in self.entries)
        _log.info("Wrote manifest", path=str(path), scenes=len(self.entries))
        return path


def read_manifest(path) -> Manifest:
    """Read a manifest file, or the default manifest of a dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = []
    with path.open() as fp:
        for lineno, line in enumerate(fp, 1):
            if line.strip():
                entries.append(ManifestEntry.from_line(line, lineno))
    if not entries:
        raise FormatError("manifest", f"{path} lists no scenes")
    return Manifest(entries, path.parent)


def write_manifest(manifest: Manifest, path=None) -> Path:
    return manifest.write(path)


def _scene_names(index: int) -> Tuple[str, str]:
    return f"scene_{index:04d}.wfb", f"scene_{index:04d}.wfl"


def _map(func, items, threads: int):
    if threads <= 1:
        return list(map(func, items))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def make_dataset(
    template: SceneSpec,
    n_scenes: int,
    out_dir,
    profile: Optional[SpectralProfile] = None,
    muddy_water_fraction: float = 0.0,
    threads: int = 1,
) -> Manifest:
    """Write `n_scenes` WFB/WFL pairs and their manifest into `out_dir`.

    Scene `i` is generated from seed `template.seed + i`, so the files do not
    depend on `threads`.
    """
    if n_scenes < 1:
        raise ArgumentError(f"n_scenes must be >= 1, got {n_scenes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def build(index: int) -> ManifestEntry:
        spec = template.with_seed(template.seed + index)
        with log_state(scene=index):
            image, mask = generate(spec, profile, muddy_water_fraction)
        image_name, mask_name = _scene_names(index)
        write_image(image, out_dir / image_name)
        write_mask(mask, out_dir / mask_name)
        return ManifestEntry(image_name, mask_name, mask.counts())

    with log_timing("Generated dataset", logger=_log, out_dir=str(out_dir)):
        entries = _map(build, range(n_scenes), threads)
        manifest = Manifest(entries, out_dir)
        manifest.write()
    return manifest


def degrade_dataset(manifest, out_dir, factor: int = 8) -> Manifest:
    """Crop every pair to a multiple of `factor`, degrade it and re-manifest."""
    source = manifest if isinstance(manifest, Manifest) else read_manifest(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    with log_timing("Degraded dataset", logger=_log, factor=factor):
        for index, (entry, image, mask) in enumerate(source.scenes()):
            image, mask = crop_to_multiple(image, mask, factor)
            image, mask = degrade(image, mask, factor)
            image_name, mask_name = _scene_names(index)
            write_image(image, out_dir / image_name)
            write_mask(mask, out_dir / mask_name)
            entries.append(ManifestEntry(image_name, mask_name, mask.counts()))
        result = Manifest(entries, out_dir)
        result.write()
    return result
