"""
Procedural datasets with analytically known statistics, and the metrics
used in place of Inception-based scores.

Every class is defined as a function of continuous image coordinates
u, v in [0, 1), so generating at 16x16 or 64x64 samples the same
underlying picture. Eight classes over three families:

    0-3  checkerboard, 1..4 cycles per image width (random polarity)
    4    radial gradient, linear falloff
    5    radial gradient, quadratic falloff
    6-7  gaussian blobs, 1 and 2 blobs at random centres

Images are float arrays (C, R, R) in [-1, 1].
"""

import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.stats import wasserstein_distance

from sources.errors import ConfigError, InputError
from sources.logger import Logger
from sources.rpe2d import SeededRng, make_rng
from sources.schemas import EvalReport, EvalRow

FAMILIES = ("checkerboard", "radial_gradient", "gaussian_blobs")
W1_LEVELS = np.linspace(-1.0, 1.0, 64)
MIN_SPECTRAL_SAMPLES = 16
BLOB_THRESHOLD = 0.5
MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class ClassSpec:
    family: str
    frequency: Optional[int] = None
    profile: Optional[str] = None
    blobs: Optional[int] = None


CLASS_TABLE: Tuple[ClassSpec, ...] = (
    ClassSpec("checkerboard", frequency=1),
    ClassSpec("checkerboard", frequency=2),
    ClassSpec("checkerboard", frequency=3),
    ClassSpec("checkerboard", frequency=4),
    ClassSpec("radial_gradient", profile="linear"),
    ClassSpec("radial_gradient", profile="quadratic"),
    ClassSpec("gaussian_blobs", blobs=1),
    ClassSpec("gaussian_blobs", blobs=2),
)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: Tuple[int, ...] = tuple(range(len(CLASS_TABLE)))
    seed: int = 0
    channels: int = 1
    patch_size: int = 1
    blob_sigma: float = 0.15
    blob_margin: float = 0.15
    blob_separation: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        for class_id in self.classes:
            class_spec(class_id)
        if self.channels not in (1, 3):
            raise ConfigError(f"must be 1 or 3, got {self.channels}", key="model.channels")


def class_spec(class_id: int) -> ClassSpec:
    if not 0 <= class_id < len(CLASS_TABLE):
        raise InputError(f"class {class_id} outside the {len(CLASS_TABLE)} synthetic classes")
    return CLASS_TABLE[class_id]


def analytic_frequency(class_id: int) -> Optional[int]:
    """Spatial frequency in cycles per image width, None for families without one."""
    return class_spec(class_id).frequency


def _coordinates(resolution: int) -> Tuple[np.ndarray, np.ndarray]:
    centres = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    return np.meshgrid(centres, centres, indexing="ij")


def _checkerboard(u: np.ndarray, v: np.ndarray, frequency: int, rng: SeededRng) -> np.ndarray:
    polarity = 1.0 if rng.random() < 0.5 else -1.0
    su = np.where(np.floor(2 * frequency * u) % 2 == 0, 1.0, -1.0)
    sv = np.where(np.floor(2 * frequency * v) % 2 == 0, 1.0, -1.0)
    return polarity * su * sv


def _radial(u: np.ndarray, v: np.ndarray, profile: str) -> np.ndarray:
    r = np.sqrt((u - 0.5) ** 2 + (v - 0.5) ** 2) / np.sqrt(0.5)
    if profile == "linear":
        return 1.0 - 2.0 * r
    return 1.0 - 2.0 * r ** 2


def blob_centres(count: int, rng: SeededRng, margin: float, separation: float) -> List[Tuple[float, float]]:
    centres = []
    while len(centres) < count:
        c = tuple(rng.uniform(margin, 1.0 - margin, size=2))
        if all(np.hypot(c[0] - o[0], c[1] - o[1]) >= separation for o in centres):
            centres.append(c)
    return centres


def _blobs(u: np.ndarray, v: np.ndarray, count: int, rng: SeededRng, spec: SyntheticSpec) -> np.ndarray:
    peak = np.zeros_like(u)
    for cu, cv in blob_centres(count, rng, spec.blob_margin, spec.blob_separation):
        g = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * spec.blob_sigma ** 2))
        peak = np.maximum(peak, g)
    return 2.0 * peak - 1.0


def generate(spec: SyntheticSpec, class_id: int, resolution: int, rng: SeededRng) -> np.ndarray:
    """Render one (C, R, R) float32 image of the class at the given resolution."""
    if resolution < 1 or resolution % spec.patch_size:
        raise InputError(f"resolution {resolution} not divisible by patch size {spec.patch_size}")
    cls = class_spec(class_id)
    u, v = _coordinates(resolution)
    if cls.family == "checkerboard":
        image = _checkerboard(u, v, cls.frequency, rng)
    elif cls.family == "radial_gradient":
        image = _radial(u, v, cls.profile)
    elif cls.family == "gaussian_blobs":
        image = _blobs(u, v, cls.blobs, rng, spec)
    else:
        raise ConfigError(f"unsupported family '{cls.family}'")
    image = np.clip(image, -1.0, 1.0).astype(np.float32)
    return np.repeat(image[None], spec.channels, axis=0)


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=0) if image.ndim == 3 else image


def dominant_frequency(image: np.ndarray) -> float:
    """
    Ring index with the strongest power on the mean-removed image.

    Rings are Chebyshev (square) rings max(|kx|, |ky|) = r >= 1 with kx, ky
    integer cycles per image; each ring is scored by its maximum power.
    A flat image has no dominant frequency and returns 0.
    """
    gray = _gray(image)
    gray = gray - gray.mean()
    power = np.abs(np.fft.fft2(gray)) ** 2
    ky = np.abs(np.fft.fftfreq(gray.shape[0]) * gray.shape[0])
    kx = np.abs(np.fft.fftfreq(gray.shape[1]) * gray.shape[1])
    rings = np.rint(np.maximum(ky[:, None], kx[None, :])).astype(int)
    if power.max() <= 1e-12 * gray.size:
        return 0.0
    best_ring, best_power = 0, -1.0
    for r in range(1, rings.max() + 1):
        ring_power = power[rings == r].max()
        if ring_power > best_power:
            best_ring, best_power = r, ring_power
    return float(best_ring)


def spectral_peak_error(samples: Sequence[np.ndarray], class_id: int, spec: SyntheticSpec) -> float:
    """|median dominant frequency - analytic class frequency| in cycles per width."""
    if len(samples) == 0:
        raise InputError("no samples to evaluate")
    if len(samples) < MIN_SPECTRAL_SAMPLES:
        raise InputError(f"spectral peak error needs at least {MIN_SPECTRAL_SAMPLES} samples, got {len(samples)}")
    if class_id not in spec.classes:
        raise InputError(f"class {class_id} is not part of the dataset classes {list(spec.classes)}")
    target = analytic_frequency(class_id)
    if target is None:
        raise InputError(f"class {class_id} ({class_spec(class_id).family}) has no analytic frequency")
    median = float(np.median([dominant_frequency(s) for s in samples]))
    return abs(median - target)


def _level_histogram(samples: Sequence[np.ndarray]) -> np.ndarray:
    values = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in samples])
    idx = np.clip(np.rint((np.clip(values, -1.0, 1.0) + 1.0) / 2.0 * (len(W1_LEVELS) - 1)), 0, len(W1_LEVELS) - 1)
    return np.bincount(idx.astype(int), minlength=len(W1_LEVELS)).astype(np.float64)


def histogram_w1(samples: Sequence[np.ndarray], reference_samples: Sequence[np.ndarray]) -> float:
    """1-Wasserstein distance between 64-level pixel-intensity histograms over [-1, 1]."""
    if len(samples) == 0 or len(reference_samples) == 0:
        raise InputError("histogram W1 needs two nonempty sample sets")
    return float(wasserstein_distance(W1_LEVELS, W1_LEVELS,
                                      u_weights=_level_histogram(samples),
                                      v_weights=_level_histogram(reference_samples)))


def count_blobs(image: np.ndarray, threshold: float = BLOB_THRESHOLD) -> int:
    """Local maxima above threshold after a 3x3 box smoothing, touching maxima counted once."""
    smooth = ndimage.uniform_filter(_gray(image), size=3, mode="nearest")
    peaks = (smooth == ndimage.maximum_filter(smooth, size=3, mode="nearest")) & (smooth > threshold)
    _, count = ndimage.label(peaks, structure=np.ones((3, 3), dtype=int))
    return int(count)


def blob_accuracy(samples: Sequence[np.ndarray], class_id: int) -> float:
    expected = class_spec(class_id).blobs
    if expected is None:
        raise InputError(f"class {class_id} is not a blob class")
    if len(samples) == 0:
        raise InputError("no samples to evaluate")
    return sum(count_blobs(s) == expected for s in samples) / len(samples)


def reference_set(spec: SyntheticSpec, class_id: int, resolution: int, count: int, seed: int) -> List[np.ndarray]:
    return [generate(spec, class_id, resolution, make_rng(seed + i)) for i in range(count)]


def evaluate(samples_by_class: Dict[int, Sequence[np.ndarray]], spec: SyntheticSpec,
             reference_seed: int = 10_000) -> EvalReport:
    """
    One row per class: spectral error (checkerboards with at least 16
    samples), W1 against a freshly generated reference set of the same size
    and resolution, blob accuracy (blob classes).
    """
    logger = Logger("eval.log")
    if not samples_by_class or not any(len(s) for s in samples_by_class.values()):
        raise InputError("no samples to evaluate")
    rows, resolution, total = [], 0, 0
    for class_id in sorted(samples_by_class):
        samples = list(samples_by_class[class_id])
        if not samples:
            continue
        resolution = int(np.asarray(samples[0]).shape[-1])
        cls = class_spec(class_id)
        reference = reference_set(spec, class_id, resolution, len(samples), reference_seed + 1000 * class_id)
        spectral = None
        if cls.frequency is not None and len(samples) >= MIN_SPECTRAL_SAMPLES:
            spectral = spectral_peak_error(samples, class_id, spec)
        blobs = blob_accuracy(samples, class_id) if cls.blobs is not None else None
        rows.append(EvalRow(class_id=class_id, family=cls.family, samples=len(samples), resolution=resolution,
                            spectral_error=spectral, w1=histogram_w1(samples, reference), blob_accuracy=blobs))
        total += len(samples)
    report = EvalReport(resolution=resolution, sample_count=total, rows=rows)
    logger.info(f"evaluated {total} samples over {len(rows)} classes: {report}")
    return report


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W) or (H, W, 3) bytes."""
    pixels = np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return pixels[0] if pixels.shape[0] == 1 else np.transpose(pixels, (1, 2, 0))


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    image = pixels[None] if pixels.ndim == 2 else np.transpose(pixels, (2, 0, 1))
    return image / 127.5 - 1.0


def save_image(image: np.ndarray, path: str) -> None:
    """Binary PGM (P5) for one channel, PPM (P6) for three."""
    pixels = to_uint8(image)
    Image.fromarray(pixels).save(path, format="PPM")


def load_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise InputError(f"image '{path}' not found")
    with Image.open(path) as img:
        return from_uint8(np.array(img))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_id: int
    seed: int


def write_manifest(directory: str, entries: Sequence[ManifestEntry]) -> str:
    path = os.path.join(directory, MANIFEST)
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(f"{entry.path}\t{entry.class_id}\t{entry.seed}\n")
    return path


def read_manifest(directory: str) -> List[ManifestEntry]:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise InputError(f"no manifest found in '{directory}'")
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise InputError(f"{path}:{lineno}: expected 'path<TAB>class<TAB>seed'")
            entries.append(ManifestEntry(parts[0], int(parts[1]), int(parts[2])))
    if not entries:
        raise InputError(f"manifest '{path}' is empty")
    return entries


def load_corpus(directory: str) -> Dict[int, List[np.ndarray]]:
    """Images grouped by the class recorded in the manifest."""
    grouped = defaultdict(list)
    for entry in read_manifest(directory):
        grouped[entry.class_id].append(load_image(os.path.join(directory, entry.path)))
    return dict(grouped)


def write_corpus(directory: str, spec: SyntheticSpec, resolution: int, count_per_class: int) -> List[ManifestEntry]:
    """Deterministic corpus: image k of class c uses seed spec.seed + 1000 * c + k."""
    os.makedirs(directory, exist_ok=True)
    extension = "pgm" if spec.channels == 1 else "ppm"
    entries = []
    for class_id in spec.classes:
        for k in range(count_per_class):
            seed = spec.seed + 1000 * class_id + k
            name = f"class{class_id}_seed{seed}.{extension}"
            save_image(generate(spec, class_id, resolution, make_rng(seed)), os.path.join(directory, name))
            entries.append(ManifestEntry(name, class_id, seed))
    write_manifest(directory, entries)
    return entries
