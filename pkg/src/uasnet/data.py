"""Sample format, synthetic nodule phantoms and stratified five-fold splits.

On-disk layout of a dataset root::

    manifest.json
    <sample_id>/meta.json      height, width, n_annotations, malignancy, hu_offset
    <sample_id>/image.f32      little-endian float32, row-major, HU - hu_offset
    <sample_id>/mask_<k>.u8    one byte per pixel (0/1), row-major, k in [0, n)
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import CorruptSampleError, DataError, InvalidInputError
from .masks import BENIGN, MALIGNANCY_LABELS, MALIGNANT, MAX_ANNOTATIONS, AnnotationSet

FORMAT_VERSION = 1
N_FOLDS = 5
IMAGE_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("u1")


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic part-solid nodule.

    The nodule is a solid core (~0 HU) wrapped in a ground-glass halo whose
    density ramps linearly from ``halo_hu_mean + halo_ramp_hu / 2`` at the core
    edge down to ``halo_hu_mean - halo_ramp_hu / 2`` at the outer edge, over
    lung background. Annotators are HU iso-contours of the noise-free image:
    a consensus reader at ``consensus_hu``, an inclusive reader at
    ``inclusive_hu`` and an exclusive reader at ``exclusive_hu``. Each reader's
    level is pulled towards ``consensus_hu`` by ``annotator_spread`` (0 means
    every reader draws the same contour) and then jittered by up to
    ``annotator_jitter_hu``.
    """

    patch_size: int = 64
    core_hu_mean: float = 0.0
    halo_hu_mean: float = -750.0
    halo_ramp_hu: float = 150.0
    background_hu_mean: float = -900.0
    cavity_hu: float = -1000.0
    spike_hu: float = -700.0
    core_radius: tuple = (4.0, 8.0)
    halo_width: tuple = (4.0, 8.0)
    center_jitter: float = 4.0
    lobulation: float = 0.05
    malignant_lobulation: float = 0.12
    spike_count: tuple = (5, 9)
    spike_length: tuple = (2.0, 6.0)
    edge_sigma: float = 0.8
    noise_sigma: float = 15.0
    inclusive_hu: float = -860.0
    consensus_hu: float = -800.0
    exclusive_hu: float = -500.0
    annotator_spread: float = 1.0
    annotator_jitter_hu: float = 15.0
    n_annotators: tuple = (2, 4)
    cavity: bool = False
    spiculation: bool = False

    def validate(self):
        half = self.patch_size / 2.0
        if self.patch_size % 32:
            raise InvalidInputError(f"patch_size {self.patch_size} must be divisible by 32")
        if not (0 < self.core_radius[0] <= self.core_radius[1]) or not (0 < self.halo_width[0] <= self.halo_width[1]):
            raise InvalidInputError("radius ranges must be positive and ordered")
        reach = ((self.core_radius[1] + self.halo_width[1]) * (1 + max(self.lobulation, self.malignant_lobulation))
                 + self.spike_length[1] + self.center_jitter)
        if reach >= half:
            raise InvalidInputError(f"nodule reach {reach:.1f}px does not fit in half patch {half:.1f}px")
        halo_inner = self.halo_hu_mean + self.halo_ramp_hu / 2
        halo_outer = self.halo_hu_mean - self.halo_ramp_hu / 2
        lo = self.consensus_hu - self.annotator_spread * (self.consensus_hu - self.inclusive_hu)
        hi = self.consensus_hu + self.annotator_spread * (self.exclusive_hu - self.consensus_hu)
        lo -= self.annotator_jitter_hu
        hi += self.annotator_jitter_hu
        if not (self.background_hu_mean < lo and hi < (self.core_hu_mean + halo_inner) / 2):
            raise InvalidInputError(
                "annotator levels must sit between background and the core/halo midpoint "
                f"(got range [{lo:.0f}, {hi:.0f}] HU)")
        if not (self.inclusive_hu <= self.consensus_hu <= self.exclusive_hu):
            raise InvalidInputError("annotator levels must satisfy inclusive <= consensus <= exclusive")
        if not (self.background_hu_mean < halo_outer < halo_inner < self.core_hu_mean):
            raise InvalidInputError("HU levels must satisfy background < halo < core")
        if not (1 <= self.n_annotators[0] <= self.n_annotators[1] <= MAX_ANNOTATIONS):
            raise InvalidInputError(f"n_annotators range must lie in [1, {MAX_ANNOTATIONS}]")
        return self


def _reader_levels(spec: PhantomSpec, n: int, rng: np.random.Generator) -> list[float]:
    # inclusive and exclusive readers are always present, so union and intersection
    # are the same image contours whatever the reader count; consensus readers come
    # first so Dice ties resolve to the most central contour
    s = spec.annotator_spread
    incl = spec.consensus_hu - s * (spec.consensus_hu - spec.inclusive_hu)
    excl = spec.consensus_hu + s * (spec.exclusive_hu - spec.consensus_hu)
    roles = {1: [spec.consensus_hu], 2: [incl, excl], 3: [spec.consensus_hu, incl, excl],
             4: [spec.consensus_hu, spec.consensus_hu, incl, excl]}[n]
    jitter = rng.uniform(-1.0, 1.0, size=n) * spec.annotator_jitter_hu
    return [float(level + j) for level, j in zip(roles, jitter)]


def _segment_distance(yy, xx, p0, p1):
    d = np.asarray(p1) - np.asarray(p0)
    length2 = float(d @ d)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(length2, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def render_phantom(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    """Noise-free image plus the geometric regions used to build it."""
    size = spec.patch_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
    r_core = rng.uniform(*spec.core_radius)
    r_halo = r_core + rng.uniform(*spec.halo_width)

    amp = spec.malignant_lobulation if spec.spiculation else spec.lobulation
    theta = np.arctan2(yy - cy, xx - cx)
    wobble = np.ones_like(theta)
    for k in (2, 3, 5):
        wobble += amp / k ** 0.5 * rng.uniform(0.3, 1.0) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    rho = np.hypot(yy - cy, xx - cx) / wobble

    halo_inner = spec.halo_hu_mean + spec.halo_ramp_hu / 2
    halo_outer = spec.halo_hu_mean - spec.halo_ramp_hu / 2
    hu = np.full((size, size), spec.background_hu_mean)
    halo = rho < r_halo
    frac = np.clip((rho - r_core) / (r_halo - r_core), 0.0, 1.0)
    hu[halo] = (halo_inner + (halo_outer - halo_inner) * frac)[halo]
    core = rho < r_core

    if spec.spiculation:
        n_spikes = int(rng.integers(spec.spike_count[0], spec.spike_count[1] + 1))
        for angle in rng.uniform(0, 2 * np.pi, size=n_spikes):
            end = r_halo + rng.uniform(*spec.spike_length)
            p0 = (cy + r_core * np.sin(angle), cx + r_core * np.cos(angle))
            p1 = (cy + end * np.sin(angle), cx + end * np.cos(angle))
            spike = _segment_distance(yy, xx, p0, p1) < 0.8
            hu[spike] = np.maximum(hu[spike], spec.spike_hu)

    hu[core] = spec.core_hu_mean
    cavity = np.zeros_like(core)
    if spec.cavity:
        r_cav = r_core * rng.uniform(0.3, 0.45)
        off = rng.uniform(-0.2, 0.2, size=2) * r_core
        cavity = np.hypot(yy - cy - off[0], xx - cx - off[1]) < r_cav
        hu[cavity] = spec.cavity_hu

    clean = ndimage.gaussian_filter(hu, spec.edge_sigma, mode="nearest")
    return {
        "clean": clean,
        "core": core & ~cavity,
        "halo": halo & ~core,
        "cavity": cavity,
        "rho": rho,
        "r_core": r_core,
        "r_halo": r_halo,
    }


def generate_phantom(spec: Optional[PhantomSpec] = None, seed: int = 0, sample_id: Optional[str] = None,
                     return_geometry: bool = False):
    """Render one phantom nodule and its simulated annotations.

    Deterministic for a given ``(spec, seed)``. Malignancy follows the
    spiculation flag.
    """
    spec = (spec or PhantomSpec()).validate()
    rng = np.random.default_rng(seed)
    geo = render_phantom(spec, rng)
    image = (geo["clean"] + rng.normal(0.0, spec.noise_sigma, size=geo["clean"].shape)).astype(np.float32)
    n = int(rng.integers(spec.n_annotators[0], spec.n_annotators[1] + 1))
    masks = [(geo["clean"] > level).astype(np.uint8) for level in _reader_levels(spec, n, rng)]
    sample = AnnotationSet(
        image=image,
        masks=masks,
        malignancy=MALIGNANT if spec.spiculation else BENIGN,
        sample_id=sample_id if sample_id is not None else f"phantom_{seed}",
    )
    if return_geometry:
        return sample, geo
    return sample


def generate_dataset(count: int, seed: int = 0, spec: Optional[PhantomSpec] = None,
                     malignant_fraction: float = 0.4, cavity_fraction: float = 0.2) -> list[AnnotationSet]:
    """``count`` phantoms with exactly ``round(count * fraction)`` malignant (and cavitary) cases."""
    spec = (spec or PhantomSpec()).validate()
    if count < 0:
        raise InvalidInputError("count must be >= 0")
    rng = np.random.default_rng(seed)
    malignant = np.zeros(count, dtype=bool)
    malignant[: int(round(count * malignant_fraction))] = True
    cavitary = np.zeros(count, dtype=bool)
    cavitary[: int(round(count * cavity_fraction))] = True
    malignant = rng.permutation(malignant)
    cavitary = rng.permutation(cavitary)
    seeds = rng.integers(0, 2 ** 31 - 1, size=count)
    width = max(4, len(str(count)))
    samples = []
    for i in range(count):
        s = replace(spec, spiculation=bool(malignant[i]), cavity=bool(cavitary[i]))
        samples.append(generate_phantom(s, int(seeds[i]), sample_id=f"ph{i:0{width}d}"))
    return samples


# ---------------------------------------------------------------------------
# sample I/O


def write_sample(sample: AnnotationSet, root, hu_offset: float = 0.0) -> Path:
    """Write ``sample`` under ``root/<sample_id>/`` and return that directory."""
    if not sample.sample_id or os.sep in sample.sample_id or sample.sample_id in (".", ".."):
        raise InvalidInputError(f"invalid sample id {sample.sample_id!r}")
    out = Path(root) / sample.sample_id
    out.mkdir(parents=True, exist_ok=True)
    h, w = sample.shape
    meta = {
        "sample_id": sample.sample_id,
        "height": int(h),
        "width": int(w),
        "n_annotations": sample.n_annotations,
        "malignancy": sample.malignancy,
        "hu_offset": float(hu_offset),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    stored = (sample.image - np.float32(hu_offset)).astype(IMAGE_DTYPE)
    (out / "image.f32").write_bytes(stored.tobytes(order="C"))
    for k, mask in enumerate(sample.masks):
        (out / f"mask_{k}.u8").write_bytes(mask.astype(MASK_DTYPE).tobytes(order="C"))
    for stale in out.glob("mask_*.u8"):
        idx = stale.stem.split("_", 1)[1]
        if not idx.isdigit() or int(idx) >= sample.n_annotations:
            stale.unlink()
    return out


def _read_exact(path: Path, dtype: np.dtype, shape) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorruptSampleError(f"missing file {path}") from None
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise CorruptSampleError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def read_meta(sample_dir) -> dict:
    path = Path(sample_dir) / "meta.json"
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise CorruptSampleError(f"missing file {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptSampleError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise CorruptSampleError(f"{path}: expected a JSON object")
    for key in ("height", "width", "n_annotations"):
        if not isinstance(meta.get(key), int) or meta[key] < 0:
            raise CorruptSampleError(f"{path}: '{key}' must be a non-negative integer")
    if meta["height"] == 0 or meta["width"] == 0:
        raise CorruptSampleError(f"{path}: empty image dimensions")
    if meta["n_annotations"] > MAX_ANNOTATIONS:
        raise CorruptSampleError(f"{path}: n_annotations {meta['n_annotations']} exceeds {MAX_ANNOTATIONS}")
    if meta.get("malignancy") not in MALIGNANCY_LABELS + (None,):
        raise CorruptSampleError(f"{path}: malignancy must be one of {MALIGNANCY_LABELS} or null")
    if not isinstance(meta.get("hu_offset", 0.0), (int, float)):
        raise CorruptSampleError(f"{path}: hu_offset must be a number")
    return meta


def read_sample(sample_dir, expected_shape=None) -> AnnotationSet:
    """Load a sample directory written by :func:`write_sample`."""
    sample_dir = Path(sample_dir)
    meta = read_meta(sample_dir)
    shape = (meta["height"], meta["width"])
    if expected_shape is not None and tuple(expected_shape) != shape:
        raise DataError(f"{sample_dir}: image is {shape[0]}x{shape[1]}, manifest expects "
                        f"{expected_shape[0]}x{expected_shape[1]}")
    stored = _read_exact(sample_dir / "image.f32", IMAGE_DTYPE, shape)
    offset = np.float32(meta.get("hu_offset", 0.0))
    image = stored.astype(np.float32) + offset if offset != 0 else stored.astype(np.float32)
    if not np.all(np.isfinite(image)):
        raise CorruptSampleError(f"{sample_dir}: image contains non-finite values")
    masks = []
    for k in range(meta["n_annotations"]):
        mask = _read_exact(sample_dir / f"mask_{k}.u8", MASK_DTYPE, shape)
        if mask.max(initial=0) > 1:
            raise CorruptSampleError(f"{sample_dir}/mask_{k}.u8: values outside {{0, 1}}")
        masks.append(mask.copy())
    return AnnotationSet(image=image, masks=masks, malignancy=meta.get("malignancy"),
                         sample_id=meta.get("sample_id", sample_dir.name))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    malignancy: Optional[str]
    n_annotations: int


@dataclass
class DatasetManifest:
    samples: list = field(default_factory=list)
    patch_size: int = 64
    version: int = FORMAT_VERSION
    root: Optional[Path] = None

    def __post_init__(self):
        if self.patch_size % 32:
            raise DataError(f"patch_size {self.patch_size} must be divisible by 32")
        seen = set()
        for entry in self.samples:
            if entry.sample_id in seen:
                raise DataError(f"duplicate sample id {entry.sample_id!r}")
            seen.add(entry.sample_id)
            if not 1 <= entry.n_annotations <= MAX_ANNOTATIONS:
                raise DataError(f"{entry.sample_id}: n_annotations {entry.n_annotations} outside [1, {MAX_ANNOTATIONS}]")
            if entry.malignancy not in MALIGNANCY_LABELS + (None,):
                raise DataError(f"{entry.sample_id}: bad malignancy {entry.malignancy!r}")

    @property
    def ids(self) -> list[str]:
        return [e.sample_id for e in self.samples]

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.samples:
            if e.sample_id == sample_id:
                return e
        raise KeyError(sample_id)

    def load(self, sample_id: str) -> AnnotationSet:
        if self.root is None:
            raise DataError("manifest has no root directory")
        e = self.entry(sample_id)
        sample = read_sample(self.root / e.path, (self.patch_size, self.patch_size))
        if sample.n_annotations != e.n_annotations:
            raise DataError(f"{sample_id}: manifest lists {e.n_annotations} annotations, sample has "
                            f"{sample.n_annotations}")
        return sample

    def load_all(self) -> list[AnnotationSet]:
        return [self.load(i) for i in self.ids]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "patch_size": self.patch_size,
            "samples": [asdict(e) for e in self.samples],
        }


def write_dataset(samples, root, patch_size: Optional[int] = None) -> DatasetManifest:
    """Write samples plus ``manifest.json`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        if patch_size is None:
            patch_size = s.shape[0]
        if s.shape != (patch_size, patch_size):
            raise DataError(f"{s.sample_id}: shape {s.shape} does not match patch size {patch_size}")
        write_sample(s, root)
        entries.append(ManifestEntry(s.sample_id, s.sample_id, s.malignancy, s.n_annotations))
    manifest = DatasetManifest(entries, patch_size if patch_size is not None else 64, FORMAT_VERSION, root)
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return manifest


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    try:
        raw = json.loads(path.read_text())
        entries = [ManifestEntry(str(e["sample_id"]), str(e["path"]), e.get("malignancy"), int(e["n_annotations"]))
                   for e in raw["samples"]]
        return DatasetManifest(entries, int(raw["patch_size"]), int(raw["version"]), root)
    except FileNotFoundError:
        raise DataError(f"no manifest.json in {root}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from None


def validate_dataset(root) -> list[str]:
    """Check every sample against the manifest; return a list of problems."""
    problems = []
    try:
        manifest = read_manifest(root)
    except DataError as exc:
        return [str(exc)]
    for sample_id in manifest.ids:
        try:
            manifest.load(sample_id)
        except DataError as exc:
            problems.append(str(exc))
    return problems


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    fold_assignments: dict
    seed: int

    def fold_of(self, sample_id: str) -> int:
        return self.fold_assignments[sample_id]

    def split(self, fold: int) -> tuple[list[str], list[str]]:
        """(train ids, validation ids) for held-out ``fold``."""
        train = [i for i, f in self.fold_assignments.items() if f != fold]
        val = [i for i, f in self.fold_assignments.items() if f == fold]
        return train, val

    def fold_sizes(self) -> list[int]:
        sizes = [0] * N_FOLDS
        for f in self.fold_assignments.values():
            sizes[f] += 1
        return sizes


def stratified_five_fold(manifest: DatasetManifest, seed: int = 0) -> FoldSplit:
    """Assign every sample to one of five folds with equal class balance.

    Each malignancy stratum is shuffled with ``seed`` and dealt round-robin;
    the dealing position carries over between strata so overall fold sizes
    also differ by at most one.
    """
    strata: dict = {}
    for e in manifest.samples:
        strata.setdefault(e.malignancy or "unknown", []).append(e.sample_id)
    for label, ids in strata.items():
        if len(ids) < N_FOLDS:
            raise DataError(f"stratum {label!r} has {len(ids)} samples; need at least {N_FOLDS}")
    rng = np.random.default_rng(seed)
    assignments = {}
    position = 0
    for label in sorted(strata):
        ids = sorted(strata[label])
        for sample_id in (ids[i] for i in rng.permutation(len(ids))):
            assignments[sample_id] = position % N_FOLDS
            position += 1
    ordered = {e.sample_id: assignments[e.sample_id] for e in manifest.samples}
    return FoldSplit(ordered, seed)


def hu_histogram_mode(values, lo: float = -1200.0, hi: float = 400.0, width: float = 10.0) -> float:
    """Centre of the most populated HU bin."""
    edges = np.arange(lo, hi + width, width)
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)
    i = int(np.argmax(counts))
    return float((edges[i] + edges[i + 1]) / 2)


def phantom_spec_from_dict(values: dict) -> PhantomSpec:
    known = {f for f in PhantomSpec.__dataclass_fields__}
    unknown = set(values) - known
    if unknown:
        raise InvalidInputError(f"unknown phantom fields: {sorted(unknown)}")
    converted = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return PhantomSpec(**converted).validate()
