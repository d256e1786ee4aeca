"""Volume ingestion, preprocessing, augmentation, synthetic data and folds.

Arrays follow the layout ``(modality, H, W, D)`` with modalities ordered
``(t1, t1ce, t2, flair)``. Masks are ``uint8`` arrays of shape ``(H, W, D)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

MODALITIES = ("t1", "t1ce", "t2", "flair")
CLASSES = ("HGG", "LGG")
RAW_SHAPE = (240, 240, 155)
CROP_SHAPE = (192, 192, 144)
INPUT_SHAPE = (128, 128, 96)
INPUT_SPACING = (1.5, 1.5, 1.5)


class IngestionError(FileNotFoundError):
    pass


class ConsistencyError(ValueError):
    pass


class DegenerateVolumeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class CaseRecord:
    id: str
    volume: np.ndarray
    label: str
    wt_mask: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.volume.ndim != 4 or self.volume.shape[0] != len(MODALITIES):
            raise ConsistencyError(f"{self.id}: volume must be 4xHxWxD, got {self.volume.shape}")
        if self.volume.shape[1:] != self.wt_mask.shape:
            raise ConsistencyError(
                f"{self.id}: volume {self.volume.shape[1:]} and mask {self.wt_mask.shape} differ"
            )
        if self.label not in CLASSES:
            raise ConsistencyError(f"{self.id}: unknown label {self.label!r}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConsistencyError(f"{self.id}: spacing must be three positive values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.label)


@dataclass
class CaseEntry:
    id: str
    path_or_seed: object  # str path for files on disk, int seed for synthetic cases
    label: str


@dataclass
class DatasetManifest:
    cases: list
    class_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = {c: 0 for c in CLASSES}
        for entry in self.cases:
            counts[entry.label] += 1
        if self.class_counts and {k: v for k, v in self.class_counts.items() if v} != {
            k: v for k, v in counts.items() if v
        }:
            raise ConfigurationError(f"class_counts {self.class_counts} disagree with cases {counts}")
        self.class_counts = counts

    @property
    def ids(self) -> list:
        return [c.id for c in self.cases]

    def labels(self) -> dict:
        return {c.id: c.label for c in self.cases}

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest([c for c in self.cases if c.id in keep])

    def to_json(self) -> str:
        return json.dumps(
            {
                "cases": [asdict(c) for c in self.cases],
                "class_counts": self.class_counts,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        obj = json.loads(text)
        return cls([CaseEntry(**c) for c in obj["cases"]], obj.get("class_counts", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


@dataclass
class AugmentationConfig:
    """Enable flags and probabilities for the eight augmentation steps.

    Steps run in the order: rotation/scaling, gaussian noise, gaussian blur,
    brightness, contrast, low resolution, gamma, mirroring.
    """

    rotation_scaling: bool = True
    p_rotation_scaling: float = 0.2
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.85, 1.25)
    noise: bool = True
    p_noise: float = 0.2
    max_noise_sigma: float = 0.1
    blur: bool = True
    p_blur: float = 0.2
    blur_sigma_range: tuple = (0.5, 1.0)
    brightness: bool = True
    p_brightness: float = 0.2
    brightness_range: tuple = (0.75, 1.25)
    contrast: bool = True
    p_contrast: float = 0.2
    contrast_range: tuple = (0.75, 1.25)
    low_resolution: bool = True
    p_low_resolution: float = 0.2
    low_resolution_range: tuple = (0.5, 1.0)
    gamma: bool = True
    p_gamma: float = 0.2
    gamma_range: tuple = (0.7, 1.5)
    mirroring: bool = True
    p_mirror: tuple = (0.5, 0.5, 0.5)
    rng_seed: int = 0

    def __post_init__(self):
        probs = [getattr(self, n) for n in vars(self) if n.startswith("p_") and n != "p_mirror"]
        probs += list(self.p_mirror)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigurationError("augmentation probabilities must lie in [0, 1]")

    @classmethod
    def disabled(cls, rng_seed: int = 0) -> "AugmentationConfig":
        return cls(
            rotation_scaling=False,
            noise=False,
            blur=False,
            brightness=False,
            contrast=False,
            low_resolution=False,
            gamma=False,
            mirroring=False,
            rng_seed=rng_seed,
        )


@dataclass
class FoldSplit:
    k: int
    assignments: dict

    def fold_ids(self, fold: int) -> list:
        return [cid for cid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list:
        return [cid for cid, f in self.assignments.items() if f != fold]


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _read_nifti(path: Path):
    import nibabel as nib

    img = nib.load(str(path))
    return np.asarray(img.dataobj, dtype=np.float32), tuple(float(z) for z in img.header.get_zooms()[:3])


def _read_raw(path: Path, sidecar: dict):
    shape = tuple(sidecar["shape"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != math.prod(shape):
        raise ConsistencyError(f"{path.name}: expected {math.prod(shape)} values, found {data.size}")
    return data.reshape(shape), tuple(float(s) for s in sidecar.get("spacing", (1, 1, 1)))


def load_case(root_dir, case_id: str, label: Optional[str] = None) -> CaseRecord:
    """Read one BraTS-named case directory.

    NIfTI files ``<id>_<modality>.nii.gz`` are preferred; the fallback is a
    raw little-endian float32 file ``<id>_<modality>.bin`` per image plus a
    ``<id>.json`` sidecar carrying shape, spacing and label.
    """
    case_dir = Path(root_dir) / case_id
    sidecar_path = case_dir / f"{case_id}.json"
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else None

    images, spacings = {}, set()
    for name in MODALITIES + ("seg",):
        nii = case_dir / f"{case_id}_{name}.nii.gz"
        raw = case_dir / f"{case_id}_{name}.bin"
        if nii.exists():
            images[name], spacing = _read_nifti(nii)
        elif raw.exists() and sidecar is not None:
            images[name], spacing = _read_raw(raw, sidecar)
        else:
            raise IngestionError(f"{case_id}: missing {name} image ({nii.name})")
        spacings.add(spacing)

    shapes = {name: img.shape for name, img in images.items()}
    if len(set(shapes.values())) != 1:
        raise ConsistencyError(f"{case_id}: image shapes disagree {shapes}")

    if label is None:
        label = sidecar.get("label") if sidecar else None
    if label is None:
        raise IngestionError(f"{case_id}: no grade label given and no sidecar label")

    volume = np.stack([images[m] for m in MODALITIES]).astype(np.float32)
    wt_mask = (images["seg"] > 0).astype(np.uint8)
    return CaseRecord(case_id, volume, label, wt_mask, sorted(spacings)[0])


def save_raw_case(root_dir, case: CaseRecord, seg: Optional[np.ndarray] = None) -> Path:
    """Write a case in the raw fallback layout (used for fixtures and exports)."""
    case_dir = Path(root_dir) / case.id
    case_dir.mkdir(parents=True, exist_ok=True)
    for m, img in zip(MODALITIES, case.volume):
        img.astype("<f4").tofile(case_dir / f"{case.id}_{m}.bin")
    seg = case.wt_mask if seg is None else seg
    seg.astype("<f4").tofile(case_dir / f"{case.id}_seg.bin")
    sidecar = {"shape": list(case.wt_mask.shape), "spacing": list(case.spacing), "label": case.label}
    (case_dir / f"{case.id}.json").write_text(json.dumps(sidecar))
    return case_dir


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def center_crop_slices(shape: Sequence[int], target: Sequence[int]) -> tuple:
    out = []
    for n, t in zip(shape, target):
        lo = (n - t) // 2
        out.append(slice(lo, lo + t))
    return tuple(out)


def normalize_intensity(volume: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-modality z-score over the whole image."""
    v = volume.astype(np.float64)
    mean = v.mean(axis=(1, 2, 3), keepdims=True)
    std = v.std(axis=(1, 2, 3), keepdims=True)
    if np.any(std < eps):
        bad = [MODALITIES[i] for i in np.flatnonzero(std.ravel() < eps)]
        raise DegenerateVolumeError(f"constant modality image(s): {', '.join(bad)}")
    return ((v - mean) / std).astype(np.float32)


def preprocess(case: CaseRecord) -> CaseRecord:
    """Crop 240x240x155 to 192x192x144, resample to 128x128x96, z-score."""
    if case.wt_mask.shape != RAW_SHAPE:
        raise ConsistencyError(f"{case.id}: preprocess expects raw shape {RAW_SHAPE}, got {case.wt_mask.shape}")
    if not np.allclose(case.spacing, 1.0):
        raise ConsistencyError(f"{case.id}: preprocess expects 1 mm spacing, got {case.spacing}")

    sl = center_crop_slices(RAW_SHAPE, CROP_SHAPE)
    vol = torch.from_numpy(np.ascontiguousarray(case.volume[(slice(None),) + sl]))[None]
    mask = torch.from_numpy(np.ascontiguousarray(case.wt_mask[sl]).astype(np.float32))[None, None]
    vol = F.interpolate(vol, size=INPUT_SHAPE, mode="trilinear", align_corners=False)[0].numpy()
    mask = F.interpolate(mask, size=INPUT_SHAPE, mode="nearest")[0, 0].numpy()
    return CaseRecord(
        case.id,
        normalize_intensity(vol),
        case.label,
        (mask > 0.5).astype(np.uint8),
        INPUT_SPACING,
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _rotation(axis: int, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def _spatial_transform(vol: torch.Tensor, mask: torch.Tensor, matrix: np.ndarray):
    """Resample about the volume centre; ``matrix`` maps output voxel offsets to input offsets."""
    size = vol.shape[-3:]
    half = np.array([n / 2.0 for n in size])
    # affine_grid orders coordinates (x, y, z) = (last, middle, first) axis
    perm = [2, 1, 0]
    norm = np.diag(1.0 / half) @ matrix @ np.diag(half)
    theta = torch.zeros(1, 3, 4, dtype=torch.float32)
    theta[0, :, :3] = torch.from_numpy(norm[np.ix_(perm, perm)])
    grid = F.affine_grid(theta, (1, 1) + tuple(size), align_corners=False)
    out = F.grid_sample(vol[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    out_mask = F.grid_sample(mask[None, None], grid, mode="nearest", padding_mode="zeros", align_corners=False)[0, 0]
    return out, out_mask


def _blur(vol: torch.Tensor, sigma: float) -> torch.Tensor:
    out = np.stack([ndimage.gaussian_filter(v, sigma, mode="nearest") for v in vol.numpy()])
    return torch.from_numpy(out)


def augment(case: CaseRecord, config: AugmentationConfig, rng: Optional[np.random.Generator] = None) -> CaseRecord:
    """Apply the stochastic augmentation sequence; identity when everything is disabled."""
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    vol = torch.from_numpy(np.array(case.volume, dtype=np.float32, copy=True))
    mask = torch.from_numpy(np.array(case.wt_mask, dtype=np.float32, copy=True))
    changed = False

    if config.rotation_scaling and rng.random() < config.p_rotation_scaling:
        max_rad = math.radians(config.max_rotation_deg)
        rot = np.eye(3)
        for axis in range(3):
            rot = rot @ _rotation(axis, rng.uniform(-max_rad, max_rad))
        scale = rng.uniform(*config.scale_range)
        vol, mask = _spatial_transform(vol, mask, rot / scale)
        changed = True
    if config.noise and rng.random() < config.p_noise:
        sigma = rng.uniform(0.0, config.max_noise_sigma)
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        vol = vol + sigma * torch.randn(vol.shape, generator=gen)
        changed = True
    if config.blur and rng.random() < config.p_blur:
        vol = _blur(vol, rng.uniform(*config.blur_sigma_range))
        changed = True
    if config.brightness and rng.random() < config.p_brightness:
        factors = rng.uniform(*config.brightness_range, size=vol.shape[0])
        vol = vol * torch.tensor(factors, dtype=torch.float32).view(-1, 1, 1, 1)
        changed = True
    if config.contrast and rng.random() < config.p_contrast:
        factor = rng.uniform(*config.contrast_range)
        mean = vol.mean(dim=(1, 2, 3), keepdim=True)
        lo = vol.amin(dim=(1, 2, 3), keepdim=True)
        hi = vol.amax(dim=(1, 2, 3), keepdim=True)
        vol = torch.minimum(torch.maximum((vol - mean) * factor + mean, lo), hi)
        changed = True
    if config.low_resolution and rng.random() < config.p_low_resolution:
        zoom = rng.uniform(*config.low_resolution_range)
        size = vol.shape[1:]
        small = [max(1, int(round(n * zoom))) for n in size]
        low = F.interpolate(vol[None], size=small, mode="nearest")
        vol = F.interpolate(low, size=size, mode="trilinear", align_corners=False)[0]
        changed = True
    if config.gamma and rng.random() < config.p_gamma:
        g = rng.uniform(*config.gamma_range)
        mean = vol.mean(dim=(1, 2, 3), keepdim=True)
        std = vol.std(dim=(1, 2, 3), keepdim=True)
        lo = vol.amin(dim=(1, 2, 3), keepdim=True)
        span = vol.amax(dim=(1, 2, 3), keepdim=True) - lo + 1e-7
        vol = ((vol - lo) / span) ** g * span + lo
        # restore first two moments
        vol = (vol - vol.mean(dim=(1, 2, 3), keepdim=True)) / (vol.std(dim=(1, 2, 3), keepdim=True) + 1e-7) * std + mean
        changed = True
    if config.mirroring:
        flips = [axis for axis, p in enumerate(config.p_mirror) if rng.random() < p]
        if flips:
            vol = torch.flip(vol, [a + 1 for a in flips])
            mask = torch.flip(mask, flips)
            changed = True

    if not changed:
        return replace(case, volume=case.volume.copy(), wt_mask=case.wt_mask.copy())
    return replace(case, volume=vol.numpy(), wt_mask=(mask.numpy() > 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# synthetic desk-scale data
# ---------------------------------------------------------------------------

# per-modality (t1, t1ce, t2, flair) relative lesion intensity: both grades are
# bright in T2; HGG lesions enhance in T1CE, LGG lesions do not enhance but are
# markedly FLAIR-hyperintense, so each grade has its own positive lesion cue
_LESION_CONTRAST = {
    "HGG": np.array([-0.35, 2.0, 0.8, 0.5], dtype=np.float32),
    "LGG": np.array([-0.2, 0.0, 0.8, 2.0], dtype=np.float32),
}
_HETEROGENEITY = 0.1


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def generate_synthetic_case(case_id: str, label: str, seed: int, shape=INPUT_SHAPE) -> CaseRecord:
    """One 4-modality volume with a single ellipsoidal lesion.

    Lesion size, position and texture are drawn independently of the label;
    the grade shows only in the lesion's T1CE and FLAIR contrast (enhancing for
    HGG, strongly FLAIR-hyperintense for LGG), so the class evidence always
    sits in the lesion.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    scale = np.array(shape) / np.array(INPUT_SHAPE)
    brain_radii = np.array([54.0, 58.0, 40.0]) * scale
    brain_center = np.array(shape) / 2.0 - 0.5
    brain = _ellipsoid(shape, brain_center, brain_radii)

    # smooth tissue texture, cheap: filter at quarter resolution and upsample
    coarse = tuple(max(2, n // 4) for n in shape)
    tissue = ndimage.gaussian_filter(rng.standard_normal(coarse).astype(np.float32), 1.5)
    tissue = ndimage.zoom(tissue, np.array(shape) / np.array(coarse), order=1)[: shape[0], : shape[1], : shape[2]]
    tissue /= tissue.std() + 1e-8

    radii = rng.uniform(18.0, 28.0, size=3) * scale
    margin = brain_radii - radii - 4 * scale
    while True:
        offset = rng.uniform(-1.0, 1.0, size=3) * margin
        if np.sum((offset / np.maximum(brain_radii - radii, 1.0)) ** 2) <= 1.0:
            break
    lesion = _ellipsoid(shape, brain_center + offset, radii) & brain

    lo = np.maximum(np.floor(brain_center + offset - radii).astype(int) - 2, 0)
    hi = np.minimum(np.ceil(brain_center + offset + radii).astype(int) + 3, shape)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    fine = ndimage.gaussian_filter(rng.standard_normal(tuple(hi - lo)).astype(np.float32), 0.8)
    fine /= fine.std() + 1e-8

    base = np.array([1.0, 1.0, 1.0, 1.0], dtype=np.float32) * rng.uniform(0.9, 1.1, size=4).astype(np.float32)
    vol = np.zeros((4,) + shape, dtype=np.float32)
    for m in range(4):
        img = base[m] * (1.0 + 0.08 * tissue)
        les = img[box] * (1.0 + _LESION_CONTRAST[label][m]) * (1.0 + _HETEROGENEITY * fine * (1 if m % 2 == 0 else -1))
        img[box] = np.where(lesion[box], les, img[box])
        img = np.where(brain, img, 0.0)
        img = img + 0.02 * rng.standard_normal(shape).astype(np.float32) * brain
        vol[m] = img

    return CaseRecord(case_id, normalize_intensity(vol), label, lesion.astype(np.uint8), INPUT_SPACING)


def synthesize_dataset(n_cases: int, class_ratio: float, seed: int) -> DatasetManifest:
    """Manifest of synthetic cases; ``class_ratio`` is the HGG fraction."""
    if n_cases < 2 or not 0.0 < class_ratio < 1.0:
        raise ConfigurationError("need n_cases >= 2 and 0 < class_ratio < 1")
    n_hgg = int(round(n_cases * class_ratio))
    if n_hgg == 0 or n_hgg == n_cases:
        raise ConfigurationError(f"n_cases={n_cases}, class_ratio={class_ratio} leaves a class empty")
    rng = np.random.default_rng(seed)
    labels = ["HGG"] * n_hgg + ["LGG"] * (n_cases - n_hgg)
    labels = [labels[i] for i in rng.permutation(n_cases)]
    seeds = rng.integers(0, 2**31 - 1, size=n_cases)
    cases = [CaseEntry(f"synth_{seed}_{i:03d}", int(s), lab) for i, (s, lab) in enumerate(zip(seeds, labels))]
    return DatasetManifest(cases)


class CaseStore:
    """Serves preprocessed cases for a manifest, caching them as ``.npy`` files.

    Synthetic entries (integer ``path_or_seed``) are generated on first use;
    path entries point to a directory holding ``<id>_vol.npy`` / ``<id>_mask.npy``
    written by :func:`write_preprocessed`.
    """

    def __init__(self, manifest: DatasetManifest, cache_dir, shape=INPUT_SHAPE):
        self.manifest = manifest
        self.shape = tuple(shape)
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._entries = {c.id: c for c in manifest.cases}

    def __len__(self):
        return len(self._entries)

    def _paths(self, entry: CaseEntry):
        root = self.cache_dir if isinstance(entry.path_or_seed, int) else Path(entry.path_or_seed)
        return root / f"{entry.id}_vol.npy", root / f"{entry.id}_mask.npy"

    def get(self, case_id: str) -> CaseRecord:
        entry = self._entries[case_id]
        vol_path, mask_path = self._paths(entry)
        if not vol_path.exists():
            if not isinstance(entry.path_or_seed, int):
                raise IngestionError(f"{case_id}: preprocessed file {vol_path} not found")
            case = generate_synthetic_case(entry.id, entry.label, entry.path_or_seed, self.shape)
            write_preprocessed(self.cache_dir, case)
            return case
        vol = np.load(vol_path, mmap_mode="r")
        mask = np.load(mask_path)
        return CaseRecord(case_id, vol, entry.label, mask, INPUT_SPACING)

    def materialize(self, ids: Optional[Iterable[str]] = None) -> None:
        for cid in ids if ids is not None else self._entries:
            self.get(cid)


def write_preprocessed(root, case: CaseRecord) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tmp = root / f"{case.id}_vol.tmp.npy"
    np.save(tmp, np.asarray(case.volume, dtype=np.float32))
    np.save(root / f"{case.id}_mask.npy", np.asarray(case.wt_mask, dtype=np.uint8))
    tmp.replace(root / f"{case.id}_vol.npy")


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Stratified k-fold split.

    Cases of each class are shuffled and dealt round-robin; the dealing
    position carries over between classes so fold sizes differ by at most one.
    """
    if k < 2:
        raise StratificationError("k must be at least 2")
    rng = np.random.default_rng(seed)
    assignments = {}
    position = 0
    for label in CLASSES:
        ids = sorted(c.id for c in manifest.cases if c.label == label)
        if not ids:
            continue
        if len(ids) < k:
            raise StratificationError(f"class {label} has {len(ids)} cases, fewer than k={k}")
        for j in rng.permutation(len(ids)):
            assignments[ids[j]] = position % k
            position += 1
    return FoldSplit(k, {c.id: assignments[c.id] for c in manifest.cases})
