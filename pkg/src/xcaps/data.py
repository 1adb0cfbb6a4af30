"""Nodule patch datasets: on-disk format, stratified folds, synthetic generator.

A dataset directory holds ``manifest.jsonl`` plus one raw image file (32x32
little-endian float32) and one raw mask file (32x32 uint8) per sample.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import ndtr

from .ratings import ATTRIBUTE_NAMES, RaterScores

PATCH = 32
IMAGE_BYTES = PATCH * PATCH * 4
MASK_BYTES = PATCH * PATCH
MANIFEST = "manifest.jsonl"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image: np.ndarray
    mask: np.ndarray
    ratings: RaterScores

    def __post_init__(self):
        if self.image.shape != (PATCH, PATCH) or self.mask.shape != (PATCH, PATCH):
            raise DatasetError(f"{self.id}: image and mask must be {PATCH}x{PATCH}")
        if not self.mask.any():
            raise DatasetError(f"{self.id}: empty segmentation mask")

    @property
    def malignancy_mean(self) -> float:
        return self.ratings.malignancy_mean()

    @property
    def stratum(self) -> int:
        """0 benign, 1 malignant, 2 indeterminate (mean exactly 3)."""
        m = self.malignancy_mean
        return 0 if m < 3 else (1 if m > 3 else 2)

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (self.id == other.id and self.ratings == other.ratings
                and np.array_equal(self.image, other.image) and np.array_equal(self.mask, other.mask))

    __hash__ = None


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    count: int = 100
    rater_count: int = 4
    rater_noise: float = 0.7

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("count must be positive")
        if self.rater_count < 3:
            raise ValueError("need at least three raters")


@dataclass(frozen=True)
class FoldSpec:
    k: int
    assignments: dict[str, int]
    val_fraction: float = 0.10

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]


# -- on-disk format --------------------------------------------------------

def write_image(path: Path, image: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())


def write_mask(path: Path, mask: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def save_dataset(records, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        img_rel = f"images/{rec.id}.f32"
        mask_rel = f"masks/{rec.id}.u8"
        write_image(directory / img_rel, rec.image)
        write_mask(directory / mask_rel, rec.mask)
        entry = {"id": rec.id, "image": img_rel, "mask": mask_rel}
        entry.update(rec.ratings.to_json())
        lines.append(json.dumps(entry, sort_keys=True))
    (directory / MANIFEST).write_text("".join(line + "\n" for line in lines))
    return directory


def _read_raw(path: Path, nbytes: int, sample_id: str, what: str) -> bytes:
    if not path.is_file():
        raise DatasetError(f"{sample_id}: missing {what} file {path}")
    raw = path.read_bytes()
    if len(raw) != nbytes:
        raise DatasetError(f"{sample_id}: {what} file has {len(raw)} bytes, expected {nbytes}")
    return raw


def load_dataset(directory, exclude_mean3: bool = True) -> list[SampleRecord]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    records: list[SampleRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            sid = str(entry["id"])
            img_rel, mask_rel = entry["image"], entry["mask"]
            malignancy, attributes = entry["malignancy"], entry["attributes"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"{manifest}:{lineno}: malformed entry ({exc})") from exc
        if sid in seen:
            raise DatasetError(f"duplicate sample id {sid!r}")
        seen.add(sid)
        try:
            ratings = RaterScores.from_lists(malignancy, attributes)
        except (ValueError, KeyError) as exc:
            raise DatasetError(f"{sid}: invalid ratings ({exc})") from exc
        image = np.frombuffer(_read_raw(directory / img_rel, IMAGE_BYTES, sid, "image"),
                              dtype="<f4").reshape(PATCH, PATCH).astype(np.float32)
        mask = np.frombuffer(_read_raw(directory / mask_rel, MASK_BYTES, sid, "mask"),
                             dtype=np.uint8).reshape(PATCH, PATCH).copy()
        if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
            raise DatasetError(f"{sid}: image intensities must lie in [0, 1]")
        if not np.all(mask <= 1):
            raise DatasetError(f"{sid}: mask values must be 0 or 1")
        rec = SampleRecord(sid, image, mask, ratings)
        if exclude_mean3 and rec.malignancy_mean == 3.0:
            continue
        records.append(rec)
    return records


# -- folds -----------------------------------------------------------------

def _strata(records) -> dict[int, list[str]]:
    strata: dict[int, list[str]] = {}
    for rec in records:
        strata.setdefault(rec.stratum, []).append(rec.id)
    return dict(sorted(strata.items()))


def stratified_kfold(records, k: int = 5, seed: int = 0, val_fraction: float = 0.10) -> FoldSpec:
    """Shuffle each stratum and deal ids round-robin, continuing the dealer across strata."""
    if not records:
        raise ValueError("cannot fold an empty dataset")
    if k < 2:
        raise ValueError("k must be at least 2")
    strata = _strata(records)
    for label, ids in strata.items():
        if label != 2 and len(ids) < k:
            raise ValueError(f"k={k} exceeds size of stratum {label} ({len(ids)} samples)")
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    cursor = 0
    for ids in strata.values():
        order = rng.permutation(len(ids))
        for pos in order:
            assignments[ids[pos]] = cursor % k
            cursor += 1
    return FoldSpec(k, assignments, val_fraction)


def train_val_split(records, fraction: float = 0.10, seed: int = 0):
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_id = {r.id: r for r in records}
    val_ids: set[str] = set()
    for label, ids in _strata(records).items():
        n_val = int(round(fraction * len(ids)))
        if n_val < 1:
            raise ValueError(f"stratum {label} has too few records ({len(ids)}) for a validation split")
        val_ids.update(ids[i] for i in rng.permutation(len(ids))[:n_val])
    train = [r for r in records if r.id not in val_ids]
    val = [r for r in records if r.id in val_ids]
    if not by_id or not train:
        raise ValueError("split left no training records")
    return train, val


# -- synthetic nodules -----------------------------------------------------

# mixing weights for the latent malignancy; chosen so spiculation, lobulation
# and poorly defined margins drive the label, the exact values are arbitrary
MALIGNANCY_WEIGHTS = {"spi": 0.3, "lob": 0.3, "mar": 0.2, "sub": 0.2}
# spread of the raw mixture is sqrt(sum w^2) * 4/sqrt(12); stretch +/- MIX_SPREAD sd onto [1, 5]
MIX_SPREAD = 1.25
_MIX_SD = math.sqrt(sum(w * w for w in MALIGNANCY_WEIGHTS.values())) * 4.0 / math.sqrt(12.0)


def latent_malignancy(attrs: dict[str, float]) -> int:
    raw = (MALIGNANCY_WEIGHTS["spi"] * attrs["spi"] + MALIGNANCY_WEIGHTS["lob"] * attrs["lob"]
           + MALIGNANCY_WEIGHTS["mar"] * (6 - attrs["mar"]) + MALIGNANCY_WEIGHTS["sub"] * (6 - attrs["sub"]))
    stretched = 3.0 + 2.0 * (raw - 3.0) / (MIX_SPREAD * _MIX_SD)
    return int(min(5, max(1, round(stretched))))


def _unit(v: float) -> float:
    return (v - 1.0) / 4.0


def render_nodule(attrs: dict[str, float], rng: np.random.Generator):
    """Draw one 32x32 patch and its mask from latent attribute values in [1, 5]."""
    yy, xx = np.mgrid[0:PATCH, 0:PATCH].astype(np.float64)
    cy = (PATCH - 1) / 2 + rng.uniform(-1.5, 1.5)
    cx = (PATCH - 1) / 2 + rng.uniform(-1.5, 1.5)
    radius = rng.uniform(7.0, 9.0)
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)

    axis_ratio = 0.45 + 0.55 * _unit(attrs["sph"])
    # ellipse radius along direction phi for semi-axes (1, axis_ratio) rotated by theta
    c, s = np.cos(phi - theta), np.sin(phi - theta)
    ellipse = axis_ratio / np.sqrt((axis_ratio * c) ** 2 + s ** 2)

    lob_freq = int(rng.integers(2, 5))
    lob_amp = 0.22 * _unit(attrs["lob"])
    lobes = lob_amp * np.cos(lob_freq * phi + rng.uniform(0, 2 * math.pi))

    spi_freq = int(rng.integers(8, 13))
    spi_amp = 0.55 * _unit(attrs["spi"])
    spikes = spi_amp * np.maximum(0.0, np.cos(spi_freq * phi + rng.uniform(0, 2 * math.pi))) ** 6

    boundary = radius * ellipse * (1.0 + lobes + spikes)
    shape = (rho <= boundary).astype(np.float64)
    mask = shape.astype(np.uint8)

    noise = gaussian_filter(rng.uniform(0.0, 1.0, (PATCH, PATCH)), 0.7)
    noise = (noise - noise.min()) / max(noise.max() - noise.min(), 1e-12)
    mix = 0.85 * (1.0 - _unit(attrs["tex"]))

    # margin softens the edge along the radius only (Gaussian CDF profile), so a
    # blurry margin does not also wipe out spicules or interior texture
    blur = 0.3 + 1.7 * (1.0 - _unit(attrs["mar"]))
    edge = ndtr((boundary - rho) / blur)
    blob = edge * ((1.0 - mix) + mix * noise)

    contrast = 0.25 + 0.6 * _unit(attrs["sub"])
    background = 0.1 + 0.04 * rng.standard_normal((PATCH, PATCH))
    image = np.clip(background + contrast * blob, 0.0, 1.0).astype(np.float32)
    return image, mask


def _synthesise(cfg: SyntheticConfig):
    rng = np.random.default_rng(cfg.seed)
    width = max(4, len(str(cfg.count - 1)))

    def rate(latent):
        noisy = latent + rng.normal(0.0, cfg.rater_noise, cfg.rater_count)
        return [int(min(5, max(1, round(float(x))))) for x in noisy]

    for idx in range(cfg.count):
        attrs = {name: float(rng.uniform(1.0, 5.0)) for name in ATTRIBUTE_NAMES}
        image, mask = render_nodule(attrs, rng)
        latent_m = latent_malignancy(attrs)
        attr_scores = {name: rate(attrs[name]) for name in ATTRIBUTE_NAMES}
        ratings = RaterScores.from_lists(rate(latent_m), attr_scores)
        yield SampleRecord(f"syn{idx:0{width}d}", image, mask, ratings), dict(attrs, malignancy=float(latent_m))


def synthetic_records(cfg: SyntheticConfig) -> list[SampleRecord]:
    return [rec for rec, _ in _synthesise(cfg)]


def synthetic_latents(cfg: SyntheticConfig) -> list[dict[str, float]]:
    """Latent attribute values and malignancy in generation order (for oracle checks)."""
    return [lat for _, lat in _synthesise(cfg)]


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> Path:
    return save_dataset(synthetic_records(cfg), out_dir)


def dataset_arrays(records, dtype=np.float32):
    """Stack images, masks, attribute targets (normalised) and malignancy targets."""
    from .ratings import fit_label_distribution

    images = np.stack([r.image for r in records]).astype(dtype)
    masks = np.stack([r.mask for r in records]).astype(dtype)
    attr_means = np.stack([r.ratings.attribute_means() for r in records])
    mal_means = np.array([r.malignancy_mean for r in records])
    dists = np.stack([fit_label_distribution(r.ratings.malignancy).probs for r in records])
    return {"images": images, "masks": masks, "attr_means": attr_means,
            "attr_targets": ((attr_means - 1.0) / 4.0).astype(dtype),
            "mal_means": mal_means, "mal_targets": dists}


def directory_listing(directory) -> dict[str, bytes]:
    """All files under ``directory`` keyed by relative path (for byte-identity checks)."""
    directory = Path(directory)
    out = {}
    for root, _, files in os.walk(directory):
        for name in files:
            p = Path(root) / name
            out[str(p.relative_to(directory))] = p.read_bytes()
    return out
