"""Synthetic multi-object phantoms and simulated coarse attention maps.

Images hold a handful of elliptical objects whose intensity profile
depends on both the object id and a "modality" tag (modality 1 plays the
contrast-enhanced role: larger object/background separation). A coarse
segmenter is replaced by a perturbation simulator whose quality knob q
degrades the true mask by translation, dilation/erosion and boundary
noise, so attention quality becomes an independent variable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_tensor, write_tensor
from .errors import (
    ConfigurationError,
    CorruptionError,
    RangeError,
    StructuralError,
    ValidationError,
    VersionError,
)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def _default_means(n_objects: int, n_modalities: int) -> tuple:
    """Evenly spread means; modality 1 gets the wider (contrast) spread."""
    spans = [(0.35, 0.95), (0.30, 0.66)]
    rows = []
    for m in range(n_modalities):
        lo, hi = spans[m % len(spans)]
        rows.append(tuple(np.linspace(lo, hi, n_objects).tolist()))
    return tuple(rows)


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 64
    width: int = 64
    n_objects: int = 4
    n_modalities: int = 2
    intensity_means: tuple = ()  # one row of O means per modality
    intensity_sigma: float = 0.05
    background_mean: float = 0.10
    background_sigma: float = 0.03
    axis_min: float = 5.0
    axis_max: float = 11.0
    min_gap: int = 2
    shape: str = "ellipse"

    def __post_init__(self):
        if not self.intensity_means:
            object.__setattr__(
                self, "intensity_means",
                _default_means(self.n_objects, self.n_modalities))
        self.validate()

    def validate(self) -> None:
        if self.n_objects < 1:
            raise ValidationError("n_objects must be >= 1")
        if self.n_modalities < 1:
            raise ValidationError("n_modalities must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValidationError("image extent must be at least 8x8")
        if self.shape != "ellipse":
            raise ValidationError(f"unknown shape family {self.shape!r}")
        if self.intensity_sigma <= 0 or self.background_sigma < 0:
            raise ValidationError("intensity sigmas must be positive")
        if not (0 < self.axis_min <= self.axis_max):
            raise ValidationError("require 0 < axis_min <= axis_max")
        if self.min_gap < 0:
            raise ValidationError("min_gap must be >= 0")
        means = self.intensity_means
        if len(means) != self.n_modalities:
            raise ValidationError(
                f"intensity_means needs {self.n_modalities} rows, got {len(means)}")
        for m, row in enumerate(means):
            if len(row) != self.n_objects:
                raise ValidationError(
                    f"intensity_means row {m + 1} needs {self.n_objects} entries")
            gaps = np.diff(np.sort(np.asarray(row, dtype=float)))
            if self.n_objects > 1 and gaps.min() < 2 * self.intensity_sigma:
                raise ValidationError(
                    f"modality {m + 1}: object means closer than 2 sigma")


@dataclass
class PhantomSample:
    image: np.ndarray            # (H, W) float32
    gt_masks: list               # O binary (H, W) uint8, pairwise disjoint
    modality: int                # 1..M
    sample_id: int
    attention: list | None = None  # O binary (H, W) uint8 once simulated


@dataclass
class DatasetManifest:
    schema_version: int
    n_samples: int
    n_objects: int
    n_modalities: int
    seed: int
    quality: float
    samples: list = field(default_factory=list)


def _ellipse_mask(h, w, cy, cx, ay, ax, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.uint8)


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.astype(bool)
    out = mask.astype(bool).copy()
    src = mask.astype(bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius or (dy == 0 and dx == 0):
                continue
            out |= _shift(src, dy, dx)
    return out


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.astype(bool)
    out = mask.astype(bool).copy()
    src = mask.astype(bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius or (dy == 0 and dx == 0):
                continue
            out &= _shift(src, dy, dx)
    return out


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill (no wrap-around)."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def generate_phantom(cfg: PhantomConfig, seed: int, sample_id: int = 0,
                     modality: int | None = None) -> PhantomSample:
    """Deterministic phantom for (cfg, seed); masks pairwise disjoint.

    Object placement retries up to a fixed budget per object; failure to
    honour the gap constraint is a configuration error (image too small
    for that many objects).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    h, w = cfg.height, cfg.width
    if modality is None:
        modality = int(rng.integers(1, cfg.n_modalities + 1))
    elif not (1 <= modality <= cfg.n_modalities):
        raise ValidationError(f"modality {modality} outside 1..{cfg.n_modalities}")

    occupied = np.zeros((h, w), dtype=bool)
    masks = []
    for _ in range(cfg.n_objects):
        placed = False
        for _attempt in range(200):
            ay = rng.uniform(cfg.axis_min, cfg.axis_max)
            ax = rng.uniform(cfg.axis_min, cfg.axis_max)
            theta = rng.uniform(0.0, np.pi)
            margin = max(ay, ax) + 1
            if 2 * margin >= min(h, w):
                continue
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            mask = _ellipse_mask(h, w, cy, cx, ay, ax, theta)
            if mask.sum() == 0:
                continue
            if (_dilate(mask, cfg.min_gap) & occupied).any():
                continue
            masks.append(mask)
            occupied |= mask.astype(bool)
            placed = True
            break
        if not placed:
            raise ConfigurationError(
                f"could not place {cfg.n_objects} objects with gap "
                f"{cfg.min_gap} in a {h}x{w} image")

    image = rng.normal(cfg.background_mean, cfg.background_sigma,
                       size=(h, w))
    means = cfg.intensity_means[modality - 1]
    for o, mask in enumerate(masks):
        inside = rng.normal(means[o], cfg.intensity_sigma, size=(h, w))
        image = np.where(mask > 0, inside, image)
    return PhantomSample(image=image.astype(np.float32), gt_masks=masks,
                         modality=modality, sample_id=sample_id)


def simulate_coarse_mask(gt: np.ndarray, quality: float, seed: int) -> np.ndarray:
    """Degrade a ground-truth mask as a stand-in coarse segmenter.

    quality 1 returns gt unchanged. Below 1, the mask is translated by up
    to floor((1-q)*8) px, dilated or eroded with radius up to
    floor((1-q)*3), and pixels in a 2 px band around the boundary are
    flipped with probability min(0.9, 1.5*(1-q)), so even mild
    degradation leaves boundaries that genuinely need refinement from
    image evidence. Deterministic in (gt, quality, seed).
    """
    if not (0.0 <= quality <= 1.0):
        raise RangeError(f"quality {quality} outside [0, 1]")
    gt = np.asarray(gt)
    if not np.isin(gt, (0, 1)).all():
        raise ValidationError("gt mask must be binary")
    gt = gt.astype(np.uint8)
    if quality == 1.0 or gt.sum() == 0:
        return gt.copy()

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    severity = 1.0 - quality
    out = gt.astype(bool)

    max_shift = int(np.floor(severity * 8))
    if max_shift > 0:
        dy = int(rng.integers(-max_shift, max_shift + 1))
        dx = int(rng.integers(-max_shift, max_shift + 1))
        out = _shift(out, dy, dx)

    max_radius = int(np.floor(severity * 3))
    if max_radius > 0:
        radius = int(rng.integers(0, max_radius + 1))
        if radius:
            out = _dilate(out, radius) if rng.random() < 0.5 else _erode(out, radius)

    band = _dilate(out, 2) & ~_erode(out, 2)
    flips = band & (rng.random(out.shape) < min(0.9, 1.5 * severity))
    out = out ^ flips
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# persistence

def _sample_record(sample: PhantomSample, directory: Path) -> dict:
    sid = sample.sample_id
    record = {"id": sid, "modality": sample.modality, "tensors": {}}
    gt = np.stack(sample.gt_masks).astype(np.uint8)
    att = np.stack(sample.attention).astype(np.uint8)
    for key, arr in (("image", sample.image.astype(np.float32)),
                     ("gt", gt), ("attention", att)):
        fname = f"s{sid:05d}.{key}.agt"
        crc = write_tensor(directory / fname, arr)
        record["tensors"][key] = {"file": fname, "crc32": crc}
    return record


def write_dataset(samples: list, manifest: DatasetManifest, directory) -> None:
    """Persist samples plus manifest; everything round-trips bit-exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(samples) != manifest.n_samples:
        raise StructuralError(
            f"manifest says {manifest.n_samples} samples, got {len(samples)}")
    records = []
    for sample in samples:
        if sample.attention is None:
            raise StructuralError(
                f"sample {sample.sample_id} has no attention maps to persist")
        records.append(_sample_record(sample, directory))
    manifest.samples = records
    payload = {
        "schema_version": manifest.schema_version,
        "n_samples": manifest.n_samples,
        "n_objects": manifest.n_objects,
        "n_modalities": manifest.n_modalities,
        "seed": manifest.seed,
        "quality": manifest.quality,
        "samples": records,
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    (directory / MANIFEST_NAME).write_text(text, encoding="utf-8")


def read_dataset(directory) -> tuple[list, DatasetManifest]:
    """Load a dataset directory, validating headers and checksums."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise StructuralError(f"missing {manifest_path}")
    try:
        payload = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CorruptionError(f"{manifest_path}: invalid JSON ({err})") from err
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionError(
            f"{manifest_path}: unknown schema version {version!r}")
    manifest = DatasetManifest(
        schema_version=version,
        n_samples=int(payload["n_samples"]),
        n_objects=int(payload["n_objects"]),
        n_modalities=int(payload["n_modalities"]),
        seed=int(payload["seed"]),
        quality=float(payload["quality"]),
        samples=payload["samples"],
    )
    if len(manifest.samples) != manifest.n_samples:
        raise CorruptionError(
            f"{manifest_path}: sample list length != n_samples")

    samples = []
    for record in manifest.samples:
        tensors = {}
        for key in ("image", "gt", "attention"):
            entry = record["tensors"][key]
            path = directory / entry["file"]
            if not path.is_file():
                raise StructuralError(f"missing tensor file {path}")
            tensors[key] = read_tensor(path, expected_crc32=entry["crc32"])
        image, gt, att = tensors["image"], tensors["gt"], tensors["attention"]
        if gt.shape != (manifest.n_objects, *image.shape):
            raise CorruptionError(
                f"sample {record['id']}: gt shape {gt.shape} inconsistent "
                f"with manifest")
        if att.shape != gt.shape:
            raise CorruptionError(
                f"sample {record['id']}: attention shape {att.shape} != gt")
        samples.append(PhantomSample(
            image=image, gt_masks=[gt[o] for o in range(gt.shape[0])],
            modality=int(record["modality"]), sample_id=int(record["id"]),
            attention=[att[o] for o in range(att.shape[0])]))
    return samples, manifest


def build_dataset(cfg: PhantomConfig, n_samples: int, quality: float,
                  seed: int) -> tuple[list, DatasetManifest]:
    """Generate phantoms with balanced modalities and simulated attention."""
    samples = []
    for i in range(n_samples):
        modality = (i % cfg.n_modalities) + 1
        sample_seed = _derive_seed(seed, 1, i)
        sample = generate_phantom(cfg, sample_seed, sample_id=i,
                                  modality=modality)
        sample.attention = [
            simulate_coarse_mask(sample.gt_masks[o], quality,
                                 _derive_seed(seed, 2, i, o))
            for o in range(cfg.n_objects)
        ]
        samples.append(sample)
    manifest = DatasetManifest(
        schema_version=SCHEMA_VERSION, n_samples=n_samples,
        n_objects=cfg.n_objects, n_modalities=cfg.n_modalities,
        seed=seed, quality=quality)
    return samples, manifest


def _derive_seed(*parts: int) -> int:
    """Stable stream seed from integer parts."""
    mixed = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(mixed.generate_state(1, dtype=np.uint64)[0])
