"""Attention-guided query patches and pairwise geometric augmentation.

A query patch couples an image crop, the binary label crop of one object
and that object's attention crop; the 2-channel stack [image, attention]
is what the encoder consumes. Augmentation is geometric only (crop,
rotation, per-axis scale jitter), applied independently to the two views
of a pair, with nearest-neighbour + re-binarization for the attention
channel so it stays binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, StructuralError, ValidationError
from .phantom import PhantomSample, _derive_seed

CROP_AREA = 0.8
ROT_MAX_DEG = 30.0
WIDTH_JITTER = 0.3   # width factor uniform in [0.7, 1.3]
LENGTH_JITTER = 0.7  # length factor uniform in [0.3, 1.7]


@dataclass
class QueryPatch:
    x: np.ndarray        # (p, p) image crop
    c: np.ndarray        # (p, p) binary attention crop
    y: np.ndarray        # (p, p) binary label crop
    modality: int
    object_id: int       # 1..O
    sample_id: int
    center: tuple        # (row, col) in the source image

    @property
    def a(self) -> np.ndarray:
        """2-channel stack: channel 0 image, channel 1 attention."""
        return np.stack([self.x, self.c.astype(self.x.dtype)])


@dataclass
class Minibatch:
    views: np.ndarray        # (2N, 2, p, p); views 2k and 2k+1 are a pair
    pairing: np.ndarray      # (2N,) partner index, an involution
    labels: np.ndarray       # (2N, 2) rows (modality, object)
    visible: np.ndarray      # (2N,) bool label-visibility flags
    n_pairs: int
    source_ids: np.ndarray   # (2N,) index into the patch pool

    def validate(self) -> None:
        n = 2 * self.n_pairs
        if self.views.shape[0] != n or self.pairing.shape[0] != n:
            raise StructuralError("minibatch arrays disagree on 2N")
        p = self.pairing
        if np.any(p[p] != np.arange(n)) or np.any(p == np.arange(n)):
            raise StructuralError("pairing must be a fixed-point-free involution")


# ---------------------------------------------------------------------------
# geometric warps (inverse mapping, zero fill)

def _grid(p: int):
    return np.mgrid[0:p, 0:p].astype(np.float64)


def _sample(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray,
            bilinear: bool) -> np.ndarray:
    h, w = img.shape
    img = img.astype(np.float64)
    if bilinear:
        y0 = np.floor(src_y).astype(int)
        x0 = np.floor(src_x).astype(int)
        fy, fx = src_y - y0, src_x - x0
        out = np.zeros(src_y.shape)
        for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)),
                            (0, 1, (1 - fy) * fx),
                            (1, 0, fy * (1 - fx)),
                            (1, 1, fy * fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.where(ok, img[np.clip(yy, 0, h - 1),
                                    np.clip(xx, 0, w - 1)], 0.0)
            out += wgt * vals
        return out
    yy = np.round(src_y).astype(int)
    xx = np.round(src_x).astype(int)
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    return np.where(ok, img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)


def rotate_patch(img: np.ndarray, angle_deg: float, bilinear: bool) -> np.ndarray:
    """Rotate about the patch centre, zero fill outside."""
    p = img.shape[0]
    cy = cx = (p - 1) / 2.0
    t = np.deg2rad(angle_deg)
    ct, st = np.cos(t), np.sin(t)
    dy, dx = _grid(p)
    dy, dx = dy - cy, dx - cx
    # inverse rotation of destination coordinates
    src_y = cy + ct * dy + st * dx
    src_x = cx - st * dy + ct * dx
    return _sample(img, src_y, src_x, bilinear)


def crop_resize(img: np.ndarray, top: float, left: float, side: float,
                bilinear: bool) -> np.ndarray:
    """Resample the side x side window at (top, left) back to full extent."""
    p = img.shape[0]
    dy, dx = _grid(p)
    scale = (side - 1) / (p - 1) if p > 1 else 0.0
    return _sample(img, top + dy * scale, left + dx * scale, bilinear)


def scale_patch(img: np.ndarray, fy: float, fx: float, bilinear: bool) -> np.ndarray:
    """Stretch content about the centre by (fy, fx); canvas stays p x p."""
    p = img.shape[0]
    cy = cx = (p - 1) / 2.0
    dy, dx = _grid(p)
    return _sample(img, cy + (dy - cy) / fy, cx + (dx - cx) / fx, bilinear)


def _binarize(mask: np.ndarray) -> np.ndarray:
    return (mask >= 0.5).astype(np.float64)


def _augment_view(x: np.ndarray, c: np.ndarray, rng) -> np.ndarray:
    p = x.shape[0]
    # random crop to CROP_AREA of the patch, then resize back
    side = max(2.0, p * np.sqrt(CROP_AREA))
    top = rng.uniform(0.0, p - side)
    left = rng.uniform(0.0, p - side)
    x = crop_resize(x, top, left, side, bilinear=True)
    c = _binarize(crop_resize(c, top, left, side, bilinear=False))
    # rotation
    angle = rng.uniform(-ROT_MAX_DEG, ROT_MAX_DEG)
    x = rotate_patch(x, angle, bilinear=True)
    c = _binarize(rotate_patch(c, angle, bilinear=False))
    # per-axis scale jitter
    fx = rng.uniform(1.0 - WIDTH_JITTER, 1.0 + WIDTH_JITTER)
    fy = rng.uniform(1.0 - LENGTH_JITTER, 1.0 + LENGTH_JITTER)
    x = scale_patch(x, fy, fx, bilinear=True)
    c = _binarize(scale_patch(c, fy, fx, bilinear=False))
    return np.stack([x, c]).astype(np.float32)


# ---------------------------------------------------------------------------
# operations

def extract_query_patches(sample: PhantomSample, attention: list,
                          n_per_object: int, patch_size: int,
                          seed: int) -> list:
    """Sample patch centres uniformly over each object's attention pixels.

    Border windows are zero padded to full extent. Objects whose
    attention map is empty contribute no patches (callers may warn); the
    label crop is the object's ground-truth mask over the same window.
    """
    h, w = sample.image.shape
    p = patch_size
    if p > h or p > w:
        raise ValidationError(f"patch size {p} exceeds image extent {h}x{w}")
    if len(attention) != len(sample.gt_masks):
        raise StructuralError("one attention map per object required")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    patches = []
    for o, att in enumerate(attention):
        att = np.asarray(att)
        if not np.isin(att, (0, 1)).all():
            raise ValidationError(f"attention map {o + 1} is not binary")
        fg = np.flatnonzero(att)
        if fg.size == 0:
            continue
        picks = rng.choice(fg, size=n_per_object, replace=fg.size < n_per_object)
        for flat in picks:
            cy, cx = divmod(int(flat), w)
            x = _window(sample.image, cy, cx, p)
            c = _window(att, cy, cx, p)
            y = _window(sample.gt_masks[o], cy, cx, p)
            patches.append(QueryPatch(
                x=x.astype(np.float32), c=c.astype(np.uint8),
                y=y.astype(np.uint8), modality=sample.modality,
                object_id=o + 1, sample_id=sample.sample_id,
                center=(cy, cx)))
    return patches


def _window(img: np.ndarray, cy: int, cx: int, p: int) -> np.ndarray:
    """p x p window centred at (cy, cx), zero padded at borders."""
    h, w = img.shape
    top, left = cy - p // 2, cx - p // 2
    out = np.zeros((p, p), dtype=img.dtype)
    ys = slice(max(top, 0), min(top + p, h))
    xs = slice(max(left, 0), min(left + p, w))
    out[ys.start - top:ys.stop - top, xs.start - left:xs.stop - left] = img[ys, xs]
    return out


def augment_pair(patch: QueryPatch, seed: int) -> tuple:
    """Two independently augmented 2-channel views of the patch."""
    x = patch.x.astype(np.float64)
    c = patch.c.astype(np.float64)
    views = []
    for view_idx in range(2):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((int(seed), view_idx))))
        views.append(_augment_view(x, c, rng))
    return views[0], views[1]


def build_minibatch(patches: list, n_pairs: int, modality_filter=None,
                    label_fraction: float = 1.0, seed: int = 0) -> Minibatch:
    """Draw N source patches, expand each into an augmented view pair.

    Views 2k and 2k+1 descend from the same patch and share labels and
    the label-visibility flag; ceil(label_fraction * N) of the sources
    are visible.
    """
    if not (0.0 <= label_fraction <= 1.0):
        raise ValidationError(f"label_fraction {label_fraction} outside [0, 1]")
    if modality_filter is not None:
        modality_filter = set(int(m) for m in modality_filter)
        pool = [i for i, q in enumerate(patches) if q.modality in modality_filter]
    else:
        pool = list(range(len(patches)))
    if len(pool) < n_pairs:
        raise CapacityError(
            f"minibatch needs {n_pairs} patches, only {len(pool)} available "
            f"after filtering")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    chosen = rng.choice(np.asarray(pool), size=n_pairs, replace=False)

    n_visible = int(np.ceil(label_fraction * n_pairs))
    visible_sources = np.zeros(n_pairs, dtype=bool)
    visible_sources[rng.permutation(n_pairs)[:n_visible]] = True

    p = patches[int(chosen[0])].x.shape[0]
    views = np.zeros((2 * n_pairs, 2, p, p), dtype=np.float32)
    labels = np.zeros((2 * n_pairs, 2), dtype=np.int64)
    visible = np.zeros(2 * n_pairs, dtype=bool)
    source_ids = np.zeros(2 * n_pairs, dtype=np.int64)
    pairing = np.arange(2 * n_pairs)
    pairing[0::2] += 1
    pairing[1::2] -= 1
    for k, idx in enumerate(chosen):
        patch = patches[int(idx)]
        v1, v2 = augment_pair(patch, _derive_seed(seed, 3, k))
        views[2 * k], views[2 * k + 1] = v1, v2
        labels[2 * k] = labels[2 * k + 1] = (patch.modality, patch.object_id)
        visible[2 * k] = visible[2 * k + 1] = visible_sources[k]
        source_ids[2 * k] = source_ids[2 * k + 1] = int(idx)
    batch = Minibatch(views=views, pairing=pairing, labels=labels,
                      visible=visible, n_pairs=n_pairs, source_ids=source_ids)
    batch.validate()
    return batch
