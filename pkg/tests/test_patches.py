"""Query-patch extraction, pairwise augmentation, minibatch assembly."""

import numpy as np
import pytest

from agcl.errors import CapacityError, ValidationError
from agcl.patches import (
    augment_pair,
    build_minibatch,
    extract_query_patches,
    rotate_patch,
)
from agcl.phantom import PhantomConfig, generate_phantom, simulate_coarse_mask

CFG = PhantomConfig()


def _sample(seed=0, quality=1.0):
    s = generate_phantom(CFG, seed=seed)
    s.attention = [simulate_coarse_mask(m, quality, seed=100 + o)
                   for o, m in enumerate(s.gt_masks)]
    return s


def _pool(sample, n_per_object=3, p=16, seed=1):
    return extract_query_patches(sample, sample.attention, n_per_object, p, seed)


# ---------------------------------------------------------------------------
# extraction

def test_patch_count_contract():
    patches = _pool(_sample(), n_per_object=3)
    assert len(patches) == 3 * CFG.n_objects


def test_centers_lie_on_attention_foreground():
    s = _sample()
    for q in _pool(s, n_per_object=5, seed=3):
        assert s.attention[q.object_id - 1][q.center] == 1


def test_empty_attention_yields_zero_patches_not_error():
    s = _sample()
    s.attention[1] = np.zeros_like(s.attention[1])
    patches = _pool(s, n_per_object=4)
    assert len(patches) == 4 * (CFG.n_objects - 1)
    assert all(q.object_id != 2 for q in patches)


def test_patch_fields_consistent():
    s = _sample()
    for q in _pool(s, n_per_object=2, seed=7):
        assert q.x.shape == q.c.shape == q.y.shape == (16, 16)
        assert q.a.shape == (2, 16, 16)
        assert np.array_equal(q.a[0], q.x)
        assert np.array_equal(q.a[1], q.c.astype(q.x.dtype))
        assert set(np.unique(q.c)) <= {0, 1}
        assert q.modality == s.modality


def test_border_windows_zero_padded():
    s = _sample()
    att = np.zeros_like(s.attention[0])
    att[0, 0] = 1  # force a corner centre
    s.attention[0] = att
    q = next(p for p in _pool(s, n_per_object=1, seed=2) if p.object_id == 1)
    assert q.center == (0, 0)
    assert q.x.shape == (16, 16)
    assert np.all(q.x[:8, :] == 0) or np.all(q.x[:, :8] == 0)


def test_deterministic_in_seed():
    s = _sample()
    a = _pool(s, seed=5)
    b = _pool(s, seed=5)
    assert all(np.array_equal(x.x, y.x) and x.center == y.center
               for x, y in zip(a, b))


def test_attention_guidance_beats_uniform_sampling():
    """With q = 1 the sampled windows hold more label foreground than
    uniformly placed windows (Monte-Carlo over 100 seeds, one-sided)."""
    p = 16
    guided, uniform = [], []
    for seed in range(100):
        s = _sample(seed=seed)
        patches = _pool(s, n_per_object=2, p=p, seed=seed)
        guided.extend(q.y.mean() for q in patches)
        rng = np.random.Generator(np.random.PCG64(seed))
        h, w = s.image.shape
        for q in patches:
            cy, cx = rng.integers(h), rng.integers(w)
            gt = s.gt_masks[q.object_id - 1]
            top, left = cy - p // 2, cx - p // 2
            window = np.zeros((p, p))
            ys = slice(max(top, 0), min(top + p, h))
            xs = slice(max(left, 0), min(left + p, w))
            window[ys.start - top:ys.stop - top,
                   xs.start - left:xs.stop - left] = gt[ys, xs]
            uniform.append(window.mean())
    assert np.mean(guided) > np.mean(uniform)


# ---------------------------------------------------------------------------
# augmentation

def test_augment_preserves_extent_and_binarity():
    q = _pool(_sample())[0]
    v1, v2 = augment_pair(q, seed=11)
    for v in (v1, v2):
        assert v.shape == (2, 16, 16)
        assert set(np.unique(v[1])) <= {0.0, 1.0}


def test_augment_deterministic_and_seed_sensitive():
    q = _pool(_sample())[0]
    a1, a2 = augment_pair(q, seed=4)
    b1, b2 = augment_pair(q, seed=4)
    c1, _ = augment_pair(q, seed=5)
    assert np.array_equal(a1, b1) and np.array_equal(a2, b2)
    assert not np.array_equal(a1, a2)
    assert not np.array_equal(a1, c1)


def test_rotation_self_inverse_on_disk():
    p = 64
    yy, xx = np.mgrid[0:p, 0:p]
    disk = (((yy - 31.5) ** 2 + (xx - 31.5) ** 2) <= 20 ** 2).astype(float)
    for angle in (7.0, 18.5, 29.0, -23.0):
        once = rotate_patch(disk, angle, bilinear=True)
        back = rotate_patch(once, -angle, bilinear=True) >= 0.5
        inter = np.logical_and(back, disk > 0).sum()
        dice = 2 * inter / (back.sum() + disk.sum())
        assert dice >= 0.95, (angle, dice)


def test_views_inherit_source_labels():
    patches = _pool(_sample(), n_per_object=4)
    mb = build_minibatch(patches, 4, seed=3)
    for k in range(4):
        src = patches[mb.source_ids[2 * k]]
        assert tuple(mb.labels[2 * k]) == (src.modality, src.object_id)
        assert tuple(mb.labels[2 * k + 1]) == (src.modality, src.object_id)


# ---------------------------------------------------------------------------
# minibatch

def test_pairing_layout():
    mb = build_minibatch(_pool(_sample(), n_per_object=4), 4, seed=1)
    assert mb.views.shape[0] == 8
    # views 2k and 2k+1 are partners (the 1-indexed p(1)=2, p(2)=1 layout)
    assert list(mb.pairing[:4]) == [1, 0, 3, 2]
    assert (mb.pairing[mb.pairing] == np.arange(8)).all()
    assert (mb.pairing != np.arange(8)).all()


def test_label_fraction_flags():
    patches = _pool(_sample(), n_per_object=6)
    full = build_minibatch(patches, 6, label_fraction=1.0, seed=2)
    assert full.visible.all()
    none = build_minibatch(patches, 6, label_fraction=0.0, seed=2)
    assert not none.visible.any()
    half = build_minibatch(patches, 6, label_fraction=0.5, seed=2)
    assert half.visible.sum() == 2 * int(np.ceil(0.5 * 6))
    assert (half.visible[0::2] == half.visible[1::2]).all()


def test_modality_filter():
    patches = []
    for seed in range(6):
        s = _sample(seed=seed)
        patches.extend(_pool(s, n_per_object=2, seed=seed))
    modalities = {q.modality for q in patches}
    assert modalities == {1, 2}
    mb = build_minibatch(patches, 4, modality_filter={1}, seed=9)
    assert (mb.labels[:, 0] == 1).all()


def test_insufficient_patches_is_capacity_error():
    patches = _pool(_sample(), n_per_object=1)
    with pytest.raises(CapacityError, match="available"):
        build_minibatch(patches, len(patches) + 1, seed=0)


def test_bad_label_fraction_rejected():
    with pytest.raises(ValidationError):
        build_minibatch(_pool(_sample()), 2, label_fraction=1.5, seed=0)
