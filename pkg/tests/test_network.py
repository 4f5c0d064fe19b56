"""Encoder/projection/decoder contracts and parameter persistence."""

import numpy as np
import pytest

from agcl import autodiff as ad
from agcl.errors import CompatibilityError, CorruptionError, StructuralError
from agcl.network import (
    ModelConfig,
    bind_params,
    decoder_apply,
    encoder_apply,
    encoder_forward,
    decoder_forward,
    embed_views,
    init_params,
    load_params,
    projection_forward,
    save_params,
    segment_views,
)

CFG = ModelConfig(patch_size=16, enc_widths=(6, 8, 12), embed_dim=8,
                  dec_width=6, temperature=0.1)


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _views(n=5, seed=0, p=16):
    return _rng(seed).uniform(0, 1, size=(n, 2, p, p)).astype(np.float32)


# ---------------------------------------------------------------------------
# initialization

def test_init_deterministic():
    a = init_params(CFG, seed=3)
    b = init_params(CFG, seed=3)
    assert a.tensors.keys() == b.tensors.keys()
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_init_seed_sensitive():
    a = init_params(CFG, seed=3)
    b = init_params(CFG, seed=4)
    assert any(not np.array_equal(a.tensors[k], b.tensors[k])
               for k in a.tensors if k.endswith(".w"))


def test_biases_exactly_zero():
    params = init_params(CFG, seed=1)
    for name, value in params.tensors.items():
        if name.endswith(".b"):
            assert np.count_nonzero(value) == 0, name


# ---------------------------------------------------------------------------
# encoder

def test_encoder_output_extents():
    params = init_params(CFG, seed=2)
    z, spatial = encoder_forward(params, _views(8))
    assert z.shape == (8, CFG.feature_dim)
    assert spatial.shape == (8, CFG.feature_dim, 8, 8)


def test_encoder_rejects_wrong_channel_count():
    params = init_params(CFG, seed=2)
    with pytest.raises(StructuralError):
        encoder_forward(params, np.zeros((2, 3, 16, 16)))


def test_batch_permutation_equivariance():
    params = init_params(CFG, seed=5)
    views = _views(6, seed=1)
    perm = np.asarray([3, 1, 5, 0, 2, 4])
    z, spatial = encoder_forward(params, views)
    zp, spatialp = encoder_forward(params, views[perm])
    assert np.array_equal(zp, z[perm])
    assert np.array_equal(spatialp, spatial[perm])
    s = segment_views(params, views)
    sp = segment_views(params, views[perm])
    assert np.array_equal(sp, s[perm])
    e = embed_views(params, views)
    ep = embed_views(params, views[perm])
    assert np.array_equal(ep, e[perm])


def test_forward_deterministic():
    params = init_params(CFG, seed=5)
    views = _views(4, seed=2)
    assert np.array_equal(segment_views(params, views),
                          segment_views(params, views))


# ---------------------------------------------------------------------------
# projection

@pytest.mark.parametrize("temperature", [0.05, 0.1, 0.5, 1.0])
def test_projection_rows_on_one_over_t_sphere(temperature):
    cfg = ModelConfig(patch_size=16, enc_widths=(6, 8, 12), embed_dim=8,
                      dec_width=6, temperature=temperature)
    params = init_params(cfg, seed=7)
    zt = embed_views(params, _views(9, seed=3))
    norms = np.linalg.norm(zt.astype(np.float64), axis=1)
    assert np.abs(norms * temperature - 1.0).max() < 1e-6


def test_projection_direction_invariant_to_input_scale():
    # biases are zero at init, so the perceptron is positively homogeneous
    params = init_params(CFG, seed=11)
    z = _rng(4).normal(size=(5, CFG.feature_dim))
    a = projection_forward(params, z, dtype=np.float64)
    b = projection_forward(params, 5.0 * z, dtype=np.float64)
    assert np.abs(a - b).max() < 1e-9


# ---------------------------------------------------------------------------
# decoder

def test_decoder_output_shape_and_normalization():
    params = init_params(CFG, seed=6)
    views = _views(3, seed=5)
    s = segment_views(params, views)
    assert s.shape == (3, 2, 16, 16)
    sums = s.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-6
    assert s.min() >= 0.0


def test_decoder_forward_from_spatial_features():
    params = init_params(CFG, seed=6)
    _, spatial = encoder_forward(params, _views(2, seed=6))
    s = decoder_forward(params, spatial)
    assert s.shape == (2, 2, 16, 16)


def test_scalar_head_gradient_through_encoder():
    """Finite differences through E with a smooth scalar head (64-bit)."""
    cfg = ModelConfig(patch_size=8, enc_widths=(3, 4, 5), embed_dim=4,
                      dec_width=4, temperature=0.5)
    params = init_params(cfg, seed=9)
    rng = _rng(10)
    tensors = {}
    for name, value in params.tensors.items():
        offset = 0.3 if name.endswith(".b") else 0.0
        tensors[name] = (value.astype(np.float64)
                         + rng.normal(0, 0.02, size=value.shape) + offset)
    views = rng.normal(0.5, 0.3, size=(2, 2, 8, 8))
    weights = rng.normal(size=(2, cfg.feature_dim))

    def build(tape, inputs):
        pv = {n: inputs[n] if n in inputs else tape.constant(v)
              for n, v in tensors.items()}
        z, _ = encoder_apply(pv, tape.constant(views), cfg)
        return ad.reduce_sum(ad.mul(z, tape.constant(weights)))

    names = [n for n in tensors if n.startswith("enc.")]
    graph = ad.Graph(build, names)
    report = ad.grad_check(graph, {n: tensors[n] for n in names},
                           epsilon=1e-5, tolerance=1e-4)
    assert report.passed, report.max_rel_err


def test_decoder_gradient_checks():
    cfg = ModelConfig(patch_size=8, enc_widths=(3, 4, 5), embed_dim=4,
                      dec_width=4, temperature=0.5)
    params = init_params(cfg, seed=12)
    rng = _rng(13)
    tensors = {}
    for name, value in params.tensors.items():
        offset = 0.3 if name.endswith(".b") else 0.0
        tensors[name] = (value.astype(np.float64)
                         + rng.normal(0, 0.02, size=value.shape) + offset)
    spatial = rng.normal(0.3, 0.4, size=(2, cfg.feature_dim, 4, 4))
    weights = rng.normal(size=(2, 2, 8, 8))

    def build(tape, inputs):
        pv = {n: inputs[n] if n in inputs else tape.constant(v)
              for n, v in tensors.items()}
        s = decoder_apply(pv, tape.constant(spatial), cfg)
        return ad.reduce_sum(ad.mul(s, tape.constant(weights)))

    names = [n for n in tensors if n.startswith("dec.")]
    graph = ad.Graph(build, names)
    report = ad.grad_check(graph, {n: tensors[n] for n in names},
                           epsilon=3e-5, tolerance=1e-4)
    assert report.passed, report.max_rel_err


# ---------------------------------------------------------------------------
# persistence

def test_save_load_round_trip(tmp_path):
    params = init_params(CFG, seed=20, n_classes=8)
    params.frozen["enc"] = True
    path = tmp_path / "params.agp"
    save_params(params, path)
    back = load_params(path, expected=CFG)
    assert back.config == CFG
    assert back.frozen == params.frozen
    assert back.tensors.keys() == params.tensors.keys()
    for name in params.tensors:
        assert np.array_equal(back.tensors[name], params.tensors[name])
        assert back.tensors[name].dtype == np.float32


def test_load_with_mismatched_config_is_compatibility_error(tmp_path):
    params = init_params(CFG, seed=20)
    path = tmp_path / "params.agp"
    save_params(params, path)
    other = ModelConfig(patch_size=16, enc_widths=(6, 8, 12), embed_dim=16,
                        dec_width=6, temperature=0.1)
    with pytest.raises(CompatibilityError):
        load_params(path, expected=other)


def test_corrupted_payload_is_checksum_error(tmp_path):
    params = init_params(CFG, seed=20)
    path = tmp_path / "params.agp"
    save_params(params, path)
    blob = bytearray(path.read_bytes())
    blob[-2] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptionError, match="checksum"):
        load_params(path)
