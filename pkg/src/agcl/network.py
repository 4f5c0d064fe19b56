"""Desk-scale encoder, projection head and decoder.

The encoder is a three-stage conv/rectifier stack with a single max-pool
and a global average pool on top; its pre-pool spatial feature map feeds
the decoder (a pooled vector cannot localize). The projection head is a
two-layer perceptron whose rows land on the sphere of radius 1/T. The
decoder refines spatial features through a small dilated-conv pyramid,
upsamples back to patch resolution and emits a per-pixel 2-channel
distribution. No batch normalization anywhere: forward passes must be
deterministic and friendly to finite-difference verification.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict, field
from io import BytesIO

import numpy as np

from . import autodiff as ad
from .container import read_tensor_stream, tensor_bytes
from .errors import (
    CompatibilityError,
    CorruptionError,
    StructuralError,
    ValidationError,
)

PARAMS_MAGIC = b"AGP1"


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    in_channels: int = 2
    enc_widths: tuple = (16, 32, 128)  # last entry is the feature dimension
    embed_dim: int = 64                # projection output size
    dec_width: int = 32
    temperature: float = 0.1
    n_pools: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def feature_dim(self) -> int:
        return self.enc_widths[-1]

    def validate(self) -> None:
        if len(self.enc_widths) != 3:
            raise ValidationError("enc_widths must list three stage widths")
        if self.feature_dim < 2 or self.embed_dim < 2:
            raise ValidationError("feature and embedding dims must be >= 2")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.in_channels != 2:
            raise ValidationError("model expects 2 input channels")
        if self.n_pools not in (1, 2):
            raise ValidationError("n_pools must be 1 or 2")
        if self.patch_size % (2 ** self.n_pools) or self.patch_size < 8:
            raise ValidationError(
                f"patch_size {self.patch_size} must be >= 8 and divisible "
                f"by {2 ** self.n_pools}")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict                       # name -> float32 ndarray
    frozen: dict = field(default_factory=lambda: {
        "enc": False, "proj": False, "dec": False, "head": False})

    def component(self, name: str) -> str:
        return name.split(".", 1)[0]

    def copy(self) -> "ModelParams":
        return ModelParams(config=self.config,
                           tensors={k: v.copy() for k, v in self.tensors.items()},
                           frozen=dict(self.frozen))


def _shapes(cfg: ModelConfig) -> dict:
    w1, w2, w3 = cfg.enc_widths
    d, o, cd = cfg.feature_dim, cfg.embed_dim, cfg.dec_width
    shapes = {
        "enc.c1.w": (w1, cfg.in_channels, 3, 3), "enc.c1.b": (w1,),
        "enc.c2.w": (w2, w1, 3, 3), "enc.c2.b": (w2,),
        "enc.c3.w": (w3, w2, 3, 3), "enc.c3.b": (w3,),
        "proj.l1.w": (d, d), "proj.l1.b": (d,),
        "proj.l2.w": (d, o), "proj.l2.b": (o,),
        "dec.a0.w": (cd, d, 1, 1), "dec.a0.b": (cd,),
        "dec.a1.w": (cd, d, 3, 3), "dec.a1.b": (cd,),
        "dec.a2.w": (cd, d, 3, 3), "dec.a2.b": (cd,),
    }
    for level in range(cfg.n_pools):
        shapes[f"dec.u{level + 1}.w"] = (cd, cd, 3, 3)
        shapes[f"dec.u{level + 1}.b"] = (cd,)
    shapes["dec.out.w"] = (2, cd, 3, 3)
    shapes["dec.out.b"] = (2,)
    return shapes


def _head_shapes(cfg: ModelConfig, n_classes: int) -> dict:
    return {"head.w": (cfg.feature_dim, n_classes), "head.b": (n_classes,)}


def init_params(cfg: ModelConfig, seed: int, n_classes: int = 0) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic in seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    shapes = dict(_shapes(cfg))
    if n_classes:
        shapes.update(_head_shapes(cfg, n_classes))
    tensors = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ModelParams(config=cfg, tensors=tensors)


# ---------------------------------------------------------------------------
# tape-level builders (shared by training, inference and gradient checks)

def bind_params(tape: ad.Tape, params: ModelParams, train_components=()) -> dict:
    """Bind parameter tensors onto a tape; only listed components train."""
    out = {}
    for name, value in params.tensors.items():
        trainable = params.component(name) in train_components
        out[name] = tape.input(name, value, trainable=trainable)
    return out


INPUT_CENTER = 0.5
INPUT_SCALE = 2.0


def encoder_apply(pv: dict, a: ad.Var, cfg: ModelConfig):
    """Returns (pooled features (B, D), spatial features before pooling).

    Inputs are mapped through the fixed affine 2*(a - 0.5) first: phantom
    intensities and binary attention both live in [0, 1], and an
    all-positive input leaves the pooled features dominated by their
    common DC response, collapsing the projection space at init.
    """
    a = ad.mul(ad.sub(a, INPUT_CENTER), INPUT_SCALE)
    h = ad.relu(ad.conv2d(a, pv["enc.c1.w"], pv["enc.c1.b"], padding=1))
    h = ad.maxpool2d(h, 2)
    h = ad.relu(ad.conv2d(h, pv["enc.c2.w"], pv["enc.c2.b"], padding=1))
    if cfg.n_pools == 2:
        h = ad.maxpool2d(h, 2)
    h = ad.relu(ad.conv2d(h, pv["enc.c3.w"], pv["enc.c3.b"], padding=1))
    z = ad.global_avg_pool(h)
    return z, h


def projection_apply(pv: dict, z: ad.Var, temperature: float) -> ad.Var:
    h = ad.relu(ad.add(ad.matmul(z, pv["proj.l1.w"]), pv["proj.l1.b"]))
    out = ad.add(ad.matmul(h, pv["proj.l2.w"]), pv["proj.l2.b"])
    return ad.normalize_rows(out, 1.0 / temperature)


def decoder_apply(pv: dict, spatial: ad.Var, cfg: ModelConfig) -> ad.Var:
    """Dilated pyramid + upsampling; output (B, 2, p, p) sums to 1 per pixel."""
    b0 = ad.conv2d(spatial, pv["dec.a0.w"], pv["dec.a0.b"], padding=0)
    b1 = ad.conv2d(spatial, pv["dec.a1.w"], pv["dec.a1.b"], padding=1)
    b2 = ad.conv2d(spatial, pv["dec.a2.w"], pv["dec.a2.b"], padding=2, dilation=2)
    h = ad.relu(ad.add(ad.add(b0, b1), b2))
    for level in range(cfg.n_pools):
        h = ad.upsample2x(h)
        w, b = pv[f"dec.u{level + 1}.w"], pv[f"dec.u{level + 1}.b"]
        h = ad.conv2d(h, w, b, padding=1)
        if level < cfg.n_pools - 1:
            h = ad.relu(h)
    logits = ad.conv2d(ad.relu(h), pv["dec.out.w"], pv["dec.out.b"], padding=1)
    return softmax_channels(logits)


def softmax_channels(logits: ad.Var) -> ad.Var:
    """Per-pixel softmax over axis 1; shift is constant, gradients exact."""
    shift = logits.tape.constant(logits.value.max(axis=1, keepdims=True))
    e = ad.exp(ad.sub(logits, shift))
    return ad.div(e, ad.reduce_sum(e, axis=1, keepdims=True))


def head_apply(pv: dict, z: ad.Var) -> ad.Var:
    return ad.add(ad.matmul(z, pv["head.w"]), pv["head.b"])


# ---------------------------------------------------------------------------
# array-level forwards (fresh tape per call)

def _forward_tape(params: ModelParams, a: np.ndarray, dtype):
    a = np.asarray(a)
    if a.ndim != 4 or a.shape[1] != params.config.in_channels:
        raise StructuralError(
            f"expected (B, {params.config.in_channels}, p, p) input, "
            f"got {a.shape}")
    tape = ad.Tape(dtype)
    pv = bind_params(tape, params)
    return tape, pv, tape.input("a", a, trainable=False)


def encoder_forward(params: ModelParams, a: np.ndarray, dtype=np.float32):
    tape, pv, av = _forward_tape(params, a, dtype)
    z, spatial = encoder_apply(pv, av, params.config)
    return z.value, spatial.value


def projection_forward(params: ModelParams, z: np.ndarray, dtype=np.float32):
    tape = ad.Tape(dtype)
    pv = bind_params(tape, params)
    zt = projection_apply(pv, tape.input("z", z, trainable=False),
                          params.config.temperature)
    return zt.value


def decoder_forward(params: ModelParams, spatial: np.ndarray, dtype=np.float32):
    tape = ad.Tape(dtype)
    pv = bind_params(tape, params)
    s = decoder_apply(pv, tape.input("spatial", spatial, trainable=False),
                      params.config)
    return s.value


def embed_views(params: ModelParams, views: np.ndarray, dtype=np.float32):
    """Encoder + projection in one pass; rows have norm 1/T."""
    tape, pv, av = _forward_tape(params, views, dtype)
    z, _ = encoder_apply(pv, av, params.config)
    zt = projection_apply(pv, z, params.config.temperature)
    return zt.value


def segment_views(params: ModelParams, views: np.ndarray, dtype=np.float32):
    """Encoder + decoder in one pass; (B, 2, p, p) soft predictions."""
    tape, pv, av = _forward_tape(params, views, dtype)
    _, spatial = encoder_apply(pv, av, params.config)
    return decoder_apply(pv, spatial, params.config).value


# ---------------------------------------------------------------------------
# persistence

def save_params(params: ModelParams, path) -> None:
    names = sorted(params.tensors)
    records = []
    blobs = []
    for name in names:
        blob = tensor_bytes(np.asarray(params.tensors[name], dtype=np.float32))
        records.append({"name": name, "crc32": zlib.crc32(blob)})
        blobs.append(blob)
    header = {
        "config": {**asdict(params.config),
                   "enc_widths": list(params.config.enc_widths)},
        "frozen": params.frozen,
        "tensors": records,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_params(path, expected: ModelConfig | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PARAMS_MAGIC:
        raise CorruptionError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CorruptionError(f"{path}: truncated header")
    (head_len,) = struct.unpack("<I", raw[4:8])
    head_end = 8 + head_len
    if len(raw) < head_end:
        raise CorruptionError(f"{path}: truncated header block")
    try:
        header = json.loads(raw[8:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptionError(f"{path}: invalid header ({err})") from err
    cfg_dict = dict(header["config"])
    cfg_dict["enc_widths"] = tuple(cfg_dict["enc_widths"])
    cfg = ModelConfig(**cfg_dict)
    if expected is not None and cfg != expected:
        raise CompatibilityError(
            f"{path}: stored config {cfg} != requested {expected}")
    stream = BytesIO(raw[head_end:])
    tensors = {}
    for record in header["tensors"]:
        start = stream.tell()
        arr = read_tensor_stream(stream, path)
        blob = raw[head_end + start:head_end + stream.tell()]
        if zlib.crc32(blob) != record["crc32"]:
            raise CorruptionError(
                f"{path}: checksum mismatch for tensor {record['name']}")
        tensors[record["name"]] = arr
    if stream.read(1):
        raise CorruptionError(f"{path}: trailing bytes")
    return ModelParams(config=cfg, tensors=tensors, frozen=dict(header["frozen"]))
