"""Strict run-configuration files.

Plain text: a top-level ``seed = N`` line, then the sections [phantom],
[sampling], [model], [stage1], [stage2] and [eval] whose keys mirror the
config dataclasses. Unknown sections or keys, duplicates and
out-of-range values are rejected with the offending key and line
number. Missing keys fall back to documented defaults, and an echo of
the fully-resolved config reproduces the run bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .network import ModelConfig
from .phantom import PhantomConfig
from .training import Stage1Config, Stage2Config, TrainConfig

SECTIONS = ("phantom", "sampling", "model", "stage1", "stage2", "eval")


def _parse_bool(raw: str, where: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValidationError(f"{where}: expected a boolean, got {raw!r}")


def _parse_int(raw: str, where: str) -> int:
    try:
        return int(raw.strip())
    except ValueError as err:
        raise ValidationError(f"{where}: expected an integer, got {raw!r}") from err


def _parse_float(raw: str, where: str) -> float:
    try:
        return float(raw.strip())
    except ValueError as err:
        raise ValidationError(f"{where}: expected a number, got {raw!r}") from err


def _parse_int_list(raw: str, where: str) -> tuple:
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ValidationError(f"{where}: expected at least one integer")
    return tuple(_parse_int(p, where) for p in parts)


def _parse_float_rows(raw: str, where: str) -> tuple:
    rows = [r for r in raw.split("|")]
    out = []
    for row in rows:
        parts = row.replace(",", " ").split()
        if not parts:
            raise ValidationError(f"{where}: empty row in matrix value")
        out.append(tuple(_parse_float(p, where) for p in parts))
    return tuple(out)


def _parse_modality_filter(raw: str, where: str):
    low = raw.strip().lower()
    if low in ("all", "none", ""):
        return None
    return _parse_int_list(raw, where)


def _positive_int(raw: str, where: str) -> int:
    v = _parse_int(raw, where)
    if v < 1:
        raise ValidationError(f"{where}: must be >= 1, got {v}")
    return v


def _nonneg_int(raw: str, where: str) -> int:
    v = _parse_int(raw, where)
    if v < 0:
        raise ValidationError(f"{where}: must be >= 0, got {v}")
    return v


def _positive_float(raw: str, where: str) -> float:
    v = _parse_float(raw, where)
    if v <= 0:
        raise ValidationError(f"{where}: must be positive, got {v}")
    return v


def _unit_float(raw: str, where: str) -> float:
    v = _parse_float(raw, where)
    if not (0.0 <= v <= 1.0):
        raise ValidationError(f"{where}: must be in [0, 1], got {v}")
    return v


def _loss_kind(raw: str, where: str) -> str:
    v = raw.strip().lower()
    if v not in ("sscl", "agcl", "ce", "none"):
        raise ValidationError(
            f"{where}: must be one of sscl|agcl|ce|none, got {raw!r}")
    return v


_PHANTOM_KEYS = {
    "height": _positive_int, "width": _positive_int,
    "n_objects": _positive_int, "n_modalities": _positive_int,
    "intensity_means": _parse_float_rows,
    "intensity_sigma": _positive_float,
    "background_mean": _parse_float, "background_sigma": _positive_float,
    "axis_min": _positive_float, "axis_max": _positive_float,
    "min_gap": _nonneg_int, "shape": lambda raw, where: raw.strip(),
}
_SAMPLING_KEYS = {"n_per_object": _positive_int}
_MODEL_KEYS = {
    "patch_size": _positive_int, "enc_widths": _parse_int_list,
    "embed_dim": _positive_int, "dec_width": _positive_int,
    "n_pools": _positive_int,
}
_STAGE1_KEYS = {
    "loss": _loss_kind,
    "temp": _positive_float, "epochs": _nonneg_int,
    "batch_pairs": _positive_int,
    "lr": _positive_float, "steps_per_epoch": _positive_int,
    "modality_filter": _parse_modality_filter,
    "label_fraction": _unit_float,
}
_STAGE2_KEYS = {
    "epochs": _nonneg_int, "batch": _positive_int, "lr": _positive_float,
    "steps_per_epoch": _positive_int, "freeze_encoder": _parse_bool,
    "n_label_images": _nonneg_int,
}
_EVAL_KEYS = {
    "n_train": _nonneg_int, "n_test": _nonneg_int, "quality": _unit_float,
    "stride": _nonneg_int, "threshold": _unit_float,
}
_SECTION_KEYS = {
    "phantom": _PHANTOM_KEYS, "sampling": _SAMPLING_KEYS,
    "model": _MODEL_KEYS, "stage1": _STAGE1_KEYS,
    "stage2": _STAGE2_KEYS, "eval": _EVAL_KEYS,
}


@dataclass(frozen=True)
class EvalConfig:
    n_train: int = 200
    n_test: int = 50
    quality: float = 0.9
    stride: int = 0          # 0 = patch_size // 2
    threshold: float = 0.5

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise ValidationError("sample counts must be non-negative")
        if not (0.0 <= self.quality <= 1.0):
            raise ValidationError("quality must be in [0, 1]")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValidationError("threshold must be in [0, 1]")
        if self.stride < 0:
            raise ValidationError("stride must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    phantom: PhantomConfig
    sampling_n_per_object: int
    model: ModelConfig
    stage1: Stage1Config
    stage2: Stage2Config
    eval: EvalConfig

    def train_config(self) -> TrainConfig:
        return TrainConfig(model=self.model, stage1=self.stage1,
                           stage2=self.stage2,
                           n_per_object=self.sampling_n_per_object,
                           seed=self.seed)

    def echo_text(self) -> str:
        """Fully-resolved config; parsing it back reproduces this object."""
        ph, md, s1, s2, ev = (self.phantom, self.model, self.stage1,
                              self.stage2, self.eval)
        means = " | ".join(" ".join(f"{v:.17g}" for v in row)
                           for row in ph.intensity_means)
        mf = "all" if s1.modality_filter is None else \
            ",".join(str(m) for m in s1.modality_filter)
        lines = [
            f"seed = {self.seed}",
            "",
            "[phantom]",
            f"height = {ph.height}", f"width = {ph.width}",
            f"n_objects = {ph.n_objects}", f"n_modalities = {ph.n_modalities}",
            f"intensity_means = {means}",
            f"intensity_sigma = {ph.intensity_sigma:.17g}",
            f"background_mean = {ph.background_mean:.17g}",
            f"background_sigma = {ph.background_sigma:.17g}",
            f"axis_min = {ph.axis_min:.17g}", f"axis_max = {ph.axis_max:.17g}",
            f"min_gap = {ph.min_gap}", f"shape = {ph.shape}",
            "",
            "[sampling]",
            f"n_per_object = {self.sampling_n_per_object}",
            "",
            "[model]",
            f"patch_size = {md.patch_size}",
            f"enc_widths = {' '.join(str(wd) for wd in md.enc_widths)}",
            f"embed_dim = {md.embed_dim}", f"dec_width = {md.dec_width}",
            f"n_pools = {md.n_pools}",
            "",
            "[stage1]",
            f"loss = {s1.loss}", f"temp = {s1.temp:.17g}",
            f"epochs = {s1.epochs}", f"batch_pairs = {s1.batch_pairs}",
            f"lr = {s1.lr:.17g}", f"steps_per_epoch = {s1.steps_per_epoch}",
            f"modality_filter = {mf}",
            f"label_fraction = {s1.label_fraction:.17g}",
            "",
            "[stage2]",
            f"epochs = {s2.epochs}", f"batch = {s2.batch}",
            f"lr = {s2.lr:.17g}", f"steps_per_epoch = {s2.steps_per_epoch}",
            f"freeze_encoder = {'true' if s2.freeze_encoder else 'false'}",
            f"n_label_images = {s2.n_label_images}",
            "",
            "[eval]",
            f"n_train = {ev.n_train}", f"n_test = {ev.n_test}",
            f"quality = {ev.quality:.17g}", f"stride = {ev.stride}",
            f"threshold = {ev.threshold:.17g}",
            "",
        ]
        return "\n".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    sections: dict[str, dict] = {name: {} for name in SECTIONS}
    seed = None
    current = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in SECTIONS:
                raise ValidationError(
                    f"{source}:{lineno}: unknown section [{name}]")
            current = name
            continue
        if "=" not in line:
            raise ValidationError(
                f"{source}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if current is None:
            if key != "seed":
                raise ValidationError(
                    f"{source}:{lineno}: only 'seed' may appear before sections, "
                    f"got {key!r}")
            if seed is not None:
                raise ValidationError(f"{source}:{lineno}: duplicate key seed")
            seed = _parse_int(value, f"{source}:{lineno}: seed")
            continue
        keys = _SECTION_KEYS[current]
        if key not in keys:
            raise ValidationError(
                f"{source}:{lineno}: unknown key [{current}].{key}")
        if key in sections[current]:
            raise ValidationError(
                f"{source}:{lineno}: duplicate key [{current}].{key}")
        sections[current][key] = keys[key](value, f"{source}:{lineno}: "
                                                  f"[{current}].{key}")
    if seed is None:
        raise ValidationError(f"{source}: missing top-level 'seed'")

    try:
        phantom = PhantomConfig(**sections["phantom"])
        sampling = sections["sampling"].get("n_per_object", 8)
        model = ModelConfig(**sections["model"])
        stage1 = Stage1Config(**sections["stage1"])
        stage2 = Stage2Config(**sections["stage2"])
        eval_cfg = EvalConfig(**sections["eval"])
        stage1.validate()
        stage2.validate()
        eval_cfg.validate()
        if sampling < 1:
            raise ValidationError("[sampling].n_per_object must be >= 1")
    except ValidationError as err:
        raise ValidationError(f"{source}: {err}") from err
    # the loss temperature rides on the model config for the 1/T radius
    model = ModelConfig(**{**_model_kwargs(model), "temperature": stage1.temp})
    return RunConfig(seed=seed, phantom=phantom, sampling_n_per_object=sampling,
                     model=model, stage1=stage1, stage2=stage2, eval=eval_cfg)


def _model_kwargs(model: ModelConfig) -> dict:
    return {
        "patch_size": model.patch_size, "in_channels": model.in_channels,
        "enc_widths": model.enc_widths, "embed_dim": model.embed_dim,
        "dec_width": model.dec_width, "n_pools": model.n_pools,
    }


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def write_echo(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.echo_text(), encoding="utf-8")
