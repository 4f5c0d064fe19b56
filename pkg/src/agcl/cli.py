"""Command-line surface.

Subcommands: synth, pretrain, finetune, eval, embed, check, ablate.
Exit codes: 0 success, 1 validation/usage error, 2 numeric or
verification failure. Every successful run writes a config-echo file
next to its output so the run can be reproduced bit-exactly.
AGCL_THREADS caps ablate fan-out (default 1).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reporting
from .errors import AgclError, CompatibilityError, NumericError, ValidationError
from .metrics import pca_project
from .network import load_params, save_params
from .phantom import read_dataset, write_dataset
from .pipeline import (
    TEST_STREAM,
    TRAIN_STREAM,
    embedding_pool,
    evaluate_params,
    run_pipeline,
    synth_split,
)
from .runconfig import (
    EvalConfig,
    RunConfig,
    _model_kwargs,
    load_config,
    parse_config_text,
)
from .training import finetune_stage2, pretrain_stage1
from .verify import run_suites

log = logging.getLogger("agcl")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage as exit code 1 on stderr."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="agcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parser_class=_Parser,
                       help="generate a phantom dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train",
                   help="which pinned split to synthesize (count and seed)")

    p = sub.add_parser("pretrain", parser_class=_Parser,
                       help="stage-1 contrastive/classifier pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--loss", choices=("sscl", "agcl", "ce", "none"))
    p.add_argument("--temp", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", parser_class=_Parser,
                       help="stage-2 decoder training on frozen features")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parser_class=_Parser,
                       help="segmentation metrics over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config")

    p = sub.add_parser("embed", parser_class=_Parser,
                       help="projection-space export: PCA + silhouette")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--raw", action="store_true",
                   help="append raw embedding columns")

    p = sub.add_parser("check", parser_class=_Parser,
                       help="verification suites (oracle + gradient)")
    p.add_argument("--grad", action="store_true")
    p.add_argument("--oracle", action="store_true")

    p = sub.add_parser("ablate", parser_class=_Parser,
                       help="sweep one stage-1 axis, one CSV row per point")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    return parser


def _echo_path(out_path) -> Path:
    return Path(str(out_path) + ".echo.ini")


def _write_echo(cfg: RunConfig, out_path, command: str) -> None:
    text = f"# agcl {command}\n" + cfg.echo_text()
    _echo_path(out_path).write_text(text, encoding="utf-8")


def _default_config(manifest) -> RunConfig:
    """Best-effort config when eval/embed run without --config."""
    from .phantom import PhantomConfig

    phantom = PhantomConfig(n_objects=manifest.n_objects,
                            n_modalities=manifest.n_modalities)
    base = ("seed = 0\n[phantom]\n[sampling]\n[model]\n[stage1]\n"
            "[stage2]\n[eval]\n")
    cfg = parse_config_text(base, source="<defaults>")
    return replace(cfg, seed=manifest.seed, phantom=phantom,
                   eval=replace(cfg.eval, quality=manifest.quality))


def _check_architecture(loaded_cfg, requested_cfg) -> None:
    if _model_kwargs(loaded_cfg) != _model_kwargs(requested_cfg):
        raise CompatibilityError(
            f"params were trained with {loaded_cfg}, config requests "
            f"{requested_cfg}")


# ---------------------------------------------------------------------------
# command implementations

def _cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if args.split == "train":
        samples, manifest = synth_split(cfg, cfg.eval.n_train, TRAIN_STREAM)
    else:
        samples, manifest = synth_split(cfg, cfg.eval.n_test, TEST_STREAM)
    write_dataset(samples, manifest, out)
    _write_echo(cfg, out / "config", f"synth --split {args.split}")
    print(f"wrote {manifest.n_samples} samples to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if args.loss is not None:
        cfg = replace(cfg, stage1=replace(cfg.stage1, loss=args.loss))
    if args.temp is not None:
        if args.temp <= 0:
            raise ValidationError(f"--temp must be positive, got {args.temp}")
        cfg = replace(cfg, stage1=replace(cfg.stage1, temp=args.temp),
                      model=replace(cfg.model, temperature=args.temp))
    samples, manifest = read_dataset(args.data)
    params, history = pretrain_stage1(
        samples, cfg.train_config(), n_objects=manifest.n_objects,
        n_modalities=manifest.n_modalities)
    save_params(params, args.out)
    rows = reporting.history_rows(f"pretrain-{cfg.seed}", history,
                                  manifest.n_objects)
    reporting.write_csv(str(args.out) + ".history.csv",
                        reporting.metrics_header(manifest.n_objects), rows)
    _write_echo(cfg, args.out, "pretrain")
    print(f"stage-1 [{cfg.stage1.loss}] done; params -> {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    params = load_params(args.params)
    _check_architecture(params.config, cfg.model)
    samples, manifest = read_dataset(args.data)
    train_cfg = replace(cfg.train_config(), model=params.config)
    params2, history = finetune_stage2(samples, params, train_cfg)
    save_params(params2, args.out)
    rows = reporting.history_rows(f"finetune-{cfg.seed}", history,
                                  manifest.n_objects)
    reporting.write_csv(str(args.out) + ".history.csv",
                        reporting.metrics_header(manifest.n_objects), rows)
    _write_echo(cfg, args.out, "finetune")
    print(f"stage-2 done; params -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    samples, manifest = read_dataset(args.data)
    params = load_params(args.params)
    if args.config:
        cfg = load_config(args.config)
        _check_architecture(params.config, cfg.model)
    else:
        cfg = _default_config(manifest)
    metrics = evaluate_params(samples, params, eval_cfg=cfg.eval,
                              n_per_object=cfg.sampling_n_per_object,
                              seed=cfg.seed)
    run_id = f"eval-{cfg.seed}"
    row = reporting.eval_row(run_id, metrics.dice_per_object, metrics.miou,
                             metrics.silhouette, metrics.wall_clock_s)
    reporting.write_csv(args.report,
                        reporting.metrics_header(manifest.n_objects), [row])
    reporting.render_dice_figure(str(args.report) + ".png",
                                 metrics.dice_per_object,
                                 f"{run_id}: mean Dice {metrics.dice_mean:.3f}")
    _write_echo(cfg, args.report, "eval")
    print(f"dice_mean={metrics.dice_mean:.4f} miou={metrics.miou:.4f} "
          f"silhouette={metrics.silhouette:.4f}")
    return 0


def _cmd_embed(args) -> int:
    samples, manifest = read_dataset(args.data)
    params = load_params(args.params)
    if args.config:
        cfg = load_config(args.config)
        _check_architecture(params.config, cfg.model)
    else:
        cfg = _default_config(manifest)
    embeddings, labels, sample_ids = embedding_pool(
        samples, params, cfg.sampling_n_per_object, cfg.seed)
    from .metrics import cluster_separation

    silhouette = cluster_separation(embeddings, labels)
    pca = pca_project(embeddings, k=2)
    coords = pca.coords
    if pca.rank_deficient:
        log.warning("embedding rank below 2; PCA columns padded with zeros")
        pad = np.zeros((coords.shape[0], 2 - coords.shape[1]))
        coords = np.hstack([coords, pad])
    header = ["sample_id", "m", "o", "pca_1", "pca_2"]
    rows = []
    for i in range(embeddings.shape[0]):
        row = [int(sample_ids[i]), int(labels[i, 0]), int(labels[i, 1]),
               float(coords[i, 0]), float(coords[i, 1])]
        if args.raw:
            row.extend(float(v) for v in embeddings[i])
        rows.append(row)
    if args.raw:
        header = header + [f"e{j}" for j in range(embeddings.shape[1])]
    reporting.write_csv(args.out, header, rows)
    reporting.render_embedding_figure(str(args.out) + ".png", coords, labels,
                                      silhouette)
    _write_echo(cfg, args.out, "embed")
    print(f"silhouette={silhouette:.4f} "
          f"explained={'/'.join(f'{r:.3f}' for r in pca.ratios)}")
    return 0


def _cmd_check(args) -> int:
    grad, oracle = args.grad, args.oracle
    if not grad and not oracle:
        grad = oracle = True
    results = run_suites(grad=grad, oracle=oracle)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.detail} ({r.seconds:.1f}s)")
        failed |= not r.passed
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# ablate

_AXES = ("temp", "label_fraction", "modality_filter")


def _parse_grid(path) -> tuple[RunConfig, str, list]:
    text = Path(path).read_text(encoding="utf-8")
    base_lines = []
    ablate_lines = []
    current = None
    for raw_line in text.splitlines():
        stripped = raw_line.split("#", 1)[0].strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip().lower()
            if current != "ablate":
                base_lines.append(raw_line)
            continue
        (ablate_lines if current == "ablate" else base_lines).append(raw_line)
    cfg = parse_config_text("\n".join(base_lines), source=str(path))

    axis = None
    values_raw = None
    for line in ablate_lines:
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, _, value = stripped.partition("=")
        key = key.strip().lower()
        if key == "axis":
            axis = value.strip().lower()
        elif key == "values":
            values_raw = value.strip()
        else:
            raise ValidationError(f"{path}: unknown [ablate] key {key!r}")
    if axis not in _AXES:
        raise ValidationError(
            f"{path}: [ablate].axis must be one of {', '.join(_AXES)}")
    if not values_raw:
        raise ValidationError(f"{path}: [ablate].values is required")
    if axis == "modality_filter":
        values = []
        for token in values_raw.split():
            if token.lower() == "all":
                values.append(None)
            else:
                values.append(tuple(int(v) for v in token.split(",")))
    else:
        values = [float(v) for v in values_raw.replace(",", " ").split()]
        if axis == "temp" and any(v <= 0 for v in values):
            raise ValidationError(f"{path}: temp values must be positive")
        if axis == "label_fraction" and any(not 0 <= v <= 1 for v in values):
            raise ValidationError(f"{path}: label_fraction values in [0, 1]")
    return cfg, axis, values


def _grid_point(cfg: RunConfig, axis: str, value):
    stage1 = replace(cfg.stage1, **{axis: value})
    model = cfg.model if axis != "temp" else replace(cfg.model,
                                                     temperature=value)
    return replace(cfg, stage1=stage1, model=model)


def _run_grid_point(point_cfg: RunConfig):
    result = run_pipeline(point_cfg)
    m = result.metrics
    return (m.dice_per_object, m.miou, m.silhouette, m.wall_clock_s)


def _format_grid_value(axis, value) -> str:
    if axis == "modality_filter":
        return "all" if value is None else "+".join(str(v) for v in value)
    return f"{value:g}"


def _cmd_ablate(args) -> int:
    cfg, axis, values = _parse_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    points = [_grid_point(cfg, axis, v) for v in values]
    workers = int(os.environ.get("AGCL_THREADS", "1"))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(_run_grid_point, points))
    else:
        outcomes = [_run_grid_point(p) for p in points]

    n_objects = cfg.phantom.n_objects
    header = (["axis", "value", "loss", "dice_mean"]
              + [f"dice_obj{o + 1}" for o in range(n_objects)]
              + ["miou", "silhouette", "wall_clock_s"])
    rows = []
    dice_means = []
    for value, (dice, miou_v, silhouette, wall) in zip(values, outcomes):
        dice_means.append(float(np.mean(dice)))
        rows.append([axis, _format_grid_value(axis, value), cfg.stage1.loss,
                     float(np.mean(dice))] + [float(d) for d in dice]
                    + [miou_v, silhouette, reporting.wall_clock_field(wall)])
    csv_path = out / "ablate.csv"
    reporting.write_csv(csv_path, header, rows)
    reporting.render_sweep_figure(
        out / "ablate.png",
        [_format_grid_value(axis, v) for v in values], dice_means, axis)
    _write_echo(cfg, out / "config", f"ablate axis={axis}")
    for row in rows:
        print(f"{axis}={row[1]}: dice_mean={row[3]:.4f}")
    return 0


# ---------------------------------------------------------------------------

_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "embed": _cmd_embed,
    "check": _cmd_check,
    "ablate": _cmd_ablate,
}


def run_command(argv) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            print(parser.format_usage(), file=sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except _UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2
    except AgclError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
