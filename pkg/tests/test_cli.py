"""Command-line surface: subcommands, exit codes, artifacts, determinism."""

import hashlib
import shutil
from pathlib import Path

import numpy as np
import pytest

from agcl.cli import run_command

CONFIG = """\
seed = 99
[phantom]
height = 48
width = 48
axis_min = 4
axis_max = 8
[sampling]
n_per_object = 3
[model]
patch_size = 16
enc_widths = 6 10 16
embed_dim = 8
dec_width = 8
[stage1]
loss = agcl
temp = 0.1
epochs = 2
batch_pairs = 8
lr = 0.003
steps_per_epoch = 6
[stage2]
epochs = 2
batch = 8
lr = 0.002
steps_per_epoch = 6
[eval]
n_train = 6
n_test = 3
quality = 0.9
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(CONFIG)
    return root


@pytest.fixture(scope="module")
def pipeline(workdir):
    """One synth -> pretrain -> finetune chain shared by the read-only tests."""
    cfg = workdir / "run.ini"
    data = workdir / "train"
    test_data = workdir / "test"
    params1 = workdir / "stage1.agp"
    params2 = workdir / "stage2.agp"
    assert run_command(["synth", "--config", str(cfg), "--out", str(data)]) == 0
    assert run_command(["synth", "--config", str(cfg), "--out",
                        str(test_data), "--split", "test"]) == 0
    assert run_command(["pretrain", "--data", str(data), "--config", str(cfg),
                        "--out", str(params1)]) == 0
    assert run_command(["finetune", "--data", str(data), "--params",
                        str(params1), "--config", str(cfg),
                        "--out", str(params2)]) == 0
    return {"cfg": cfg, "data": data, "test": test_data,
            "params1": params1, "params2": params2, "root": workdir}


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as err:
        run_command(["--help"])
    assert err.value.code == 0
    assert "synth" in capsys.readouterr().out


def test_unknown_subcommand_exits_one(capsys):
    assert run_command(["transmogrify"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_exits_one(capsys):
    assert run_command(["synth", "--bogus", "x"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_config_file_exits_one(workdir, capsys):
    code = run_command(["synth", "--config", str(workdir / "nope.ini"),
                        "--out", str(workdir / "d")])
    assert code == 1


def test_invalid_config_value_exits_one(workdir, capsys):
    bad = workdir / "bad.ini"
    bad.write_text(CONFIG.replace("temp = 0.1", "temp = -3"))
    code = run_command(["synth", "--config", str(bad),
                        "--out", str(workdir / "d2")])
    assert code == 1
    assert "[stage1].temp" in capsys.readouterr().err


def test_synth_writes_dataset_and_echo(pipeline):
    data = pipeline["data"]
    assert (data / "manifest.json").is_file()
    assert (data / "config.echo.ini").is_file()
    assert len(list(data.glob("*.agt"))) == 6 * 3


def test_pretrain_outputs(pipeline):
    assert pipeline["params1"].is_file()
    history = Path(str(pipeline["params1"]) + ".history.csv")
    assert history.is_file()
    header = history.read_text().splitlines()[0]
    assert header.startswith("run_id,stage,epoch,loss,dice_mean")
    assert header.endswith("wall_clock_s")
    echo = Path(str(pipeline["params1"]) + ".echo.ini")
    assert echo.is_file()


def test_eval_writes_report_figure_and_echo(pipeline, capsys):
    report = pipeline["root"] / "report.csv"
    code = run_command(["eval", "--data", str(pipeline["test"]), "--params",
                        str(pipeline["params2"]), "--report", str(report),
                        "--config", str(pipeline["cfg"])])
    assert code == 0
    out = capsys.readouterr().out
    assert "dice_mean=" in out
    lines = report.read_text().splitlines()
    assert len(lines) == 2
    assert lines[1].split(",")[1] == "eval"
    assert Path(str(report) + ".png").is_file()
    assert Path(str(report) + ".echo.ini").is_file()


def test_embed_writes_coords_and_figure(pipeline, capsys):
    out_csv = pipeline["root"] / "embed.csv"
    code = run_command(["embed", "--data", str(pipeline["test"]), "--params",
                        str(pipeline["params1"]), "--out", str(out_csv),
                        "--config", str(pipeline["cfg"])])
    assert code == 0
    assert "silhouette=" in capsys.readouterr().out
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "sample_id,m,o,pca_1,pca_2"
    assert len(lines) > 10
    assert Path(str(out_csv) + ".png").is_file()


def test_embed_raw_appends_columns(pipeline):
    out_csv = pipeline["root"] / "embed_raw.csv"
    code = run_command(["embed", "--data", str(pipeline["test"]), "--params",
                        str(pipeline["params1"]), "--out", str(out_csv),
                        "--config", str(pipeline["cfg"]), "--raw"])
    assert code == 0
    header = out_csv.read_text().splitlines()[0].split(",")
    assert header[:5] == ["sample_id", "m", "o", "pca_1", "pca_2"]
    assert header[5] == "e0" and len(header) == 5 + 8


def test_finetune_params_mismatch_exits_one(pipeline, workdir, capsys):
    other_cfg = workdir / "other.ini"
    other_cfg.write_text(CONFIG.replace("embed_dim = 8", "embed_dim = 16"))
    code = run_command(["finetune", "--data", str(pipeline["data"]),
                        "--params", str(pipeline["params1"]),
                        "--config", str(other_cfg),
                        "--out", str(workdir / "x.agp")])
    assert code == 1
    assert "trained with" in capsys.readouterr().err


def test_corrupt_dataset_exits_one(pipeline, workdir, capsys):
    broken = workdir / "broken"
    shutil.copytree(pipeline["test"], broken)
    victim = sorted(broken.glob("*.image.agt"))[0]
    victim.write_bytes(victim.read_bytes()[:-4])
    code = run_command(["eval", "--data", str(broken), "--params",
                        str(pipeline["params2"]), "--report",
                        str(workdir / "r.csv")])
    assert code == 1


def _tree_digest(root: Path) -> dict:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    return out


def test_synth_bit_exact_repeat(workdir):
    cfg = workdir / "run.ini"
    a, b = workdir / "det_a", workdir / "det_b"
    assert run_command(["synth", "--config", str(cfg), "--out", str(a)]) == 0
    assert run_command(["synth", "--config", str(cfg), "--out", str(b)]) == 0
    da, db = _tree_digest(a), _tree_digest(b)
    assert da == db and len(da) > 0


def test_pretrain_bit_exact_repeat(pipeline, workdir):
    out_a = workdir / "rep_a.agp"
    out_b = workdir / "rep_b.agp"
    for out in (out_a, out_b):
        assert run_command(["pretrain", "--data", str(pipeline["data"]),
                            "--config", str(pipeline["cfg"]),
                            "--out", str(out)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    assert Path(str(out_a) + ".history.csv").read_bytes() == \
        Path(str(out_b) + ".history.csv").read_bytes()


def test_pretrain_loss_flag_overrides_config(pipeline, workdir):
    out = workdir / "ri.agp"
    assert run_command(["pretrain", "--data", str(pipeline["data"]),
                        "--config", str(pipeline["cfg"]),
                        "--loss", "none", "--out", str(out)]) == 0
    echo = Path(str(out) + ".echo.ini").read_text()
    assert "loss = none" in echo
    history = Path(str(out) + ".history.csv").read_text().splitlines()
    assert len(history) == 1  # header only: no epochs ran


def test_ablate_grid(workdir):
    grid = workdir / "grid.ini"
    grid.write_text(CONFIG + "\n[ablate]\naxis = temp\nvalues = 0.1 0.5\n")
    out = workdir / "sweep"
    assert run_command(["ablate", "--grid", str(grid), "--out", str(out)]) == 0
    lines = (out / "ablate.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("axis,value,loss,dice_mean")
    assert lines[1].split(",")[0] == "temp"
    assert [row.split(",")[1] for row in lines[1:]] == ["0.1", "0.5"]
    assert (out / "ablate.png").is_file()
    assert (out / "config.echo.ini").is_file()


def test_ablate_bad_axis_exits_one(workdir, capsys):
    grid = workdir / "grid_bad.ini"
    grid.write_text(CONFIG + "\n[ablate]\naxis = magic\nvalues = 1\n")
    assert run_command(["ablate", "--grid", str(grid),
                        "--out", str(workdir / "s2")]) == 1
