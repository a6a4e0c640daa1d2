import json
import subprocess
import sys

import numpy as np
import pytest

from sadrive.cli import build_parser, disk_mask, main, resolve_config
from sadrive.formats import load_pnm, read_csv

TINY = ["--scale", "0.25", "--batch-size", "2", "--n-negatives", "20"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d / "data"), "--n-train", "4", "--n-eval", "2", "--seed", "5"]) == 0
    assert main(["train", "--data", str(d / "data"), "--run", str(d / "pre"), "--epochs", "1", *TINY]) == 0
    return d


def test_flags_override_config_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"lr": 0.5, "seed": 9, "weights": {"attn": 2e-6}}))
    args = build_parser().parse_args(["train", "--data", "x", "--run", "y", "--config", str(p), "--seed", "3",
                                      "--gamma1", "1.0"])
    cfg = resolve_config(args)
    assert (cfg.lr, cfg.seed) == (0.5, 3)
    assert (cfg.weights.attn, cfg.weights.gamma1) == (2e-6, 1.0)


def test_gen_data_layout(workdir):
    assert len(list((workdir / "data" / "train").glob("*.scene"))) == 4
    assert len(list((workdir / "data" / "eval").glob("*.bev"))) == 2
    assert (workdir / "pre" / "model.ckpt").exists()


def test_eval_writes_report(workdir, capsys):
    out = workdir / "ev"
    assert main(["eval", "--checkpoint", str(workdir / "pre" / "model.ckpt"), "--data", str(workdir / "data"),
                 "--out", str(out), "--mask", "proximity"]) == 0
    row = read_csv(out / "metrics.csv")[0]
    assert 90.0 <= float(row["sparsity_pct"]) <= 99.0
    assert len(read_csv(out / "l2_curve.csv")) == 6
    assert "planning_l2_3s_m" in capsys.readouterr().out


def test_cli_outputs_repeat_exactly(workdir, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        assert main(["train", "--data", str(workdir / "data"), "--run", str(d / "run"), "--max-steps", "2",
                     *TINY]) == 0
        assert main(["eval", "--checkpoint", str(d / "run" / "model.ckpt"), "--data", str(workdir / "data"),
                     "--out", str(d / "ev")]) == 0
        outs.append([(d / "run" / "loss.csv").read_bytes(), (d / "ev" / "metrics.csv").read_bytes()])
    assert outs[0] == outs[1]


def test_missing_pretrained_is_config_error(workdir, capsys):
    rc = main(["train", "--data", str(workdir / "data"), "--run", str(workdir / "j"), "--stage", "joint", *TINY])
    assert rc == 2
    assert "pretrained" in capsys.readouterr().err


def test_config_mismatch_is_config_error(workdir, tmp_path, capsys):
    from sadrive.backbone import BackboneConfig, save_config

    save_config(tmp_path / "full.cfg", BackboneConfig())
    rc = main(["eval", "--checkpoint", str(workdir / "pre" / "model.ckpt"), "--data", str(workdir / "data"),
               "--out", str(tmp_path / "ev"), "--model-config", str(tmp_path / "full.cfg")])
    assert rc == 2
    assert "stem_width" in capsys.readouterr().err


def test_bad_config_file_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"epochs": -1}')
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--run", str(tmp_path / "r"),
                 "--config", str(p)]) == 2
    p.write_text("{not json")
    assert main(["train", "--data", "x", "--run", "y", "--config", str(p)]) == 2


def test_unknown_verb_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["fly"])
    assert e.value.code == 2


def test_nan_exit_code(workdir, tmp_path, monkeypatch):
    from sadrive import train as train_mod

    def boom(*a, **k):
        raise train_mod.NumericError("non-finite loss at step 0")

    monkeypatch.setattr("sadrive.cli.train", boom)
    assert main(["train", "--data", str(workdir / "data"), "--run", str(tmp_path), *TINY]) == 3


def test_viz_outputs(workdir, tmp_path):
    prefix = tmp_path / "v"
    assert main(["viz", "--checkpoint", str(workdir / "pre" / "model.ckpt"), "--data", str(workdir / "data"),
                 "--index", "1", "--mask", "proximity", "--out", str(prefix), "--pixel-scale", "1"]) == 0
    m = load_pnm(f"{prefix}_mask.pgm")
    img = load_pnm(f"{prefix}_bev.ppm")
    assert m.shape == (24, 24) and img.shape == (96, 96, 3)
    assert np.count_nonzero(img[..., 0] == 255) == np.count_nonzero(m) * 16
    assert main(["viz", "--checkpoint", str(workdir / "pre" / "model.ckpt"), "--data", str(workdir / "data"),
                 "--index", "9", "--out", str(prefix)]) == 2


def test_flops_verb(tmp_path, capsys):
    out = tmp_path / "f.csv"
    assert main(["flops", "--grid", "96", "--sparsity", "0.95", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[-1]["layer"] == "total"
    assert int(rows[-1]["sparse"]) < int(rows[-1]["dense"])
    assert "gated ratio" in capsys.readouterr().out
    assert main(["flops", "--grid", "100", "--mask-pgm", str(tmp_path / "none.pgm")]) == 2


def test_disk_mask_sparsity():
    for s in (0.5, 0.9, 0.95):
        m = disk_mask(192, s)
        assert m.shape == (48, 48)
        assert abs((1 - m.mean()) - s) < 0.02


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "sadrive", "flops", "--grid", "96"], capture_output=True, text=True)
    assert r.returncode == 0 and "ratio 1.000" in r.stdout
