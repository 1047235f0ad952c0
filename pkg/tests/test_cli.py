import csv
import json
import re

import numpy as np
import pytest

from mimofan import dataio
from mimofan.cli import build_parser, main

SMALL = ["--filters", "1", "--scales", "2", "--batch-size", "5"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--cases", "8", "--size", "16", "--seed", "2", "--out", str(root)]) == 0
    return root


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_prints_config_first(tmp_path, capsys):
    assert main(["synth", "--cases", "2", "--size", "16", "--out", str(tmp_path)]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("synth config: ")
    assert json.loads(first.split(": ", 1)[1]) == dict(cases=2, size=16, seed=0, out=str(tmp_path))
    assert (tmp_path / "manifest.csv").exists()


def test_train_missing_manifest(tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    code = main(["train", "--manifest", str(missing), "--out", str(tmp_path / "o"), "--epochs", "1"])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["frobnicate"],
        ["train", "--manifest", "m.csv", "--out", "o", "--epochs", "0"],
        ["train", "--manifest", "m.csv", "--out", "o", "--filters", "0"],
        ["train", "--manifest", "m.csv", "--out", "o", "--w-fg", "-1"],
        ["ablate", "--manifest", "m.csv", "--out", "o", "--arch", "unet"],
        ["gradcheck", "--op", "nope"],
        [],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_help_lists_every_flag_with_default(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        assert main([name, "--help"]) == 0
        text = re.sub(r"\s+", " ", capsys.readouterr().out)
        for action in p._actions:
            if action.dest == "help":
                continue
            assert any(opt in text for opt in action.option_strings), (name, action.dest)
            if not action.required and action.default is not None:
                assert f"(default: {action.default})" in text, (name, action.dest)


def test_gradcheck_summary(capsys):
    assert main(["gradcheck", "--op", "relu", "--seeds", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("gradcheck config: ")
    assert "3/3 checks passed" in out


def test_train_eval_predict(data, tmp_path, capsys):
    man = str(data / "manifest.csv")
    out = tmp_path / "run"
    assert main(["train", "--manifest", man, "--out", str(out), "--epochs", "2", *SMALL]) == 0
    assert capsys.readouterr().out.startswith("train config: ")
    ckpt = str(out / "final.mfan")

    assert main(["eval", "--checkpoint", ckpt, "--manifest", man]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("eval config: ")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["fold", "case_id", "dice"] and len(rows) == 1 + 8 + 1

    pred, overlay = tmp_path / "p.pgm", tmp_path / "o.ppm"
    argv = ["predict", "--checkpoint", ckpt, "--image", str(data / "case000_image.pgm"), "--out", str(pred)]
    assert main([*argv, "--overlay", str(overlay)]) == 1
    assert main([*argv, "--overlay", str(overlay), "--truth", str(data / "case000_mask.pgm")]) == 0
    mask = dataio.read_pgm(pred, mask=True)
    assert mask.shape == (1, 1, 16, 16)
    assert dataio.read_ppm(overlay).shape == (16, 16, 3)


def test_train_single_fold(data, tmp_path):
    man = str(data / "manifest.csv")
    code = main(["train", "--manifest", man, "--out", str(tmp_path), "--epochs", "1", "--folds", "4", "--fold", "3", *SMALL])
    assert code == 0
    assert {"loss.csv", "best.mfan", "eval.csv"} <= {p.name for p in (tmp_path / "fold3").iterdir()}
    assert main(["train", "--manifest", man, "--out", str(tmp_path), "--epochs", "1", "--fold", "5", *SMALL]) == 1


def test_artifacts_are_deterministic(data, tmp_path):
    man = str(data / "manifest.csv")
    for run in ("a", "b"):
        assert main(["cv", "--manifest", man, "--out", str(tmp_path / run), "--epochs", "1", "--folds", "2", *SMALL]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert "fold0/best.mfan" in a and "ensemble_insample.csv" in a
    assert a == b


def test_cv_on_131_cases(tmp_path, capsys):
    assert main(["synth", "--cases", "131", "--size", "16", "--out", str(tmp_path / "d")]) == 0
    argv = ["cv", "--manifest", str(tmp_path / "d" / "manifest.csv"), "--out", str(tmp_path / "o")]
    assert main([*argv, "--folds", "5", "--epochs", "1", "--filters", "1", "--scales", "2", "--batch-size", "32"]) == 0
    sizes = [int(m) for m in re.findall(r"^fold \d: (\d+) cases", capsys.readouterr().out, re.M)]
    assert sorted(sizes, reverse=True) == [27, 26, 26, 26, 26]
    for f, n in enumerate(sizes):
        report = (tmp_path / "o" / f"fold{f}" / "eval.csv").read_text().splitlines()
        assert len(report) == 1 + n + 1
    assert np.isfinite(float(report[-1].split(",")[-1]))
