import csv
import json

import pytest

from fundusnet import config as C
from fundusnet.cli import main
from fundusnet.experiments import factorial_rows

TINY = {
    "data": {"synthetic_n": 24, "synthetic_test_n": 12},
    "train": {"epochs": 1, "batch_size": 12},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _tiny(**data):
    return {"data": {**TINY["data"], **data}, "train": TINY["train"]}


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_train_is_byte_reproducible_and_stamped(tiny_cfg, tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "model.crpl").read_bytes() == (tmp_path / "b" / "model.crpl").read_bytes()
    report = json.loads((tmp_path / "a" / "eval_report.json").read_text())
    assert 0.0 <= report["auroc"] <= 1.0
    assert report["config_hash"] == C.config_hash(C.resolve(TINY))
    assert json.loads((tmp_path / "a" / "config.json").read_text()) == C.resolve(TINY)
    assert not (tmp_path / "a" / "FAILED").exists()
    assert "held-out AUROC" in capsys.readouterr().out


def test_synth_then_eval(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n", "10", "--seed", "1"]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_tiny(manifest=str(tmp_path / "d" / "manifest.csv"))))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    (tmp_path / "e.json").write_text(json.dumps({"members": [{"checkpoint": "r/model.crpl", "pipeline": "B"}] * 2}))
    capsys.readouterr()
    assert main(["eval", "--ensemble", str(tmp_path / "e.json"), "--manifest", str(tmp_path / "d" / "manifest.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["auroc"] <= 1.0 and report["n_images"] == 10 and report["n_members"] == 2


def test_missing_manifest_exits_2_naming_path(tmp_path, capsys):
    (tmp_path / "e.json").write_text('{"members": [{"checkpoint": "x.crpl"}]}')
    missing = tmp_path / "nowhere" / "manifest.csv"
    assert main(["eval", "--ensemble", str(tmp_path / "e.json"), "--manifest", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"manifest": str(missing)}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
    assert str(missing) in capsys.readouterr().err
    assert (tmp_path / "run" / "FAILED").exists()


def test_unknown_config_keys_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"epochs": 1, "learning_rate": 0.1}}')
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    cfg.write_text('{"optimizer": {}}')
    assert main(["train", "--config", str(cfg)]) == 2
    with pytest.raises(C.ConfigError):
        C.resolve({"ensemble": {"members": [{"pipeline": "A", "weight": 1}]}})


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["nope"])
    assert e.value.code == 2
    assert main(["bench", "--checkpoint", "missing.crpl"]) == 2


def test_corrupt_checkpoint_exits_1(tmp_path, capsys):
    (tmp_path / "bad.crpl").write_bytes(b"CRPL" + b"\0" * 20)
    assert main(["bench", "--checkpoint", str(tmp_path / "bad.crpl"), "--n", "1"]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_ablate_augment_grid(tiny_cfg, tmp_path):
    out = tmp_path / "aug"
    assert main(["ablate-augment", "--config", str(tiny_cfg), "--seeds", "5", "--out", str(out)]) == 0
    rows = _rows(out / "ablate_augment.csv")
    assert [r["augment"] for r in rows] == ["-", "RR", "RR+RF", "RR+RF+CJ"]
    assert [(r["RR"], r["RF"], r["CJ"]) for r in rows] == [("0", "0", "0"), ("1", "0", "0"), ("1", "1", "0"), ("1", "1", "1")]
    assert all(r["CC"] == "1" and r["seeds"] == "5" for r in rows)
    assert {r["config_hash"] for r in rows} == {C.config_hash(C.resolve(TINY))}
    assert all(0 <= float(r["auroc"]) <= 1 and float(r["cpu_time"]) > 0 for r in rows)


def test_factorial_grid_has_eight_rows():
    rows = factorial_rows()
    assert len(rows) == 8 and len({r[1:] for r in rows}) == 8
    assert rows[0][0] == "-" and rows[-1][0] == "RR+RF+CJ"


def test_ablate_ensemble_grid(tiny_cfg, tmp_path):
    out = tmp_path / "ens"
    assert main(["ablate-ensemble", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    rows = _rows(out / "ablate_ensemble.csv")
    masks = [(r["model1"], r["model2"], r["model3"]) for r in rows]
    assert masks == [("1", "0", "0"), ("0", "1", "0"), ("0", "0", "1"), ("1", "1", "0"), ("1", "0", "1"), ("0", "1", "1"), ("1", "1", "1")]
    assert rows[0]["seeds"] == "2024 2025 2026"
    spec = json.loads((out / "ensemble.json").read_text())
    assert [m["pipeline"] for m in spec["members"]] == ["A", "B", "C"]
    assert main(["eval", "--ensemble", str(out / "ensemble.json"), "--manifest", str(out / "data" / "test" / "manifest.csv"),
                 "--out", str(out / "r.json")]) == 0
    assert json.loads((out / "r.json").read_text())["auroc"] == pytest.approx(float(rows[-1]["auroc"]), abs=5e-5)


def test_compare_backbones_repeatable(tiny_cfg, tmp_path):
    outs = []
    for name in ("x", "y"):
        assert main(["compare-backbones", "--config", str(tiny_cfg), "--seeds", "1", "2", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "compare_backbones.csv").read_text())
    assert outs[0] == outs[1]
    header = outs[0].splitlines()[0].split(",")
    assert header == ["model", "seed1", "seed2", "mean", "params", "config_hash", "seeds"]
    assert outs[0].splitlines()[1].split(",")[4] == "0.2M"


def test_failure_marker_set_and_cleared(tiny_cfg, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(_tiny(difficulty=1.5)))
    out = tmp_path / "run"
    assert main(["train", "--config", str(bad), "--out", str(out)]) == 1
    assert "difficulty" in (out / "FAILED").read_text()
    assert main(["train", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    assert not (out / "FAILED").exists()


def test_bench_reports_params(capsys):
    assert main(["bench", "--n", "2", "--warmup", "1", "--members", "2"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["params"] == 173_941 and result["members"] == 2 and result["per_image_cpu_seconds"] > 0
