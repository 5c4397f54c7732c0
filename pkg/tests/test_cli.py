import json
import subprocess
import sys

import pytest

from conftest import SMALL_RUN, run_pipeline
from gaitqat.checkpoint import read_container
from gaitqat.cli import main, parse_run_config
from gaitqat.errors import ConfigError


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    return root, run_pipeline(root)


def test_pipeline_artifacts_carry_provenance(pipeline):
    root, files = pipeline
    names = {p.relative_to(root).as_posix() for p in files}
    for expected in ("fp/stage1.qgkt", "w4/calibrated.qgkt", "w4/stage2.qgkt", "w4/stage2_trace.csv",
                     "eval.json", "int_eval.json", "emb.csv", "bitops.csv", "theory.csv", "contrast.csv"):
        assert expected in names
    meta, _ = read_container(root / "w4" / "stage2.qgkt")
    assert set(meta["provenance"]) >= {"config_hash", "seed"} and meta["provenance"]["seed"] == 1
    for csv_name in ("emb.csv", "bitops.csv", "contrast.csv", "w4/stage2_trace.csv"):
        first = (root / csv_name).read_text().splitlines()[0]
        assert first.startswith("# config_hash=") and "seed=1" in first
    report = json.loads((root / "eval.json").read_text())
    assert report["config"]["seed"] == 1 and report["config"]["config_hash"]


def test_int_eval_matches_eval(pipeline):
    root, _ = pipeline
    fq = json.loads((root / "eval.json").read_text())
    ie = json.loads((root / "int_eval.json").read_text())
    for key in ("rank1", "rank5", "mAP", "mINP"):
        assert ie[key] == fq[key]


def test_eval_is_byte_identical(pipeline, tmp_path):
    root, _ = pipeline
    out = tmp_path / "again.json"
    assert main(["eval", "--ckpt", str(root / "w4" / "stage2.qgkt"), "--data", str(root / "data"),
                 "--out", str(out)]) == 0
    assert out.read_bytes() == (root / "eval.json").read_bytes()


def test_gaitbase_bitops_totals(pipeline, capsys):
    root, _ = pipeline
    last = (root / "gaitbase_w8.csv").read_text().splitlines()[-1].split(",")
    assert last[0] == "total"
    assert main(["bitops", "--gaitbase", "--bits", "32"]) == 0
    full = float(capsys.readouterr().out.splitlines()[-1].split(",")[-1])
    assert float(last[-1]) * 16 == full


def test_theory_verify(pipeline, capsys):
    root, _ = pipeline
    assert main(["analyze-theory", "--verify", str(root / "theory.csv")]) == 0
    assert "ok" in capsys.readouterr().out


def test_tampered_theory_reports_json_error(pipeline, tmp_path, capsys):
    root, _ = pipeline
    lines = (root / "theory.csv").read_text().splitlines()
    cells = lines[4].split(",")
    cells[1] = "9.0"
    lines[4] = ",".join(cells)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["analyze-theory", "--verify", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigError"


def test_errors_are_one_json_line(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.qgkt"), "--data", str(tmp_path), "--out",
                 str(tmp_path / "x.json")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and json.loads(err[0])["error"] == "UsageError"
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"plan": {"lr": 1e-3, "momentum": 0.9}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "momentum" in json.loads(capsys.readouterr().err)["message"]
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "UsageError"


def test_run_config_rules():
    cfg = parse_run_config(SMALL_RUN)
    assert cfg.hash == parse_run_config(dict(reversed(list(SMALL_RUN.items())))).hash
    assert cfg.hash != parse_run_config({**SMALL_RUN, "seed": 2}).hash
    with pytest.raises(ConfigError):
        parse_run_config({"dataset": {"seed": 4}})
    with pytest.raises(ConfigError):
        parse_run_config({"seed": -1})
    with pytest.raises(ConfigError):
        parse_run_config({"extra": 1})


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gaitqat", "bitops", "--gaitbase", "--bits", "4"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.splitlines()[-1].startswith("total,")
