import numpy as np
import pytest

from gaitqat.synthdata import DatasetConfig, generate_from_config

# acceptance lines collected by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at every element of ``x`` (restored afterwards)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


@pytest.fixture(scope="session")
def small_split():
    return generate_from_config(DatasetConfig(seed=3, n_ids=8, n_eval_ids=4, seqs_per_id=4))


SMALL_RUN = {
    "seed": 1,
    "dataset": {"n_ids": 8, "n_eval_ids": 4, "seqs_per_id": 4},
    "plan": {"stage1_iters": 4, "finetune_iters": 3, "lr": 1e-3, "ids_per_batch": 4, "samples_per_id": 2},
    "schedule": {"mode": "grow", "k0": 1.0, "delta": 0.5, "interval": 1, "threshold": 2.0},
}


def run_pipeline(root) -> list:
    """Every CLI command on a tiny config; returns the deterministic artifact paths."""
    import json
    from gaitqat.cli import main

    root.mkdir(parents=True, exist_ok=True)
    fp_cfg, q4_cfg, q8_cfg = root / "fp.json", root / "w4.json", root / "w8.json"
    fp_cfg.write_text(json.dumps(SMALL_RUN))
    q4_cfg.write_text(json.dumps({**SMALL_RUN, "quant": {"weight_bits": 4, "act_bits": 4}}))
    q8_cfg.write_text(json.dumps({**SMALL_RUN, "quant": {"weight_bits": 8, "act_bits": 8}}))
    data, fp, w4, w8 = root / "data", root / "fp", root / "w4", root / "w8"
    steps = [
        ["gen-data", "--config", fp_cfg, "--out", data],
        ["train", "--config", fp_cfg, "--data", data, "--out", fp],
        ["train", "--config", q4_cfg, "--data", data, "--init", fp / "stage1.qgkt", "--out", w4],
        ["train", "--config", q8_cfg, "--data", data, "--init", fp / "stage1.qgkt", "--out", w8],
        ["calibrate", "--config", q4_cfg, "--data", data, "--student", w4 / "stage1.qgkt",
         "--teacher", w8 / "stage1.qgkt", "--out", w4],
        ["finetune", "--config", q4_cfg, "--data", data, "--from", w4 / "calibrated.qgkt", "--out", w4],
        ["eval", "--ckpt", w4 / "stage2.qgkt", "--data", data, "--out", root / "eval.json"],
        ["export-embeddings", "--ckpt", w4 / "stage2.qgkt", "--data", data, "--out", root / "emb.csv"],
        ["bitops", "--ckpt", w4 / "stage2.qgkt", "--out", root / "bitops.csv"],
        ["bitops", "--gaitbase", "--bits", "8", "--out", root / "gaitbase_w8.csv"],
        ["analyze-theory", "--n", "20", "--out", root / "theory.csv"],
        ["lower", "--ckpt", w4 / "stage2.qgkt", "--out", root / "w4.lowered"],
        ["int-eval", "--lowered", root / "w4.lowered", "--data", data, "--out", root / "int_eval.json"],
        ["contrast-k", "--config", q4_cfg, "--data", data, "--k", "2,5", "--out", root / "contrast.csv"],
    ]
    for argv in steps:
        code = main([str(a) for a in argv])
        assert code == 0, argv
    return sorted(p for p in root.rglob("*") if p.is_file())
