import json

import numpy as np
import pytest

from gazemoe import cli, train as train_mod
from gazemoe.checkpoint import read_checkpoint
from gazemoe.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--profile", "tiny", "--seed", "1", "--out", str(out),
                 "--set", "train.epochs=2", "--set", "data.n=40"]) == 0
    return out


def test_train_writes_artifacts(trained_dir):
    for name in ("model.gzmx", "metrics.csv", "summary.json", "config.toml"):
        assert (trained_dir / name).is_file()
    summary = json.loads((trained_dir / "summary.json").read_text())
    assert summary["seed"] == 1 and summary["epochs"] == 2


def test_rerun_gives_identical_metrics(trained_dir, tmp_path):
    assert main(["train", "--profile", "tiny", "--seed", "1", "--out", str(tmp_path),
                 "--set", "train.epochs=2", "--set", "data.n=40"]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (trained_dir / "metrics.csv").read_bytes()
    a, b = read_checkpoint(tmp_path / "model.gzmx"), read_checkpoint(trained_dir / "model.gzmx")
    assert a.tensors.keys() == b.tensors.keys()
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)  # out_dir differs


def test_eval_matches_summary(trained_dir, capsys):
    code, out, _ = run(capsys, "eval", str(trained_dir / "model.gzmx"))
    summary = json.loads((trained_dir / "summary.json").read_text())
    assert code == 0
    assert out.strip() == f"test mean angular error: {summary['final_test_error_deg']:.2f} deg"


def test_eval_perfect_oracle_prints_zero(trained_dir, capsys, monkeypatch):
    def oracle(model, images, frozen=None, batch_size=200):
        split = train_mod.load_splits(model_cfg[0]).test
        lookup = {im.tobytes(): g for im, g in zip(split.images, split.gaze)}
        return np.stack([lookup[im.tobytes()] for im in images])

    model_cfg = [read_checkpoint(trained_dir / "model.gzmx").config]
    monkeypatch.setattr(train_mod, "predict", oracle)
    code, out, _ = run(capsys, "eval", str(trained_dir / "model.gzmx"))
    assert code == 0 and out.strip() == "test mean angular error: 0.00 deg"


def test_eval_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "eval", str(tmp_path / "nope.gzmx"))
    assert code == 1 and "not found" in err


def test_eval_corrupt_file(trained_dir, capsys, tmp_path):
    raw = bytearray((trained_dir / "model.gzmx").read_bytes())
    raw[-50] ^= 0xFF
    bad = tmp_path / "bad.gzmx"
    bad.write_bytes(bytes(raw))
    code, _, err = run(capsys, "eval", str(bad))
    assert code == 1 and "corrupt" in err


def test_invalid_config_names_fields(capsys, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("model.routed_experts = 4\nmodel.top_k = 6\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 2
    assert "model.top_k" in err and "model.routed_experts" in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_rejected(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--profile", "tiny", "--set", "model.depth=3", "--out", str(tmp_path))
    assert code == 2 and "model.depth" in err


def test_gradcheck_tiny_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0 and out.strip().endswith("PASS")
    for group in ("prototypes", "projections", "attention", "routed_experts", "shared_experts", "router", "head"):
        assert f"\n{group} " in out
    assert "selected-row-only gradient  ok" in out


def test_gradcheck_corrupted_gradient_fails(capsys):
    code, out, _ = run(capsys, "gradcheck", "--corrupt-group", "shared_experts")
    assert code == 1 and "FAIL: shared_experts" in out


def test_gradcheck_soft_mode(capsys):
    code, out, _ = run(capsys, "gradcheck", "--set", 'model.prototype_mode="soft"')
    assert code == 0 and "hard_selection" not in out


def test_gradcheck_refuses_large_model(capsys):
    code, _, err = run(capsys, "gradcheck", "--profile", "desk")
    assert code == 1 and "--profile tiny" in err


def test_route_stats_table(trained_dir, capsys):
    code, out, _ = run(capsys, "route-stats", str(trained_dir / "model.gzmx"), "--split", "train")
    assert code == 0
    rows = [line.split("\t") for line in out.splitlines()[1:] if not line.startswith("#")]
    loads = np.array([float(r[2]) for r in rows])
    entropy = {float(r[4]) for r in rows}
    assert len(rows) == 3
    assert abs(loads.sum() - 1.0) < 1e-6
    assert all(0.0 <= e <= np.log(3) + 1e-9 for e in entropy)


def test_route_stats_dense_checkpoint(capsys, tmp_path):
    assert main(["train", "--profile", "tiny", "--out", str(tmp_path), "--set", "train.moe_enabled=false"]) == 0
    capsys.readouterr()
    code, _, err = run(capsys, "route-stats", str(tmp_path / "model.gzmx"))
    assert code == 1 and "train.moe_enabled = false" in err


def test_make_data_then_train_from_file(capsys, tmp_path):
    assert main(["make-data", "--profile", "tiny", "--out", str(tmp_path)]) == 0
    code, out, _ = run(capsys, "train", "--profile", "tiny", "--out", str(tmp_path / "r"),
                       "--data", str(tmp_path / "dataset.gzds"))
    regenerated = main(["train", "--profile", "tiny", "--out", str(tmp_path / "g")])
    assert code == 0 and regenerated == 0
    assert (tmp_path / "r" / "metrics.csv").read_bytes() == (tmp_path / "g" / "metrics.csv").read_bytes()


@pytest.mark.parametrize("axis, rows", [("features", 4), ("moe", 2), ("lr", 5)])
def test_ablate_table_rows(axis, rows, capsys, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_ablation",
                        lambda a, cfg, seeds: train_mod.run_ablation(a, cfg, seeds, runner=lambda c: 1.0 + c.seed))
    code, out, _ = run(capsys, "ablate", "--axis", axis, "--profile", "tiny", "--seeds", "0,1",
                       "--out", str(tmp_path))
    assert code == 0
    table = (tmp_path / f"ablation_{axis}.tsv").read_text().splitlines()
    assert len(table) == rows + 1 and table[1].split("\t")[1] == "1.50"


def test_ablate_features_tiny_end_to_end(capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", "--axis", "moe", "--profile", "tiny", "--seeds", "0", "--out", str(tmp_path))
    assert code == 0 and len(out.splitlines()) == 3
