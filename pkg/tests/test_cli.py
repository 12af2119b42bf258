import csv
import json

import jax
import numpy as np
import pytest

from bnnp import trainer as T
from bnnp.cli import EXIT_OK, EXIT_USAGE, main
from bnnp.datagen import load_tasks


@pytest.fixture
def gen_cfg(tmp_path):
    p = tmp_path / "gen.json"
    p.write_text(json.dumps({"kind": "sawtooth", "n_range": [10, 14]}))
    return p


@pytest.fixture
def train_cfg(tmp_path):
    p = tmp_path / "train.json"
    p.write_text(json.dumps({"network": {"widths": [1, 4, 1], "inference_hidden": [8]}, "train": {"steps": 4, "num_samples": 2, "meta_batch_size": 2}}))
    return p


@pytest.fixture
def data(tmp_path, gen_cfg):
    out = tmp_path / "tasks.jsonl"
    assert main(["gen", "--config", str(gen_cfg), "--count", "4", "--seed", "1", "--out", str(out)]) == EXIT_OK
    return out


# -- gen --------------------------------------------------------------------------


def test_gen_zero_count(tmp_path, gen_cfg):
    out = tmp_path / "empty.jsonl"
    assert main(["gen", "--config", str(gen_cfg), "--count", "0", "--out", str(out)]) == EXIT_OK
    assert load_tasks(out) == []


def test_gen_is_deterministic(tmp_path, gen_cfg, data):
    again = tmp_path / "again.jsonl"
    main(["gen", "--config", str(gen_cfg), "--count", "4", "--seed", "1", "--out", str(again)])
    assert again.read_bytes() == data.read_bytes()


def test_gen_bad_range(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"kind": "sawtooth", "n_range": [10, 2]}))
    assert main(["gen", "--config", str(cfg), "--count", "2", "--out", str(tmp_path / "x.jsonl")]) == EXIT_USAGE
    assert not (tmp_path / "x.jsonl").exists()


def test_gen_missing_config_and_bad_args(tmp_path):
    assert main(["gen", "--config", str(tmp_path / "nope.json"), "--count", "1", "--out", "x"]) == EXIT_USAGE
    assert main(["gen", "--count", "1"]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE


# -- train ------------------------------------------------------------------------


def test_train_missing_data(tmp_path, train_cfg):
    rc = main(["train", "--config", str(train_cfg), "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "ck.npz")])
    assert rc == EXIT_USAGE


def test_train_unknown_config_key(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"network": {"widths": [1, 2, 1]}, "train": {"stepz": 3}}))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "ck.npz")]) == EXIT_USAGE


def test_train_dry_run_writes_nothing(tmp_path, train_cfg, data, capsys):
    out = tmp_path / "ck.npz"
    assert main(["train", "--config", str(train_cfg), "--data", str(data), "--out", str(out), "--dry-run"]) == EXIT_OK
    assert "steps=4" in capsys.readouterr().out
    assert not out.exists()


def test_train_resume_matches_straight_run(tmp_path, train_cfg, data):
    straight = tmp_path / "a.npz"
    assert main(["train", "--config", str(train_cfg), "--data", str(data), "--out", str(straight)]) == EXIT_OK

    raw = json.loads(train_cfg.read_text())
    cfg, tcfg = T.network_config_from_dict(raw["network"]), T.train_config_from_dict(raw["train"])
    half, _ = T.train(cfg, tcfg, load_tasks(data), until=2)
    resumed = tmp_path / "b.npz"
    T.save_checkpoint(resumed, cfg, tcfg, half)
    assert main(["train", "--config", str(train_cfg), "--data", str(data), "--out", str(resumed), "--resume"]) == EXIT_OK

    _, _, a = T.load_checkpoint(straight)
    _, _, b = T.load_checkpoint(resumed)
    assert a.step == b.step == 4
    for x, y in zip(jax.tree_util.tree_leaves(a.params), jax.tree_util.tree_leaves(b.params)):
        np.testing.assert_allclose(x, y, atol=1e-12, rtol=0)
    with (tmp_path / "b.trace.csv").open() as fh:
        assert [int(r["step"]) for r in csv.DictReader(fh)] == [2, 3]


def test_train_resume_rejects_other_config(tmp_path, train_cfg, data):
    out = tmp_path / "ck.npz"
    main(["train", "--config", str(train_cfg), "--data", str(data), "--out", str(out)])
    assert main(["train", "--config", str(train_cfg), "--data", str(data), "--out", str(out), "--resume", "--seed", "9"]) == EXIT_USAGE


# -- eval -------------------------------------------------------------------------


@pytest.fixture
def checkpoint(tmp_path, train_cfg, data):
    out = tmp_path / "ck.npz"
    assert main(["train", "--config", str(train_cfg), "--data", str(data), "--out", str(out)]) == EXIT_OK
    return out


@pytest.mark.parametrize("metrics", ["", "lppd,auc"])
def test_eval_bad_metrics(tmp_path, checkpoint, data, metrics):
    rc = main(["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--metrics", metrics, "--out", str(tmp_path / "m.json")])
    assert rc == EXIT_USAGE


def test_eval_is_idempotent(tmp_path, checkpoint, data):
    args = ["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--metrics", "lppd,mae,elbo", "--num-samples", "8"]
    main(args + ["--out", str(tmp_path / "a.json")])
    main(args + ["--out", str(tmp_path / "b.json")])
    a = json.loads((tmp_path / "a.json").read_text())
    assert [m["metric"] for m in a["metrics"]] == ["lppd", "mae", "elbo"]
    assert all(len(m["per_task"]) == 4 for m in a["metrics"])
    assert a["metrics"] == json.loads((tmp_path / "b.json").read_text())["metrics"]


def test_eval_missing_checkpoint(tmp_path, data):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.npz"), "--data", str(data), "--out", str(tmp_path / "m.json")]) == EXIT_USAGE


# -- klgap ------------------------------------------------------------------------


def test_klgap_dry_run_counts_fits(tmp_path, capsys):
    assert main(["klgap", "--dry-run", "--out", str(tmp_path / "k.csv")]) == EXIT_OK
    assert "40 fits" in capsys.readouterr().out


def test_klgap_unknown_method(tmp_path):
    cfg = tmp_path / "k.json"
    cfg.write_text(json.dumps({"methods": ["svgd"]}))
    assert main(["klgap", "--config", str(cfg), "--out", str(tmp_path / "k.csv")]) == EXIT_USAGE


def test_klgap_csv_schema(tmp_path):
    cfg = tmp_path / "k.json"
    small = {
        "widths": [1, 3, 1],
        "sigma_grid": [0.3, 1.0],
        "methods": ["mfvi", "bnnp"],
        "steps": 20,
        "bnnp_steps": 5,
        "elbo_samples": 50,
        "lml_samples": 2000,
        "inference_hidden": [8],
    }
    cfg.write_text(json.dumps(small))
    out = tmp_path / "k.csv"
    assert main(["klgap", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    with out.open() as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    assert reader.fieldnames == ["method", "sigma_y", "seed", "elbo", "elbo_stderr", "lml", "lml_stderr", "kl"]
    assert len(rows) == 4
    for r in rows:
        assert float(r["kl"]) == pytest.approx(float(r["lml"]) - float(r["elbo"]))
