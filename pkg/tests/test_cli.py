import csv
import filecmp
import json

import jsonschema
import numpy as np
import pytest

from jco_mvton.cli import main
from jco_mvton.config import EVAL_REPORT_SCHEMA
from jco_mvton.model import load_checkpoint
from jco_mvton.patches import read_ppm


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds") / "data"
    assert main(["gen-data", "--seed", "0", "--count", "16", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    ck = tmp_path_factory.mktemp("ck") / "ckpt"
    assert main(["train", "--data", str(dataset), "--steps", "500", "--subset", "8",
                 "--policy", "full", "--out", str(ck)]) == 0
    return ck


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / s, b / s) for s in cmp.common_dirs)


def test_gen_data_determinism_and_refusal(tmp_path, capsys):
    code, res = run(capsys, "gen-data", "--seed", 3, "--count", 100, "--out", tmp_path / "a")
    assert code == 0 and res["records"] == 100 and res["all_scores_one"]
    run(capsys, "gen-data", "--seed", 3, "--count", 100, "--out", tmp_path / "b")
    assert same_tree(tmp_path / "a", tmp_path / "b")
    code, err = run(capsys, "gen-data", "--seed", 3, "--count", 100, "--out", tmp_path / "a")
    assert code != 0 and err["error"] == "CliError"
    code, _ = run(capsys, "gen-data", "--seed", 3, "--count", 0, "--out", tmp_path / "e")
    assert code == 0 and json.loads((tmp_path / "e" / "round_0" / "index.json").read_text()) == []


def test_train_zero_steps_is_initialisation(tmp_path, capsys, dataset):
    code, _ = run(capsys, "train", "--data", dataset, "--steps", 0, "--out", tmp_path / "ck")
    assert code == 0
    from jco_mvton.model import JCoModel, ModelConfig

    m, manifest = load_checkpoint(tmp_path / "ck")
    fresh = JCoModel(ModelConfig())
    assert all(np.array_equal(m.params[n].data, fresh.params[n].data) for n in fresh.params)
    assert len(manifest["config_hash"]) == 16


def test_train_conditional_only_prints_audit(tmp_path, capsys, dataset):
    code, res = run(capsys, "train", "--data", dataset, "--steps", 5, "--policy", "conditional_only",
                    "--out", tmp_path / "ck")
    assert code == 0 and res["frozen_audit"]["passed"] and res["frozen_audit"]["checked"] > 0


def test_train_loss_curve_decreases(trained):
    rows = list(csv.DictReader(open(trained / "loss.csv")))
    assert len(rows) == 500
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["final_ma"] < summary["initial_ma"]


def test_train_refuses_mismatched_config(tmp_path, capsys, dataset):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"noise_hw": [16, 16]}}))
    code, err = run(capsys, "train", "--config", cfg, "--data", dataset, "--steps", 1, "--out", tmp_path / "x")
    assert code != 0 and "noise_hw" in err["message"]
    cfg.write_text(json.dumps({"modle": {}}))
    code, err = run(capsys, "train", "--config", cfg, "--data", dataset, "--steps", 1, "--out", tmp_path / "x")
    assert code != 0 and err["error"] == "ContractError"


def test_sample_determinism_and_steps(tmp_path, capsys, dataset, trained):
    p, g = dataset / "round_0" / "00000_P.ppm", dataset / "round_0" / "00000_G.ppm"
    outs = {}
    for tag, steps in (("a", 20), ("b", 20), ("c", 1)):
        code, side = run(capsys, "sample", "--ckpt", trained, "--person", p, "--garment", g,
                         "--steps", steps, "--out", tmp_path / f"{tag}.ppm")
        assert code == 0 and side["steps"] == steps
        outs[tag] = (tmp_path / f"{tag}.ppm").read_bytes()
    assert outs["a"] == outs["b"] and outs["a"] != outs["c"]
    assert json.loads((tmp_path / "a.json").read_text())["config_hash"]


def test_sample_zero_decode_is_finite_noise(tmp_path, capsys, dataset):
    run(capsys, "train", "--data", dataset, "--steps", 0, "--out", tmp_path / "ck")
    code, _ = run(capsys, "sample", "--ckpt", tmp_path / "ck", "--person", dataset / "round_0" / "00001_P.ppm",
                  "--garment", dataset / "round_0" / "00001_G.ppm", "--steps", 3, "--out", tmp_path / "r.ppm")
    assert code == 0 and np.all(np.isfinite(read_ppm(tmp_path / "r.ppm")))


def test_sample_refuses_missing_checkpoint(tmp_path, capsys, dataset):
    code, err = run(capsys, "sample", "--ckpt", tmp_path / "nope", "--person", dataset / "round_0" / "00000_P.ppm",
                    "--garment", dataset / "round_0" / "00000_G.ppm", "--out", tmp_path / "r.ppm")
    assert code != 0 and "error" in err


def test_eval_oracle_and_schema(tmp_path, capsys, dataset, trained):
    code, res = run(capsys, "eval", "--oracle", "--data", dataset, "--report", tmp_path / "o.json")
    assert code == 0 and res["ssim"] == 1.0 and res["toy_frechet"] <= 1e-6
    code, res = run(capsys, "eval", "--ckpt", trained, "--data", dataset, "--limit", 4, "--steps", 10,
                    "--report", tmp_path / "e.json")
    assert code == 0 and res["ssim"] < 1.0
    jsonschema.validate(json.loads((tmp_path / "e.json").read_text()), EVAL_REPORT_SCHEMA)


def test_eval_refuses_empty_dataset(tmp_path, capsys):
    main(["gen-data", "--count", "0", "--out", str(tmp_path / "e")])
    capsys.readouterr()
    code, err = run(capsys, "eval", "--oracle", "--data", tmp_path / "e", "--report", tmp_path / "r.json")
    assert code != 0 and "empty" in err["message"]


def test_ablate_unknown_axis(tmp_path, capsys, dataset):
    code, err = run(capsys, "ablate", "--axis", "depth", "--data", dataset, "--report", tmp_path / "a.json")
    assert code != 0 and err["error"] == "CliError"


def test_ablate_policy_lora_count(tmp_path, capsys, dataset):
    code, rep = run(capsys, "ablate", "--axis", "policy", "--data", dataset, "--steps", 2, "--eval-count", 2,
                    "--report", tmp_path / "a.json")
    assert code == 0
    lora = next(r for r in rep["runs"] if r["tag"] == "conditional_lora")
    assert lora["trainable_parameters"] == lora["lora_closed_form"] == 4 * 2 * 4 * 4 * (64 + 64)


def test_bootstrap_command(tmp_path, capsys, dataset):
    code, rep = run(capsys, "bootstrap", "--oracle", "--data", dataset, "--rounds", 2, "--out", tmp_path / "b")
    assert code == 0 and [r["retention_rate"] for r in rep["rounds"]] == [1.0, 1.0]
    assert (tmp_path / "b" / "round_2" / "index.json").exists()
