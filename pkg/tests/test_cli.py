import csv
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from conftest import make_binary_dataset
from ssme.cli import EXIT_FIT, EXIT_INPUT, EXIT_OK, EXIT_UNESTIMABLE, main
from ssme.data import dump_dataset
from ssme.mixture import FittedMixture

DOCS = Path(__file__).resolve().parents[1] / "docs"
FAST = ["--max-epochs", "15"]


def schema(name):
    return json.loads((DOCS / "schemas" / f"{name}.schema.json").read_text())


def check(path, name):
    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, schema(name))
    return doc


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    groups = ["west" if i % 2 else "east" for i in range(120)]
    ds, _ = make_binary_dataset(n_labeled=20, n_unlabeled=100, n_classifiers=2, groups=groups, seed=1)
    dump_dataset(ds, root / "d.jsonl")
    pool, _ = make_binary_dataset(n_labeled=400, n_unlabeled=0, seed=2)
    dump_dataset(pool, root / "pool.jsonl")
    one = ds.with_labels(np.where(ds.labeled_mask, 1, ds.labels))
    dump_dataset(one, root / "one_class.jsonl")
    dump_dataset(ds.with_labels(np.full(len(ds), -1)), root / "unlabeled.jsonl")
    return root


class TestFit:
    def test_model_and_log(self, data_dir, tmp_path):
        out, log = tmp_path / "m.json", tmp_path / "log.json"
        assert main(["fit", "--input", str(data_dir / "d.jsonl"), "--seed", "7", "--out", str(out), "--log", str(log)] + FAST) == EXIT_OK
        model = check(out, "model")
        assert sum(model["priors"]) == pytest.approx(1.0, abs=1e-12)
        fl = check(log, "fit_log")
        assert fl["epochs"] <= 15 and fl["config"]["seed"] == 7
        assert FittedMixture.load(out).priors == pytest.approx(model["priors"])

    def test_byte_identical(self, data_dir, tmp_path):
        texts = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.json"
            main(["fit", "--input", str(data_dir / "d.jsonl"), "--out", str(out), "--log", str(tmp_path / f"{name}.log")] + FAST)
            texts.append(out.read_bytes())
        assert texts[0] == texts[1]

    def test_missing_input(self, tmp_path, capsys):
        assert main(["fit", "--input", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "m.json")]) == EXIT_INPUT
        assert "not found" in capsys.readouterr().err

    def test_invalid_dataset(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "a", "scores": [[0.5, 0.7]], "label": 0}\n')
        assert main(["fit", "--input", str(bad), "--out", str(tmp_path / "m.json")]) == EXIT_INPUT

    def test_invalid_config(self, data_dir, tmp_path):
        assert main(["fit", "--input", str(data_dir / "d.jsonl"), "--out", str(tmp_path / "m.json"), "--tol", "-1"]) == EXIT_INPUT

    def test_fit_failure(self, data_dir, tmp_path):
        code = main(["fit", "--input", str(data_dir / "unlabeled.jsonl"), "--out", str(tmp_path / "m.json")])
        assert code == EXIT_FIT


class TestEstimate:
    def test_all_methods(self, data_dir, tmp_path):
        out = tmp_path / "r.json"
        args = ["estimate", "--dataset", str(data_dir / "d.jsonl"), "--methods", "ssme,labeled,pl,ds,mv,ssme-m",
                "--samples", "20", "--out", str(out)] + FAST
        assert main(args) == EXIT_OK
        doc = check(out, "estimate")
        assert [r["method"] for r in doc["reports"]] == ["SSME", "labeled", "PL", "DS", "MV", "SSME-M"]
        for rep in doc["reports"]:
            assert {(e["classifier"], e["metric"]) for e in rep["estimates"]} == {
                (j, m) for j in range(2) for m in ("acc", "ece", "auc", "auprc")
            }

    def test_samples_echoed(self, data_dir, tmp_path):
        out = tmp_path / "r.json"
        main(["estimate", "--dataset", str(data_dir / "d.jsonl"), "--metrics", "acc,ece", "--methods", "ssme,labeled",
              "--samples", "500", "--out", str(out)] + FAST)
        doc = check(out, "estimate")
        assert doc["samples"] == 500 and doc["reports"][0]["samples"] == 500
        assert {e["metric"] for e in doc["reports"][1]["estimates"]} == {"acc", "ece"}

    def test_with_model(self, data_dir, tmp_path):
        model = tmp_path / "m.json"
        main(["fit", "--input", str(data_dir / "d.jsonl"), "--out", str(model), "--log", str(tmp_path / "l.json")] + FAST)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        base = ["estimate", "--dataset", str(data_dir / "d.jsonl"), "--samples", "30"]
        assert main(base + ["--model", str(model), "--out", str(a)]) == EXIT_OK
        assert main(base + FAST + ["--out", str(b)]) == EXIT_OK
        assert check(a, "estimate")["reports"][0]["estimates"] == check(b, "estimate")["reports"][0]["estimates"]

    def test_byte_identical(self, data_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.json"
            main(["estimate", "--dataset", str(data_dir / "d.jsonl"), "--methods", "ssme,ds", "--samples", "25",
                  "--seed", "3", "--out", str(out)] + FAST)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_subgroup(self, data_dir, tmp_path):
        out = tmp_path / "r.json"
        assert main(["estimate", "--dataset", str(data_dir / "d.jsonl"), "--methods", "ssme,labeled",
                     "--subgroup", "west", "--samples", "10", "--out", str(out)] + FAST) == EXIT_OK
        doc = check(out, "estimate")
        assert doc["subgroup"] == "west"
        assert doc["reports"][0]["flags"]["n_members"] == 60
        assert doc["reports"][1]["flags"]["n_used"] == 10

    def test_subgroup_errors(self, data_dir, tmp_path):
        base = ["estimate", "--dataset", str(data_dir / "d.jsonl"), "--samples", "5", "--out", str(tmp_path / "r.json")] + FAST
        assert main(base + ["--subgroup", "north"]) == EXIT_INPUT
        assert main(base + ["--subgroup", "west", "--methods", "ds"]) == EXIT_INPUT

    def test_unestimable_only_metric(self, data_dir, tmp_path):
        base = ["estimate", "--dataset", str(data_dir / "one_class.jsonl"), "--methods", "labeled", "--out", str(tmp_path / "r.json")]
        assert main(base + ["--metrics", "auc"]) == EXIT_UNESTIMABLE
        check(tmp_path / "r.json", "estimate")
        assert main(base + ["--metrics", "auc,acc"]) == EXIT_OK

    def test_bad_flags(self, data_dir, tmp_path):
        base = ["estimate", "--dataset", str(data_dir / "d.jsonl"), "--out", str(tmp_path / "r.json")]
        assert main(base + ["--methods", "magic"]) == EXIT_INPUT
        assert main(base + ["--metrics", "ece_top", "--bins", "1"]) == EXIT_INPUT
        assert main(base + ["--samples", "0"]) == EXIT_INPUT

    def test_model_mismatch(self, data_dir, tmp_path):
        ds, _ = make_binary_dataset(n_classifiers=3, seed=4)
        dump_dataset(ds, tmp_path / "three.jsonl")
        model = tmp_path / "m.json"
        main(["fit", "--input", str(data_dir / "d.jsonl"), "--out", str(model), "--log", str(tmp_path / "l.json")] + FAST)
        assert main(["estimate", "--dataset", str(tmp_path / "three.jsonl"), "--model", str(model)]) == EXIT_INPUT


class TestSynth:
    def test_bound_only(self, tmp_path):
        out = tmp_path / "b.json"
        assert main(["synth", "--bound-only", "--nu", "1000", "--nl", "20", "--d", "2", "--norm", "1", "--p", "0.1",
                     "--summary", str(out)]) == EXIT_OK
        doc = check(out, "bound")
        assert doc["eps_c"] == pytest.approx(0.4513, abs=1e-3)

    def test_bound_only_needs_d(self, tmp_path):
        assert main(["synth", "--bound-only", "--nu", "1000", "--norm", "1"]) == EXIT_INPUT
        assert main(["synth", "--bound-only", "--nu", "1000", "--d", "2", "--norm", "0"]) == EXIT_INPUT

    def grid_args(self, tmp_path, tag, threads):
        return ["synth", "--norms", "0.75,1.5", "--dims", "2", "--nu", "20,40", "--runs", "2", "--n-eval", "1000",
                "--samples", "10", "--methods", "labeled,ssme", "--seed", "1", "--threads", str(threads),
                "--out", str(tmp_path / f"{tag}.csv"), "--summary", str(tmp_path / f"{tag}.json")] + ["--max-epochs", "5"]

    def test_grid_outputs_and_determinism(self, tmp_path):
        assert main(self.grid_args(tmp_path, "a", 1)) == EXIT_OK
        assert main(self.grid_args(tmp_path, "b", 4)) == EXIT_OK
        rows = list(csv.DictReader((tmp_path / "a.csv").open()))
        assert len(rows) == 2 * 2 * 2 * 2 * 4
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        a = check(tmp_path / "a.json", "synth_summary")
        b = check(tmp_path / "b.json", "synth_summary")
        a.pop("results_csv"), b.pop("results_csv")
        assert a == b

    def test_invalid_grid(self, tmp_path):
        assert main(["synth", "--norms", "-1", "--out", str(tmp_path / "x.csv")]) == EXIT_INPUT
        assert main(["synth", "--n-eval", "10", "--out", str(tmp_path / "x.csv")]) == EXIT_INPUT
        assert main(["synth", "--methods", "nope", "--out", str(tmp_path / "x.csv")]) == EXIT_INPUT


class TestEss:
    def test_small_pool_rejected(self, data_dir, tmp_path):
        code = main(["ess", "--dataset", str(data_dir / "pool.jsonl"), "--out", str(tmp_path / "e.json")])
        assert code == EXIT_INPUT

    def test_truncated(self, data_dir, tmp_path):
        out = tmp_path / "e.json"
        code = main(["ess", "--dataset", str(data_dir / "pool.jsonl"), "--method", "labeled", "--nl", "50", "--nu", "0",
                     "--reserve", "200", "--runs", "3", "--allow-truncated", "--out", str(out)])
        assert code == EXIT_OK
        doc = check(out, "ess")
        assert doc["truncated"] and doc["curve"]["truncated"]
        assert doc["ess"] == 50

    def test_full_curve(self, tmp_path):
        pool, _ = make_binary_dataset(n_labeled=2000, n_unlabeled=0, seed=5)
        dump_dataset(pool, tmp_path / "big.jsonl")
        out = tmp_path / "e.json"
        code = main(["ess", "--dataset", str(tmp_path / "big.jsonl"), "--method", "labeled", "--nl", "200", "--nu", "0",
                     "--runs", "2", "--out", str(out)])
        assert code == EXIT_OK
        doc = check(out, "ess")
        assert len(doc["curve"]["sizes"]) == 199 and not doc["truncated"]
        assert abs(doc["ess"] - 200) <= 5


def test_module_entry_point(data_dir, tmp_path):
    out = tmp_path / "b.json"
    proc = subprocess.run(
        [sys.executable, "-m", "ssme", "synth", "--bound-only", "--nu", "1000", "--d", "2", "--norm", "1", "--summary", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert check(out, "bound")["tag"] == "ok"
