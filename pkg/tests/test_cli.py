import csv
import json
import re

import numpy as np
import pytest

from fairgmnn import cli
from fairgmnn import fair_eval as fe
from fairgmnn.core_math import CSR, rng_stream
from fairgmnn.graph_data import NodeData, SparseGraph, dataset_stats, load_dataset, save_dataset
from fairgmnn.models import NonFiniteLossError

BUDGET = ["--reduced-grid", "--pop-size", "3", "--generations", "2", "--max-epochs", "40", "--patience", "10",
          "--em-loops", "2", "--phase-epochs", "10", "--workers", "1"]


@pytest.fixture(scope="module")
def sbm_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sbm")
    assert cli.main(["gen-sbm", "--seed", "2", "--out", str(root / "data"), "--blocks", "50,50,50",
                     "--intra-p", "0.15", "--inter-p", "0.01", "--feature-signal", "0.1"]) == 0
    return root / "data"


def test_gen_sbm_requires_seed(tmp_path, capsys):
    assert cli.main(["gen-sbm", "--out", str(tmp_path / "x")]) == cli.EXIT_INPUT
    assert "--seed" in capsys.readouterr().err


def test_stats(sbm_dir, tmp_path, capsys):
    assert cli.main(["stats", "--dataset", str(sbm_dir), "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "stats.json").read_text())
    g, d = load_dataset(sbm_dir)
    ref = dataset_stats(g, d)
    for key in ("assortativity", "node_count", "edge_count", "category_count", "feature_count"):
        assert body[key] == getattr(ref, key)
    rows = list(csv.reader(open(tmp_path / "label_heatmap.csv")))
    np.testing.assert_allclose(np.array([r[1:] for r in rows[1:]], dtype=float), ref.label_adjacency)


def test_stats_missing_labels(sbm_dir, tmp_path, capsys):
    broken = tmp_path / "broken"
    broken.mkdir()
    for f in sbm_dir.iterdir():
        if f.name != "labels.tsv":
            (broken / f.name).write_bytes(f.read_bytes())
    assert cli.main(["stats", "--dataset", str(broken), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert "labels.tsv" in capsys.readouterr().err


def two_class_fixture(root):
    labels = np.repeat([0, 1], 50)
    g = SparseGraph.from_edges(100, np.arange(99), np.arange(1, 100))
    save_dataset(root, g, NodeData.from_binary(CSR.identity(100), labels, 2, "fixture"))
    return root


def test_make_splits(tmp_path):
    data = two_class_fixture(tmp_path / "data")
    args = ["make-splits", "--dataset", str(data), "--k", "10", "--seed", "4"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "splits.json").read_bytes()
    assert a == (tmp_path / "b" / "splits.json").read_bytes()
    body = json.loads(a)
    assert [len(f) for f in body["folds"]] == [10] * 10
    assert body["config"] == {"k": 10, "seed": 4} and len(body["input_hash"]) == 64
    ss = fe.SplitSet.from_json(a.decode())
    _, d = load_dataset(data)
    assert fe.check_splitset(ss, d) == []


def test_make_splits_too_few_members(tmp_path, capsys):
    data = two_class_fixture(tmp_path / "data")
    assert cli.main(["make-splits", "--dataset", str(data), "--k", "60", "--seed", "1",
                     "--out", str(tmp_path)]) == cli.EXIT_INPUT


def test_missing_stage_exit_codes(sbm_dir, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert cli.main(["select", "--dataset", str(sbm_dir), "--out", out, "--seed", "1", "--k", "3"]) == \
        cli.EXIT_MISSING
    assert "make-splits" in capsys.readouterr().err
    assert cli.main(["make-splits", "--dataset", str(sbm_dir), "--out", out, "--seed", "1", "--k", "3"]) == 0
    assert cli.main(["assess", "--dataset", str(sbm_dir), "--out", out, "--seed", "1", "--k", "3"]) == \
        cli.EXIT_MISSING
    assert "'select'" in capsys.readouterr().err
    assert cli.main(["report", "--out", out]) == cli.EXIT_MISSING


def test_invalid_inputs(sbm_dir, tmp_path):
    assert cli.main(["make-splits", "--dataset", str(sbm_dir), "--out", str(tmp_path)]) == cli.EXIT_INPUT
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["make-splits", "--config", str(bad), "--seed", "1"]) == cli.EXIT_INPUT
    with pytest.raises(SystemExit):
        cli.main(["select", "--model", "gat"])


def run_pipeline(data, out, model="gmnn-gcn", extra=()):
    common = ["--dataset", str(data), "--out", str(out), "--seed", "7", "--k", "3", "--model", model] + BUDGET
    common += list(extra)
    assert cli.main(["make-splits"] + common) == 0
    assert cli.main(["select"] + common) == 0
    assert cli.main(["assess", "--r", "2"] + common) == 0
    assert cli.main(["report", "--out", str(out)]) == 0


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_full_pipeline_reproducible(sbm_dir, tmp_path):
    run_pipeline(sbm_dir, tmp_path / "a")
    run_pipeline(sbm_dir, tmp_path / "b")
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    assert a == b
    table = list(csv.reader(open(tmp_path / "a" / "report.csv")))
    assert [r[0] for r in table] == ["model", "GCN", "GMNN-GCN p_phi", "GMNN-GCN q_theta", "GMNN-GCN best",
                                     "significance"]
    for row in table[1:-1]:
        assert re.fullmatch(r"\d{1,3}\.\d\d \(\d+\.\d\d\)", row[1])
    sel = json.loads((tmp_path / "a" / "selections" / "gmnn-gcn_dense_s1.json").read_text())
    assert sel["config"]["model"] == "gmnn-gcn" and len(sel["input_hash"]) == 64
    assert len(sel["selections"]) == 3
    assess = json.loads((tmp_path / "a" / "assessments" / "gmnn-gcn_dense_s1.json").read_text())
    assert len(assess["runs"]) == 6 and assess["config"]["r"] == 2


def test_stages_idempotent(sbm_dir, tmp_path, monkeypatch):
    run_pipeline(sbm_dir, tmp_path, model="mlp")
    before = snapshot(tmp_path)

    def boom(*a, **kw):
        raise AssertionError("stage recomputed")

    monkeypatch.setattr(fe, "make_splitset", boom)
    monkeypatch.setattr(fe, "select_all", boom)
    monkeypatch.setattr(fe, "assess", boom)
    run_pipeline(sbm_dir, tmp_path, model="mlp")
    assert snapshot(tmp_path) == before


def test_config_file_and_flag_override(sbm_dir, tmp_path):
    toml = tmp_path / "exp.toml"
    toml.write_text('dataset = "%s"\nk = 4\nseed = 3\nout = "%s"\n' % (sbm_dir, tmp_path / "run"))
    assert cli.main(["make-splits", "--config", str(toml)]) == 0
    assert json.loads((tmp_path / "run" / "splits.json").read_text())["config"] == {"k": 4, "seed": 3}
    assert cli.main(["make-splits", "--config", str(toml), "--k", "5"]) == 0
    assert json.loads((tmp_path / "run" / "splits.json").read_text())["config"] == {"k": 5, "seed": 3}
    js = tmp_path / "exp.json"
    js.write_text(json.dumps({"dataset": str(sbm_dir), "k": 3, "seed": 9, "out": str(tmp_path / "run2")}))
    assert cli.main(["make-splits", "--config", str(js)]) == 0


def test_numeric_failure_exit_code(sbm_dir, tmp_path, monkeypatch):
    common = ["--dataset", str(sbm_dir), "--out", str(tmp_path), "--seed", "7", "--k", "3", "--model", "gcn"]
    common += BUDGET
    assert cli.main(["make-splits"] + common) == 0
    assert cli.main(["select"] + common) == 0

    def diverge(*a, **kw):
        raise NonFiniteLossError("nan loss")

    monkeypatch.setattr(fe, "fit", diverge)
    with pytest.warns(UserWarning):
        assert cli.main(["assess", "--r", "1"] + common) == cli.EXIT_NUMERIC


def test_module_entry_point(sbm_dir, tmp_path):
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "fairgmnn", "stats", "--dataset", str(sbm_dir), "--out",
                          str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0 and "assortativity" in out.stdout
