import csv
import json
from pathlib import Path

import pytest

from cmap_lab.cli import main


def _run(tmp, capsys, command, cfg, *extra):
    path = Path(tmp) / f"{command}.json"
    path.write_text(json.dumps(cfg))
    code = main([command, "--config", str(path), *extra])
    out, err = capsys.readouterr()
    return code, (Path(out.strip()) if out.strip() else None), err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small data, classifier and analytic model produced through the CLI."""
    import os
    root = tmp_path_factory.mktemp("cli")
    old = os.environ.get("CMAP_LAB_RUNS_DIR")
    os.environ["CMAP_LAB_RUNS_DIR"] = str(root / "runs")
    try:
        def go(cmd, cfg):
            p = root / f"{cmd}.json"
            p.write_text(json.dumps(cfg))
            assert main([cmd, "--config", str(p)]) == 0
            return sorted((root / "runs").iterdir(), key=lambda q: q.stat().st_mtime)[-1]

        data = go("gen-data", {"spec": {"count": 400, "seed": 5}, "n_train": 300})
        clf = go("train-clf", {"data": str(data / "train"), "test_data": str(data / "test"),
                               "clf": {"epochs": 10, "hidden": [32]}})
        cm = go("train-cm", {"data": str(data / "train"), "backend": "analytic"})
    finally:
        if old is None:
            os.environ.pop("CMAP_LAB_RUNS_DIR")
        else:
            os.environ["CMAP_LAB_RUNS_DIR"] = old
    return {"train": str(data / "train"), "test": str(data / "test"), "clf": str(clf / "clf"),
            "cm": str(cm / "cm")}


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv("CMAP_LAB_RUNS_DIR", str(tmp_path / "runs"))
    return tmp_path


def _outputs(run_dir: Path) -> dict:
    return {p.relative_to(run_dir).as_posix(): p.read_bytes() for p in sorted(run_dir.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".json") and p.name != "run_record.json"}


def test_missing_config_is_validation_error(runs, capsys):
    assert main(["eval", "--config", str(runs / "nope.json")]) == 1
    assert "--config" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["eval"])
    assert info.value.code == 1
    assert "--config" in capsys.readouterr().err


def test_bad_config_contents(runs, capsys):
    (runs / "bad.json").write_text("{not json")
    assert main(["eval", "--config", str(runs / "bad.json")]) == 1
    code, _, err = _run(runs, capsys, "eval", {"unknown_key": 1})
    assert code == 1 and "unknown_key" in err
    code, _, _ = _run(runs, capsys, "eval", {}, "--workers", "0")
    assert code == 1


def test_empty_probe_list_rejected(runs, capsys, pipeline):
    code, run_dir, err = _run(runs, capsys, "observe", {"train": pipeline["train"], "test": pipeline["test"],
                                                       "cm": pipeline["cm"], "clf": pipeline["clf"], "probes": []})
    assert code == 1 and "probe" in err
    rec = json.loads(next((runs / "runs").iterdir()).joinpath("run_record.json").read_text())
    assert rec["status"] == "validation-error" and rec["exit_code"] == 1


def test_runtime_error_exit_code(runs, capsys):
    (runs / "empty").mkdir()
    code, _, err = _run(runs, capsys, "train-clf", {"data": str(runs / "empty")})
    assert code == 2 and err


def test_eval_report_rows_and_record(runs, capsys, pipeline):
    cfg = {"data": pipeline["test"], "clf": pipeline["clf"], "defense": "none", "attack": "pgd",
           "attack_cfg": {"steps": 5}, "n": 30, "replicas": 3}
    code, run_dir, _ = _run(runs, capsys, "eval", cfg, "--set", "seed=4")
    assert code == 0
    with open(run_dir / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["run"] for r in rows] == ["0", "1", "2", "mean", "std"]
    assert list(rows[0]) == ["run", "defense", "attack", "norm", "epsilon", "standard_acc", "robust_acc"]
    rec = json.loads((run_dir / "run_record.json").read_text())
    assert rec["status"] == "ok" and rec["overrides"] == ["seed=4"] and rec["seeds"]["seed"] == 4
    assert "eval.csv" in rec["files"] and rec["code_version"]
    assert json.loads((run_dir / "effective_config.json").read_text())["seed"] == 4
    for r in range(3):
        assert (run_dir / f"attacks_run{r}.csv").exists()


def test_verify_exit_codes(runs, capsys):
    ok = {"instances": 30, "replay_samples": 1, "replay": {"iterations": 5}}
    code, run_dir, _ = _run(runs, capsys, "verify-prop", ok)
    assert code == 0 and json.loads((run_dir / "prop_report.json").read_text())["passed"]
    strict = {"theorem": {"trials": 10000, "var_tol": 1e-9}, "sigmas": [1.0], "include_root": False}
    code, run_dir, _ = _run(runs, capsys, "verify-theorem", strict)
    assert code == 3 and run_dir is not None
    assert json.loads((run_dir / "run_record.json").read_text())["status"] == "verification-failed"


def test_repeat_runs_bit_identical_across_workers(runs, capsys, pipeline):
    cfg = {"data": pipeline["test"], "clf": pipeline["clf"], "cm": pipeline["cm"], "defense": "cmap",
           "attack": "pgd", "attack_cfg": {"steps": 3}, "purify": {"iterations": 4, "k": 3, "beta": 0.0},
           "n": 6, "replicas": 2, "chunk": 2}
    _, a, _ = _run(runs, capsys, "eval", cfg)
    _, b, _ = _run(runs, capsys, "eval", cfg, "--workers", "2")
    assert a != b
    oa, ob = _outputs(a), _outputs(b)
    assert oa.keys() == ob.keys() and "eval.csv" in oa
    assert all(oa[k] == ob[k] for k in oa)


def test_purify_and_attack_outputs(runs, capsys, pipeline):
    code, run_dir, _ = _run(runs, capsys, "attack", {"data": pipeline["test"], "clf": pipeline["clf"],
                                                     "attack_cfg": {"steps": 3}, "n": 5})
    assert code == 0 and (run_dir / "adversarial").is_dir()
    adv = str(run_dir / "adversarial")
    code, run_dir, _ = _run(runs, capsys, "purify", {"data": adv, "cm": pipeline["cm"], "clf": pipeline["clf"],
                                                     "purify": {"iterations": 3, "k": 2}, "input_kind": "adv"})
    assert code == 0
    results = json.loads((run_dir / "results.json").read_text())
    assert len(results) == 5 and all(sum(r["votes"]) == 2 and r["input_kind"] == "adv" for r in results)
    assert len(list((run_dir / "traces").iterdir())) == 5
