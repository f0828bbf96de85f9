import json

import pytest

from cupart import cli, evaluation


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    cap = capsys.readouterr()
    run.err = cap.err
    return rc, cap.out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--seed", "1", "--count", "4", "--width", "128", "--height", "128",
                     "--out", str(d / "src")]) == 0
    assert cli.main(["build-db", str(d / "src"), "--out", str(d / "db.cphs")]) == 0
    assert cli.main(["train-cnn", "--db", str(d / "db.json"), "--iters", "3", "--batch", "8",
                     "--out", str(d / "cnn.ethm")]) == 0
    return d


def test_eval_with_oracle(workdir, capsys):
    rc, out = run(capsys, "eval", "--db", workdir / "db.json", "--model", "oracle")
    rep = json.loads(out)
    assert rc == 0 and rep["rd_delta_pct"] == 0.0
    assert 1 <= rep["min_count"] and rep["max_count"] <= 64


def test_eval_deterministic(workdir, capsys):
    reps = []
    for name in ("a.json", "b.json"):
        rc, _ = run(capsys, "eval", "--db", workdir / "db.json", "--model", workdir / "cnn.ethm",
                    "--out", workdir / name)
        assert rc == 0
        reps.append(json.loads((workdir / name).read_text()))
    assert evaluation.strip_timing(reps[0]) == evaluation.strip_timing(reps[1])
    assert "timing" in reps[0]


def test_sweep_cli(workdir, capsys):
    rc, out = run(capsys, "sweep", "--db", workdir / "db.json", "--model", workdir / "cnn.ethm",
                  "--d-values", "0", "0.5", "1", "--csv", workdir / "s.csv")
    rep = json.loads(out)
    assert rc == 0 and rep["violations"] == [] and len(rep["points"]) == 3
    assert (workdir / "s.csv").exists()


def test_mode_mismatch(workdir, tmp_path, capsys):
    assert cli.main(["gen-data", "--kind", "sequence", "--count", "1", "--frames", "3",
                     "--width", "64", "--height", "64", "--out", str(tmp_path / "seq")]) == 0
    assert cli.main(["build-db", str(tmp_path / "seq"), "--mode", "inter",
                     "--out", str(tmp_path / "inter.cphs")]) == 0
    capsys.readouterr()
    rc, _ = run(capsys, "eval", "--db", tmp_path / "inter.json", "--model", workdir / "cnn.ethm")
    assert rc == cli.EXIT_DATA and "mode" in run.err
    rc, out = run(capsys, "depth-corr", "--db", tmp_path / "inter.json", "--distances", "1", "2",
                  "--gop", "1")
    assert rc == 0 and set(json.loads(out)["per_qp"]) == {"22", "27", "32", "37"}
    assert run(capsys, "depth-corr", "--db", workdir / "db.json")[0] == cli.EXIT_DATA  # stills


def test_verify_tables(capsys):
    rc, out = run(capsys, "verify-tables")
    assert rc == 0 and json.loads(out)["ok"]
    rc, out = run(capsys, "verify-tables", "--perturb", "bias")
    assert rc == cli.EXIT_VERIFY and json.loads(out)["failed"]
    rc, out = run(capsys, "verify-tables", "--perturb", "hidden63")
    assert rc == cli.EXIT_VERIFY


def test_usage_and_data_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--d", "1.5"])
    assert e.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--qp-list", "22,x"])
    assert e.value.code == cli.EXIT_USAGE
    assert cli.main(["eval", "--model", "oracle"]) == cli.EXIT_USAGE  # no --db
    assert cli.main(["eval", "--db", str(tmp_path / "none.json"), "--model", "oracle"]) == cli.EXIT_DATA


def test_split_db(workdir, capsys):
    rc, out = run(capsys, "split-db", "--db", workdir / "db.json", "--ratios", "0.5", "0.25", "0.25")
    assert rc == 0 and sum(v["sources"] for v in json.loads(out).values()) == 4
