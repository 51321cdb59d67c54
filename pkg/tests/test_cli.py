import json

import pandas as pd
import pytest

from hdblock.blocking import lsh_probability
from hdblock.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from hdblock.datasets import make_person_records

CONFIG = """\
columns:
  - {column: first_name}
  - {column: last_name}
  - {column: city}
  - {column: zip}
"""


@pytest.fixture
def fixture_dir(tmp_path):
    make_person_records(2000, seed=3).to_csv(tmp_path / "people.csv", index=False)
    (tmp_path / "config.yaml").write_text(CONFIG)
    return tmp_path


def block(d, out, *extra):
    return main(["block", str(d / "people.csv"), "--config", str(d / "config.yaml"), "--out", str(out),
                 "--max-block-size", "40", *extra])


def test_block_writes_outputs(fixture_dir):
    out = fixture_dir / "run"
    assert block(fixture_dir, out) == EXIT_OK
    assert {p.name for p in out.iterdir()} == {"pairs.csv", "blocks.txt", "stats.json", "timings.json"}
    stats = json.loads((out / "stats.json").read_text())
    assert stats["format"] == "hdb-stats/1" and stats["records"] == 2000
    assert stats["pairs"] == len((out / "pairs.csv").read_text().splitlines()) - 1
    first = stats["iterations"][0]
    assert first["candidate_occurrences"] == stats["key_occurrences"]


def test_block_is_deterministic_across_threads(fixture_dir):
    a, b, c = fixture_dir / "a", fixture_dir / "b", fixture_dir / "c"
    assert block(fixture_dir, a) == EXIT_OK
    assert block(fixture_dir, b) == EXIT_OK
    assert block(fixture_dir, c, "--threads", "4", "--partitions", "16") == EXIT_OK
    for name in ("pairs.csv", "blocks.txt", "stats.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()


def test_threads_env_default(fixture_dir, monkeypatch):
    monkeypatch.setenv("HDBLOCK_THREADS", "3")
    assert block(fixture_dir, fixture_dir / "env") == EXIT_OK
    assert block(fixture_dir, fixture_dir / "one", "--threads", "1") == EXIT_OK
    assert (fixture_dir / "env/pairs.csv").read_bytes() == (fixture_dir / "one/pairs.csv").read_bytes()


def test_jsonl_input_and_multi_valued(tmp_path):
    rows = [{"name": ["ann", "anne"], "city": "x"}, {"name": "anne", "city": "y"}, {"name": "bob", "city": "x"}]
    (tmp_path / "r.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    (tmp_path / "c.yaml").write_text("columns:\n  - {column: name}\n")
    out = tmp_path / "o"
    assert main(["block", str(tmp_path / "r.jsonl"), "--config", str(tmp_path / "c.yaml"), "--out", str(out)]) == EXIT_OK
    assert (out / "pairs.csv").read_text().splitlines()[1].startswith("0,1,")


def test_missing_input_leaves_no_output(fixture_dir):
    out = fixture_dir / "nothing"
    rc = main(["block", str(fixture_dir / "absent.csv"), "--config", str(fixture_dir / "config.yaml"), "--out", str(out)])
    assert rc == EXIT_DATA and not out.exists()


def test_usage_errors(fixture_dir, capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert block(fixture_dir, fixture_dir / "x", "--max-similarity", "2") == EXIT_USAGE
    assert main(["block", str(fixture_dir / "people.csv"), "--config", str(fixture_dir / "nope.yaml"),
                 "--out", str(fixture_dir / "y")]) == EXIT_USAGE
    assert not (fixture_dir / "x").exists() and not (fixture_dir / "y").exists()


def test_malformed_jsonl_is_data_error(tmp_path):
    (tmp_path / "r.jsonl").write_text('{"a": "x"}\n{oops\n')
    (tmp_path / "c.yaml").write_text("columns:\n  - {column: a}\n")
    rc = main(["block", str(tmp_path / "r.jsonl"), "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA


def test_evaluate_pairs_equal_labels(fixture_dir, capsys):
    out = fixture_dir / "run"
    block(fixture_dir, out)
    labels = fixture_dir / "labels.csv"
    lines = (out / "pairs.csv").read_text().splitlines()[1:]
    labels.write_text("".join(",".join(l.split(",")[:2]) + "\n" for l in lines))
    capsys.readouterr()
    assert main(["evaluate", str(out), str(labels), "--out", str(fixture_dir / "report.json")]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["pair_completeness"] == 1.0 and report["pair_quality"] == 1.0
    assert report["format"] == "hdb-eval/1" and report["algorithm"] == "hdb"
    assert json.loads((fixture_dir / "report.json").read_text()) == report
    assert main(["evaluate", str(out), str(labels), "--partial-labels"]) == EXIT_OK
    assert "pair_quality" not in json.loads(capsys.readouterr().out)


def test_evaluate_empty_labels(fixture_dir):
    out = fixture_dir / "run"
    block(fixture_dir, out)
    (fixture_dir / "empty.csv").write_text("rid1,rid2\n")
    assert main(["evaluate", str(out), str(fixture_dir / "empty.csv")]) == EXIT_DATA
    assert main(["evaluate", str(out), str(fixture_dir / "missing.csv")]) == EXIT_DATA


def test_threshold_algorithm(fixture_dir):
    out = fixture_dir / "thr"
    assert block(fixture_dir, out, "--algorithm", "threshold") == EXIT_OK
    assert not (out / "blocks.txt").exists()


def test_lsh_curve_identity(capsys):
    assert main(["lsh-curve", "-b", "1", "-w", "1", "--grid", "0,0.25,0.5,1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "j,closed_form"
    assert [float(l.split(",")[0]) for l in lines[1:]] == [float(l.split(",")[1]) for l in lines[1:]]


def test_lsh_curve_monte_carlo(tmp_path):
    path = tmp_path / "curve.csv"
    assert main(["lsh-curve", "-b", "14", "-w", "4", "--grid", "0.8", "--samples", "10000", "--out", str(path)]) == EXIT_OK
    df = pd.read_csv(path)
    assert list(df.columns) == ["j", "closed_form", "monte_carlo"]
    assert df.closed_form[0] == pytest.approx(lsh_probability(14, 4, 0.8), abs=1e-5)
    assert abs(df.monte_carlo[0] - df.closed_form[0]) <= 0.02


@pytest.mark.parametrize("argv", [["-b", "0", "-w", "4"], ["-b", "2", "-w", "4", "--grid", "1.5"]])
def test_lsh_curve_bad_args(argv):
    assert main(["lsh-curve", *argv]) == EXIT_USAGE


def test_stats_command(fixture_dir, capsys):
    assert main(["stats", str(fixture_dir / "people.csv"), "--config", str(fixture_dir / "config.yaml"),
                 "--max-block-size", "40", "--naive"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["threshold_pairs"] <= report["naive_pairs"]
    assert report["oversized_blocks"] > 0
