from __future__ import annotations

import csv

import pytest

from naviformer.cli import main
from naviformer.core import read_instances
from naviformer.env import read_traces


def test_end_to_end(tmp_path, capsys):
    data = tmp_path / "data.jsonl"
    assert main(["generate", "--n", "10", "--obstacles", "3", "6", "--budget", "1.5",
                 "--count", "6", "--out", str(data), "--seed", "3"]) == 0
    assert len(read_instances(data)) == 6

    run = tmp_path / "run"
    assert main(["train", "--micro", "--iterations", "2", "--batch", "4", "--out", str(run)]) == 0
    ckpt = run / "model.ckpt"
    assert ckpt.exists()

    traces = tmp_path / "nf.jsonl"
    assert main(["eval", "--checkpoint", str(ckpt), "--instance-file", str(data),
                 "--out", str(traces)]) == 0
    assert len(read_traces(traces)) == 6

    plan = tmp_path / "ts.jsonl"
    assert main(["plan", "--algo", "two-step-greedy-astar", "--instance-file", str(data),
                 "--out", str(plan)]) == 0
    assert all(t.algorithm == "two-step-greedy-astar" for t in read_traces(plan))

    out = tmp_path / "cmp"
    assert main(["compare", "--dataset", str(data), "--algo", f"naviformer={ckpt}",
                 "--algo", "two-step-greedy-astar", "--algo", f"traces={plan}",
                 "--out", str(out), "--no-plots"]) == 0
    with open(out / "comparison.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["naviformer", "two-step-greedy-astar", "ts"]
    assert "success" in capsys.readouterr().out


def test_missing_checkpoint(tmp_path):
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--instance-file", "x"])


def test_plan_needs_checkpoint(tmp_path):
    data = tmp_path / "d.jsonl"
    main(["generate", "--n", "5", "--count", "1", "--out", str(data)])
    with pytest.raises(SystemExit):
        main(["plan", "--algo", "naviformer", "--instance-file", str(data), "--out", str(tmp_path / "o")])
