import csv
import json
import subprocess
import sys

import pytest

from hotcount.cli import main
from hotcount.service.snapshot import load_snapshot_file

SCHEMA = {
    "features": [{"name": "user"}, {"name": "item"}, {"name": "price", "kind": "continuous"}],
    "label": {"name": "click", "values": ["0", "1"]},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("PYRAMID_SEED", "11")
    (tmp_path / "schema.json").write_text(json.dumps(SCHEMA))
    (tmp_path / "config.json").write_text(json.dumps({
        "sketch": {"width": 1024},
        "privacy": {"epsilon": 1.0},
        "policy": {"retention": 3, "hot_capacity": 500},
        "reserve_fraction": 0.1,
    }))
    with open(tmp_path / "rows.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["user", "item", "price", "click", "p"])
        for i in range(300):
            w.writerow([i % 10, i % 4, i % 17, int(i % 10 < 3), 0.5 if i % 5 == 0 else ""])
    with open(tmp_path / "rows.jsonl", "w") as f:
        for i in range(20):
            f.write(json.dumps({"user": str(i % 10), "item": str(i % 4), "price": 3.0, "click": "1"}) + "\n")
    return tmp_path


def run(workdir, *args, capsys=None):
    code = main(["--state", str(workdir / "state"), *args])
    out = capsys.readouterr().out if capsys else ""
    return code, out


class TestCLI:
    def test_pipeline(self, workdir, capsys):
        code, out = run(workdir, "ingest", "--schema", str(workdir / "schema.json"),
                        "--config", str(workdir / "config.json"), "--input", str(workdir / "rows.csv"), capsys=capsys)
        assert code == 0 and json.loads(out)["ingested"] == 300
        code, out = run(workdir, "ingest", "--input", str(workdir / "rows.jsonl"), "--format", "jsonl", capsys=capsys)
        assert code == 0
        code, out = run(workdir, "rollover", capsys=capsys)
        assert json.loads(out)["event"]["reason"] == "window_sealed"

        snap = workdir / "view.pyrc"
        assert run(workdir, "snapshot", "save", str(snap), "--view-only", capsys=capsys)[0] == 0
        assert [w.window_id for w in load_snapshot_file(snap).windows] == [0]

        out_file = workdir / "feat.jsonl"
        code, _ = run(workdir, "featurize", "--snapshot", str(snap), "--input", str(workdir / "rows.jsonl"),
                      "--out", str(out_file), capsys=capsys)
        lines = out_file.read_text().splitlines()
        assert code == 0 and len(lines) == 20
        assert {e["source"] for e in json.loads(lines[0])["entries"]} == {"user", "item", "price"}

        ts = workdir / "train.jsonl"
        assert run(workdir, "trainset", "--out", str(ts), capsys=capsys)[0] == 0
        assert len(ts.read_text().splitlines()) == 320

        code, out = run(workdir, "weights", "--quantile", "0.5", capsys=capsys)
        assert code == 0 and set(json.loads(out)["weights"]) == {"user", "item", "price"}
        code, out = run(workdir, "weights", "--private", "--epsilon", "0.1", "--apply", capsys=capsys)
        assert code == 0 and json.loads(out)["applied"]

        code, out = run(workdir, "select-groups", "--max-groups", "5", "--max-size", "2", capsys=capsys)
        assert code == 0 and isinstance(json.loads(out), list)

        ledger_before = load_snapshot_file(snap).ledger
        full = workdir / "full.pyrc"
        run(workdir, "snapshot", "save", str(full), capsys=capsys)
        code, out = run(workdir, "snapshot", "load", str(full), capsys=capsys)
        assert code == 0 and json.loads(out)["populating_window"] == 1
        assert ledger_before.spent(0) == pytest.approx(0.9)

    def test_budget_overrun_reported(self, workdir, capsys):
        run(workdir, "ingest", "--schema", str(workdir / "schema.json"),
            "--config", str(workdir / "config.json"), "--input", str(workdir / "rows.csv"), capsys=capsys)
        capsys.readouterr()
        code = main(["--state", str(workdir / "state"), "weights", "--private", "--epsilon", "0.5"])
        assert code == 1
        assert "would use" in capsys.readouterr().err

    def test_missing_state(self, workdir, capsys):
        code, _ = run(workdir, "rollover", capsys=capsys)
        assert code == 1

    def test_seed_reproducible(self, workdir, capsys):
        for name in ("a", "b"):
            main(["--state", str(workdir / name), "ingest", "--schema", str(workdir / "schema.json"),
                  "--config", str(workdir / "config.json"), "--input", str(workdir / "rows.csv")])
            main(["--state", str(workdir / name), "rollover"])
        assert (workdir / "a" / "engine.pyrc").read_bytes() == (workdir / "b" / "engine.pyrc").read_bytes()

    def test_bench_convergence(self, workdir):
        cfg = workdir / "h.json"
        cfg.write_text(json.dumps({"synthetic": {"n_users": 50, "n_items": 10, "n_observations": 3000},
                                   "fractions": [0.5], "sketch_width": 256}))
        out = workdir / "report.csv"
        assert main(["bench", "convergence", "--config", str(cfg), "--out", str(out)]) == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert [r["arm"] for r in rows] == ["raw", "count"]
        assert all(r["seed"] == "11" for r in rows)

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "hotcount", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "ingest" in r.stdout
