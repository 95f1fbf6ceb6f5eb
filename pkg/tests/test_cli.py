"""End-to-end tests of the command line against a tiny saved snapshot"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import pytest

from evolving_solver.engine.dsl_env import load_tasks
from evolving_solver.engine.snapshot import load_snapshot, save_snapshot
from evolving_solver.harness.cli import main

from .conftest import make_net

# Disable logging during tests; the cli logger stays on for caplog
for name in ("engine.evolution_loop", "engine.search", "engine.grpo", "engine.snapshot", "harness.runner"):
    logging.getLogger(f"evolving_solver.{name}").setLevel(logging.CRITICAL)

TINY_CONFIG = """\
method: greedy
seeds: [0, 1]
best_of_n: 2
net:
  d_model: 16
  n_layers: 1
  n_heads: 2
  ff_mult: 2
  context: 256
evolution:
  search:
    k: 2
    max_depth: 3
    max_simulations: 3
    max_new_tokens: 8
"""


@dataclass
class Workspace:
    root: Path
    snapshot: Path
    suite: Path
    config: Path

    def run(self, command: str, out: Path, *extra: str) -> int:
        return main(
            [
                command,
                "--config", str(self.config),
                "--out", str(out),
                "--snapshot", str(self.snapshot),
                "--suite", str(self.suite),
                "--workers", "1",
                *extra,
            ]
        )  # fmt: skip


@pytest.fixture
def workspace(tmp_path) -> Workspace:
    snapshot = tmp_path / "base.snapshot"
    save_snapshot(snapshot, make_net())
    suite = tmp_path / "suite.jsonl"
    assert main(["gen-tasks", "--n", "2", "--difficulty-mix", "1:1.0", "--seed", "0", "--out", str(suite)]) == 0
    config = tmp_path / "tiny.yaml"
    config.write_text(TINY_CONFIG)
    return Workspace(root=tmp_path, snapshot=snapshot, suite=suite, config=config)


@pytest.fixture
def solved_run(workspace) -> Path:
    """greedy and best_of_n over 2 tasks x 2 seeds"""
    out = workspace.root / "run"
    assert workspace.run("solve", out, "--method", "greedy,best_of_n") == 0
    return out


def rewrite_first_report(path: Path, **changes) -> None:
    lines = path.read_text().splitlines()
    first = json.loads(lines[0])
    first.update(changes)
    lines[0] = json.dumps(first)
    path.write_text("\n".join(lines) + "\n")


class TestGenTasks:
    """Test suite generation"""

    def test_deterministic_with_default_manifest(self, tmp_path):
        """Same arguments, same bytes; the manifest sits next to the suite"""
        for name in ("a", "b"):
            assert main(["gen-tasks", "--n", "5", "--seed", "3", "--out", str(tmp_path / f"{name}.jsonl")]) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.solutions.jsonl").is_file()
        tasks = load_tasks(tmp_path / "a.jsonl")
        assert len(tasks) == 5
        assert all(t.hidden_solution is None for t in tasks)

    def test_explicit_manifest(self, tmp_path):
        manifest = tmp_path / "hidden" / "answers.jsonl"
        assert main(["gen-tasks", "--n", "2", "--out", str(tmp_path / "s.jsonl"), "--manifest", str(manifest)]) == 0
        assert len(manifest.read_text().splitlines()) == 2

    @pytest.mark.parametrize("mix", ["1:x", "1-0.5", "7:1.0", "1:0.0"])
    def test_bad_mix_is_usage_error(self, tmp_path, mix):
        assert main(["gen-tasks", "--n", "2", "--difficulty-mix", mix, "--out", str(tmp_path / "s.jsonl")]) == 2

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-tasks", "--n", "2"])
        assert exc.value.code == 2


class TestSolve:
    """Test suite runs"""

    def test_run_layout(self, solved_run):
        """Config, per-method reports, traces and summaries, and the combined CSV"""
        assert (solved_run / "config.yaml").is_file()
        for method in ("greedy", "best_of_n"):
            reports = (solved_run / method / "reports.jsonl").read_text().splitlines()
            traces = (solved_run / method / "traces.jsonl").read_text().splitlines()
            assert len(reports) == len(traces) == 4
            assert json.loads((solved_run / method / "summary.json").read_text())["n_reports"] == 4
        frame = pd.read_csv(solved_run / "summary.csv")
        assert len(frame) == 4
        assert list(frame["method"]) == ["greedy", "greedy", "best_of_n", "best_of_n"]

    def test_prints_method_table(self, workspace, capsys):
        assert workspace.run("solve", workspace.root / "run", "--seeds", "0") == 0
        assert capsys.readouterr().out.startswith("| method |")

    def test_adaptive_method(self, workspace):
        """The adaptive method runs end to end and records internalizations"""
        out = workspace.root / "pot"
        assert workspace.run("solve", out, "--method", "pot", "--seeds", "0") == 0
        report = json.loads((out / "pot" / "reports.jsonl").read_text().splitlines()[0])
        assert report["method"] == "pot"
        assert report["ledger"]["backward_count"] == 3 * report["internalizations"]

    def test_dump_dir(self, workspace):
        dump = workspace.root / "dump"
        assert workspace.run("solve", workspace.root / "run", "--method", "search_only", "--seeds", "0", "--dump-dir", str(dump)) == 0
        assert sorted(dump.glob("*.search_only.seed0.tree.json"))

    def test_unknown_method(self, workspace):
        assert workspace.run("solve", workspace.root / "run", "--method", "beam") == 2

    def test_missing_suite(self, workspace):
        workspace.suite.unlink()
        assert workspace.run("solve", workspace.root / "run") == 1

    def test_bad_seeds(self, workspace):
        assert workspace.run("solve", workspace.root / "run", "--seeds", "0,zero") == 2
        assert workspace.run("solve", workspace.root / "run", "--seeds", "1,1") == 2

    def test_missing_snapshot(self, workspace):
        workspace.snapshot.unlink()
        assert workspace.run("solve", workspace.root / "run") == 1


class TestReport:
    """Test recomputation and table output"""

    def test_recompute(self, solved_run, capsys):
        assert main(["report", "--in", str(solved_run)]) == 0
        table = capsys.readouterr().out
        assert table.index("| greedy |") < table.index("| best_of_n |")

    def test_csv_output_file(self, solved_run, tmp_path):
        out = tmp_path / "table.csv"
        assert main(["report", "--in", str(solved_run), "--format", "csv", "--output", str(out)]) == 0
        assert len(pd.read_csv(out)) == 4

    def test_edited_summary_fails(self, solved_run):
        path = solved_run / "greedy" / "summary.json"
        summary = json.loads(path.read_text())
        summary["mean_nodes"] += 1.0
        path.write_text(json.dumps(summary))
        assert main(["report", "--in", str(solved_run)]) == 1

    def test_missing_file_named(self, solved_run, caplog):
        (solved_run / "best_of_n" / "reports.jsonl").unlink()
        with caplog.at_level(logging.ERROR, logger="evolving_solver.harness.cli"):
            assert main(["report", "--in", str(solved_run)]) == 1
        assert "best_of_n/reports.jsonl" in caplog.text

    def test_mixed_fingerprints_need_force(self, solved_run):
        rewrite_first_report(solved_run / "greedy" / "reports.jsonl", config_fingerprint="0" * 64)
        assert main(["report", "--in", str(solved_run)]) == 1
        assert main(["report", "--in", str(solved_run), "--force"]) == 0

    def test_missing_run_dir(self, tmp_path):
        assert main(["report", "--in", str(tmp_path / "nowhere")]) == 1


class TestAblate:
    """Test parameter grids"""

    def test_grid_run_and_report(self, workspace, capsys):
        out = workspace.root / "ablation"
        assert workspace.run("ablate", out, "--grid", "k=1,2", "--seeds", "0") == 0
        for name in ("ablation.jsonl", "ablation.csv", "ablation.md"):
            assert (out / name).is_file()
        assert (out / "k1" / "greedy" / "reports.jsonl").is_file()
        assert len(pd.read_csv(out / "ablation.csv")) == 2
        capsys.readouterr()
        assert main(["report", "--in", str(out)]) == 0
        assert "| k=2 |" in capsys.readouterr().out

    @pytest.mark.parametrize("grid", ["k=", "width=1,2", "rank_lr=4", "k=0"])
    def test_bad_grid(self, workspace, grid):
        assert workspace.run("ablate", workspace.root / "ablation", "--grid", grid) == 2


class TestPretrain:
    def test_tiny_pretrain_writes_snapshot(self, workspace, capsys):
        """A short run writes a loadable snapshot with its loss curve and sanity rates"""
        out = workspace.root / "pre.snapshot"
        argv = [
            "pretrain",
            "--config", str(workspace.config),
            "--n-examples", "32",
            "--difficulty-mix", "1:1.0",
            "--epochs", "1",
            "--batch-size", "16",
            "--heldout", "2",
            "--seed", "0",
            "--out", str(out),
        ]  # fmt: skip
        assert main(argv) == 0
        net, header = load_snapshot(out)
        assert net.config.d_model == 16
        assert len(header["metadata"]["loss_curve"]) == 1
        assert 0.0 <= header["metadata"]["heldout_d1_greedy_solve_rate"] <= 1.0
        assert "checksum" in capsys.readouterr().out


class TestGradCheck:
    def test_random_network_passes(self, capsys):
        """Analytic adapter gradients agree with central differences"""
        assert main(["grad-check", "--groups", "2", "--coords", "6", "--seed", "0"]) == 0
        assert "ok" in capsys.readouterr().out

    def test_invalid_counts(self):
        assert main(["grad-check", "--groups", "0"]) == 2


class TestReplay:
    """Test re-running stored reports"""

    def test_identical(self, solved_run, workspace, capsys):
        reports = solved_run / "best_of_n" / "reports.jsonl"
        assert main(["replay", "--report", str(reports), "--snapshot", str(workspace.snapshot)]) == 0
        assert "4/4" in capsys.readouterr().out

    def test_single_index(self, solved_run, workspace):
        reports = solved_run / "greedy" / "reports.jsonl"
        assert main(["replay", "--report", str(reports), "--index", "3", "--snapshot", str(workspace.snapshot)]) == 0
        assert main(["replay", "--report", str(reports), "--index", "4", "--snapshot", str(workspace.snapshot)]) == 2

    def test_tampered_report_diverges(self, solved_run, workspace):
        reports = solved_run / "greedy" / "reports.jsonl"
        rewrite_first_report(reports, final_program="TAMPERED")
        assert main(["replay", "--report", str(reports), "--snapshot", str(workspace.snapshot)]) == 1

    def test_other_weights_refused(self, solved_run, workspace):
        other = workspace.root / "other.snapshot"
        save_snapshot(other, make_net(seed=7))
        reports = solved_run / "greedy" / "reports.jsonl"
        assert main(["replay", "--report", str(reports), "--snapshot", str(other)]) == 1


@pytest.mark.slow
class TestEndToEnd:
    def test_pretrain_solve_report_replay(self, workspace, capsys):
        """Every method over a pretrained snapshot, then a verified report and a clean replay"""
        snapshot = workspace.root / "pretrained.snapshot"
        argv = [
            "pretrain",
            "--config", str(workspace.config),
            "--n-examples", "400",
            "--difficulty-mix", "1:0.7,2:0.3",
            "--epochs", "2",
            "--heldout", "10",
            "--out", str(snapshot),
        ]  # fmt: skip
        assert main(argv) == 0
        workspace.snapshot = snapshot
        out = workspace.root / "e2e"
        assert workspace.run("solve", out, "--method", "greedy,best_of_n,search_only,pot") == 0
        assert len(pd.read_csv(out / "summary.csv")) == 8
        capsys.readouterr()
        assert main(["report", "--in", str(out)]) == 0
        assert capsys.readouterr().out.count("\n") == 6
        reports = out / "pot" / "reports.jsonl"
        assert main(["replay", "--report", str(reports), "--snapshot", str(snapshot)]) == 0
