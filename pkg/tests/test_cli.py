"""Command-line behavior: dispatch, config precedence, exit codes, artifacts."""

import json

import numpy as np
import pytest

from mixrec import cli


FAST = ["--max-len", "5", "--dim", "8", "--seq-hidden", "8", "--ch-hidden", "8",
        "--layers", "1", "--dropout", "0", "--max-epochs", "2", "--batch-size", "32",
        "--eval-negatives", "8"]


def synth(tmp_path, name="data", **kw):
    out = tmp_path / name
    args = ["synth", "--users", "25", "--len", "12", "--vocab", "20", "--kstar", "1",
            "--max-len", "5", "--seed", "3", "--out", str(out)]
    for key, val in kw.items():
        args += [f"--{key}", str(val)]
    assert cli.main(args) == 0
    return out / "dataset.jsonl"


class TestDispatchAndExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert cli.main(["frobnicate"]) == 2

    def test_unknown_flag_is_usage_error(self):
        assert cli.main(["synth", "--no-such-flag", "1", "--out", "/tmp/x"]) == 2

    def test_missing_input_file_is_data_error(self, tmp_path):
        code = cli.main(["ingest", "--input", str(tmp_path / "absent.dat"),
                         "--out", str(tmp_path / "out")])
        assert code == 3

    def test_eval_without_checkpoint_is_data_error(self, tmp_path):
        dataset = synth(tmp_path)
        code = cli.main(["eval", "--dataset", str(dataset),
                         "--checkpoint", str(tmp_path / "missing.bin"),
                         "--out", str(tmp_path / "out")])
        assert code == 3

    def test_train_without_window_is_usage_error(self, tmp_path):
        dataset = synth(tmp_path)
        code = cli.main(["train", "--dataset", str(dataset),
                         "--out", str(tmp_path / "out")] + FAST)
        assert code == 2


class TestConfigResolution:
    def test_file_overrides_defaults_and_flags_override_file(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("users = 11\nvocab = 30  # inline comment\n")
        out = tmp_path / "out"
        assert cli.main(["synth", "--config", str(conf), "--vocab", "25",
                         "--max-len", "5", "--out", str(out)]) == 0
        resolved = dict(
            line.split(" = ") for line in
            (out / "config.resolved").read_text().strip().splitlines())
        assert resolved["users"] == "11"     # from file
        assert resolved["vocab"] == "25"     # flag wins
        assert resolved["len"] == "30"       # built-in default
        assert resolved["seed"] == "0"

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("nonsense = 1\n")
        assert cli.main(["synth", "--config", str(conf),
                         "--out", str(tmp_path / "out")]) == 2

    def test_every_run_directory_archives_resolved_config(self, tmp_path):
        dataset = synth(tmp_path)
        for sub, extra in (
            ("search", ["search", "--K", "1,2"]),
            ("train", ["train", "--k", "2"]),
        ):
            out = tmp_path / sub
            assert cli.main(extra + ["--dataset", str(dataset),
                                     "--out", str(out)] + FAST) == 0
            assert (out / "config.resolved").exists()


class TestPipelines:
    def test_synth_then_search_records_selection(self, tmp_path):
        dataset = synth(tmp_path)
        out = tmp_path / "search"
        assert cli.main(["search", "--dataset", str(dataset), "--K", "1,2",
                         "--out", str(out)] + FAST) == 0
        result = json.loads((out / "search_result.json").read_text())
        assert result["selected_k"] in (1, 2)
        assert len(result["alpha"]) == 2
        trace = [json.loads(line) for line in
                 (out / "search_trace.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in trace] == list(range(1, len(trace) + 1))

    def test_train_eval_roundtrip(self, tmp_path):
        dataset = synth(tmp_path)
        train_out = tmp_path / "train"
        assert cli.main(["train", "--dataset", str(dataset), "--k", "2",
                         "--out", str(train_out)] + FAST) == 0
        eval_out = tmp_path / "eval"
        assert cli.main(["eval", "--dataset", str(dataset),
                         "--checkpoint", str(train_out / "checkpoint.bin"),
                         "--split", "test", "--eval-negatives", "8",
                         "--out", str(eval_out)]) == 0
        record = json.loads((eval_out / "metrics.json").read_text())
        assert record["split"] == "test"
        assert 0.0 <= record["mrr"] <= record["ndcg"] <= record["hr"] <= 1.0

    def test_ingest_reads_moviellens_layout(self, tmp_path):
        rows = []
        rng = np.random.default_rng(0)
        for user in range(1, 7):
            for t in range(12):
                rows.append(f"{user}::{rng.integers(1, 30)}::5::{1000 + t}")
        raw = tmp_path / "ratings.dat"
        raw.write_text("\n".join(rows) + "\n")
        out = tmp_path / "ingested"
        assert cli.main(["ingest", "--input", str(raw), "--format", "movielens",
                         "--min-interactions", "10", "--max-len", "6",
                         "--out", str(out)]) == 0
        summary = json.loads((out / "ingest.json").read_text())
        assert summary["users"] == 6
        assert summary["events"] == 72

    def test_ablate_runs_identity_variants(self, tmp_path):
        dataset = synth(tmp_path)
        out = tmp_path / "ablate"
        assert cli.main(["ablate", "--dataset", str(dataset), "--k", "2",
                         "--out", str(out)] + FAST) == 0
        records = [json.loads(line) for line in
                   (out / "ablate.jsonl").read_text().splitlines()]
        assert [r["variant"] for r in records] == [
            "full", "no_sequence_mixer", "no_channel_mixer"]

    def test_ablate_single_flag_selects_one_variant(self, tmp_path):
        dataset = synth(tmp_path)
        out = tmp_path / "ablate1"
        assert cli.main(["ablate", "--dataset", str(dataset), "--k", "2",
                         "--disable-sequence-mixer", "--out", str(out)] + FAST) == 0
        records = [json.loads(line) for line in
                   (out / "ablate.jsonl").read_text().splitlines()]
        assert [r["variant"] for r in records] == ["full", "no_sequence_mixer"]

    def test_oracle_reports_per_window_results(self, tmp_path):
        dataset = synth(tmp_path)
        out = tmp_path / "oracle"
        assert cli.main(["oracle", "--dataset", str(dataset), "--K", "1,2",
                         "--out", str(out)] + FAST) == 0
        record = json.loads((out / "oracle.json").read_text())
        assert record["best_k"] in (1, 2)
        assert [r["k"] for r in record["per_window"]] == [1, 2]

    def test_sweep_covers_grid(self, tmp_path):
        dataset = synth(tmp_path)
        out = tmp_path / "sweep"
        assert cli.main(["sweep", "--dataset", str(dataset), "--k", "2",
                         "--sweep-layers", "1,2", "--sweep-dims", "8",
                         "--out", str(out)] + FAST) == 0
        records = [json.loads(line) for line in
                   (out / "sweep.jsonl").read_text().splitlines()]
        assert [(r["layers"], r["dim"]) for r in records] == [(1, 8), (2, 8)]

    def test_bench_reports_exponent(self, tmp_path):
        out = tmp_path / "bench"
        assert cli.main(["bench", "--bench-lens", "8,16", "--reps", "3",
                         "--dim", "8", "--seq-hidden", "8", "--ch-hidden", "8",
                         "--layers", "1", "--dropout", "0",
                         "--out", str(out)]) == 0
        summary = json.loads((out / "bench_summary.json").read_text())
        assert "exponent" in summary


class TestDeterminism:
    def strip_wall(self, text):
        out = []
        for line in text.splitlines():
            rec = json.loads(line)
            rec.pop("wall_ms", None)
            out.append(json.dumps(rec, sort_keys=True))
        return "\n".join(out)

    def test_identical_configs_reproduce_every_artifact(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            dataset = synth(tmp_path, name=f"data_{name}")
            train_out = tmp_path / f"train_{name}"
            assert cli.main(["train", "--dataset", str(dataset), "--k", "2",
                             "--seed", "5", "--out", str(train_out)] + FAST) == 0
            outs.append((dataset, train_out))
        (ds_a, tr_a), (ds_b, tr_b) = outs
        assert ds_a.read_bytes() == ds_b.read_bytes()
        assert (tr_a / "checkpoint.bin").read_bytes() == (tr_b / "checkpoint.bin").read_bytes()
        assert self.strip_wall((tr_a / "train_trace.jsonl").read_text()) == \
            self.strip_wall((tr_b / "train_trace.jsonl").read_text())
