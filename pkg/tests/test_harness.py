"""Metrics persistence, sweep orchestration and the command line surface."""

import json

import numpy as np
import pytest

from otvp import adapt, metrics, sweep, synth, vit
from otvp.cli import main


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class TestConfigHash:
    def test_key_order_invariant(self):
        a = {"lr": 0.1, "steps": 50, "nested": {"x": 1, "y": 2}}
        b = {"nested": {"y": 2, "x": 1}, "steps": 50, "lr": 0.1}
        assert metrics.config_hash(a) == metrics.config_hash(b)

    def test_value_sensitivity(self):
        base = {"lr": 0.1}
        assert metrics.config_hash(base) != metrics.config_hash({"lr": 0.2})


class TestRecords:
    def rec(self, **kw):
        kw.setdefault("run_id", "r1")
        kw.setdefault("method", "otvp")
        kw.setdefault("domains", "src->tgt")
        kw.setdefault("step", 1)
        kw.setdefault("seed", 0)
        kw.setdefault("config_hash", "abc")
        return metrics.MetricsRecord(**kw)

    def test_round_trip_with_extras(self):
        rec = self.rec(ot_value=3.5, extra={"sinkhorn_iterations": 12})
        back = metrics.record_from_json(rec.to_json())
        assert back.ot_value == 3.5
        assert back.extra["sinkhorn_iterations"] == 12
        assert back.run_id == "r1"

    def test_one_object_per_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        metrics.append_records(path, [self.rec(step=i) for i in range(3)])
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 3
        assert all(json.loads(line)["config_hash"] == "abc" for line in lines)

    def test_append_only(self, tmp_path):
        path = tmp_path / "m.jsonl"
        metrics.append_records(path, [self.rec(step=1)])
        metrics.append_records(path, [self.rec(step=2)])
        assert [r.step for r in metrics.read_records(path)] == [1, 2]

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"run_id": "r"}\n')
        with pytest.raises(metrics.MetricsError, match="1: .*missing"):
            metrics.read_records(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("{nope\n")
        with pytest.raises(metrics.MetricsError, match="bad metrics line"):
            metrics.read_records(path)


class TestAggregate:
    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(3)
        recs = []
        for seed in range(5):
            recs.append(metrics.MetricsRecord(
                run_id=f"r{seed}", method="otvp", domains="a->b", step=9,
                seed=seed, config_hash="h", accuracy=float(rng.random())))
        row = metrics.aggregate(recs)[0]
        accs = [r.accuracy for r in recs]
        assert abs(row["accuracy_mean"] - np.mean(accs)) < 1e-12
        assert abs(row["accuracy_std"] - np.std(accs, ddof=1)) < 1e-12
        assert row["count"] == 5

    def test_groups_by_method(self):
        recs = [metrics.MetricsRecord(run_id="a", method=m, domains="a->b",
                                      step=0, seed=0, config_hash="h",
                                      accuracy=0.5)
                for m in ("otvp", "otvp-b", "otvp")]
        rows = metrics.aggregate(recs)
        counts = {row["method"]: row["count"] for row in rows}
        assert counts == {"otvp": 2, "otvp-b": 1}

    def test_single_value_std_zero(self):
        rec = metrics.MetricsRecord(run_id="a", method="m", domains="d",
                                    step=0, seed=0, config_hash="h",
                                    accuracy=0.25)
        assert metrics.aggregate([rec])[0]["accuracy_std"] == 0.0


# ---------------------------------------------------------------------------
# a miniature end-to-end world, shared by sweep and CLI tests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Tiny random-weight checkpoint + datasets + bank on disk. Training is
    not the point here; the harness mechanics are."""
    root = tmp_path_factory.mktemp("world")
    data = root / "data"
    src = synth.generate(synth.DomainSpec(name="src", seed=5), 42)
    tgt = synth.generate(synth.DomainSpec(
        name="tgt", seed=6, corruption=synth.Corruption("blur", 2)), 36)
    synth.save_dataset(data / "src", {"all": src})
    synth.save_dataset(data / "tgt", {"all": tgt})

    params = vit.ViTParams.init(vit.ViTConfig(embed_dim=32, num_layers=1,
                                              num_heads=2, seed=2))
    ckpt = root / "model.ckpt"
    vit.save_checkpoint(ckpt, params)
    bank = adapt.precompute_source_reps(params, src.images, src.labels, "src")
    bank_path = root / "src.bank"
    adapt.save_bank(bank_path, bank)
    return {"root": root, "data": data, "ckpt": ckpt, "bank": bank_path}


def tiny_config(world, **kw):
    cfg = {"ckpt": str(world["ckpt"]), "bank": str(world["bank"]),
           "data": str(world["data"]), "target": "tgt",
           "method": "otvp-b", "steps": 2, "batch_size": 12,
           "source_cap": 30, "lr": 0.05, "seed": 0}
    cfg.update(kw)
    return cfg


class TestRunAdaptation:
    def test_summary_and_metrics_file(self, world, tmp_path):
        mpath = tmp_path / "run.jsonl"
        summary = sweep.run_adaptation(tiny_config(world), metrics_path=mpath)
        recs = metrics.read_records(mpath)
        # 2 step records plus one final evaluation record
        assert len(recs) == 3
        assert recs[-1].extra["final"] is True
        assert recs[-1].accuracy == summary["accuracy_after"]
        assert recs[-1].extra["config"]["steps"] == 2
        assert (tmp_path / "run.prompts").exists()

    def test_steps_zero_single_record(self, world, tmp_path):
        mpath = tmp_path / "zero.jsonl"
        summary = sweep.run_adaptation(
            tiny_config(world, method="otvp", steps=0), metrics_path=mpath)
        recs = metrics.read_records(mpath)
        assert len(recs) == 1 and recs[0].extra["final"] is True
        # with no updates the prompts are still the seeded init, so the
        # reported accuracy must match a fresh evaluation with init prompts
        params = vit.load_checkpoint(world["ckpt"])
        gamma = vit.PromptSet.init(4, params.cfg.embed_dim, seed=0)
        images, labels = sweep.domain_arrays(world["data"], "tgt")
        expect = float(np.mean(vit.predict(params, images, gamma) == labels))
        assert summary["accuracy_after"] == expect

    def test_unknown_key_rejected(self, world):
        with pytest.raises(ValueError, match="unknown config keys"):
            sweep.run_adaptation(tiny_config(world, typo_key=1))

    def test_missing_path_key_rejected(self, world):
        cfg = tiny_config(world)
        del cfg["bank"]
        with pytest.raises(ValueError, match="lacks required key"):
            sweep.resolve_config(cfg)


class TestSweep:
    def test_spec_validation(self):
        with pytest.raises(ValueError, match="axis"):
            sweep.SweepSpec("optimizer", (1,), (0,), {})
        with pytest.raises(ValueError, match="value"):
            sweep.SweepSpec("lr", (), (0,), {})
        with pytest.raises(ValueError, match="seed"):
            sweep.SweepSpec("lr", (0.1,), (), {})

    def test_cell_grid_and_skip(self, world, tmp_path):
        spec = sweep.SweepSpec("lr", (0.02, 0.05), (0, 1), tiny_config(world))
        out = tmp_path / "cells"
        results = sweep.run_sweep(spec, out)
        assert len(results) == 4
        assert all(r["status"] == "ok" for r in results)
        again = sweep.run_sweep(spec, out)
        assert all(r["status"] == "skipped" for r in again)
        forced = sweep.run_sweep(spec, out, force=True)
        assert all(r["status"] == "ok" for r in forced)

    def test_cell_failure_isolated(self, world, tmp_path):
        spec = sweep.SweepSpec("epsilon_rel", (0.05, -1.0), (0,),
                               tiny_config(world))
        results = sweep.run_sweep(spec, tmp_path / "cells")
        status = [r["status"] for r in results]
        assert status == ["ok", "failed"]
        assert "error" in results[1]

    def test_jobs_parallel(self, world, tmp_path):
        spec = sweep.SweepSpec("lr", (0.02, 0.05), (0,), tiny_config(world))
        results = sweep.run_sweep(spec, tmp_path / "cells", jobs=2)
        assert all(r["status"] == "ok" for r in results)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCli:
    def test_gen_data(self, tmp_path, capsys):
        spec = tmp_path / "domains.json"
        spec.write_text(json.dumps({"domains": [
            {"name": "clean"},
            {"name": "noisy", "corruption": {"kind": "gaussian_noise", "severity": 2}},
        ]}))
        code, out, _ = run_cli(capsys, "gen-data", "--out", str(tmp_path / "d"),
                               "--domains", str(spec), "--n", "21", "--seed", "4")
        assert code == 0
        names = [d["name"] for d in json.loads(out)["domains"]]
        assert names == ["clean", "noisy"]
        loaded = synth.load_dataset(tmp_path / "d" / "noisy")
        assert loaded["all"].images.shape[0] == 21

    def test_gen_data_determinism_across_runs(self, tmp_path, capsys):
        spec = tmp_path / "domains.json"
        spec.write_text(json.dumps({"domains": [{"name": "clean"}]}))
        for sub in ("a", "b"):
            code, _, _ = run_cli(capsys, "gen-data", "--out", str(tmp_path / sub),
                                 "--domains", str(spec), "--n", "14", "--seed", "9")
            assert code == 0
        xa = synth.load_dataset(tmp_path / "a" / "clean")["all"].images
        xb = synth.load_dataset(tmp_path / "b" / "clean")["all"].images
        assert np.array_equal(xa, xb)

    def test_eval_and_adapt_steps0_agree(self, world, tmp_path, capsys):
        mpath = tmp_path / "m.jsonl"
        code, out, _ = run_cli(
            capsys, "adapt", "--ckpt", str(world["ckpt"]),
            "--bank", str(world["bank"]), "--data", str(world["data"]),
            "--target", "tgt", "--method", "otvp", "--steps", "0",
            "--seed", "0", "--metrics", str(mpath))
        assert code == 0
        summary = json.loads(out)
        code, out, _ = run_cli(
            capsys, "eval", "--ckpt", str(world["ckpt"]),
            "--prompts-file", summary["prompts_file"],
            "--data", str(world["data"]), "--domain", "tgt")
        assert code == 0
        assert json.loads(out)["accuracy"] == summary["accuracy_after"]

    def test_adapt_writes_step_metrics(self, world, tmp_path, capsys):
        mpath = tmp_path / "m.jsonl"
        code, out, _ = run_cli(
            capsys, "adapt", "--ckpt", str(world["ckpt"]),
            "--bank", str(world["bank"]), "--data", str(world["data"]),
            "--target", "tgt", "--method", "otvp-b", "--steps", "2",
            "--batch-size", "12", "--seed", "1", "--metrics", str(mpath))
        assert code == 0
        recs = metrics.read_records(mpath)
        assert [r.step for r in recs] == [1, 2, 2]
        assert recs[0].ot_value is not None

    def test_missing_checkpoint_is_io_error(self, world, capsys):
        code, _, err = run_cli(capsys, "eval", "--ckpt", "/nonexistent.ckpt",
                               "--data", str(world["data"]), "--domain", "tgt")
        assert code == 3 and "error" in err

    def test_bad_domain_spec_json(self, tmp_path, capsys):
        spec = tmp_path / "broken.json"
        spec.write_text("{not json")
        code, _, err = run_cli(capsys, "gen-data", "--out", str(tmp_path / "d"),
                               "--domains", str(spec), "--n", "7")
        assert code == 3 and "JSON" in err

    def test_bad_method_value_rejected(self, world, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["adapt", "--ckpt", str(world["ckpt"]),
                  "--bank", str(world["bank"]), "--data", str(world["data"]),
                  "--target", "tgt", "--method", "nonsense"])
        assert exc.value.code == 2

    def test_env_seed_default(self, world, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("OTVP_SEED", "7")
        spec = tmp_path / "domains.json"
        spec.write_text(json.dumps({"domains": [{"name": "clean"}]}))
        code, out, _ = run_cli(capsys, "gen-data", "--out", str(tmp_path / "d"),
                               "--domains", str(spec), "--n", "7")
        assert code == 0
        assert json.loads(out)["domains"][0]["seed"] == 7

    def test_env_seed_invalid(self, world, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("OTVP_SEED", "not-a-number")
        spec = tmp_path / "domains.json"
        spec.write_text(json.dumps({"domains": [{"name": "clean"}]}))
        code, _, err = run_cli(capsys, "gen-data", "--out", str(tmp_path / "d"),
                               "--domains", str(spec), "--n", "7")
        assert code == 2 and "OTVP_SEED" in err

    def test_sweep_and_report(self, world, tmp_path, capsys):
        spec = tmp_path / "sweep.json"
        spec.write_text(json.dumps({
            "axis": "lambda", "values": [0.0, 10.0], "seeds": [0, 1],
            "base": tiny_config(world, method="otvp")}))
        out_dir = tmp_path / "cells"
        code, out, _ = run_cli(capsys, "sweep", "--spec", str(spec),
                               "--out", str(out_dir))
        assert code == 0
        assert len(json.loads(out)["cells"]) == 4

        report_path = tmp_path / "report.json"
        code, out, _ = run_cli(capsys, "report", "--metrics-dir", str(out_dir),
                               "--out", str(report_path))
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["num_runs"] == 4
        lam_rows = report["axes"]["lambda"]
        assert [row["value"] for row in lam_rows] == [0.0, 10.0]
        assert all(row["count"] == 2 for row in lam_rows)
        csv_path = report_path.with_name("report_lambda.csv")
        assert csv_path.exists()
        header = csv_path.read_text().splitlines()[0]
        assert header == "value,accuracy_mean,accuracy_std,count"

    def test_report_aggregate_matches_recomputation(self, world, tmp_path, capsys):
        mdir = tmp_path / "runs"
        accs = []
        for seed in (0, 1, 2):
            summary = sweep.run_adaptation(tiny_config(world, seed=seed),
                                           metrics_path=mdir / f"s{seed}.jsonl")
            accs.append(summary["accuracy_after"])
        report_path = tmp_path / "r.json"
        code, _, _ = run_cli(capsys, "report", "--metrics-dir", str(mdir),
                             "--out", str(report_path))
        assert code == 0
        report = json.loads(report_path.read_text())
        row = report["aggregates"][0]
        assert abs(row["accuracy_mean"] - np.mean(accs)) < 1e-12
        assert abs(row["accuracy_std"] - np.std(accs, ddof=1)) < 1e-12
