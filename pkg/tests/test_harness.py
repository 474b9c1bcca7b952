"""Harness: evaluation, config validation, matrix mechanics, aggregation, CLI."""
import dataclasses
import json

import numpy as np
import pytest

from forgetlab import cli
from forgetlab.checkpoint import save_checkpoint
from forgetlab.data import DataError, Dataset, Sample
from forgetlab.harness import (RESULT_COLUMNS, ConfigError, ExperimentConfig,
                               ExperimentResult, aggregate, config_from_dict,
                               config_from_file, evaluate, read_results_csv,
                               run_matrix)
from forgetlab.network import build_network
from forgetlab.strategies import Hyper
from forgetlab.synthetic import default_domain_pair, gen_synthetic_domain

TINY = {
    "arch": "desk",
    "seeds": [1],
    "strategies": ["FT_FC"],
    "fractions": [1.0],
    "record_timing": False,
    "hyper": {"epochs": 2, "batch_size": 16, "patience": 3},
    "source": {"kind": "synthetic", "n_train": 6, "n_val": 2, "n_test": 3, "seed": 11},
    "target": {"kind": "synthetic", "n_train": 4, "n_val": 2, "n_test": 3, "seed": 22},
}


def _tiny_config(tmp_path, **overrides):
    raw = dict(TINY, out=str(tmp_path / "run"), **overrides)
    return config_from_dict(raw)


def _constant_class_net(cls: int):
    """A desk net whose logits always favor class `cls`."""
    net = build_network("desk", 0)
    net["fc3"].params["w"][:] = 0.0
    net["fc3"].params["b"][:] = 0.0
    net["fc3"].params["b"][cls] = 10.0
    return net


def _balanced_dataset(n_per_class=3):
    ds = Dataset("balanced")
    rng = np.random.default_rng(0)
    for c in range(7):
        for _ in range(n_per_class):
            ds.samples.append(Sample(image=rng.random((1, 48, 48)), label=c))
    return ds


class TestEvaluate:
    def test_constant_model_on_balanced_set(self):
        result = evaluate(_constant_class_net(2), _balanced_dataset())
        assert result.accuracy == pytest.approx(1.0 / 7.0)
        assert result.confusion[:, 2].sum() == result.n

    def test_empty_test_set_is_error(self):
        with pytest.raises(DataError, match="empty"):
            evaluate(_constant_class_net(0), Dataset("empty"))

    def test_matches_per_sample_oracle(self):
        net = build_network("desk", 3)
        ds = _balanced_dataset(4)
        result = evaluate(net, ds, batch_size=8)
        correct = 0                               # independent per-sample loop
        for s in ds:
            logits = net.forward(s.image[None], "eval")[0]
            best = 0
            for k in range(1, 7):
                if logits[k] > logits[best]:
                    best = k
            correct += int(best == s.label)
        assert result.accuracy == pytest.approx(correct / len(ds))

    def test_invariant_to_order_and_batch_size(self):
        net = build_network("desk", 4)
        ds = _balanced_dataset(3)
        base = evaluate(net, ds, batch_size=5)
        shuffled = Dataset("s", samples=list(reversed(ds.samples)))
        assert evaluate(net, ds, batch_size=64).accuracy == base.accuracy
        assert evaluate(net, shuffled, batch_size=3).accuracy == base.accuracy

    def test_confusion_matrix_shape_and_total(self):
        result = evaluate(build_network("desk", 5), _balanced_dataset(2))
        assert result.confusion.shape == (7, 7)
        assert result.confusion.sum() == 14


class TestConfig:
    def test_unknown_top_key(self):
        with pytest.raises(ConfigError, match="sparkle"):
            config_from_dict({"sparkle": 1})

    def test_unknown_hyper_key(self):
        with pytest.raises(ConfigError, match="warmup"):
            config_from_dict({"hyper": {"warmup": 5}})

    def test_unknown_dataset_key(self):
        with pytest.raises(ConfigError, match="resize"):
            config_from_dict({"source": {"kind": "synthetic", "resize": 2}})

    def test_bad_fraction(self):
        with pytest.raises(ConfigError, match="fractions"):
            config_from_dict({"fractions": [0.0, 1.0]})

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="unknown strategies"):
            config_from_dict({"strategies": ["FT_EVERYTHING"]})

    def test_needs_a_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            config_from_dict({"seeds": []})

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(TINY))
        cfg = config_from_file(path)
        assert cfg.seeds == (1,) and cfg.hyper.epochs == 2

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            config_from_file("/nonexistent/config.json")

    def test_defaults_are_desk_scale(self):
        cfg = ExperimentConfig()
        assert cfg.arch == "desk"
        assert cfg.seeds == (1, 2, 3)
        assert cfg.fractions == (0.5, 1.0)
        assert cfg.source["n_train"] == 200 and cfg.target["n_train"] == 30


class TestMatrix:
    def test_cell_count(self, tmp_path):
        cfg = _tiny_config(tmp_path, strategies=["FT_FC", "RE"],
                           fractions=[0.5, 1.0], seeds=[1, 2, 3])
        run = run_matrix(cfg)
        assert not run.failures
        # 2 strategies x 2 fractions x 3 seeds strategy rows + 3 BL rows
        assert len(run.results) == 15
        bl_rows = [r for r in run.results if r.strategy == "BL"]
        assert len(bl_rows) == 3
        assert all(r.delta_source == 0.0 and r.delta_target == 0.0 for r in bl_rows)

    def test_resume_recomputes_only_missing_cell(self, tmp_path):
        cfg = _tiny_config(tmp_path, strategies=["FT_FC", "RE"])
        first = run_matrix(cfg)
        assert len(first.executed) == 3           # BL + 2 cells
        results_before = (first.out_dir / "results.csv").read_bytes()
        lines = (first.out_dir / "journal.csv").read_text().splitlines()
        assert ",RE," in lines[3]
        (first.out_dir / "journal.csv").write_text("\n".join(lines[:3]) + "\n")
        second = run_matrix(cfg)
        assert second.executed == [("RE", 1.0, 1)]
        assert (first.out_dir / "results.csv").read_bytes() == results_before

    def test_rerun_executes_nothing(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        run_matrix(cfg)
        again = run_matrix(cfg)
        assert again.executed == []

    def test_results_csv_column_order(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        run = run_matrix(cfg)
        header = (run.out_dir / "results.csv").read_text().splitlines()[0]
        assert header == ",".join(RESULT_COLUMNS)
        assert header == ("strategy,fraction,seed,source_test_acc,target_test_acc,"
                          "delta_source,delta_target,epochs_run,wall_time_s,checkpoint")

    def test_determinism_byte_identical(self, tmp_path):
        cfg_a = _tiny_config(tmp_path / "a")
        cfg_b = dataclasses.replace(cfg_a, out=str(tmp_path / "b" / "run"))
        run_a, run_b = run_matrix(cfg_a), run_matrix(cfg_b)
        assert (run_a.out_dir / "results.csv").read_bytes() \
            == (run_b.out_dir / "results.csv").read_bytes()
        for ckpt in sorted(p.name for p in run_a.out_dir.glob("*.fgtb")):
            assert (run_a.out_dir / ckpt).read_bytes() \
                == (run_b.out_dir / ckpt).read_bytes(), ckpt

    def test_audit_artifacts_written(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        run = run_matrix(cfg)
        audits = list(run.out_dir.glob("audit_*.txt"))
        assert len(audits) == 2                   # BL + FT_FC
        assert all("PASS" in p.read_text() for p in audits)

    def test_summary_json_written(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        run = run_matrix(cfg)
        summary = json.loads((run.out_dir / "summary.json").read_text())
        assert "FT_FC" in summary["strategies"]
        assert summary["strategies"]["BL"]["delta_source"]["mean"] == 0.0


def _result(strategy, ds, dt, fraction=1.0, seed=1):
    return ExperimentResult(strategy, fraction, seed, 0.5 + ds, 0.5 + dt,
                            ds, dt, 1, 0.0, "x.fgtb")


class TestAggregate:
    def test_single_result_mean_min_max_collapse(self):
        summary = aggregate([_result("RE", -0.2, 0.3)])
        stats = summary["strategies"]["RE"]
        assert stats["delta_source"]["mean"] == stats["delta_source"]["min"] \
            == stats["delta_source"]["max"] == -0.2

    def test_symmetric_results_mean_zero(self):
        rows = [_result("RE", -0.1, 0.2, seed=1), _result("RE", 0.1, -0.2, seed=2)]
        stats = aggregate(rows)["strategies"]["RE"]
        assert stats["delta_source"]["mean"] == 0.0
        assert stats["delta_target"]["mean"] == 0.0

    def test_hand_built_six_row_fixture(self):
        rows = [
            _result("FT_FC", -0.30, 0.20, seed=1), _result("FT_FC", -0.20, 0.30, seed=2),
            _result("FU", 0.01, 0.40, seed=1), _result("FU", -0.01, 0.50, seed=2),
            _result("RE", -0.40, 0.10, seed=1), _result("RE", -0.10, 0.40, seed=2),
        ]
        table = aggregate(rows)["strategies"]
        assert table["FT_FC"]["delta_source"] == {"mean": -0.25, "min": -0.30, "max": -0.20}
        assert table["FT_FC"]["delta_target"] == {"mean": 0.25, "min": 0.20, "max": 0.30}
        assert table["FU"]["delta_source"]["mean"] == pytest.approx(0.0)
        assert table["FU"]["delta_target"]["mean"] == pytest.approx(0.45)
        assert table["RE"]["delta_source"] == {"mean": -0.25, "min": -0.40, "max": -0.10}
        assert table["RE"]["scalar_score"] == pytest.approx(0.0)

    def test_pareto_dominant_strategy_identified(self):
        rows = [_result("FU", 0.0, 0.4), _result("FT_FC", -0.2, 0.2),
                _result("RE", -0.3, 0.3)]
        summary = aggregate(rows)
        assert summary["best_tradeoff"] == "FU"
        assert summary["pareto_front"] == ["FU"]
        assert summary["ranking"][0] == "FU"

    def test_no_dominant_when_front_has_two(self):
        rows = [_result("FU", -0.1, 0.4), _result("FT_FC", 0.0, 0.2)]
        summary = aggregate(rows)
        assert summary["best_tradeoff"] is None
        assert set(summary["pareto_front"]) == {"FT_FC", "FU"}


class TestCli:
    def test_gen_data_writes_domains(self, tmp_path, capsys):
        rc = cli.main(["gen-data", "--shift", "0.4", "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "source_domain.json").exists()
        assert (tmp_path / "target_domain.json").exists()

    def test_gen_data_render(self, tmp_path):
        rc = cli.main(["gen-data", "--out", str(tmp_path), "--render", "1"])
        assert rc == 0
        pgms = list((tmp_path / "render").rglob("*.pgm"))
        assert len(pgms) == 14                    # 7 classes x 2 domains
        manifests = list((tmp_path / "render").rglob("manifest.tsv"))
        assert len(manifests) == 2

    def test_run_and_report(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(dict(TINY, out=str(tmp_path / "run"))))
        rc = cli.main(["run", "--config", str(cfg_path)])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert "FT_FC" in summary["strategies"]
        rc = cli.main(["report", "--results", str(tmp_path / "run")])
        assert rc == 0
        plot = (tmp_path / "run" / "plotdata.csv").read_text().splitlines()
        assert plot[0] == "strategy,fraction,seed,test_set,accuracy"
        assert len(plot) == 1 + 2 * 2             # 2 rows x 2 test sets

    def test_eval_command(self, tmp_path, capsys):
        net = build_network("desk", 0)
        ckpt = tmp_path / "net.fgtb"
        save_checkpoint(net, str(ckpt))
        spec = tmp_path / "data.json"
        spec.write_text(json.dumps(
            {"kind": "synthetic", "n_train": 2, "n_val": 2, "n_test": 3, "seed": 5}))
        rc = cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(spec)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["n"] == 21
        assert 0.0 <= payload["accuracy"] <= 1.0
        assert len(payload["confusion"]) == 7

    def test_audit_command(self, tmp_path, capsys):
        net = build_network("desk", 0)
        before, after = tmp_path / "a.fgtb", tmp_path / "b.fgtb"
        save_checkpoint(net, str(before))
        net["fc1"].params["w"][0, 0] += 1.0
        save_checkpoint(net, str(after))
        from forgetlab.strategies import make_plan, save_plan
        plan = make_plan("FT_FC", seed=0, pretrained=str(before))
        plan_path = tmp_path / "plan.json"
        save_plan(plan, plan_path)
        rc = cli.main(["audit", "--before", str(before), "--after", str(after),
                       "--plan", str(plan_path)])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_bad_config_exits_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"sparkle": True}))
        assert cli.main(["run", "--config", str(bad)]) == 1

    def test_bad_flag_exits_1(self):
        assert cli.main(["run", "--nonsense"]) == 1

    def test_missing_checkpoint_exits_2(self, tmp_path):
        spec = tmp_path / "d.json"
        spec.write_text(json.dumps(
            {"kind": "synthetic", "n_train": 1, "n_val": 1, "n_test": 1, "seed": 1}))
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.fgtb"),
                         "--data", str(spec)]) == 2
