import csv
import json
import math

import numpy as np
import pytest

from fdlora import lora
from fdlora.cli import cli_main
from fdlora.datagen import make_synthetic_task, save_jsonl
from fdlora.errors import ConfigError, ContractError
from fdlora.federation import FederationConfig, build_base_model, build_dataset
from fdlora.harness import SweepSpec, execute_run, run_sweep
from fdlora.metrics import CSV_HEADER, MetricsRecord, evaluate, read_csv, score_predictions


# metrics

def test_all_correct():
    s = score_predictions([0, 1, 1, 0], [0, 1, 1, 0], 2)
    assert (s.accuracy, s.f1) == (1.0, 1.0)


def test_negative_only_predictor():
    s = score_predictions([1, 0, 0, 1, 0], [0] * 5, 2)
    assert s.accuracy == 0.6 and s.f1 == 0.0 and not s.f1_degenerate


def test_fixed_confusion_case():
    y_true = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
    y_pred = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0]  # TP=3 FN=2 FP=1 TN=4
    s = score_predictions(y_true, y_pred, 2)
    assert s.accuracy == pytest.approx(0.7, abs=1e-15)
    assert s.f1 == pytest.approx(6 / 9, abs=1e-15)


def test_matches_sklearn_cross_check():
    sk = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(0)
    for c in (2, 3, 5):
        y, p = rng.integers(0, c, 50), rng.integers(0, c, 50)
        s = score_predictions(y, p, c)
        avg = "binary" if c == 2 else "macro"
        assert s.f1 == pytest.approx(sk.f1_score(y, p, average=avg), abs=1e-12)
        assert s.accuracy == pytest.approx(sk.accuracy_score(y, p), abs=1e-15)


def test_degenerate_f1_is_zero_and_flagged():
    s = score_predictions([0, 0, 0], [0, 0, 0], 2)
    assert s.f1 == 0.0 and s.f1_degenerate and s.accuracy == 1.0


def test_evaluate_empty_test_is_contract_error():
    cfg = FederationConfig()
    base = build_base_model(cfg)
    empty = make_synthetic_task(4, 12, 1, 0.1, 0)[np.array([], dtype=np.int64)]
    with pytest.raises(ContractError):
        evaluate(base, None, empty)


def test_record_rejects_out_of_range():
    with pytest.raises(ContractError):
        MetricsRecord("r", "0", 1, 1.5, 0.5, 0.1, 0)


# harness

@pytest.fixture
def quick():
    return FederationConfig(num_clients=3, outer_rounds=2, inner_steps=1, sync_every=1, per_class=30,
                            local_epochs=1, inner_lr=0.01, fusion_steps=1, fusion_shots=4)


def test_run_artifacts(quick, tmp_path):
    report, records = execute_run(quick, tmp_path, run_id="r0")
    for name in ("metrics.csv", "report.json", "manifest.json", "partition.json"):
        text = (tmp_path / name).read_text(encoding="utf-8")
        assert text.endswith("\n")
    with open(tmp_path / "metrics.csv", newline="") as fh:
        assert tuple(next(csv.reader(fh))) == CSV_HEADER
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == \
        "run_id,client_id,round,accuracy,f1,loss,bytes_communicated"
    assert read_csv(tmp_path / "metrics.csv") == records
    assert [r.client_id for r in records] == ["0", "1", "2", "mean"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert FederationConfig.from_dict(manifest["config"]) == quick


def test_single_value_single_repeat_is_the_run(quick, tmp_path):
    res = run_sweep(SweepSpec("T", [2], quick, repeats=1), tmp_path)
    report, _ = execute_run(quick)
    mean = [r for r in res.records if r.client_id == "mean"]
    assert len(mean) == 1 and mean[0].accuracy == report.mean["accuracy"]
    assert res.aggregates[0]["accuracy_std"] == 0.0


def test_sweep_over_sync_period(quick, tmp_path):
    res = run_sweep(SweepSpec("H", [1, math.inf], quick.replace(dirichlet_alpha=0.1), repeats=2), tmp_path)
    assert res.ok and [a["value"] for a in res.aggregates] == ["1", "inf"]
    rows = (tmp_path / "sweep_summary.csv").read_text().splitlines()
    assert len(rows) == 3
    assert json.loads((tmp_path / "failures.json").read_text()) == []


def test_sweep_alpha_imbalance(quick, tmp_path):
    spec = SweepSpec("alpha", [0.1, 1.0], quick.replace(outer_rounds=0), repeats=5)
    run_sweep(spec, tmp_path)

    def imbalance(label):
        out = []
        for r in range(5):
            cfg = spec.base_config.replace(seed=spec.base_config.seed + 1000 * r)
            y = build_dataset(cfg).y
            doc = json.loads((tmp_path / f"alpha={label}" / f"rep{r}" / "partition.json").read_text())
            for parts in doc["clients"].values():
                lab = y[np.asarray(parts["train"] + parts["test"], dtype=np.int64)]
                out.append((np.bincount(lab, minlength=4) / len(lab)).std())
        return np.mean(out)

    assert imbalance("0.1") > imbalance("1.0")


def test_aggregate_recomputable_from_rows(quick, tmp_path):
    res = run_sweep(SweepSpec("K", [1, 2], quick, repeats=3), tmp_path)
    rows = read_csv(tmp_path / "metrics.csv")
    with open(tmp_path / "sweep_summary.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    for agg in summary:
        acc = [r.accuracy for r in rows if r.client_id == "mean" and r.run_id.startswith(f"K={agg['value']}/")]
        assert abs(float(agg["accuracy_mean"]) - np.mean(acc)) <= 1e-12
        assert abs(float(agg["accuracy_std"]) - np.std(acc)) <= 1e-12
    assert len(res.aggregates) == 2


def test_sweep_collects_failures(quick, tmp_path):
    res = run_sweep(SweepSpec("N", [3, 10_000], quick, repeats=1), tmp_path)
    assert not res.ok and len(res.failures) == 1
    assert res.failures[0]["run_id"] == "N=10000/rep0"
    assert len(res.aggregates) == 1


def test_sweep_seeds_are_auditable(quick):
    seeds = [cfg.seed for _, _, cfg in SweepSpec("K", [1], quick.replace(seed=7), repeats=3).configs()]
    assert seeds == [7, 1007, 2007]


def test_bad_axis():
    with pytest.raises(ConfigError):
        SweepSpec("lr", [1])


# cli

QUICK = ["--clients", "3", "--rounds", "2", "--inner-steps", "1", "--seed", "1"]


def test_cli_help_exits_zero(capsys):
    assert cli_main(["run", "--help"]) == 0
    assert "usage: fdlora run" in capsys.readouterr().out


def test_cli_unknown_flag_exits_two(capsys):
    assert cli_main(["run", "--bogus"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("usage: fdlora run") or "unrecognized arguments: --bogus" in err


def test_cli_negative_rounds_exits_two(capsys):
    assert cli_main(["run", "--rounds", "-1"]) == 2
    assert capsys.readouterr().err.strip() == "fdlora run: invalid configuration: outer_rounds must be >= 0"


def test_cli_missing_subcommand(capsys):
    assert cli_main([]) == 2


def test_cli_run(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli_main(["run", *QUICK, "--out", str(out)]) == 0
    line = capsys.readouterr().out.strip()
    report = json.loads((out / "report.json").read_text())
    m = report["mean"]
    assert line == (f"accuracy={m['accuracy']:.4f} f1={m['f1']:.4f} loss={m['loss']:.4f} "
                    f"bytes_up={report['ledger']['bytes_up']} -> {out}")
    assert report["config"]["num_clients"] == 3 and report["config"]["outer_rounds"] == 2
    assert (out / "checkpoints" / "round_2" / "global.json").exists()


def test_cli_config_file_and_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"num_clients": 4, "outer_rounds": 1, "sync_every": "inf", "per_class": 30}))
    out = tmp_path / "run"
    assert cli_main(["run", "--config", str(cfg), "--clients", "2", "--out", str(out), "--no-checkpoints"]) == 0
    doc = json.loads((out / "report.json").read_text())["config"]
    assert doc["num_clients"] == 2 and doc["sync_every"] == "inf" and doc["per_class"] == 30


def test_cli_bad_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"clients": 4}')
    assert cli_main(["run", "--config", str(cfg)]) == 2


def test_cli_run_error_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"features": [1.0], "label": 0}\nnot json\n')
    assert cli_main(["run", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_cli_sweep(tmp_path, capsys):
    out = tmp_path / "sw"
    assert cli_main(["sweep", *QUICK, "--axis", "H", "--values", "1,inf", "--repeats", "1", "--out", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split(":")[0] for ln in lines] == ["H=1", "H=inf"]


def test_cli_sweep_bad_values(capsys):
    assert cli_main(["sweep", "--axis", "K", "--values", "x"]) == 2


def test_cli_partition(tmp_path, capsys):
    out = tmp_path / "p.json"
    assert cli_main(["partition", "--clients", "4", "--alpha", "0.1", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["clients"]) == 4 and doc["alpha"] == 0.1
    assert capsys.readouterr().out.startswith("4 shards, imbalance=")


def test_cli_evaluate_and_fuse(tmp_path, capsys):
    data = make_synthetic_task(4, 12, 10, 0.3, seed=0)
    path = tmp_path / "d.jsonl"
    save_jsonl(data, path)
    cfg = FederationConfig()
    base = build_base_model(cfg, 12, 4)
    rng = np.random.default_rng(0)
    p = base.init_adapters(2, rng)
    p = p.with_params({k: rng.normal(size=v.shape) * 0.1 for k, v in p.params().items()})
    g = p.with_params({k: -v for k, v in p.params().items()})
    lora.save(p, tmp_path / "p.json")
    lora.save(g, tmp_path / "g.json")
    fused = tmp_path / "f.json"
    assert cli_main(["fuse", "--personalized", str(tmp_path / "p.json"), "--global", str(tmp_path / "g.json"),
                     "--w1", "0.5", "--w2", "0.5", "--out", str(fused)]) == 0
    assert capsys.readouterr().out.strip() == f"fused with w=(0.5, 0.5) -> {fused}"
    assert all(not v.any() for v in lora.load(fused).params().values())
    assert cli_main(["evaluate", "--data", str(path), "--adapters", str(fused)]) == 0
    doc = json.loads(capsys.readouterr().out)
    bare = np.mean(base.predict(data.x) == data.y)
    assert doc["accuracy"] == bare and doc["n"] == 40


def test_cli_fuse_needs_weights(tmp_path):
    assert cli_main(["fuse", "--personalized", "a", "--global", "b", "--out", str(tmp_path / "x")]) == 2
    assert cli_main(["fuse", "--personalized", "a", "--global", "b", "--w1", "1", "--w2", "0",
                     "--out", str(tmp_path / "x")]) == 1
