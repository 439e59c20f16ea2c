"""Single runs and parameter sweeps with on-disk artifacts."""
import csv
import json
import math
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fdlora.errors import ConfigError
from fdlora.federation import FederationConfig, run_fdlora
from fdlora.metrics import MetricsRecord, write_csv

AXES = {
    "T": "outer_rounds",
    "K": "inner_steps",
    "H": "sync_every",
    "alpha": "dirichlet_alpha",
    "N": "num_clients",
    "fusion_mode": "fusion_mode",
}
REPEAT_SEED_STRIDE = 1000


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def report_records(report, run_id):
    """Per-client rows plus one ``mean`` row, all at the final round."""
    n = len(report.clients)
    t = report.config["outer_rounds"]
    per_client_bytes = (report.ledger["bytes_up"] + report.ledger["bytes_down"]) // n
    rows = [
        MetricsRecord(run_id, str(c["client_id"]), t, c["accuracy"], c["f1"], c["loss"], per_client_bytes)
        for c in report.clients
    ]
    rows.append(
        MetricsRecord(run_id, "mean", t, report.mean["accuracy"], report.mean["f1"],
                      report.mean["loss"], per_client_bytes)
    )
    return rows


def execute_run(cfg, out_dir=None, dataset=None, run_id="run", checkpoints=True):
    """Run once; with ``out_dir`` write metrics.csv, report.json, manifest.json."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "checkpoints") if out_dir and checkpoints else None
    report = run_fdlora(cfg, dataset, checkpoint_dir=ckpt)
    records = report_records(report, run_id)
    if out_dir:
        write_csv(records, os.path.join(out_dir, "metrics.csv"))
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json())
        _write_json(os.path.join(out_dir, "manifest.json"), report.manifest)
        _write_json(os.path.join(out_dir, "partition.json"), report.partition)
    return report, records


@dataclass
class SweepSpec:
    axis: str
    values: list
    base_config: FederationConfig = field(default_factory=FederationConfig)
    repeats: int = 5

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {sorted(AXES)}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def configs(self):
        """(value, repeat, config) for every run, seeds base + 1000 * repeat."""
        name = AXES[self.axis]
        out = []
        for v in self.values:
            for r in range(self.repeats):
                seed = self.base_config.seed + REPEAT_SEED_STRIDE * r
                out.append((v, r, self.base_config.replace(**{name: v, "seed": seed})))
        return out


@dataclass
class SweepResult:
    records: list
    aggregates: list
    failures: list

    @property
    def ok(self):
        return not self.failures


def value_label(v):
    return "inf" if v == math.inf else str(v)


def aggregate(records, spec):
    """Mean/std across repeats of each value's run-level ``mean`` rows."""
    out = []
    for v in spec.values:
        prefix = f"{spec.axis}={value_label(v)}/"
        rows = [r for r in records if r.client_id == "mean" and r.run_id.startswith(prefix)]
        if not rows:
            continue
        agg = {"axis": spec.axis, "value": value_label(v), "runs": len(rows)}
        for k in ("accuracy", "f1", "loss"):
            vals = np.array([getattr(r, k) for r in rows])
            agg[f"{k}_mean"] = float(vals.mean())
            agg[f"{k}_std"] = float(vals.std())
        out.append(agg)
    return out


def run_sweep(spec, out_dir=None, jobs=1, dataset=None):
    """One run per (value, repeat); failures are collected, not raised."""
    plan = spec.configs()

    def one(item):
        v, r, cfg = item
        run_id = f"{spec.axis}={value_label(v)}/rep{r}"
        sub = os.path.join(out_dir, f"{spec.axis}={value_label(v)}", f"rep{r}") if out_dir else None
        try:
            _, records = execute_run(cfg, sub, dataset, run_id=run_id, checkpoints=False)
            return records, None
        except Exception as exc:  # noqa: BLE001 - a failed run must not stop the sweep
            return [], {"run_id": run_id, "error": f"{type(exc).__name__}: {exc}",
                        "traceback": traceback.format_exc()}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, plan))
    else:
        results = [one(item) for item in plan]
    records = [rec for recs, _ in results for rec in recs]
    failures = [f for _, f in results if f is not None]
    result = SweepResult(records, aggregate(records, spec), failures)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(records, os.path.join(out_dir, "metrics.csv"))
        write_summary(result.aggregates, os.path.join(out_dir, "sweep_summary.csv"))
        _write_json(os.path.join(out_dir, "failures.json"), failures)
    return result


SUMMARY_HEADER = ("axis", "value", "runs", "accuracy_mean", "accuracy_std",
                  "f1_mean", "f1_std", "loss_mean", "loss_std")


def write_summary(aggregates, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for a in aggregates:
            w.writerow([repr(a[k]) if isinstance(a[k], float) else a[k] for k in SUMMARY_HEADER])
