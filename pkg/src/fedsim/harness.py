"""Config-driven experiment runner and result writers.

A config is a TOML document. Top-level keys: ``master_seed``,
``output_dir``, ``threshold``, ``workers``, and the tables ``[data]``,
``[model]``, ``[[run]]`` and an optional ``[sweep]``. Unknown keys are
rejected with the line they appear on.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import tomli

from .algorithms import STRATEGIES, RoundTrace, RunConfig, RunResult, run_strategy
from .data import DomainShiftSpec, Federation, ParseError, StratificationError, generate_federation, load_manifest, write_manifest
from .metrics import rounds_to_threshold
from .numerics import MlpConfig, SgdConfig

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("strategy", "seed", "lr", "gamma", "P", "E", "R", "round", "global_acc",
                  "macro_f1", "weighted_f1", "client_accs", "transfers")
LEDGER_COLUMNS = ("round", "period", "from", "to", "payload_dim")
SWEEP_AXES = ("learning_rate", "gamma", "strategy")

_TOP_KEYS = {"master_seed", "output_dir", "threshold", "workers", "data", "model", "run", "sweep"}
_SYNTH_KEYS = {"num_clients", "num_classes", "feature_dim", "samples_per_client", "shift_scale",
               "label_skew", "seed", "noise_scale", "train_ratio"}
_MODEL_KEYS = {"hidden_dims", "dropout_rate", "seed"}
_RUN_KEYS = {"strategy", "rounds", "epochs", "periods", "gamma", "learning_rate", "batch_size",
             "eval_every", "ring_neighbors", "strict_star_aggregation", "relay_via_server",
             "shuffle_cyclic_order"}
_SWEEP_KEYS = {"axis", "values"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    master_seed: int
    output_dir: Path
    runs: list[RunConfig]
    synthetic: DomainShiftSpec | None = None
    manifest: Path | None = None
    hidden_dims: tuple[int, ...] = (1024, 256)
    dropout_rate: float = 0.5
    model_seed: int | None = None
    threshold: float = 80.0
    workers: int = 1
    sweep_axis: str | None = None
    sweep_values: list = field(default_factory=list)

    def expanded_runs(self) -> list[RunConfig]:
        """Cross product of the run list with the sweep axis, in config order."""
        if self.sweep_axis is None:
            return list(self.runs)
        out = []
        for run, value in itertools.product(self.runs, self.sweep_values):
            if self.sweep_axis == "learning_rate":
                out.append(replace(run, sgd=replace(run.sgd, learning_rate=float(value))))
            elif self.sweep_axis == "gamma":
                # gamma only means something to RingFed; other strategies run once.
                if run.strategy != "ringfed":
                    if value == self.sweep_values[0]:
                        out.append(run)
                    continue
                out.append(replace(run, gamma=float(value)))
            else:
                out.append(replace(run, strategy=str(value)))
        return out


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*(\[\[?\s*)?([\w.]*\.)?{re.escape(key)}\s*(=|\]|\.)")
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return i
    return None


def _fail(text: str, key: str, msg: str):
    line = _line_of(text, key)
    where = f"line {line}: " if line else ""
    raise ConfigError(f"{where}{msg}")


def _check_keys(text: str, table: dict, allowed: set, where: str) -> None:
    for key in table:
        if key not in allowed:
            _fail(text, key, f"unknown key {key!r} in {where}; allowed: {sorted(allowed)}")


def _build(ctor, text: str, key_hint: str, **kwargs):
    try:
        return ctor(**kwargs)
    except (TypeError, ValueError) as exc:
        _fail(text, key_hint, str(exc))


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from None
    base_dir = base_dir or Path(".")
    _check_keys(text, doc, _TOP_KEYS, "top level")

    master_seed = int(doc.get("master_seed", 0))
    output_dir = Path(doc.get("output_dir", "results"))
    if not output_dir.is_absolute():
        output_dir = base_dir / output_dir

    data = doc.get("data")
    if not isinstance(data, dict):
        raise ConfigError("missing [data] table (need data.synthetic or data.manifest)")
    _check_keys(text, data, {"synthetic", "manifest"}, "[data]")
    if ("synthetic" in data) == ("manifest" in data):
        _fail(text, "data", "exactly one data source required: [data.synthetic] or data.manifest")
    synthetic = manifest = None
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        _check_keys(text, syn, _SYNTH_KEYS, "[data.synthetic]")
        syn.setdefault("seed", master_seed)
        if isinstance(syn.get("samples_per_client"), list):
            syn["samples_per_client"] = tuple(syn["samples_per_client"])
        synthetic = _build(DomainShiftSpec, text, "synthetic", **syn)
    else:
        manifest = Path(data["manifest"])
        if not manifest.is_absolute():
            manifest = base_dir / manifest

    model = doc.get("model", {})
    _check_keys(text, model, _MODEL_KEYS, "[model]")

    runs_raw = doc.get("run")
    if not runs_raw:
        raise ConfigError("at least one [[run]] table is required")
    sweep = doc.get("sweep")
    sweep_axis, sweep_values = None, []
    if sweep is not None:
        _check_keys(text, sweep, _SWEEP_KEYS, "[sweep]")
        sweep_axis = sweep.get("axis")
        sweep_values = list(sweep.get("values", []))
        if sweep_axis not in SWEEP_AXES:
            _fail(text, "axis", f"sweep axis must be one of {SWEEP_AXES}, got {sweep_axis!r}")
        if not sweep_values:
            _fail(text, "values", "sweep values must be non-empty")
        if sweep_axis == "strategy":
            bad = [v for v in sweep_values if v not in STRATEGIES]
            if bad:
                _fail(text, "values", f"unknown strategies in sweep: {bad}")

    runs = []
    for raw in runs_raw:
        raw = dict(raw)
        _check_keys(text, raw, _RUN_KEYS, "[[run]]")
        if "strategy" not in raw:
            if sweep_axis != "strategy":
                raise ConfigError("[[run]] needs a strategy unless the sweep axis is strategy")
            raw["strategy"] = sweep_values[0]
        sgd = _build(SgdConfig, text, "learning_rate",
                     learning_rate=float(raw.pop("learning_rate", 3e-4)),
                     batch_size=int(raw.pop("batch_size", 64)),
                     epochs=int(raw.get("epochs", 3)))
        runs.append(_build(RunConfig, text, "strategy", sgd=sgd, master_seed=master_seed, **raw))

    return ExperimentConfig(
        master_seed=master_seed,
        output_dir=output_dir,
        runs=runs,
        synthetic=synthetic,
        manifest=manifest,
        hidden_dims=tuple(model.get("hidden_dims", (1024, 256))),
        dropout_rate=float(model.get("dropout_rate", 0.5)),
        model_seed=model.get("seed"),
        threshold=float(doc.get("threshold", 80.0)),
        workers=int(doc.get("workers", 1)),
        sweep_axis=sweep_axis,
        sweep_values=sweep_values,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_config(text, path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_federation(cfg: ExperimentConfig) -> Federation:
    if cfg.synthetic is not None:
        return generate_federation(cfg.synthetic)
    return load_manifest(cfg.manifest)


def model_config_for(cfg: ExperimentConfig, fed: Federation) -> MlpConfig:
    seed = cfg.master_seed if cfg.model_seed is None else int(cfg.model_seed)
    return MlpConfig(fed.feature_dim, cfg.hidden_dims, fed.num_classes, cfg.dropout_rate, seed)


def run_label(idx: int, run: RunConfig) -> str:
    parts = [f"{idx:02d}", run.strategy, f"lr{run.sgd.learning_rate:g}"]
    if run.strategy == "ringfed":
        parts.append(f"g{run.gamma:g}")
    return "_".join(parts)


def _fmt(v: float) -> str:
    return repr(float(v))


def result_rows(run: RunConfig, traces: list[RoundTrace]) -> list[dict[str, str]]:
    periodic = run.strategy in ("fed_star", "ringfed")
    rows = []
    for t in traces:
        rows.append({
            "strategy": run.strategy,
            "seed": str(run.master_seed),
            "lr": _fmt(run.sgd.learning_rate),
            "gamma": _fmt(run.gamma) if run.strategy == "ringfed" else "",
            "P": str(run.periods) if periodic else "",
            "E": str(run.epochs),
            "R": str(run.rounds),
            "round": str(t.round),
            "global_acc": _fmt(t.global_acc),
            "macro_f1": _fmt(t.macro_f1),
            "weighted_f1": _fmt(t.weighted_f1),
            "client_accs": json.dumps([float(a) for a in t.client_accs]),
            "transfers": str(t.transfers),
        })
    return rows


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_results(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def _ledger_rows(result: RunResult):
    for e in result.ledger.events:
        yield {"round": e.round, "period": "" if e.period is None else e.period,
               "from": e.src, "to": e.dst, "payload_dim": e.payload_dim}


def summarize(run: RunConfig, result: RunResult, client_ids: list[str], threshold: float) -> dict[str, Any]:
    final = result.traces[-1]
    return {
        "strategy": run.strategy,
        "seed": run.master_seed,
        "lr": run.sgd.learning_rate,
        "gamma": run.gamma if run.strategy == "ringfed" else None,
        "P": run.periods if run.strategy in ("fed_star", "ringfed") else None,
        "E": run.epochs,
        "R": run.rounds,
        "final": {
            "round": final.round,
            "global_acc": final.global_acc,
            "macro_f1": final.macro_f1,
            "weighted_f1": final.weighted_f1,
            "client_accs": dict(zip(client_ids, final.client_accs)),
        },
        "transfers": len(result.ledger),
        "options": {
            "strict_star_aggregation": run.strict_star_aggregation,
            "relay_via_server": run.relay_via_server,
            "shuffle_cyclic_order": run.shuffle_cyclic_order,
            "ring_neighbors": run.ring_neighbors,
        },
        "threshold": threshold,
        "rounds_to_threshold": rounds_to_threshold(result.traces, threshold),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[Path]:
    """Execute every (swept) run on one shared federation and w_init; return summary paths.

    Writes per run ``<label>/results.csv``, ``ledger.csv``, ``summary.json``;
    top level ``results.csv`` (all runs), ``local_eval.csv`` (final per-client
    test accuracy per run) and ``comparison.txt``.
    """
    fed = build_federation(cfg)
    model_config = model_config_for(cfg, fed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    client_ids = [ds.client_id for ds in fed.clients]
    n_workers = workers if workers is not None else cfg.workers

    all_rows, summaries, local_cols = [], [], {}
    for idx, run in enumerate(cfg.expanded_runs()):
        run = replace(run, workers=n_workers)
        label = run_label(idx, run)
        log.info("run %s", label)
        result = run_strategy(fed, run, model_config)
        run_dir = out / label
        run_dir.mkdir(exist_ok=True)
        rows = result_rows(run, result.traces)
        _write_csv(run_dir / "results.csv", RESULT_COLUMNS, rows)
        _write_csv(run_dir / "ledger.csv", LEDGER_COLUMNS, _ledger_rows(result))
        summary = summarize(run, result, client_ids, cfg.threshold)
        summary["label"] = label
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        summaries.append(run_dir / "summary.json")
        all_rows.extend(rows)
        local_cols[label] = result.traces[-1].client_accs

    _write_csv(out / "results.csv", RESULT_COLUMNS, all_rows)
    labels = list(local_cols)
    _write_csv(out / "local_eval.csv", ["client_id", *labels],
               ({"client_id": cid, **{lab: _fmt(local_cols[lab][i]) for lab in labels}}
                for i, cid in enumerate(client_ids)))
    (out / "comparison.txt").write_text(compare(summaries) + "\n", encoding="utf-8")
    return summaries


def compare(paths) -> str:
    """Plain-text table of final metrics, one row per summary, sorted by strategy."""
    rows = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"summary not found: {p}")
        s = json.loads(p.read_text(encoding="utf-8"))
        rows.append(s)
    rows.sort(key=lambda s: (s["strategy"], s["lr"], s["gamma"] if s["gamma"] is not None else -1.0))
    header = ["strategy", "lr", "gamma", "P", "E", "R", "acc", "macro_f1", "weighted_f1", "transfers", "rounds_to_thr"]
    table = [header]
    for s in rows:
        f = s["final"]
        rtt = s["rounds_to_threshold"]
        table.append([
            s["strategy"], f"{s['lr']:g}", "-" if s["gamma"] is None else f"{s['gamma']:g}",
            "-" if s["P"] is None else str(s["P"]), str(s["E"]), str(s["R"]),
            f"{f['global_acc']:.2f}", f"{f['macro_f1']:.2f}", f"{f['weighted_f1']:.2f}",
            str(s["transfers"]), "-" if rtt is None else str(rtt),
        ])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table)


def gen_data(spec: DomainShiftSpec, out_dir) -> Path:
    """Write one feature file per client plus ``manifest.json``."""
    fed = generate_federation(spec)
    return write_manifest(fed, out_dir, spec.seed, spec.train_ratio)


__all__ = [
    "ConfigError", "ExperimentConfig", "RESULT_COLUMNS", "compare", "gen_data", "load_config",
    "parse_config", "read_results", "run_experiment", "ParseError", "StratificationError",
]
