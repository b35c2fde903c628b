import json
from pathlib import Path

import numpy as np
import pytest

import fedsim.algorithms as algorithms
from fedsim.cli import main
from fedsim.data import DomainShiftSpec, generate_federation, load_manifest
from fedsim.harness import (
    RESULT_COLUMNS,
    ConfigError,
    compare,
    gen_data,
    load_config,
    parse_config,
    read_results,
    run_experiment,
)
from fedsim.protocol import ProtocolError

BASE = """\
master_seed = 3
output_dir = "{out}"
threshold = 30.0

[data.synthetic]
num_clients = 3
num_classes = 3
feature_dim = 4
samples_per_client = 30
shift_scale = 1.0

[model]
hidden_dims = [6]
dropout_rate = 0.5
"""

RUN = """
[[run]]
strategy = "{strategy}"
rounds = 2
epochs = 1
periods = 2
learning_rate = {lr}
batch_size = 8
"""


def _write(tmp_path, body, name="exp.toml"):
    p = tmp_path / name
    p.write_text(BASE.format(out=(tmp_path / "out").as_posix()) + body)
    return p


def test_strategy_list_gives_paired_runs(tmp_path):
    body = "".join(RUN.format(strategy=s, lr=0.0) for s in ("fedavg", "fed_cyclic", "fed_star", "ringfed"))
    summaries = run_experiment(load_config(_write(tmp_path, body)))
    assert len(summaries) == 4
    results = [read_results(p.parent / "results.csv") for p in summaries]
    # lr = 0 keeps every run at w_init, so equal metrics prove the shared federation and w_init.
    assert len({r[0]["global_acc"] for r in results}) == 1
    assert len({r[0]["seed"] for r in results}) == 1
    for p in summaries:
        assert (p.parent / "ledger.csv").is_file()


def test_lr_sweep_expands_per_strategy(tmp_path):
    body = RUN.format(strategy="fedavg", lr=0.1) + RUN.format(strategy="fed_star", lr=0.1) + \
        '\n[sweep]\naxis = "learning_rate"\nvalues = [1e-3, 3e-3, 7e-3, 3e-4]\n'
    cfg = load_config(_write(tmp_path, body))
    runs = cfg.expanded_runs()
    assert len(runs) == 8
    for s in ("fedavg", "fed_star"):
        assert sorted(r.sgd.learning_rate for r in runs if r.strategy == s) == [3e-4, 1e-3, 3e-3, 7e-3]


def test_gamma_sweep_only_touches_ringfed(tmp_path):
    body = RUN.format(strategy="ringfed", lr=0.1) + RUN.format(strategy="fedavg", lr=0.1) + \
        '\n[sweep]\naxis = "gamma"\nvalues = [0.2, 0.5, 0.8, 1.0]\n'
    runs = load_config(_write(tmp_path, body)).expanded_runs()
    assert [r.gamma for r in runs if r.strategy == "ringfed"] == [0.2, 0.5, 0.8, 1.0]
    assert sum(r.strategy == "fedavg" for r in runs) == 1


def test_results_csv_schema_and_determinism(tmp_path):
    cfg_path = _write(tmp_path, RUN.format(strategy="fed_star", lr=0.05))
    run_experiment(load_config(cfg_path))
    first = (tmp_path / "out" / "results.csv").read_bytes()
    rows = read_results(tmp_path / "out" / "results.csv")
    assert tuple(rows[0]) == RESULT_COLUMNS
    assert [r["round"] for r in rows] == ["1", "2"]
    assert len(json.loads(rows[0]["client_accs"])) == 3
    run_experiment(load_config(cfg_path))
    assert (tmp_path / "out" / "results.csv").read_bytes() == first


def test_unknown_key_reports_line(tmp_path):
    body = RUN.format(strategy="fedavg", lr=0.1).replace("rounds = 2", "rounds = 2\nroundz = 3")
    with pytest.raises(ConfigError, match=r"line \d+: unknown key 'roundz'"):
        load_config(_write(tmp_path, body))


def test_toml_syntax_error_reports_line(tmp_path):
    with pytest.raises(ConfigError, match="line"):
        load_config(_write(tmp_path, "[[run]\nstrategy = 'fedavg'\n"))


@pytest.mark.parametrize("body, match", [
    ("", "at least one"),
    (RUN.format(strategy="fedprox", lr=0.1), "unknown strategy"),
    (RUN.format(strategy="fedavg", lr=-1.0), "learning_rate"),
    (RUN.format(strategy="fedavg", lr=0.1) + '\n[sweep]\naxis = "momentum"\nvalues = [1]\n', "sweep axis"),
    (RUN.format(strategy="fedavg", lr=0.1) + '\n[sweep]\naxis = "gamma"\nvalues = []\n', "non-empty"),
])
def test_invalid_configs(tmp_path, body, match):
    with pytest.raises(ConfigError, match=match):
        load_config(_write(tmp_path, body))


def test_two_data_sources_rejected():
    text = BASE.format(out="x") + '[data]\nmanifest = "m.json"\n' + RUN.format(strategy="fedavg", lr=0.1)
    with pytest.raises(ConfigError):
        parse_config(text)


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = _write(tmp_path, RUN.format(strategy="fedavg", lr=0.1).replace("epochs", "epoch"))
    assert main(["run", str(p)]) == 2
    assert "epoch" in capsys.readouterr().err


def test_cli_runtime_error_exit_code(tmp_path, monkeypatch, capsys):
    calls = {"n": 0}
    real = algorithms.client_update

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 3:
            raise ProtocolError("client went away")
        return real(*args, **kwargs)

    monkeypatch.setattr(algorithms, "client_update", flaky)
    p = _write(tmp_path, RUN.format(strategy="fedavg", lr=0.1))
    assert main(["run", str(p)]) == 3
    err = capsys.readouterr().err
    assert "fedavg round 2" in err


def test_cli_flags(tmp_path, capsys):
    p = _write(tmp_path, RUN.format(strategy="fed_cyclic", lr=0.1))
    out = tmp_path / "relay"
    assert main(["run", str(p), "--out", str(out), "--relay-via-server", "--seed", "9", "--workers", "2"]) == 0
    summary = json.loads(next(out.glob("*/summary.json")).read_text())
    assert summary["transfers"] == 2 * 2 * 3
    assert summary["seed"] == 9
    assert "fed_cyclic" in capsys.readouterr().out


def test_cli_strict_star_flag(tmp_path):
    p = _write(tmp_path, RUN.format(strategy="fed_star", lr=0.3))
    main(["run", str(p), "--out", str(tmp_path / "a")])
    main(["run", str(p), "--out", str(tmp_path / "b"), "--strict-star-aggregation"])
    a = json.loads(next((tmp_path / "a").glob("*/summary.json")).read_text())
    b = json.loads(next((tmp_path / "b").glob("*/summary.json")).read_text())
    assert not a["options"]["strict_star_aggregation"]
    assert b["options"]["strict_star_aggregation"]
    assert a["final"] != b["final"]


def _summary(tmp_path, name, strategy, acc):
    p = tmp_path / name
    p.write_text(json.dumps({
        "strategy": strategy, "seed": 1, "lr": 0.001, "gamma": None, "P": None, "E": 3, "R": 5,
        "final": {"round": 5, "global_acc": acc, "macro_f1": acc, "weighted_f1": acc, "client_accs": {}},
        "transfers": 10, "threshold": 50.0, "rounds_to_threshold": 4,
    }))
    return p


def test_compare_single_and_sorted(tmp_path):
    one = compare([_summary(tmp_path, "a.json", "fedavg", 12.5)])
    assert len(one.splitlines()) == 2
    two = compare([_summary(tmp_path, "b.json", "fedavg", 1.0), _summary(tmp_path, "c.json", "fed_cyclic", 2.0)])
    lines = two.splitlines()
    assert lines[1].startswith("fed_cyclic") and lines[2].startswith("fedavg")


def test_compare_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    with pytest.raises(FileNotFoundError, match="nope.json"):
        compare([missing])
    assert main(["compare", str(missing)]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_gen_data_files_and_round_trip(tmp_path):
    spec = DomainShiftSpec(num_clients=8, num_classes=3, feature_dim=4, samples_per_client=20,
                           shift_scale=1.3, label_skew=0.4, seed=5)
    manifest = gen_data(spec, tmp_path / "d")
    assert len(list((tmp_path / "d").glob("client_*.csv"))) == 8
    back = load_manifest(manifest)
    for a, b in zip(generate_federation(spec).clients, back.clients):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.train_idx, b.train_idx)


def test_gen_data_cli_seed_changes_files(tmp_path):
    args = ["gen-data", "--clients", "2", "--classes", "2", "--feature-dim", "3", "--samples", "10"]
    assert main(args + ["--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--seed", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/client_0.csv").read_text() != (tmp_path / "b/client_0.csv").read_text()


def test_manifest_data_source(tmp_path):
    spec = DomainShiftSpec(num_clients=3, num_classes=3, feature_dim=4, samples_per_client=30, seed=2)
    gen_data(spec, tmp_path / "data")
    text = BASE.split("[data.synthetic]")[0].format(out=(tmp_path / "out").as_posix())
    text += '[data]\nmanifest = "data/manifest.json"\n[model]\nhidden_dims = []\n'
    text += RUN.format(strategy="fedavg", lr=0.1)
    p = tmp_path / "m.toml"
    p.write_text(text)
    summaries = run_experiment(load_config(p))
    assert json.loads(Path(summaries[0]).read_text())["final"]["client_accs"].keys() == \
        {"client_0", "client_1", "client_2"}
