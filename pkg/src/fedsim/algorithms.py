"""Orchestration strategies: FedAvg, RingFed, Fed-Cyclic, Fed-Star and two baselines.

Every ``run_*`` function takes a :class:`~fedsim.data.Federation`, a
:class:`RunConfig` and the model config, and returns a :class:`RunResult`
with the final global weights, a per-round metric trace and the transfer
ledger. Client RNG streams are derived from ``(master_seed, client_id)``, so
the worker count never changes a result.
"""

from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import ClientDataset, Federation, derive_seed
from .metrics import confusion, global_eval, report
from .numerics import MlpConfig, SgdConfig, flatten, init_model, predict, unflatten
from .protocol import (
    SERVER,
    ClientState,
    CommLedger,
    ProtocolError,
    WeightageMatrix,
    aggregate_weighted,
    client_update,
    convex_combination,
    evaluate_accuracy,
    log_transfer,
    make_client_states,
    pre_aggregate,
    weightage_matrix,
)

STRATEGIES = ("fedavg", "ringfed", "fed_cyclic", "fed_star", "local_only", "centralized")
FEDERATED = ("fedavg", "ringfed", "fed_cyclic", "fed_star")


@dataclass(frozen=True)
class RunConfig:
    strategy: str
    rounds: int = 1
    epochs: int = 3
    periods: int = 2
    gamma: float = 0.8
    sgd: SgdConfig = field(default_factory=SgdConfig)
    master_seed: int = 0
    eval_every: int = 1
    ring_neighbors: int = 1
    strict_star_aggregation: bool = False
    relay_via_server: bool = False
    shuffle_cyclic_order: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.rounds < 1 or self.epochs < 1 or self.periods < 1 or self.eval_every < 1:
            raise ValueError("rounds, epochs, periods and eval_every must all be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.ring_neighbors < 1:
            raise ValueError("ring_neighbors must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        # The local epoch count lives on the run; keep the SGD config in step.
        if self.sgd.epochs != self.epochs:
            object.__setattr__(self, "sgd", replace(self.sgd, epochs=self.epochs))


@dataclass(frozen=True)
class RoundTrace:
    round: int
    global_acc: float
    macro_f1: float
    weighted_f1: float
    client_accs: tuple[float, ...]
    transfers: int


@dataclass
class RunResult:
    strategy: str
    final_weights: np.ndarray
    traces: list[RoundTrace]
    ledger: CommLedger
    initial_weights: np.ndarray
    client_weights: list[np.ndarray] | None = None
    last_weightage: WeightageMatrix | None = None


def initial_weights(model_config: MlpConfig) -> np.ndarray:
    return flatten(init_model(model_config))


@contextlib.contextmanager
def _round_context(strategy: str, round_no: int):
    try:
        yield
    except ProtocolError as exc:
        raise ProtocolError(f"{strategy} round {round_no}: {exc}") from exc


class _Updater:
    """Runs independent client updates, optionally on a thread pool, joined at a barrier."""

    def __init__(self, workers: int):
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, fn: Callable, items: Sequence) -> list:
        if self._pool is None:
            return [fn(item) for item in items]
        futures = [self._pool.submit(fn, item) for item in items]
        return [f.result() for f in futures]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _due(round_no: int, cfg: RunConfig) -> bool:
    return round_no % cfg.eval_every == 0 or round_no == cfg.rounds


def _global_trace(round_no: int, weights: np.ndarray, fed: Federation,
                  model_config: MlpConfig, ledger: CommLedger) -> RoundTrace:
    rep = global_eval(weights, fed, model_config)
    client_accs = tuple(evaluate_accuracy(weights, ds, "test", model_config) for ds in fed.clients)
    return RoundTrace(round_no, rep.accuracy, rep.macro_f1, rep.weighted_f1, client_accs, len(ledger))


def _train_sizes(fed: Federation) -> list[int]:
    return [ds.num_train for ds in fed.clients]


def _start(fed: Federation, cfg: RunConfig, model_config: MlpConfig, initial):
    w0 = initial_weights(model_config) if initial is None else np.array(initial, dtype=np.float64)
    if w0.shape != (model_config.num_params,):
        raise ProtocolError(f"initial weights have shape {w0.shape}, model expects ({model_config.num_params},)")
    states = make_client_states(fed.clients, w0, cfg.master_seed)
    return w0, states


def run_fedavg(fed: Federation, cfg: RunConfig, model_config: MlpConfig,
               initial: np.ndarray | None = None) -> RunResult:
    """Broadcast, local update on every client, size-weighted server average."""
    w0, states = _start(fed, cfg, model_config, initial)
    dim = w0.size
    ledger = CommLedger()
    traces = []
    sizes = _train_sizes(fed)
    w = w0
    with _Updater(cfg.workers) as pool:
        for r in range(1, cfg.rounds + 1):
            with _round_context("fedavg", r):
                for st in states:
                    log_transfer(ledger, r, None, SERVER, st.client_id, dim)
                updated = pool.map(lambda st: client_update(st, w, cfg.sgd, model_config), states)
                for st in states:
                    log_transfer(ledger, r, None, st.client_id, SERVER, dim)
                w = aggregate_weighted(updated, sizes)
            if _due(r, cfg):
                traces.append(_global_trace(r, w, fed, model_config, ledger))
    return RunResult("fedavg", w, traces, ledger, w0)


def run_fed_cyclic(fed: Federation, cfg: RunConfig, model_config: MlpConfig,
                   initial: np.ndarray | None = None) -> RunResult:
    """Pass the model client to client; each trains on top of its predecessor's result.

    The last client's weights become the new global model and are handed back
    to the first client. With ``relay_via_server`` every handoff goes through
    the server, which stores nothing and costs two transfers.
    """
    w0, states = _start(fed, cfg, model_config, initial)
    dim = w0.size
    ledger = CommLedger()
    traces = []
    order_rng = np.random.default_rng(derive_seed(cfg.master_seed, "cyclic-order"))
    w = w0
    for r in range(1, cfg.rounds + 1):
        order = list(range(len(states)))
        if cfg.shuffle_cyclic_order:
            order = [int(i) for i in order_rng.permutation(len(states))]
        with _round_context("fed_cyclic", r):
            current = w
            for pos, k in enumerate(order):
                current = client_update(states[k], current, cfg.sgd, model_config)
                src = states[k].client_id
                dst = states[order[(pos + 1) % len(order)]].client_id
                if cfg.relay_via_server:
                    log_transfer(ledger, r, None, src, SERVER, dim)
                    log_transfer(ledger, r, None, SERVER, dst, dim)
                else:
                    log_transfer(ledger, r, None, src, dst, dim)
            w = current
        if _due(r, cfg):
            traces.append(_global_trace(r, w, fed, model_config, ledger))
    return RunResult("fed_cyclic", w, traces, ledger, w0)


def run_fed_star(fed: Federation, cfg: RunConfig, model_config: MlpConfig,
                 initial: np.ndarray | None = None) -> RunResult:
    """Periods of parallel local training plus accuracy-weighted all-to-all pre-aggregation.

    Each client weighs peer j by ``1 - Acc(w_j, own train set)/100``, so models
    that fit it badly count more. After ``periods`` periods the server takes
    the size-weighted mean of the clients' models. ``strict_star_aggregation``
    applies the extra ``1/K`` factor of the literal update instead.
    """
    if fed.num_clients < 2:
        raise ProtocolError("fed_star needs at least 2 clients")
    w0, states = _start(fed, cfg, model_config, initial)
    dim = w0.size
    k_n = len(states)
    ledger = CommLedger()
    traces = []
    sizes = _train_sizes(fed)
    w = w0
    last_m = None
    with _Updater(cfg.workers) as pool:
        for r in range(1, cfg.rounds + 1):
            with _round_context("fed_star", r):
                for st in states:
                    log_transfer(ledger, r, None, SERVER, st.client_id, dim)
                local = [w] * k_n
                for p in range(1, cfg.periods + 1):
                    updated = pool.map(
                        lambda k: client_update(states[k], local[k], cfg.sgd, model_config), range(k_n)
                    )
                    for dst in states:
                        for src in states:
                            if src is not dst:
                                log_transfer(ledger, r, p, src.client_id, dst.client_id, dim)
                    last_m = weightage_matrix(updated, states, model_config)
                    local = [pre_aggregate(k, last_m, updated) for k in range(k_n)]
                for st in states:
                    log_transfer(ledger, r, None, st.client_id, SERVER, dim)
                w = aggregate_weighted(local, sizes)
                if cfg.strict_star_aggregation:
                    w = w / k_n
            if _due(r, cfg):
                traces.append(_global_trace(r, w, fed, model_config, ledger))
    return RunResult("fed_star", w, traces, ledger, w0, client_weights=list(local), last_weightage=last_m)


def ring_pre_aggregate(k: int, weights: Sequence[np.ndarray], gamma: float, neighbors: int = 1) -> np.ndarray:
    """``gamma * w_k + (1 - gamma) * mean(w_{k-1}, ..., w_{k-neighbors})`` on a ring."""
    k_n = len(weights)
    preds = [(k - i) % k_n for i in range(1, neighbors + 1)]
    coeffs = np.array([gamma] + [(1.0 - gamma) / neighbors] * neighbors)
    return convex_combination([weights[k]] + [weights[j] for j in preds], coeffs)


def run_ringfed(fed: Federation, cfg: RunConfig, model_config: MlpConfig,
                initial: np.ndarray | None = None) -> RunResult:
    """Periods of parallel local training plus mixing with ring predecessors, then FedAvg."""
    if fed.num_clients < 2:
        raise ProtocolError("ringfed needs at least 2 clients")
    if cfg.ring_neighbors > fed.num_clients - 1:
        raise ProtocolError(f"ring_neighbors={cfg.ring_neighbors} exceeds K-1={fed.num_clients - 1}")
    w0, states = _start(fed, cfg, model_config, initial)
    dim = w0.size
    k_n = len(states)
    ledger = CommLedger()
    traces = []
    sizes = _train_sizes(fed)
    w = w0
    with _Updater(cfg.workers) as pool:
        for r in range(1, cfg.rounds + 1):
            with _round_context("ringfed", r):
                for st in states:
                    log_transfer(ledger, r, None, SERVER, st.client_id, dim)
                local = [w] * k_n
                for p in range(1, cfg.periods + 1):
                    updated = pool.map(
                        lambda k: client_update(states[k], local[k], cfg.sgd, model_config), range(k_n)
                    )
                    for k in range(k_n):
                        for i in range(1, cfg.ring_neighbors + 1):
                            src = states[(k - i) % k_n].client_id
                            log_transfer(ledger, r, p, src, states[k].client_id, dim)
                    local = [ring_pre_aggregate(k, updated, cfg.gamma, cfg.ring_neighbors) for k in range(k_n)]
                for st in states:
                    log_transfer(ledger, r, None, st.client_id, SERVER, dim)
                w = aggregate_weighted(local, sizes)
            if _due(r, cfg):
                traces.append(_global_trace(r, w, fed, model_config, ledger))
    return RunResult("ringfed", w, traces, ledger, w0)


def run_local_only(fed: Federation, cfg: RunConfig, model_config: MlpConfig,
                   initial: np.ndarray | None = None) -> RunResult:
    """Each client trains alone for ``rounds * epochs`` epochs; nothing is sent.

    Global metrics pool every client's test predictions made by its own model.
    ``final_weights`` holds the first client's model; all of them are in
    ``client_weights``.
    """
    w0, states = _start(fed, cfg, model_config, initial)
    ledger = CommLedger()
    traces = []
    with _Updater(cfg.workers) as pool:
        for r in range(1, cfg.rounds + 1):
            with _round_context("local_only", r):
                pool.map(lambda st: client_update(st, st.weights, cfg.sgd, model_config), states)
            if _due(r, cfg):
                traces.append(_local_trace(r, [st.weights for st in states], fed, model_config, ledger))
    weights = [st.weights for st in states]
    return RunResult("local_only", weights[0], traces, ledger, w0, client_weights=weights)


def _local_trace(round_no, weights, fed, model_config, ledger) -> RoundTrace:
    preds, truths, accs = [], [], []
    for w, ds in zip(weights, fed.clients):
        x, y = ds.view("test")
        p = predict(unflatten(w, model_config), x)
        preds.append(p)
        truths.append(y)
        accs.append(100.0 * float(np.mean(p == y)))
    rep = report(confusion(np.concatenate(preds), np.concatenate(truths), fed.num_classes))
    return RoundTrace(round_no, rep.accuracy, rep.macro_f1, rep.weighted_f1, tuple(accs), len(ledger))


def pooled_train_set(fed: Federation) -> ClientDataset:
    xs, ys = zip(*(ds.view("train") for ds in fed.clients))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    cid = "+".join(ds.client_id for ds in fed.clients)
    idx = np.arange(y.size, dtype=np.int64)
    return ClientDataset(cid, x, y, idx, np.zeros(0, dtype=np.int64))


def run_centralized(fed: Federation, cfg: RunConfig, model_config: MlpConfig,
                    initial: np.ndarray | None = None) -> RunResult:
    """Plain SGD on the union of all train views; the reference upper baseline."""
    w0 = initial_weights(model_config) if initial is None else np.array(initial, dtype=np.float64)
    pooled = pooled_train_set(fed)
    state = ClientState.create(pooled, w0, cfg.master_seed)
    ledger = CommLedger()
    traces = []
    w = w0
    for r in range(1, cfg.rounds + 1):
        with _round_context("centralized", r):
            w = client_update(state, w, cfg.sgd, model_config)
        if _due(r, cfg):
            traces.append(_global_trace(r, w, fed, model_config, ledger))
    return RunResult("centralized", w, traces, ledger, w0)


RUNNERS = {
    "fedavg": run_fedavg,
    "ringfed": run_ringfed,
    "fed_cyclic": run_fed_cyclic,
    "fed_star": run_fed_star,
    "local_only": run_local_only,
    "centralized": run_centralized,
}


def run_strategy(fed: Federation, cfg: RunConfig, model_config: MlpConfig,
                 initial: np.ndarray | None = None) -> RunResult:
    return RUNNERS[cfg.strategy](fed, cfg, model_config, initial)


def expected_transfers_per_round(strategy: str, num_clients: int, periods: int = 1,
                                 ring_neighbors: int = 1, relay_via_server: bool = False) -> int:
    """Closed-form ledger size for one round of ``strategy``."""
    k = num_clients
    if strategy == "fedavg":
        return 2 * k
    if strategy == "fed_cyclic":
        return 2 * k if relay_via_server else k
    if strategy == "fed_star":
        return periods * k * (k - 1) + 2 * k
    if strategy == "ringfed":
        return periods * k * ring_neighbors + 2 * k
    if strategy in ("local_only", "centralized"):
        return 0
    raise ValueError(f"unknown strategy {strategy!r}")
