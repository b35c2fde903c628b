"""Primitives shared by every orchestrator.

Aggregations are convex combinations evaluated around the input with the
largest coefficient (``anchor + sum c_j (w_j - anchor)``). That form is
algebraically the plain weighted sum, but it returns the input bit-for-bit
when all inputs coincide or when one coefficient is 1.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .data import ClientDataset, derive_seed
from .numerics import MlpConfig, SgdConfig, ShapeError, predict, sgd_epoch, unflatten, flatten

SERVER = "SERVER"

Endpoint = Union[str, int]


class ProtocolError(RuntimeError):
    """A protocol step could not run (empty data, mismatched inputs, ...)."""


@dataclass
class ClientState:
    client_id: str
    dataset: ClientDataset
    weights: np.ndarray
    rng: np.random.Generator

    @classmethod
    def create(cls, dataset: ClientDataset, initial: np.ndarray, master_seed: int) -> "ClientState":
        rng = np.random.default_rng(derive_seed(master_seed, "client-train", dataset.client_id))
        return cls(dataset.client_id, dataset, np.array(initial, dtype=np.float64), rng)


def make_client_states(clients: Sequence[ClientDataset], initial: np.ndarray,
                       master_seed: int) -> list[ClientState]:
    return [ClientState.create(ds, initial, master_seed) for ds in clients]


@dataclass
class GlobalState:
    round: int
    global_weights: np.ndarray
    model_config: MlpConfig
    sgd: SgdConfig


def client_update(state: ClientState, incoming: np.ndarray, cfg: SgdConfig,
                  model_config: MlpConfig) -> np.ndarray:
    """Run ``cfg.epochs`` SGD epochs on the client's train view starting from ``incoming``.

    Advances ``state.rng`` and stores the result in ``state.weights``.
    """
    if state.dataset.num_train == 0:
        raise ProtocolError(f"client {state.client_id} has an empty train set")
    try:
        model = unflatten(incoming, model_config)
    except ShapeError as exc:
        raise ProtocolError(f"client {state.client_id}: {exc}") from None
    x, y = state.dataset.view("train")
    for _ in range(cfg.epochs):
        model = sgd_epoch(model, x, y, cfg, state.rng)
    state.weights = flatten(model)
    return state.weights


def _stack(weights: Sequence[np.ndarray]) -> np.ndarray:
    if len(weights) == 0:
        raise ProtocolError("cannot aggregate an empty list of weight vectors")
    dims = {np.shape(w) for w in weights}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ProtocolError(f"weight vectors disagree in shape: {sorted(dims)}")
    return np.stack([np.asarray(w, dtype=np.float64) for w in weights])


def convex_combination(weights: Sequence[np.ndarray], coeffs: np.ndarray) -> np.ndarray:
    stacked = _stack(weights)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (stacked.shape[0],):
        raise ProtocolError("need exactly one coefficient per weight vector")
    anchor_i = int(np.argmax(coeffs))
    anchor = stacked[anchor_i]
    out = anchor.copy()
    for j, c in enumerate(coeffs):
        if j != anchor_i and c != 0.0:
            out += c * (stacked[j] - anchor)
    return out


def size_coefficients(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ProtocolError("cannot aggregate an empty list of weight vectors")
    if np.any(sizes <= 0):
        raise ProtocolError("dataset sizes must be positive")
    return sizes / sizes.sum()


def aggregate_weighted(weights: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """Size-proportional average ``sum_k |D_k|/|D| * w_k``."""
    if len(weights) != len(sizes):
        raise ProtocolError("need exactly one size per weight vector")
    return convex_combination(weights, size_coefficients(sizes))


def evaluate_accuracy(weights: np.ndarray, ds: ClientDataset, view: str,
                      model_config: MlpConfig) -> float:
    """Percentage of argmax-correct predictions, dropout off."""
    x, y = ds.view(view)
    if y.size == 0:
        raise ProtocolError(f"client {ds.client_id} has an empty {view} view")
    model = unflatten(weights, model_config)
    return 100.0 * float(np.mean(predict(model, x) == y))


@dataclass(frozen=True)
class WeightageMatrix:
    entries: np.ndarray

    def __post_init__(self) -> None:
        m = self.entries
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ProtocolError(f"weightage matrix must be square, got {m.shape}")
        if np.any(m < 0.0) or np.any(m > 1.0):
            raise ProtocolError("weightage entries must lie in [0, 1]")

    @classmethod
    def from_accuracies(cls, acc: np.ndarray) -> "WeightageMatrix":
        """``acc[k, j]`` is the accuracy (0..100) of model j on client k's train view."""
        return cls(1.0 - np.asarray(acc, dtype=np.float64) / 100.0)

    def __getitem__(self, idx):
        return self.entries[idx]


def weightage_matrix(all_weights: Sequence[np.ndarray], clients: Sequence[ClientState],
                     model_config: MlpConfig) -> WeightageMatrix:
    if len(clients) < 2 or len(all_weights) != len(clients):
        raise ProtocolError("weightage matrix needs K >= 2 clients and one weight vector per client")
    k_n = len(clients)
    acc = np.empty((k_n, k_n))
    for j, w in enumerate(all_weights):
        model = unflatten(w, model_config)
        for k, st in enumerate(clients):
            x, y = st.dataset.view("train")
            if y.size == 0:
                raise ProtocolError(f"client {st.client_id} has an empty train view")
            acc[k, j] = 100.0 * float(np.mean(predict(model, x) == y))
    return WeightageMatrix.from_accuracies(acc)


DEGENERATE_SUM = 1e-12


def pre_aggregate_coefficients(row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    total = row.sum()
    if total < DEGENERATE_SUM:
        # Every model fits this client perfectly; treat them as equally good.
        return np.full(row.shape, 1.0 / row.size)
    return row / total


def pre_aggregate(k: int, m: WeightageMatrix, all_weights: Sequence[np.ndarray]) -> np.ndarray:
    """Client k's pre-aggregated model: ``sum_j M(k,j) w_j / sum_j M(k,j)``."""
    return convex_combination(all_weights, pre_aggregate_coefficients(m[k]))


@dataclass(frozen=True)
class TransferEvent:
    round: int
    period: int | None
    src: Endpoint
    dst: Endpoint
    payload_dim: int


@dataclass
class CommLedger:
    """Append-only record of parameter transfers. Appends are serialized."""

    events: list[TransferEvent] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.events)

    def count(self, round: int | None = None) -> int:
        if round is None:
            return len(self.events)
        return sum(1 for e in self.events if e.round == round)

    def canonical(self) -> list[TransferEvent]:
        """Events ordered by (round, period, from, to) for order-insensitive comparison."""
        return sorted(self.events, key=lambda e: (e.round, -1 if e.period is None else e.period,
                                                  str(e.src), str(e.dst)))


def log_transfer(ledger: CommLedger, round: int, period: int | None, src: Endpoint,
                 dst: Endpoint, dim: int) -> None:
    with ledger._lock:
        ledger.events.append(TransferEvent(round, period, src, dst, int(dim)))
