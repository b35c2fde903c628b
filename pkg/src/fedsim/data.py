"""Per-client datasets: synthetic domain-shifted federations, feature files, splits."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class ParseError(ValueError):
    """Malformed feature file; the message names the offending line."""


class StratificationError(ValueError):
    """A class cannot be split into non-empty train and test parts."""


def stable_hash(token: str) -> int:
    """Process-independent 32-bit hash (Python's ``hash`` is salted per run)."""
    return zlib.crc32(str(token).encode("utf-8"))


def derive_seed(master_seed: int, *tokens) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *(stable_hash(t) for t in tokens)])


@dataclass(frozen=True)
class ClientDataset:
    client_id: str
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_split(self) -> bool:
        return self.train_idx.size + self.test_idx.size == self.num_samples and self.num_samples > 0

    def view(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "train":
            idx = self.train_idx
        elif which == "test":
            idx = self.test_idx
        elif which == "all":
            return self.features, self.labels
        else:
            raise ValueError(f"unknown view {which!r}")
        return self.features[idx], self.labels[idx]

    @property
    def num_train(self) -> int:
        return int(self.train_idx.size)


@dataclass(frozen=True)
class Federation:
    clients: tuple[ClientDataset, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "clients", tuple(self.clients))
        if not self.clients:
            raise ValueError("a federation needs at least one client")
        dims = {c.feature_dim for c in self.clients}
        if len(dims) != 1:
            raise ValueError(f"clients disagree on feature dimension: {sorted(dims)}")
        for c in self.clients:
            if c.labels.size and (c.labels.min() < 0 or c.labels.max() >= self.num_classes):
                raise ValueError(f"client {c.client_id} has labels outside [0, {self.num_classes})")

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def feature_dim(self) -> int:
        return self.clients[0].feature_dim


@dataclass(frozen=True)
class DomainShiftSpec:
    num_clients: int = 8
    num_classes: int = 31
    feature_dim: int = 32
    samples_per_client: int | tuple[int, ...] = 200
    shift_scale: float = 0.0
    label_skew: float = 0.0
    seed: int = 0
    noise_scale: float = 1.0
    train_ratio: float = 0.8

    def __post_init__(self) -> None:
        if isinstance(self.samples_per_client, (list, tuple)):
            object.__setattr__(self, "samples_per_client", tuple(int(s) for s in self.samples_per_client))
            if len(self.samples_per_client) != self.num_clients:
                raise ValueError("samples_per_client list must have one entry per client")
        for name in ("num_clients", "num_classes", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.client_sizes) < 1:
            raise ValueError("samples_per_client must be >= 1")
        if self.shift_scale < 0:
            raise ValueError("shift_scale must be non-negative")
        if not 0.0 <= self.label_skew <= 1.0:
            raise ValueError("label_skew must be in [0, 1]")

    @property
    def client_sizes(self) -> tuple[int, ...]:
        if isinstance(self.samples_per_client, tuple):
            return self.samples_per_client
        return (int(self.samples_per_client),) * self.num_clients


def client_name(k: int) -> str:
    return f"client_{k}"


def _class_counts(n: int, num_classes: int, label_skew: float, rng: np.random.Generator) -> np.ndarray:
    if label_skew == 0.0:
        counts = np.full(num_classes, n // num_classes, dtype=np.int64)
        counts[: n % num_classes] += 1
        if counts.min() < 2:
            raise StratificationError(
                f"{n} samples cannot give each of {num_classes} classes the 2 samples a train/test split needs"
            )
        return counts
    if n < 2:
        raise StratificationError("a client needs at least 2 samples")
    # label_skew -> 1 drives the Dirichlet concentration toward 0 (one dominant class).
    alpha = max((1.0 - label_skew) / label_skew, 1e-3)
    props = rng.dirichlet(np.full(num_classes, alpha))
    counts = rng.multinomial(n, props).astype(np.int64)
    # Singleton classes cannot be stratified; top them up from the largest class.
    for c in np.flatnonzero(counts == 1):
        donor = int(np.argmax(counts))
        if counts[donor] >= 4:
            counts[donor] -= 1
            counts[c] += 1
        else:
            counts[donor] += 1
            counts[c] -= 1
    return counts


def generate_federation(spec: DomainShiftSpec) -> Federation:
    """Sample a federation whose clients differ by an affine feature shift and label mix.

    Class prototypes are shared; each sample is prototype plus Gaussian noise,
    pushed through the client's map ``x -> x @ A_k.T + b_k``. With
    ``shift_scale == 0`` and ``label_skew == 0`` all clients follow one law.
    """
    d, C = spec.feature_dim, spec.num_classes
    proto_rng = np.random.default_rng(derive_seed(spec.seed, "prototypes"))
    prototypes = proto_rng.standard_normal((C, d))

    clients = []
    for k, n in enumerate(spec.client_sizes):
        cid = client_name(k)
        rng = np.random.default_rng(derive_seed(spec.seed, "client", cid))
        counts = _class_counts(n, C, spec.label_skew, rng)
        labels = np.repeat(np.arange(C), counts)
        rng.shuffle(labels)
        x = prototypes[labels] + spec.noise_scale * rng.standard_normal((n, d))
        mixing = rng.standard_normal((d, d)) / math.sqrt(d)
        offset = rng.standard_normal(d)
        if spec.shift_scale > 0:
            transform = np.eye(d) + spec.shift_scale * mixing
            x = x @ transform.T + spec.shift_scale * offset
        ds = ClientDataset(cid, x, labels.astype(np.int64))
        clients.append(split_train_test(ds, spec.train_ratio, split_seed(spec.seed, cid)))
    return Federation(tuple(clients), C)


def split_seed(seed: int, client_id: str) -> int:
    return int(derive_seed(seed, "split", client_id).generate_state(1, np.uint64)[0])


def split_train_test(ds: ClientDataset, ratio: float = 0.8, seed: int = 0) -> ClientDataset:
    """Stratified split: ``ceil(ratio * n_c)`` rows of each class go to train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(ds.labels):
        rows = np.flatnonzero(ds.labels == c)
        if rows.size < 2:
            raise StratificationError(f"client {ds.client_id}: class {c} has {rows.size} sample(s), need >= 2")
        rows = rng.permutation(rows)
        # Round before ceil so 0.8 * 10 is 8, not 9.
        n_train = min(math.ceil(round(ratio * rows.size, 9)), rows.size - 1)
        train.append(rows[:n_train])
        test.append(rows[n_train:])
    train_idx = np.sort(np.concatenate(train)) if train else np.zeros(0, dtype=np.int64)
    test_idx = np.sort(np.concatenate(test)) if test else np.zeros(0, dtype=np.int64)
    return replace(ds, train_idx=train_idx.astype(np.int64), test_idx=test_idx.astype(np.int64))


def _parse_float(token: str, lineno: int, path) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: non-numeric feature {token!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"{path}:{lineno}: non-finite feature {token!r}")
    return value


def load_features(path, client_id: str, label_column: str = "label",
                  classes: Sequence[str] | None = None) -> ClientDataset:
    """Read a comma-separated feature file into an unsplit :class:`ClientDataset`.

    A first line naming ``label_column`` is treated as a header; otherwise the
    label is the last field. Label tokens map to dense indices in order of
    first appearance, or through ``classes`` when given (unknown tokens are
    then an error).
    """
    path = Path(path)
    class_index = {str(c): i for i, c in enumerate(classes)} if classes is not None else {}
    rows: list[list[float]] = []
    labels: list[int] = []
    label_pos = -1
    width = None
    seen_first = False
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if not seen_first:
                seen_first = True
                if label_column in fields:
                    label_pos = fields.index(label_column)
                    width = len(fields)
                    continue
            if width is None:
                width = len(fields)
            if len(fields) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
            if width < 2:
                raise ParseError(f"{path}:{lineno}: need at least one feature and a label")
            token = fields[label_pos]
            if token == "":
                raise ParseError(f"{path}:{lineno}: empty label")
            if token not in class_index:
                if classes is not None:
                    raise ParseError(f"{path}:{lineno}: unknown label {token!r}")
                class_index[token] = len(class_index)
            labels.append(class_index[token])
            lp = label_pos % width
            rows.append([_parse_float(f, lineno, path) for i, f in enumerate(fields) if i != lp])
    if not rows:
        raise ParseError(f"{path}: no samples")
    return ClientDataset(client_id, np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64))


def write_features(ds: ClientDataset, path, classes: Sequence[str] | None = None) -> None:
    """Write features with 17 significant digits so :func:`load_features` round-trips exactly."""
    names = list(classes) if classes is not None else [str(i) for i in range(int(ds.labels.max()) + 1)]
    header = ",".join([f"f{i}" for i in range(ds.feature_dim)] + ["label"])
    lines = [header]
    for x, y in zip(ds.features, ds.labels):
        lines.append(",".join(f"{v:.17g}" for v in x) + "," + names[int(y)])
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_manifest(fed: Federation, out_dir, split_seed_base: int, train_ratio: float = 0.8) -> Path:
    """Materialize a federation as one feature file per client plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = [f"c{i}" for i in range(fed.num_classes)]
    entries = {}
    for ds in fed.clients:
        fname = f"{ds.client_id}.csv"
        write_features(ds, out_dir / fname, classes)
        entries[ds.client_id] = fname
    manifest = {
        "num_classes": fed.num_classes,
        "classes": classes,
        "split_seed": split_seed_base,
        "train_ratio": train_ratio,
        "clients": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> Federation:
    """Load a federation from a manifest; relative client paths resolve against it.

    Manifest keys: ``num_classes``, ``clients`` (id -> path), and optionally
    ``classes`` (label tokens in index order), ``split_seed``, ``train_ratio``.
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None
    unknown = set(manifest) - {"num_classes", "classes", "split_seed", "train_ratio", "clients"}
    if unknown:
        raise ParseError(f"{path}: unknown manifest keys {sorted(unknown)}")
    num_classes = int(manifest["num_classes"])
    classes = manifest.get("classes")
    if classes is not None and len(classes) != num_classes:
        raise ParseError(f"{path}: {len(classes)} class names for num_classes={num_classes}")
    seed = int(manifest.get("split_seed", 0))
    ratio = float(manifest.get("train_ratio", 0.8))
    clients = []
    for cid, rel in manifest["clients"].items():
        ds = load_features(path.parent / rel, cid, classes=classes)
        clients.append(split_train_test(ds, ratio, split_seed(seed, cid)))
    return Federation(tuple(clients), num_classes)
