"""Event-sequence datasets: CSV ingestion, synthesis, normalization, splits, batching.

A dataset is a list of time-ordered event sequences (MCC code, amount,
timestamp) with optional sequence-level labels. Raw MCC codes are remapped to
contiguous indices with index 0 reserved for unseen codes; the mapping is
persisted as a one-code-per-line vocabulary file.

The synthetic generator draws each class from its own Markov chain over MCC
codes, which gives analytic oracles for both downstream tasks: class identity
(global) and the true next-code transition row (local).
"""

from __future__ import annotations

import csv
import datetime
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

UNK_TOKEN = "<UNK>"
UNK_INDEX = 0

# SeedSequence stream tags, one per independent randomness consumer
TAG_SYNTH = 101
TAG_SPLIT = 102
TAG_BATCH = 103


class DataError(ValueError):
    pass


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose, epoch, ...) tuples."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass(frozen=True)
class Event:
    mcc: int
    amount: float
    time: float


@dataclass
class EventSequence:
    """One time-ordered sequence. Arrays are the canonical storage."""

    id: str
    mcc: np.ndarray      # (T,) int64, vocabulary indices
    amount: np.ndarray   # (T,) float64
    time: np.ndarray     # (T,) float64, non-decreasing
    label: Optional[int] = None

    def __post_init__(self):
        self.mcc = np.asarray(self.mcc, dtype=np.int64)
        self.amount = np.asarray(self.amount, dtype=np.float64)
        self.time = np.asarray(self.time, dtype=np.float64)
        if len(self.mcc) < 1:
            raise DataError(f"sequence {self.id!r} is empty")
        if not (len(self.mcc) == len(self.amount) == len(self.time)):
            raise DataError(f"sequence {self.id!r} has ragged fields")
        if np.any(np.diff(self.time) < 0):
            raise DataError(f"sequence {self.id!r} not sorted by time")

    def __len__(self):
        return len(self.mcc)

    @property
    def events(self) -> list[Event]:
        return [Event(int(m), float(a), float(t))
                for m, a, t in zip(self.mcc, self.amount, self.time)]


class Vocabulary:
    """Raw MCC code <-> contiguous index map; index 0 is the UNK sentinel."""

    def __init__(self, codes: list[str]):
        self.codes = list(codes)
        self._index = {c: i + 1 for i, c in enumerate(self.codes)}

    def __len__(self):
        return len(self.codes) + 1  # +1 for UNK

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.codes == other.codes

    def index_of(self, raw: str) -> int:
        return self._index.get(str(raw), UNK_INDEX)

    def raw_of(self, index: int) -> str:
        return UNK_TOKEN if index == UNK_INDEX else self.codes[index - 1]

    def save(self, path):
        lines = [UNK_TOKEN] + self.codes
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != UNK_TOKEN:
            raise DataError(f"vocabulary file {path} missing {UNK_TOKEN} sentinel on line 0")
        return cls(lines[1:])


@dataclass
class Dataset:
    sequences: list[EventSequence]
    vocab: Vocabulary
    num_classes: int
    amount_stats: Optional[tuple[float, float]] = None

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def __len__(self):
        return len(self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.sequences],
                        dtype=np.int64)


@dataclass
class PaddedBatch:
    """Right-padded batch grids. Padded cells hold mcc 0 / amount 0 and must
    never be read by any loss."""

    mcc: np.ndarray         # (B, T_max) int64
    amount: np.ndarray      # (B, T_max) float64
    lengths: np.ndarray     # (B,) int64
    valid_mask: np.ndarray  # (B, T_max) bool
    seq_indices: np.ndarray  # (B,) int64, positions in the source dataset

    @property
    def size(self):
        return self.mcc.shape[0]

    @property
    def t_max(self):
        return self.mcc.shape[1]


# ingestion ------------------------------------------------------------


def _parse_time(raw: str, line_no: int) -> float:
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        return datetime.datetime.fromisoformat(raw).timestamp()
    except ValueError:
        raise DataError(f"line {line_no}: unparseable event_time {raw!r}") from None


def load_csv(path, labels_path=None, vocab: Optional[Vocabulary] = None) -> Dataset:
    """Load an event CSV with header ``seq_id,event_time,mcc,amount``.

    Events are grouped by seq_id and sorted by time. Raw MCC codes are mapped
    to contiguous indices [1, V_raw] in first-appearance order unless an
    existing ``vocab`` is supplied, in which case unseen codes map to UNK (0).
    An optional labels CSV has header ``seq_id,label``.
    """
    path = Path(path)
    groups: dict[str, list[tuple[float, str, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        required = ["seq_id", "event_time", "mcc", "amount"]
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        cols = {c: header.index(c) for c in required}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                sid = row[cols["seq_id"]].strip()
                t = _parse_time(row[cols["event_time"]], line_no)
                code = row[cols["mcc"]].strip()
                amt = float(row[cols["amount"]])
            except DataError:
                raise
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path} line {line_no}: unparseable row ({exc})") from None
            if not np.isfinite(amt):
                raise DataError(f"{path} line {line_no}: non-finite amount")
            groups.setdefault(sid, []).append((t, code, amt))
    if not groups:
        raise DataError(f"{path}: no event rows")

    if vocab is None:
        seen: dict[str, None] = {}
        for rows in groups.values():
            for _, code, _ in rows:
                seen.setdefault(code)
        vocab = Vocabulary(list(seen))

    labels: dict[str, int] = {}
    if labels_path is not None:
        with open(labels_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:2]] != ["seq_id", "label"]:
                raise DataError(f"{labels_path}: expected header seq_id,label")
            for line_no, row in enumerate(reader, start=2):
                if not row or all(not cell.strip() for cell in row):
                    continue
                try:
                    labels[row[0].strip()] = int(row[1])
                except (ValueError, IndexError) as exc:
                    raise DataError(
                        f"{labels_path} line {line_no}: unparseable row ({exc})") from None

    sequences = []
    for sid, rows in groups.items():
        rows.sort(key=lambda r: r[0])  # stable, so equal times keep file order
        sequences.append(EventSequence(
            id=sid,
            mcc=np.array([vocab.index_of(code) for _, code, _ in rows]),
            amount=np.array([amt for _, _, amt in rows]),
            time=np.array([t for t, _, _ in rows]),
            label=labels.get(sid),
        ))
    present = [s.label for s in sequences if s.label is not None]
    num_classes = (max(present) + 1) if present else 0
    return Dataset(sequences=sequences, vocab=vocab, num_classes=num_classes)


def save_csv(ds: Dataset, events_path, labels_path=None, vocab_path=None) -> None:
    """Inverse of :func:`load_csv`; writes raw codes via the dataset vocab."""
    with open(events_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq_id", "event_time", "mcc", "amount"])
        for seq in ds.sequences:
            for m, a, t in zip(seq.mcc, seq.amount, seq.time):
                writer.writerow([seq.id, repr(float(t)), ds.vocab.raw_of(int(m)), repr(float(a))])
    if labels_path is not None:
        with open(labels_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seq_id", "label"])
            for seq in ds.sequences:
                if seq.label is not None:
                    writer.writerow([seq.id, seq.label])
    if vocab_path is not None:
        ds.vocab.save(vocab_path)


# normalization --------------------------------------------------------


def signed_log1p(a: np.ndarray) -> np.ndarray:
    return np.sign(a) * np.log1p(np.abs(a))


def normalize_amounts(ds: Dataset, stats: Optional[tuple[float, float]] = None) -> Dataset:
    """Map amounts to standardized signed-log units.

    amount <- (sign(a) * log(1 + |a|) - mean) / std. When ``stats`` is omitted
    the (mean, std) are computed over this dataset (call on the training split
    only) and stored in ``amount_stats``; std is clamped below by 1e-8.
    """
    pooled = np.concatenate([s.amount for s in ds.sequences])
    if not np.all(np.isfinite(pooled)):
        raise DataError("non-finite amount in dataset")
    logged = signed_log1p(pooled)
    if stats is None:
        stats = (float(logged.mean()), float(max(logged.std(), 1e-8)))
    mean, std = stats
    std = max(std, 1e-8)
    sequences = [
        replace(s, amount=(signed_log1p(s.amount) - mean) / std) for s in ds.sequences
    ]
    return Dataset(sequences=sequences, vocab=ds.vocab,
                   num_classes=ds.num_classes, amount_stats=(mean, std))


# splitting ------------------------------------------------------------


def split_dataset(ds: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Whole-sequence split into (train, val, test).

    Val and test sizes are floor(ratio * N); the remainder goes to train.
    Deterministic given seed; partitions are disjoint and exhaustive.
    """
    n = len(ds.sequences)
    if n < 3:
        raise DataError(f"need at least 3 sequences to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    perm = rng_for(seed, TAG_SPLIT).permutation(n)
    parts = (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
             np.sort(perm[n_train + n_val:]))

    def subset(idx):
        return Dataset(sequences=[ds.sequences[i] for i in idx], vocab=ds.vocab,
                       num_classes=ds.num_classes, amount_stats=ds.amount_stats)

    return tuple(subset(idx) for idx in parts)


# synthesis ------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the class-conditional Markov generator."""

    n_classes: int = 2
    vocab_size: int = 20          # distinct synthetic MCC codes
    n_sequences: int = 3000
    len_range: tuple[int, int] = (50, 150)
    beta: float = 0.6             # class-signal mixing weight
    perm_mass: float = 0.8        # mass on the class permutation inside M_perm
    amount_mu: float = 3.0        # log-mean center for per-code amount levels
    amount_mu_spread: float = 1.0
    amount_sigma: float = 0.6

    def validate(self):
        if self.vocab_size < 2:
            raise DataError("synthetic vocab_size must be >= 2")
        if self.n_classes < 2:
            raise DataError("synthetic n_classes must be >= 2")
        if not (0.0 <= self.beta <= 1.0):
            raise DataError("beta must lie in [0, 1]")
        if self.len_range[0] < 1 or self.len_range[0] > self.len_range[1]:
            raise DataError(f"bad length range {self.len_range}")


@dataclass
class MarkovChains:
    """Ground-truth transition law of a synthesized dataset."""

    base: np.ndarray          # (V, V) shared stochastic matrix
    perms: np.ndarray         # (C, V) class permutations
    transition: np.ndarray    # (C, V, V) per-class rows M_c
    amount_mu: np.ndarray     # (V,) per-code lognormal log-means


def _build_chains(spec: SynthSpec, rng: np.random.Generator) -> MarkovChains:
    v, c = spec.vocab_size, spec.n_classes
    base = rng.dirichlet(np.ones(v), size=v)
    perms = np.stack([rng.permutation(v) for _ in range(c)])
    amount_mu = rng.normal(spec.amount_mu, spec.amount_mu_spread, size=v)
    off = (1.0 - spec.perm_mass) / (v - 1)
    trans = np.empty((c, v, v))
    for ci in range(c):
        m_perm = np.full((v, v), off)
        m_perm[np.arange(v), perms[ci]] = spec.perm_mass
        m = (1.0 - spec.beta) * base + spec.beta * m_perm
        trans[ci] = m / m.sum(axis=1, keepdims=True)
    return MarkovChains(base=base, perms=perms, transition=trans, amount_mu=amount_mu)


def transition_matrices(spec: SynthSpec, seed: int) -> MarkovChains:
    """Rebuild the exact chains a given (spec, seed) pair generates from."""
    spec.validate()
    return _build_chains(spec, rng_for(seed, TAG_SYNTH))


def synthesize_dataset(spec: SynthSpec, seed: int) -> Dataset:
    """Generate a labeled dataset of class-conditional Markov sequences.

    Class c walks its own chain M_c = (1 - beta) * M_base + beta * M_perm(c);
    amounts are lognormal with an MCC-dependent log-mean; lengths are uniform
    in the configured range. Fully deterministic given (spec, seed).
    """
    spec.validate()
    rng = rng_for(seed, TAG_SYNTH)
    chains = _build_chains(spec, rng)

    n, v = spec.n_sequences, spec.vocab_size
    labels = np.arange(n) % spec.n_classes
    lengths = rng.integers(spec.len_range[0], spec.len_range[1] + 1, size=n)
    t_max = int(lengths.max())
    cum = np.cumsum(chains.transition, axis=2)  # (C, V, V)

    states = np.empty((n, t_max), dtype=np.int64)
    states[:, 0] = rng.integers(0, v, size=n)
    for t in range(1, t_max):
        u = rng.random(n)
        rows = cum[labels, states[:, t - 1]]       # (n, V)
        states[:, t] = (u[:, None] < rows).argmax(axis=1)

    log_amounts = rng.normal(0.0, spec.amount_sigma, size=(n, t_max))
    sequences = []
    for i in range(n):
        li = int(lengths[i])
        codes = states[i, :li]
        amounts = np.exp(chains.amount_mu[codes] + log_amounts[i, :li])
        sequences.append(EventSequence(
            id=f"synth-{i:05d}",
            mcc=codes + 1,  # vocab remap: raw code j sits at index j + 1
            amount=amounts,
            time=np.arange(li, dtype=np.float64),
            label=int(labels[i]),
        ))
    vocab = Vocabulary([str(j) for j in range(v)])
    return Dataset(sequences=sequences, vocab=vocab, num_classes=spec.n_classes)


# batching -------------------------------------------------------------


def pad_sequences(arrays_mcc, arrays_amount, seq_indices) -> PaddedBatch:
    lengths = np.array([len(a) for a in arrays_mcc], dtype=np.int64)
    b, t_max = len(arrays_mcc), int(lengths.max())
    mcc = np.zeros((b, t_max), dtype=np.int64)
    amount = np.zeros((b, t_max), dtype=np.float64)
    for i, (m, a) in enumerate(zip(arrays_mcc, arrays_amount)):
        mcc[i, :len(m)] = m
        amount[i, :len(a)] = a
    valid = np.arange(t_max)[None, :] < lengths[:, None]
    return PaddedBatch(mcc=mcc, amount=amount, lengths=lengths, valid_mask=valid,
                       seq_indices=np.asarray(seq_indices, dtype=np.int64))


def make_batches(ds: Dataset, batch_size: int, seed: int = 0,
                 shuffle: bool = False, epoch: int = 0) -> Iterator[PaddedBatch]:
    """Yield every sequence exactly once, padded to the batch max length.

    With ``shuffle`` the order is a fresh permutation per (seed, epoch).
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if not ds.sequences:
        raise DataError("empty dataset")
    order = np.arange(len(ds.sequences))
    if shuffle:
        order = rng_for(seed, TAG_BATCH, epoch).permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield pad_sequences([ds.sequences[i].mcc for i in idx],
                            [ds.sequences[i].amount for i in idx], idx)
