"""Frozen-representation evaluation: global and local tasks, weighted ROC-AUC.

Global task: one embedding per sequence (last hidden state), scored by a
multinomial logistic regression trained on the train split. Local task: a
linear probe over per-position hidden states predicting the next event's MCC.
The encoder is never updated here; all forwards are plain numpy reads of the
checkpointed parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, MarkovChains, make_batches, rng_for
from .encoder import ModelParams, _lstm_core
from .training import Checkpoint

TAG_PROBE = 401
TAG_FIT = 402


class EvaluationError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    ids: list[str]
    vectors: np.ndarray                  # (N, H)
    labels: Optional[np.ndarray] = None  # (N,) or None


@dataclass
class LinearModel:
    """Linear softmax head with the feature standardization it was fit under."""

    W: np.ndarray    # (C, D)
    b: np.ndarray    # (C,)
    mu: np.ndarray   # (D,)
    sd: np.ndarray   # (D,)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits = ((x - self.mu) / self.sd) @ self.W.T + self.b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


ProbeHead = LinearModel


def _hidden_states(params: ModelParams, batch) -> np.ndarray:
    """(B, T, H) hidden states without touching the autodiff tape."""
    embs = np.concatenate([params.mcc_table.data[batch.mcc],
                           batch.amount[:, :, None]], axis=2)
    h_all, _, _ = _lstm_core(params.lstm_W.data, params.lstm_U.data,
                             params.lstm_b.data, embs, lengths=batch.lengths,
                             want_cache=False)
    return h_all


def extract_embeddings(cp: Checkpoint, ds: Dataset, batch_size: int = 256) -> EmbeddingTable:
    """One frozen H-vector per sequence (hidden state at the last event)."""
    if list(ds.vocab.codes) != list(cp.vocab):
        raise EvaluationError("dataset vocabulary does not match checkpoint vocabulary")
    n = len(ds.sequences)
    vectors = np.zeros((n, cp.hidden))
    for batch in make_batches(ds, batch_size):
        h_all = _hidden_states(cp.params, batch)
        rows = np.arange(batch.size)
        vectors[batch.seq_indices] = h_all[rows, batch.lengths - 1]
    labels = ds.labels()
    return EmbeddingTable(ids=[s.id for s in ds.sequences], vectors=vectors,
                          labels=None if np.all(labels < 0) else labels)


# linear heads ------------------------------------------------------------


def _fit_softmax(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int,
                 lr: float, seed: int, l2: float = 1e-4) -> LinearModel:
    """Full-batch gradient descent on softmax cross-entropy + (l2/2)||W||^2,
    features standardized by their own stats."""
    mu = x.mean(axis=0)
    sd = np.maximum(x.std(axis=0), 1e-8)
    xs = (x - mu) / sd
    n, d = xs.shape
    rng = rng_for(seed, TAG_FIT)
    w = 0.01 * rng.normal(size=(n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(epochs):
        logits = xs @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (g.T @ xs + l2 * w)
        b -= lr * g.sum(axis=0)
    return LinearModel(W=w, b=b, mu=mu, sd=sd)


def fit_linear_classifier(train: EmbeddingTable, val: EmbeddingTable,
                          epochs: int = 200, lr: float = 0.5, seed: int = 0
                          ) -> tuple[LinearModel, np.ndarray]:
    """Multinomial logistic regression on train embeddings; returns the model
    and per-class probabilities on val."""
    if train.labels is None or val.labels is None:
        raise EvaluationError("labels required on both splits")
    train_classes = set(np.unique(train.labels).tolist())
    if len(train_classes) < 2:
        raise EvaluationError("need at least 2 classes in train")
    missing = sorted(set(np.unique(val.labels).tolist()) - train_classes)
    if missing:
        raise EvaluationError(f"classes {missing} absent from train")
    n_classes = int(max(train_classes)) + 1
    model = _fit_softmax(train.vectors, train.labels, n_classes, epochs, lr, seed)
    return model, model.predict_proba(val.vectors)


def _probe_pairs(params: ModelParams, ds: Dataset,
                 batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(hidden state at t, mcc at t+1) pairs pooled over all sequences."""
    xs, ys = [], []
    for batch in make_batches(ds, batch_size):
        h_all = _hidden_states(params, batch)
        for row in range(batch.size):
            t = int(batch.lengths[row])
            if t < 2:
                continue
            xs.append(h_all[row, :t - 1])
            ys.append(batch.mcc[row, 1:t])
    if not xs:
        raise EvaluationError("no sequence of length >= 2: local task undefined")
    return np.concatenate(xs), np.concatenate(ys)


def train_local_probe(cp: Checkpoint, ds: Dataset, epochs: int = 100,
                      lr: float = 0.5, seed: int = 0,
                      eval_ds: Optional[Dataset] = None
                      ) -> tuple[ProbeHead, np.ndarray, np.ndarray]:
    """Linear next-MCC probe over frozen hidden states.

    Probe-train and probe-eval positions never come from the same sequence:
    with ``eval_ds`` given, ds trains and eval_ds is scored; otherwise ds is
    split 80/20 by sequence. Returns (head, per-class probabilities on the
    eval positions, their true MCC indices).
    """
    if eval_ds is None:
        n = len(ds.sequences)
        if n < 2:
            raise EvaluationError("need >= 2 sequences to hold out probe-eval positions")
        perm = rng_for(seed, TAG_PROBE).permutation(n)
        cut = max(1, int(0.2 * n))
        pick = lambda idx: Dataset([ds.sequences[i] for i in sorted(idx)],
                                   ds.vocab, ds.num_classes, ds.amount_stats)
        train_ds, eval_ds = pick(perm[cut:]), pick(perm[:cut])
    else:
        train_ds = ds
        if list(eval_ds.vocab.codes) != list(ds.vocab.codes):
            raise EvaluationError("probe train/eval vocabulary mismatch")
    x_tr, y_tr = _probe_pairs(cp.params, train_ds)
    x_ev, y_ev = _probe_pairs(cp.params, eval_ds)
    head = _fit_softmax(x_tr, y_tr, cp.vocab_size, epochs, lr, seed)
    return head, head.predict_proba(x_ev), y_ev


# ROC-AUC -----------------------------------------------------------------


def roc_auc_binary(scores, labels) -> float:
    """P(random positive outscores random negative), ties at 1/2.

    Computed from average ranks (Mann-Whitney U). Labels must contain both
    classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not set(np.unique(labels).tolist()) <= {0, 1, False, True}:
        raise EvaluationError("labels must be binary 0/1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("both classes must be present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_weighted_detail(probs: np.ndarray, labels
                            ) -> tuple[float, list[dict], list[int]]:
    """One-vs-rest AUC per class, support-weighted mean over scorable classes.

    A class with no positives or no negatives is skipped (reported in the
    third return slot and via a warning) and carries no weight.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise EvaluationError("probs must be (N, C) aligned with labels")
    n, c = probs.shape
    per_class, skipped = [], []
    for cls in range(c):
        y = (labels == cls).astype(np.int64)
        support = int(y.sum())
        if support == 0 or support == n:
            skipped.append(cls)
            continue
        per_class.append({"class": cls, "auc": roc_auc_binary(probs[:, cls], y),
                          "support": support})
    if not per_class:
        raise EvaluationError("no class is scorable for one-vs-rest AUC")
    if skipped:
        warnings.warn(f"classes skipped in weighted AUC (no positives or no "
                      f"negatives): {skipped}")
    total = sum(p["support"] for p in per_class)
    auc = sum(p["auc"] * p["support"] for p in per_class) / total
    return float(auc), per_class, skipped


def roc_auc_weighted(probs: np.ndarray, labels) -> float:
    return roc_auc_weighted_detail(probs, labels)[0]


# synthetic-oracle reference ----------------------------------------------


def bayes_local_auc(chains: MarkovChains, ds: Dataset) -> float:
    """Weighted next-code AUC when scoring with the true transition rows.

    An upper reference for any learned local probe on the same sequences.
    Operates in raw code space (dataset mcc index minus the UNK offset).
    """
    scores, targets = [], []
    for s in ds.sequences:
        if s.label is None:
            raise EvaluationError(f"sequence {s.id!r} lacks a class label")
        if len(s) < 2:
            continue
        codes = s.mcc - 1
        if codes.min() < 0:
            raise EvaluationError("oracle scoring needs in-vocabulary codes only")
        scores.append(chains.transition[s.label][codes[:-1]])
        targets.append(codes[1:])
    if not scores:
        raise EvaluationError("no sequence of length >= 2")
    return roc_auc_weighted(np.concatenate(scores), np.concatenate(targets))


# end-to-end report -------------------------------------------------------


def evaluate(cp: Checkpoint, splits: tuple[Dataset, Dataset, Dataset],
             seed: int = 0, probe_epochs: int = 100, probe_lr: float = 0.5,
             target: str = "test") -> dict:
    """Global and local AUC of a checkpoint on one split (default test).

    The classifier and the probe both train on the train split and score the
    target split. Returns the report document with per-class detail for both
    tasks.
    """
    train_ds, val_ds, test_ds = splits
    target_ds = {"train": train_ds, "val": val_ds, "test": test_ds}[target]
    if cp.amount_stats is not None and train_ds.amount_stats is not None:
        if not np.allclose(cp.amount_stats, train_ds.amount_stats):
            warnings.warn("amount normalization stats differ between checkpoint "
                          "and dataset; embeddings may be off-distribution")
    emb_train = extract_embeddings(cp, train_ds)
    emb_target = extract_embeddings(cp, target_ds)
    _, cls_probs = fit_linear_classifier(emb_train, emb_target,
                                         epochs=probe_epochs, lr=probe_lr, seed=seed)
    global_auc, global_detail, _ = roc_auc_weighted_detail(cls_probs, emb_target.labels)
    _, probe_probs, probe_targets = train_local_probe(
        cp, train_ds, epochs=probe_epochs, lr=probe_lr, seed=seed, eval_ds=target_ds)
    local_auc, local_detail, _ = roc_auc_weighted_detail(probe_probs, probe_targets)
    per_class = ([dict(task="global", **d) for d in global_detail]
                 + [dict(task="local", **d) for d in local_detail])
    return {
        "method": cp.cfg.get("method"),
        "lambda": cp.cfg.get("lam"),
        "seed": seed,
        "global_auc": global_auc,
        "local_auc": local_auc,
        "per_class": per_class,
        "config_hash": cp.config_hash,
    }


def summarize_runs(reports: list[dict]) -> dict:
    """mean and standard deviation of each AUC over repeated runs."""
    out = {}
    for key in ("global_auc", "local_auc"):
        vals = np.array([r[key] for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
