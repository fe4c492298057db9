"""Deterministic training loops over the contrastive objectives.

Every random draw in a run comes from a generator keyed by
(seed, purpose, epoch, step), so a run is a pure function of (config,
dataset) and can resume from any epoch boundary bit-exactly. Checkpoints are
npz containers carrying parameters, Adam moments, the epoch counter, a config
hash and the loss history.
"""

from __future__ import annotations

import json
import time
import warnings
import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .data import Dataset, EventSequence, TAG_BATCH, pad_sequences, rng_for
from .encoder import (EncoderError, ModelParams, apply_mask, embed_events,
                      init_params, last_hidden, lstm_forward, predict_masked)
from .objectives import (MaskedBatch, ObjectiveError, TAG_MASK, TAG_NEG,
                         TAG_VIEWS, ViewBatch, cmlm_loss, coles_loss,
                         sample_mask, sample_negative_sets, sample_views,
                         view_slices)

CKPT_VERSION = "evseq-ckpt-1"
METHODS = ("coles", "cmlm", "coles_masked", "hybrid")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "coles"
    lam: float = 0.05            # weight of the masked-event term in hybrid
    rho: float = 0.5             # contrastive margin
    mask_rate: float = 0.15
    n_views: int = 5
    n_neg: int = 16
    n_hard: int = 5
    view_len_range: Optional[tuple[int, int]] = None   # None: per-sequence auto
    k: int = 24
    hidden: int = 64
    batch_size: int = 64
    epochs: int = 20
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.method == "hybrid" and self.lam <= 0:
            raise ConfigError("hybrid method requires lambda > 0")
        if self.rho <= 0:
            raise ConfigError("rho must be > 0")
        if not (0.0 < self.mask_rate < 1.0):
            raise ConfigError("mask_rate must be in (0, 1)")
        if self.n_views < 2:
            raise ConfigError("n_views must be >= 2")
        for name in ("n_neg", "n_hard", "k", "hidden", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0 when set")
        if self.view_len_range is not None:
            lo, hi = self.view_len_range
            if not (1 <= lo <= hi):
                raise ConfigError("view_len_range must satisfy 1 <= lo <= hi")


def config_hash(cfg: TrainConfig) -> str:
    """12-hex digest of every trajectory-determining field.

    ``epochs`` is excluded: extending a run does not change the path taken
    through the earlier epochs, so a checkpoint may resume under a larger
    epoch budget without being a different experiment.
    """
    d = asdict(cfg)
    d.pop("epochs")
    for key in ("view_len_range", "adam_betas"):
        if d[key] is not None:
            d[key] = list(d[key])
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def data_fingerprint(ds: Dataset) -> str:
    """12-hex digest of sequence ids, lengths, labels and the vocabulary."""
    h = hashlib.sha256()
    for s in ds.sequences:
        h.update(f"{s.id},{len(s)},{s.label}\n".encode())
    h.update("|".join(ds.vocab.codes).encode())
    return h.hexdigest()[:12]


# loss assembly -----------------------------------------------------------


def _coles_term(params: ModelParams, seqs: list[EventSequence], cfg: TrainConfig,
                rng_views, rng_mask=None) -> Tensor:
    views = sample_views(seqs, cfg.n_views, cfg.view_len_range, rng_views)
    mccs, amounts = view_slices(seqs, views)
    batch = pad_sequences(mccs, amounts, np.arange(len(views)))
    embs = embed_events(params, batch)
    if rng_mask is not None:
        plan = sample_mask(batch.lengths, cfg.mask_rate, rng_mask)
        embs = apply_mask(embs, plan, params, batch.lengths).embeddings
    states = lstm_forward(params, embs, batch.lengths)
    z = last_hidden(states, batch.lengths)
    origins = np.array([v.origin for v in views], dtype=np.int64)
    return coles_loss(ViewBatch(z, origins), cfg.rho, cfg.n_hard)


def _cmlm_term(params: ModelParams, seqs: list[EventSequence], cfg: TrainConfig,
               rng_mask, rng_neg) -> Tensor:
    batch = pad_sequences([s.mcc for s in seqs], [s.amount for s in seqs],
                          np.arange(len(seqs)))
    embs = embed_events(params, batch)
    plan = sample_mask(batch.lengths, cfg.mask_rate, rng_mask)
    masked = apply_mask(embs, plan, params, batch.lengths)
    states = lstm_forward(params, masked.embeddings, batch.lengths)
    preds = predict_masked(params, states, masked.rows, masked.cols)
    negatives = sample_negative_sets(preds.shape[0], cfg.n_neg, rng_neg)
    return cmlm_loss(MaskedBatch(masked.targets, preds, negatives))


def compute_loss(params: ModelParams, seqs: list[EventSequence],
                 cfg: TrainConfig, epoch: int = 0, step: int = 0) -> Tensor:
    """Build the loss graph for one batch of raw sequences.

    All three sampling streams are derived from (seed, epoch, step) the same
    way for every method, so the hybrid loss sees exactly the views, masks
    and negatives its two components would see on their own.
    """
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}")
    rv = rng_for(cfg.seed, TAG_VIEWS, epoch, step)
    rm = rng_for(cfg.seed, TAG_MASK, epoch, step)
    rn = rng_for(cfg.seed, TAG_NEG, epoch, step)
    terms: list[tuple[str, Tensor, float]] = []
    if cfg.method in ("coles", "hybrid"):
        terms.append(("coles", _coles_term(params, seqs, cfg, rv), 1.0))
    elif cfg.method == "coles_masked":
        terms.append(("coles", _coles_term(params, seqs, cfg, rv, rng_mask=rm), 1.0))
    if cfg.method in ("cmlm", "hybrid"):
        weight = cfg.lam if cfg.method == "hybrid" else 1.0
        terms.append(("cmlm", _cmlm_term(params, seqs, cfg, rm, rn), weight))
    total = None
    for name, t, w in terms:
        if not np.all(np.isfinite(t.data)):
            raise TrainingError(f"non-finite {name} loss")
        total = t * w if total is None else total + t * w
    return total


def compute_gradients(params: ModelParams, seqs: list[EventSequence],
                      cfg: TrainConfig, epoch: int = 0, step: int = 0
                      ) -> tuple[float, dict[str, np.ndarray]]:
    """One backward pass; returns (loss value, per-parameter gradients).

    Gradients of parameters untouched by the batch are zero arrays. With
    ``grad_clip`` set, the whole set is rescaled to that global L2 norm when
    it exceeds it.
    """
    params.zero_grad()
    loss = compute_loss(params, seqs, cfg, epoch, step)
    loss.backward()
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for n, t in params.tensors().items()}
    for name, g in grads.items():
        # a saturated forward can stay finite while the backward overflows;
        # letting this through would write nan into the optimizer state
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    if cfg.grad_clip is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            grads = {n: g * scale for n, g in grads.items()}
    return float(loss.data), grads


# optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @staticmethod
    def fresh(params: ModelParams) -> "AdamState":
        return AdamState(
            m={n: np.zeros_like(p.data) for n, p in params.tensors().items()},
            v={n: np.zeros_like(p.data) for n, p in params.tensors().items()},
            t=0)

    def copy(self) -> "AdamState":
        return AdamState(m={n: a.copy() for n, a in self.m.items()},
                         v={n: a.copy() for n, a in self.v.items()}, t=self.t)


def adam_step(params: ModelParams, state: AdamState,
              grads: dict[str, np.ndarray], cfg: TrainConfig):
    b1, b2 = cfg.adam_betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.tensors().items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data -= cfg.lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + cfg.adam_eps)


# checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ModelParams
    opt: AdamState
    epoch: int                       # completed epochs
    config_hash: str
    loss_history: list[float]
    vocab: list[str]
    amount_stats: Optional[tuple[float, float]]
    data_fingerprint: str
    cfg: dict

    @property
    def k(self) -> int: return self.params.k
    @property
    def hidden(self) -> int: return self.params.hidden_size
    @property
    def vocab_size(self) -> int: return self.params.vocab_size


def save_checkpoint(cp: Checkpoint, path) -> None:
    meta = {
        "version": CKPT_VERSION,
        "k": cp.k, "V": cp.vocab_size, "H": cp.hidden,
        "epoch": cp.epoch,
        "adam_t": cp.opt.t,
        "config_hash": cp.config_hash,
        "loss_history": cp.loss_history,
        "vocab": cp.vocab,
        "amount_stats": list(cp.amount_stats) if cp.amount_stats else None,
        "data_fingerprint": cp.data_fingerprint,
        "cfg": cp.cfg,
    }
    arrays = {f"param_{n}": t.data for n, t in cp.params.tensors().items()}
    arrays.update({f"adam_m_{n}": a for n, a in cp.opt.m.items()})
    arrays.update({f"adam_v_{n}": a for n, a in cp.opt.v.items()})
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"][()]))
            if meta.get("version") != CKPT_VERSION:
                raise CheckpointError(
                    f"checkpoint version {meta.get('version')!r} != {CKPT_VERSION!r}")
            names = ("mcc_table", "mask_vector", "lstm_W", "lstm_U",
                     "lstm_b", "proj_P", "proj_b")
            params = ModelParams(**{n: Tensor(z[f"param_{n}"], requires_grad=True)
                                    for n in names})
            opt = AdamState(m={n: z[f"adam_m_{n}"] for n in names},
                            v={n: z[f"adam_v_{n}"] for n in names},
                            t=int(meta["adam_t"]))
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    stats = meta["amount_stats"]
    cfg = dict(meta["cfg"])
    for key in ("adam_betas", "view_len_range"):  # JSON flattened the tuples
        if cfg.get(key) is not None:
            cfg[key] = tuple(cfg[key])
    return Checkpoint(params=params, opt=opt, epoch=int(meta["epoch"]),
                      config_hash=meta["config_hash"],
                      loss_history=list(meta["loss_history"]),
                      vocab=list(meta["vocab"]),
                      amount_stats=tuple(stats) if stats else None,
                      data_fingerprint=meta["data_fingerprint"],
                      cfg=cfg)


def _snapshot(params: ModelParams, opt: AdamState, epoch: int, chash: str,
              history: list[float], ds: Dataset, fingerprint: str,
              cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(params=params.copy(), opt=opt.copy(), epoch=epoch,
                      config_hash=chash, loss_history=list(history),
                      vocab=list(ds.vocab.codes), amount_stats=ds.amount_stats,
                      data_fingerprint=fingerprint, cfg=asdict(cfg))


# training loop -----------------------------------------------------------


def train(cfg: TrainConfig, ds: Dataset, log_path=None,
          resume: Optional[Checkpoint] = None, force: bool = False) -> Checkpoint:
    """Run Adam over the configured objective for cfg.epochs epochs.

    ``resume`` continues from a checkpoint's epoch counter; the config hash
    and data fingerprint must match unless ``force`` is set. Per-epoch mean
    losses append to ``log_path`` as JSON lines. A non-finite loss aborts and
    returns the state at the last completed epoch.
    """
    cfg.validate()
    chash = config_hash(cfg)
    fingerprint = data_fingerprint(ds)
    history: list[float] = []
    if resume is not None:
        for kind, got, want in (("config hash", resume.config_hash, chash),
                                ("data fingerprint", resume.data_fingerprint, fingerprint)):
            if got != want:
                msg = f"checkpoint {kind} {got} does not match current {want}"
                warnings.warn(msg)
                if not force:
                    raise ConfigError(f"refusing to resume: {msg} (pass force=True to override)")
        params = resume.params.copy()
        opt = resume.opt.copy()
        start_epoch = resume.epoch
        history = list(resume.loss_history)
    else:
        params = init_params(cfg.k, ds.vocab_size, cfg.hidden, cfg.seed)
        opt = AdamState.fresh(params)
        start_epoch = 0

    n = len(ds.sequences)
    last_good = _snapshot(params, opt, start_epoch, chash, history, ds, fingerprint, cfg)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = rng_for(cfg.seed, TAG_BATCH, epoch).permutation(n)
        losses = []
        try:
            for step, lo in enumerate(range(0, n, cfg.batch_size)):
                seqs = [ds.sequences[i] for i in order[lo:lo + cfg.batch_size]]
                loss, grads = compute_gradients(params, seqs, cfg, epoch, step)
                adam_step(params, opt, grads, cfg)
                losses.append(loss)
        except (TrainingError, EncoderError, ObjectiveError) as e:
            warnings.warn(f"training diverged at epoch {epoch}: {e}; "
                          f"returning last finite checkpoint")
            return last_good
        epoch_loss = float(np.mean(losses))
        history.append(epoch_loss)
        if log_path is not None:
            entry = {"epoch": epoch, "method": cfg.method, "loss": epoch_loss,
                     "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        last_good = _snapshot(params, opt, epoch + 1, chash, history, ds, fingerprint, cfg)
    return last_good


# gradient checking -------------------------------------------------------


def finite_difference_check(params: ModelParams, seqs: list[EventSequence],
                            cfg: TrainConfig, step_size: float = 1e-5,
                            rel_tol: float = 1e-4) -> tuple[float, list]:
    """Compare every analytic gradient entry against central differences.

    Relative error is |a - f| / max(|a|, |f|, 1e-6). Returns the worst error
    and the list of (name, index, analytic, numeric, rel) failures.
    """
    _, grads = compute_gradients(params, seqs, cfg)
    worst, failures = 0.0, []
    for name, p in params.tensors().items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step_size
            fp = float(compute_loss(params, seqs, cfg).data)
            flat[i] = keep - step_size
            fm = float(compute_loss(params, seqs, cfg).data)
            flat[i] = keep
            num = (fp - fm) / (2.0 * step_size)
            rel = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-6)
            worst = max(worst, rel)
            if rel >= rel_tol:
                failures.append((name, i, float(gflat[i]), num, rel))
    return worst, failures


def _tiny_instance(method: str, trial: int, seed: int = 0):
    rng = rng_for(seed, 909, trial)
    k = int(rng.integers(2, 5))
    hidden = int(rng.integers(2, 9))
    vocab = int(rng.integers(3, 7))
    n_seq = int(rng.integers(2, 5))
    seqs = []
    for i in range(n_seq):
        t = int(rng.integers(2, 7))
        seqs.append(EventSequence(
            id=f"g{i}", mcc=rng.integers(0, vocab, size=t),
            amount=rng.normal(size=t), time=np.arange(t, dtype=np.float64)))
    cfg = TrainConfig(method=method, lam=0.05, rho=0.5, mask_rate=0.3,
                      n_views=2, n_neg=3, n_hard=2, view_len_range=(1, 6),
                      k=k, hidden=hidden, batch_size=n_seq, epochs=1,
                      seed=trial)
    params = init_params(k, vocab, hidden, seed=trial)
    return params, seqs, cfg


def gradcheck_suite(n_trials: int = 10, seed: int = 0,
                    methods=METHODS) -> tuple[float, list]:
    """Finite-difference sweep over random tiny instances of every method."""
    worst, failures = 0.0, []
    for method in methods:
        for trial in range(n_trials):
            params, seqs, cfg = _tiny_instance(method, trial, seed)
            w, f = finite_difference_check(params, seqs, cfg)
            worst = max(worst, w)
            failures.extend((method, trial) + fl for fl in f)
    return worst, failures
