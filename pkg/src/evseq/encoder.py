"""Event encoder and sequence encoder.

Events become (k+1)-dim vectors by concatenating a learned MCC embedding with
the amount channel. A unidirectional single-layer LSTM turns those into
contextual hidden states; the hidden state at the last valid position is the
whole-sequence embedding. A linear head maps hidden states at masked
positions back to predicted event embeddings.

The LSTM is one fused graph node: forward caches gate activations, backward
is hand-written backpropagation through time. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, concat, take, _op
from .data import PaddedBatch, rng_for

TAG_INIT = 201

# gate order inside the stacked LSTM weights
_GATES = ("i", "f", "g", "o")


class EncoderError(ValueError):
    pass


@dataclass
class ModelParams:
    """All learned tensors: embedding table, mask vector, LSTM gates, head.

    LSTM gate weights are stored stacked row-wise in i, f, g, o order:
    ``lstm_W`` is (4H, k+1), ``lstm_U`` is (4H, H), ``lstm_b`` is (4H,).
    Per-gate views are exposed as properties (``W_i``, ``b_f``, ...).
    """

    mcc_table: Tensor    # (V, k)
    mask_vector: Tensor  # (k+1,)
    lstm_W: Tensor       # (4H, k+1)
    lstm_U: Tensor       # (4H, H)
    lstm_b: Tensor       # (4H,)
    proj_P: Tensor       # (k+1, H)
    proj_b: Tensor       # (k+1,)

    @property
    def vocab_size(self) -> int:
        return self.mcc_table.shape[0]

    @property
    def k(self) -> int:
        return self.mcc_table.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.lstm_U.shape[1]

    def _gate(self, which: str, name: str) -> np.ndarray:
        h = self.hidden_size
        j = _GATES.index(which)
        return getattr(self, name).data[j * h:(j + 1) * h]

    @property
    def W_i(self): return self._gate("i", "lstm_W")
    @property
    def W_f(self): return self._gate("f", "lstm_W")
    @property
    def W_g(self): return self._gate("g", "lstm_W")
    @property
    def W_o(self): return self._gate("o", "lstm_W")
    @property
    def U_i(self): return self._gate("i", "lstm_U")
    @property
    def U_f(self): return self._gate("f", "lstm_U")
    @property
    def U_g(self): return self._gate("g", "lstm_U")
    @property
    def U_o(self): return self._gate("o", "lstm_U")
    @property
    def b_i(self): return self._gate("i", "lstm_b")
    @property
    def b_f(self): return self._gate("f", "lstm_b")
    @property
    def b_g(self): return self._gate("g", "lstm_b")
    @property
    def b_o(self): return self._gate("o", "lstm_b")

    def tensors(self) -> dict[str, Tensor]:
        """Fixed-order name -> tensor map (optimizer and checkpoint order)."""
        return {
            "mcc_table": self.mcc_table,
            "mask_vector": self.mask_vector,
            "lstm_W": self.lstm_W,
            "lstm_U": self.lstm_U,
            "lstm_b": self.lstm_b,
            "proj_P": self.proj_P,
            "proj_b": self.proj_b,
        }

    def zero_grad(self):
        for t in self.tensors().values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: Tensor(t.data.copy(), requires_grad=True)
                              for n, t in self.tensors().items()})

    def check_finite(self):
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t.data)):
                raise EncoderError(f"non-finite values in parameter {name}")


def init_params(k: int, vocab_size: int, hidden: int, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for every weight matrix.

    fan_in is the input width of the linear map each matrix implements
    (k for the embedding table rows, k+1 for input gates, H for recurrent
    gates and the prediction head). Biases start at zero except the forget
    gate, which starts at 1 to keep early memory open.
    """
    if min(k, vocab_size, hidden) < 1:
        raise EncoderError("k, vocab_size and hidden must all be >= 1")
    rng = rng_for(seed, TAG_INIT)
    d = k + 1

    def uniform(shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return ModelParams(
        mcc_table=Tensor(uniform((vocab_size, k), k), requires_grad=True),
        mask_vector=Tensor(uniform((d,), d), requires_grad=True),
        lstm_W=Tensor(uniform((4 * hidden, d), d), requires_grad=True),
        lstm_U=Tensor(uniform((4 * hidden, hidden), hidden), requires_grad=True),
        lstm_b=Tensor(b, requires_grad=True),
        proj_P=Tensor(uniform((d, hidden), hidden), requires_grad=True),
        proj_b=Tensor(np.zeros(d), requires_grad=True),
    )


# event embedding -------------------------------------------------------


def embed_events(params: ModelParams, batch: PaddedBatch) -> Tensor:
    """(B, T, k+1) event embeddings: [mcc_table[mcc_j] ; amount_j]."""
    if batch.mcc.max(initial=0) >= params.vocab_size:
        raise EncoderError(
            f"mcc index {int(batch.mcc.max())} out of range for V={params.vocab_size}")
    looked_up = take(params.mcc_table, batch.mcc)          # (B, T, k)
    amounts = Tensor(batch.amount[:, :, None])             # (B, T, 1)
    return concat([looked_up, amounts], axis=2)


@dataclass
class MaskPlan:
    """Per-sequence masked position sets, aligned with batch rows."""

    positions: list[np.ndarray]

    def flat_indices(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.concatenate([np.full(len(p), b, dtype=np.int64)
                               for b, p in enumerate(self.positions)]) \
            if self.positions else np.empty(0, dtype=np.int64)
        cols = np.concatenate([np.asarray(p, dtype=np.int64) for p in self.positions]) \
            if self.positions else np.empty(0, dtype=np.int64)
        return rows, cols

    @property
    def total(self) -> int:
        return int(sum(len(p) for p in self.positions))


@dataclass
class MaskedEmbeddings:
    """Mask-substituted embeddings plus the original rows kept as targets."""

    embeddings: Tensor            # (B, T, k+1) with masked rows replaced
    targets: Tensor               # (m, k+1) original embeddings at masked spots
    rows: np.ndarray              # (m,) batch row per masked position
    cols: np.ndarray              # (m,) time index per masked position


def apply_mask(embs: Tensor, plan: MaskPlan, params: ModelParams,
               lengths: Optional[np.ndarray] = None) -> MaskedEmbeddings:
    """Replace planned positions with the learned mask vector.

    The untouched rows pass through; originals at masked spots are returned
    separately as prediction targets. A plan entry on a padded position is an
    error when ``lengths`` is given.
    """
    b, t, _ = embs.shape
    if len(plan.positions) != b:
        raise EncoderError(f"plan covers {len(plan.positions)} rows, batch has {b}")
    rows, cols = plan.flat_indices()
    if rows.size and (cols.min() < 0 or cols.max() >= t):
        raise EncoderError("mask plan position out of range")
    if lengths is not None and rows.size and np.any(cols >= lengths[rows]):
        raise EncoderError("mask plan marks a padded position")
    targets = take(embs, (rows, cols))
    grid = np.zeros((b, t, 1))
    grid[rows, cols, 0] = 1.0
    masked = embs * (1.0 - grid) + params.mask_vector * grid
    return MaskedEmbeddings(embeddings=masked, targets=targets, rows=rows, cols=cols)


# LSTM -------------------------------------------------------------------


@dataclass
class HiddenStates:
    """h is on the autodiff tape; cell states are a detached cache."""

    h: Tensor        # (B, T, H)
    c: np.ndarray    # (B, T, H)
    lengths: Optional[np.ndarray] = None


def _lstm_core(w, u, b, x, lengths=None, want_cache=True):
    """Run the gate recurrence over a (B, T, D) input with h_0 = c_0 = 0.

    Rows are processed sorted by descending length so each step touches only
    the rows still inside their sequence; hidden and cell states on padded
    tail positions come back as zeros. Returned arrays are in input order;
    the cache stays in sorted order and records the permutation.
    """
    bs, t_len, _ = x.shape
    hidden = u.shape[1]
    if lengths is None:
        lengths = np.full(bs, t_len, dtype=np.int64)
    order = np.argsort(-np.asarray(lengths), kind="stable")
    inv = np.empty(bs, dtype=np.int64)
    inv[order] = np.arange(bs)
    xs = x[order]
    lens = np.asarray(lengths)[order]
    counts = np.searchsorted(-lens, -np.arange(t_len), side="left")
    xw = xs.reshape(bs * t_len, -1) @ w.T
    xw = xw.reshape(bs, t_len, 4 * hidden) + b
    h = np.zeros((bs, hidden))
    c = np.zeros((bs, hidden))
    h_all = np.zeros((bs, t_len, hidden))
    c_all = np.zeros((bs, t_len, hidden))
    cache = None
    if want_cache:
        cache = {k: np.zeros((bs, t_len, hidden)) for k in
                 ("i", "f", "g", "o", "tc", "c_prev", "h_prev")}
        cache["order"], cache["inv"], cache["counts"] = order, inv, counts
    for step in range(t_len):
        na = int(counts[step])
        if na == 0:
            break
        z = xw[:na, step] + h[:na] @ u.T
        zi, zf, zg, zo = np.split(z, 4, axis=1)
        gi, gf, go = expit(zi), expit(zf), expit(zo)
        gg = np.tanh(zg)
        c_new = gf * c[:na] + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc
        if not (np.all(np.isfinite(h_new)) and np.all(np.isfinite(c_new))):
            raise EncoderError(f"non-finite LSTM state at step {step}")
        if want_cache:
            cache["i"][:na, step] = gi
            cache["f"][:na, step] = gf
            cache["g"][:na, step] = gg
            cache["o"][:na, step] = go
            cache["tc"][:na, step] = tc
            cache["c_prev"][:na, step] = c[:na]
            cache["h_prev"][:na, step] = h[:na]
        h[:na] = h_new
        c[:na] = c_new
        h_all[:na, step] = h_new
        c_all[:na, step] = c_new
    return h_all[inv], c_all[inv], cache


def _lstm_backward(w, u, x, cache, d_h_all):
    """Hand-written BPTT given upstream gradients on every hidden state."""
    bs, t_len, hidden = d_h_all.shape
    order, inv, counts = cache["order"], cache["inv"], cache["counts"]
    d_h_all = d_h_all[order]
    xs = x[order]
    dz_all = np.zeros((bs, t_len, 4 * hidden))
    dh = np.zeros((bs, hidden))
    dc = np.zeros((bs, hidden))
    for step in range(t_len - 1, -1, -1):
        na = int(counts[step])
        if na == 0:
            continue
        gi = cache["i"][:na, step]
        gf = cache["f"][:na, step]
        gg = cache["g"][:na, step]
        go = cache["o"][:na, step]
        tc = cache["tc"][:na, step]
        dht = dh[:na] + d_h_all[:na, step]
        do = dht * tc
        dct = dc[:na] + dht * go * (1.0 - tc * tc)
        dz = np.empty((na, 4 * hidden))
        dz[:, :hidden] = dct * gg * gi * (1.0 - gi)
        dz[:, hidden:2 * hidden] = (dct * cache["c_prev"][:na, step]
                                    * gf * (1.0 - gf))
        dz[:, 2 * hidden:3 * hidden] = dct * gi * (1.0 - gg * gg)
        dz[:, 3 * hidden:] = do * go * (1.0 - go)
        dz_all[:na, step] = dz
        dh[:na] = dz @ u
        dc[:na] = dct * gf
    flat_dz = dz_all.reshape(bs * t_len, 4 * hidden)
    flat_x = xs.reshape(bs * t_len, -1)
    flat_hp = cache["h_prev"].reshape(bs * t_len, hidden)
    dw = flat_dz.T @ flat_x
    du = flat_dz.T @ flat_hp
    db = flat_dz.sum(axis=0)
    dx = (flat_dz @ w).reshape(x.shape)[inv]
    return dw, du, db, dx


def lstm_forward(params: ModelParams, embs: Tensor,
                 lengths: Optional[np.ndarray] = None) -> HiddenStates:
    """Unidirectional LSTM over (B, T, k+1) embeddings (2-D input is promoted).

    Gradients flow to the gate weights, biases and the input embeddings via
    the fused backward; cell states are returned as a detached cache.
    """
    single = embs.ndim == 2
    x_t = embs
    if single:
        from .autodiff import reshape
        x_t = reshape(embs, (1,) + embs.shape)
    w, u, b = params.lstm_W, params.lstm_U, params.lstm_b
    if x_t.shape[2] != w.shape[1]:
        raise EncoderError(
            f"embedding width {x_t.shape[2]} != k+1 = {w.shape[1]}")
    h_all, c_all, cache = _lstm_core(w.data, u.data, b.data, x_t.data,
                                     lengths=None if single else lengths)

    def bwd(g):
        dw, du, db, dx = _lstm_backward(w.data, u.data, x_t.data, cache, g)
        w.accumulate(dw)
        u.accumulate(du)
        b.accumulate(db)
        x_t.accumulate(dx)

    h = _op(h_all, (x_t, w, u, b), bwd)
    if single:
        from .autodiff import reshape
        h = reshape(h, h.shape[1:])
        return HiddenStates(h=h, c=c_all[0], lengths=lengths)
    return HiddenStates(h=h, c=c_all, lengths=lengths)


def last_hidden(hidden: HiddenStates, lengths: np.ndarray) -> Tensor:
    """(B, H) sequence embeddings: hidden state at each last valid position."""
    bs = hidden.h.shape[0]
    return take(hidden.h, (np.arange(bs), np.asarray(lengths) - 1))


def sequence_embedding(params: ModelParams, seq) -> Tensor:
    """f(x): encode one sequence and return the last hidden state."""
    if len(seq) < 1:
        raise EncoderError("empty sequence")
    from .data import pad_sequences
    batch = pad_sequences([seq.mcc], [seq.amount], [0])
    states = lstm_forward(params, embed_events(params, batch), batch.lengths)
    return take(last_hidden(states, batch.lengths), np.array([0]))


def predict_masked(params: ModelParams, hidden: HiddenStates,
                   rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Predicted event embeddings P h_i + p at each masked position.

    ``hidden`` must come from the mask-substituted input, so h_i is the
    causal context up to and including the mask token itself.
    """
    if len(rows) == 0:
        raise EncoderError("empty mask plan: nothing to predict")
    h_at = take(hidden.h, (np.asarray(rows), np.asarray(cols)))   # (m, H)
    from .autodiff import matmul, transpose
    return matmul(h_at, transpose(params.proj_P)) + params.proj_b
