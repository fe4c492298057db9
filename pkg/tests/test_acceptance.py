"""Acceptance gate. Each test prints exactly one verdict line; run with
``pytest -s tests/test_acceptance.py`` to watch them stream.

The synergy and sweep experiments at the bottom train full-size models and
carry the ``slow`` marker; everything else finishes in seconds.
"""

import hashlib
import time
import warnings

import numpy as np
import pytest
from scipy.stats import chisquare

import conftest
from evseq.autodiff import Tensor
from evseq.data import (EventSequence, SynthSpec, normalize_amounts, rng_for,
                        split_dataset, synthesize_dataset, transition_matrices)
from evseq.evaluation import (bayes_local_auc, evaluate, roc_auc_binary,
                              roc_auc_weighted, train_local_probe)
from evseq.objectives import (MaskedBatch, ViewBatch, cmlm_loss, coles_loss,
                              coles_pairs, hybrid_loss, pairwise_cosine_distances,
                              sample_mask, sample_views)
from evseq.training import (TrainConfig, gradcheck_suite, load_checkpoint,
                            save_checkpoint, train)


def verdict(name: str, ok: bool, detail: str = "") -> bool:
    tail = f" ({detail})" if detail else ""
    line = f"{name}: {'PASS' if ok else 'FAIL'}{tail}"
    print("\n" + line)
    conftest.VERDICTS.append(line)
    return ok


# 1. every method's gradients vs central finite differences ---------------------


def test_gradient_exactness():
    t0 = time.time()
    worst, failures = gradcheck_suite(n_trials=10, seed=0)
    ok = not failures and worst < 1e-4
    assert verdict("criterion 1 (gradient exactness, 4 methods x 10 instances)",
                   ok, f"worst rel err {worst:.2e}, {time.time() - t0:.0f}s")


# 2. hand-derived loss values ----------------------------------------------------


def test_loss_unit_values():
    z = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    coles = coles_loss(ViewBatch(z, np.array([0, 0, 1])), rho=0.5, n_hard=1)

    same = Tensor(np.tile([[1.0, 0.0]], (3, 1)))
    log2 = cmlm_loss(MaskedBatch(same, same,
                                 [np.array([(i + 1) % 3]) for i in range(3)]))

    pm = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    anti = cmlm_loss(MaskedBatch(pm, pm, [np.array([1]), np.array([0])]))

    hyb = hybrid_loss(Tensor(np.array(0.625)), Tensor(np.array(0.6931)), 0.05)

    errs = {
        "coles 0.625": abs(float(coles.data) - 0.625),
        "cmlm log2": abs(float(log2.data) - np.log(2.0)),
        "cmlm log(1+e^-2)": abs(float(anti.data) - np.log(1.0 + np.exp(-2.0))),
        "hybrid 0.659655": abs(float(hyb.data) - 0.659655),
    }
    ok = all(e < 1e-9 for e in errs.values())
    worst = max(errs, key=errs.get)
    assert verdict("criterion 2 (hand-derived loss values @ 1e-9)", ok,
                   f"largest dev {errs[worst]:.1e} at {worst}")


# 3. AUC vs exhaustive pairwise counting ------------------------------------------


def _pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def test_auc_oracle_equivalence():
    rng = rng_for(0, 9001)
    exact = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 6, size=n).astype(np.float64)
        exact += roc_auc_binary(scores, labels) == _pairwise_auc(scores, labels)

    reduction = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        p1 = rng.random(n)
        probs = np.stack([1.0 - p1, p1], axis=1)
        reduction = max(reduction, abs(roc_auc_weighted(probs, labels)
                                       - roc_auc_binary(p1, labels)))
    ok = exact == 1000 and reduction < 1e-12
    assert verdict("criterion 3 (AUC pairwise oracle + C=2 reduction)", ok,
                   f"{exact}/1000 exact, reduction dev {reduction:.1e}")


# 4. pair mining vs brute force ----------------------------------------------------


def _brute_pairs(z, origins, n_hard):
    m = len(origins)
    d = pairwise_cosine_distances(z)
    pos = sorted((a, b) for a in range(m) for b in range(a + 1, m)
                 if origins[a] == origins[b])
    neg = set()
    for i in range(m):
        cross = [j for j in range(m) if origins[j] != origins[i]]
        if n_hard is not None:
            cross = sorted(cross, key=lambda j: (d[i, j], j))[:n_hard]
        neg |= {(min(i, j), max(i, j)) for j in cross}
    return (np.array(pos, dtype=np.int64).reshape(-1, 2),
            np.array(sorted(neg), dtype=np.int64).reshape(-1, 2))


def test_pair_construction_oracle():
    rng = rng_for(0, 9004)
    hard_cycle = [None, 1, 2, 3]
    good = 0
    for trial in range(100):
        m = int(rng.integers(2, 7))
        origins = rng.integers(0, 3, size=m)
        if origins.min() == origins.max():
            origins[0] = origins[0] + 1  # mining needs a cross-origin pair
        if trial % 2:
            alphabet = np.array([[1.0, 0], [0, 1], [-1, 0], [1, 1]])
            z = alphabet[rng.integers(0, 4, size=m)]  # tie-heavy geometry
        else:
            z = rng.normal(size=(m, 4))
        n_hard = hard_cycle[trial % 4]
        pos, neg = coles_pairs(z, origins, n_hard)
        bpos, bneg = _brute_pairs(z, origins, n_hard)
        good += np.array_equal(pos, bpos) and np.array_equal(neg, bneg)
    assert verdict("criterion 4 (pair mining vs brute force)", good == 100,
                   f"{good}/100 trials exact")


# 5. sampling statistics -------------------------------------------------------------


def test_sampling_statistics():
    lengths = [100] * 1000
    plan = sample_mask(lengths, rate=0.15, seed=rng_for(0, 9005))
    frac = sum(len(p) for p in plan.positions) / float(sum(lengths))

    seqs = [EventSequence(id=str(i), mcc=np.ones(20, dtype=np.int64),
                          amount=np.zeros(20), time=np.arange(20.0))
            for i in range(10000)]
    views = sample_views(seqs, n_views=10, len_range=(5, 20),
                         seed=rng_for(0, 9006))
    counts = np.bincount([v.length for v in views], minlength=21)[5:21]
    p = chisquare(counts).pvalue

    ok = abs(frac - 0.15) <= 0.02 and p > 0.01
    assert verdict("criterion 5 (sampling statistics)", ok,
                   f"mask frac {frac:.4f}, view-length chi2 p {p:.3f}")


# 6. determinism and resume -----------------------------------------------------------


def test_determinism_and_resume(tmp_path):
    ds = normalize_amounts(synthesize_dataset(
        SynthSpec(n_sequences=30, len_range=(8, 14), vocab_size=6), seed=1))
    cfg = TrainConfig(method="hybrid", lam=0.05, k=4, hidden=8, batch_size=10,
                      epochs=4, n_views=2, n_neg=4, n_hard=2,
                      view_len_range=(3, 8), mask_rate=0.2, seed=1)

    a = train(cfg, ds)
    b = train(cfg, ds)
    same_traj = a.loss_history == b.loss_history

    import dataclasses
    half = train(dataclasses.replace(cfg, epochs=2), ds)
    path = tmp_path / "half.npz"
    save_checkpoint(half, path)
    resumed = train(cfg, ds, resume=load_checkpoint(path))
    same_resume = (resumed.loss_history == a.loss_history and
                   all(np.array_equal(resumed.params.tensors()[n].data, t.data)
                       for n, t in a.params.tensors().items()))
    ok = same_traj and same_resume
    assert verdict("criterion 6 (bit-exact determinism and resume)", ok,
                   f"trajectories equal: {same_traj}, resume equal: {same_resume}")


# 7. the synergy experiment ------------------------------------------------------------

SYNERGY = dict(k=8, hidden=64, batch_size=64, epochs=20, lr=2e-3, n_views=4,
               n_neg=16, n_hard=5, view_len_range=(15, 50), mask_rate=0.15,
               lam=0.05)
SEEDS = (0, 1, 2)


def _splits(spec, seed=0):
    ds = synthesize_dataset(spec, seed=seed)
    tr, va, te = split_dataset(ds, (0.8, 0.1, 0.1), seed=seed)
    tr = normalize_amounts(tr)
    va = normalize_amounts(va, stats=tr.amount_stats)
    te = normalize_amounts(te, stats=tr.amount_stats)
    return tr, va, te


def _seed_mean_metrics(beta: float) -> dict:
    splits = _splits(SynthSpec(beta=beta))
    out = {}
    for method in ("coles", "cmlm", "hybrid"):
        g, l = [], []
        for seed in SEEDS:
            cfg = TrainConfig(method=method, seed=seed, **SYNERGY)
            cp = train(cfg, splits[0])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                rep = evaluate(cp, splits, seed=seed)
            g.append(rep["global_auc"])
            l.append(rep["local_auc"])
        out[method] = {"global": float(np.mean(g)), "local": float(np.mean(l))}
    return out


def _synergy_checks(m: dict) -> dict:
    return {
        "a": m["cmlm"]["local"] > m["coles"]["local"] + 0.01,
        "b": m["coles"]["global"] > m["cmlm"]["global"] + 0.01,
        "c": (m["hybrid"]["local"] >= m["cmlm"]["local"] - 0.02
              and m["hybrid"]["global"] >= m["coles"]["global"] - 0.02),
        "d": all(m[meth][task] > 0.55
                 for meth in m for task in ("global", "local")),
    }


@pytest.mark.slow
def test_synergy_experiment():
    t0 = time.time()
    beta = 0.6
    metrics = _seed_mean_metrics(beta)
    checks = _synergy_checks(metrics)
    if not (checks["a"] and checks["b"]):
        beta = 0.8  # generator-strength retry for the ordering checks only
        metrics = _seed_mean_metrics(beta)
        checks = _synergy_checks(metrics)
    flat = " ".join(f"{meth[:3]}:{metrics[meth]['global']:.3f}/"
                    f"{metrics[meth]['local']:.3f}"
                    for meth in ("coles", "cmlm", "hybrid"))
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    assert verdict(
        "criterion 7 (synergy, seed-mean global/local)", ok,
        f"beta {beta}, {flat}, {time.time() - t0:.0f}s"
        + (f", failed {failed}" if failed else ""))


# 8. lambda tendency (reported, never gating) ---------------------------------------

LAMBDAS = (0.005, 0.01, 0.05, 0.1)


@pytest.mark.slow
def test_lambda_monotone_tendency():
    splits = _splits(SynthSpec(n_sequences=600))
    base = dict(k=8, hidden=32, batch_size=64, epochs=8, lr=2e-3, n_views=4,
                n_neg=16, n_hard=5, view_len_range=(15, 50), mask_rate=0.15)
    means = []
    for lam in LAMBDAS:
        vals = []
        for seed in (0, 1):
            cfg = TrainConfig(method="hybrid", lam=lam, seed=seed, **base)
            cp = train(cfg, splits[0])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                rep = evaluate(cp, splits, seed=seed, target="val",
                               probe_epochs=60)
            vals.append(rep["local_auc"])
        means.append(float(np.mean(vals)))
    pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    rising = sum(means[j] >= means[i] for i, j in pairs)
    if rising < 4:
        warnings.warn(f"local AUC not tending upward in lambda: "
                      f"{rising}/6 pairs non-decreasing, means {means}")
    detail = ("soft check; " + ", ".join(f"{l}:{m:.3f}"
              for l, m in zip(LAMBDAS, means)) + f"; {rising}/6 non-decreasing")
    assert verdict("criterion 8 (lambda tendency, warning-only)", True, detail)


# 9. frozen probe, Bayes bound --------------------------------------------------------


def _params_digest(params):
    h = hashlib.sha256()
    for name, t in sorted(params.tensors().items()):
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def test_frozen_probe_and_bayes_bound():
    spec = SynthSpec(n_sequences=250, len_range=(30, 60), vocab_size=10)
    ds = synthesize_dataset(spec, seed=5)
    chains = transition_matrices(spec, seed=5)
    tr, va, _ = split_dataset(ds, (0.8, 0.1, 0.1), seed=5)
    tr_n = normalize_amounts(tr)
    va_n = normalize_amounts(va, stats=tr_n.amount_stats)

    cfg = TrainConfig(method="cmlm", k=6, hidden=16, batch_size=32, epochs=5,
                      lr=2e-3, n_neg=8, mask_rate=0.2, seed=0)
    cp = train(cfg, tr_n)

    bayes = bayes_local_auc(chains, va)
    frozen, bounded, aucs = True, True, []
    for seed in (0, 1, 2):
        before = _params_digest(cp.params)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            _, probs, targets = train_local_probe(cp, tr_n, eval_ds=va_n,
                                                  epochs=120, seed=seed)
            auc = roc_auc_weighted(probs, targets)
        frozen &= _params_digest(cp.params) == before
        bounded &= auc <= bayes + 0.01
        aucs.append(auc)
    ok = frozen and bounded
    assert verdict("criterion 9 (frozen probe, Bayes bound)", ok,
                   f"probe {['%.3f' % a for a in aucs]} vs bayes {bayes:.3f}, "
                   f"encoder hash stable: {frozen}")
