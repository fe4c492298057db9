"""Training loop: gradients, optimizer, determinism, resume, checkpoints."""

import json

import numpy as np
import pytest

from evseq.data import (
    SynthSpec,
    normalize_amounts,
    synthesize_dataset,
)
from evseq.encoder import init_params
from evseq.training import (
    METHODS,
    AdamState,
    Checkpoint,
    CheckpointError,
    ConfigError,
    TrainConfig,
    adam_step,
    compute_gradients,
    config_hash,
    data_fingerprint,
    finite_difference_check,
    gradcheck_suite,
    load_checkpoint,
    save_checkpoint,
    train,
    _tiny_instance,
)


def mini_dataset(seed=0, n=40):
    spec = SynthSpec(n_sequences=n, len_range=(8, 16), vocab_size=6)
    return normalize_amounts(synthesize_dataset(spec, seed=seed))


def mini_config(**over):
    base = dict(method="coles", k=4, hidden=6, batch_size=16, epochs=2,
                n_views=2, n_neg=4, n_hard=2, view_len_range=(3, 10),
                mask_rate=0.2, seed=3)
    base.update(over)
    return TrainConfig(**base)


# config ------------------------------------------------------------------


@pytest.mark.parametrize("kw", [
    dict(method="ranked"),
    dict(method="hybrid", lam=0.0),
    dict(lam=-0.5),
    dict(rho=0.0),
    dict(mask_rate=1.0),
    dict(n_views=1),
    dict(lr=0.0),
    dict(view_len_range=(0, 5)),
    dict(view_len_range=(7, 5)),
    dict(grad_clip=-1.0),
    dict(epochs=-1),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        mini_config(**kw).validate()


def test_config_hash_ignores_epoch_budget():
    assert config_hash(mini_config(epochs=2)) == config_hash(mini_config(epochs=50))
    assert config_hash(mini_config(lr=1e-3)) != config_hash(mini_config(lr=2e-3))
    assert config_hash(mini_config(seed=0)) != config_hash(mini_config(seed=1))


def test_data_fingerprint_tracks_content():
    a, b = mini_dataset(0), mini_dataset(0)
    assert data_fingerprint(a) == data_fingerprint(b)
    assert data_fingerprint(a) != data_fingerprint(mini_dataset(1))
    b.sequences[0].label = 1 - b.sequences[0].label
    assert data_fingerprint(a) != data_fingerprint(b)


# gradients ---------------------------------------------------------------


@pytest.mark.parametrize("method", METHODS)
def test_gradients_match_finite_differences(method):
    for trial in range(2):
        params, seqs, cfg = _tiny_instance(method, trial)
        worst, failures = finite_difference_check(params, seqs, cfg)
        assert failures == [], f"{method} trial {trial}: {failures[:3]}"
        assert worst < 1e-4


def test_gradcheck_suite_smoke():
    worst, failures = gradcheck_suite(n_trials=1)
    assert failures == []
    assert worst < 1e-4


def test_hybrid_gradient_is_weighted_sum_of_parts():
    params, seqs, cfg = _tiny_instance("hybrid", 4)
    lam = cfg.lam
    from dataclasses import replace
    _, g_hybrid = compute_gradients(params, seqs, cfg, epoch=1, step=2)
    _, g_coles = compute_gradients(params, seqs, replace(cfg, method="coles"),
                                   epoch=1, step=2)
    _, g_cmlm = compute_gradients(params, seqs, replace(cfg, method="cmlm"),
                                  epoch=1, step=2)
    for name in g_hybrid:
        want = g_coles[name] + lam * g_cmlm[name]
        assert np.allclose(g_hybrid[name], want, atol=1e-10), name


def test_untouched_parameters_get_zero_gradients():
    params, seqs, cfg = _tiny_instance("coles", 0)
    _, grads = compute_gradients(params, seqs, cfg)
    # plain coles never touches the mask token or the prediction head
    assert np.all(grads["mask_vector"] == 0.0)
    assert np.all(grads["proj_P"] == 0.0)
    assert np.abs(grads["lstm_W"]).sum() > 0


def test_grad_clip_rescales_to_global_norm():
    params, seqs, cfg = _tiny_instance("hybrid", 1)
    from dataclasses import replace
    _, free = compute_gradients(params, seqs, cfg)
    free_norm = np.sqrt(sum((g ** 2).sum() for g in free.values()))
    clip = float(free_norm) / 3.0
    _, clipped = compute_gradients(params, seqs, replace(cfg, grad_clip=clip))
    norm = np.sqrt(sum((g ** 2).sum() for g in clipped.values()))
    assert abs(norm - clip) < 1e-9
    for name in free:  # direction preserved
        assert np.allclose(clipped[name] * 3.0, free[name], atol=1e-9)


def test_unknown_method_rejected_at_loss_time():
    params, seqs, cfg = _tiny_instance("coles", 0)
    cfg.method = "pairwise"
    with pytest.raises(ConfigError):
        compute_gradients(params, seqs, cfg)


# optimizer ---------------------------------------------------------------


def test_adam_first_step_matches_hand_formula():
    params = init_params(2, 3, 2, seed=0)
    cfg = mini_config(lr=0.01)
    state = AdamState.fresh(params)
    grads = {n: np.full_like(p.data, 0.25) for n, p in params.tensors().items()}
    before = {n: p.data.copy() for n, p in params.tensors().items()}
    adam_step(params, state, grads, cfg)
    # with t=1 the bias corrections cancel the decay factors exactly
    step = 0.01 * 0.25 / (0.25 + cfg.adam_eps)
    for n, p in params.tensors().items():
        assert np.allclose(before[n] - p.data, step, atol=1e-12), n
    assert state.t == 1


# training determinism and resume ------------------------------------------


def test_training_is_bit_deterministic():
    ds = mini_dataset()
    cfg = mini_config(method="hybrid", epochs=3)
    a = train(cfg, ds)
    b = train(cfg, ds)
    assert a.loss_history == b.loss_history
    for n, t in a.params.tensors().items():
        assert np.array_equal(t.data, b.params.tensors()[n].data), n


def test_resume_equals_straight_through(tmp_path):
    ds = mini_dataset()
    straight = train(mini_config(epochs=4), ds)
    half = train(mini_config(epochs=2), ds)
    save_checkpoint(half, tmp_path / "half.npz")
    reloaded = load_checkpoint(tmp_path / "half.npz")
    resumed = train(mini_config(epochs=4), ds, resume=reloaded)
    assert resumed.epoch == straight.epoch == 4
    assert resumed.loss_history == straight.loss_history
    for n, t in resumed.params.tensors().items():
        assert np.array_equal(t.data, straight.params.tensors()[n].data), n
    for n in straight.opt.m:
        assert np.array_equal(resumed.opt.m[n], straight.opt.m[n])
        assert np.array_equal(resumed.opt.v[n], straight.opt.v[n])


def test_zero_epoch_training_returns_initialization():
    ds = mini_dataset()
    cfg = mini_config(epochs=0)
    cp = train(cfg, ds)
    fresh = init_params(cfg.k, ds.vocab_size, cfg.hidden, cfg.seed)
    assert cp.epoch == 0 and cp.loss_history == []
    for n, t in cp.params.tensors().items():
        assert np.array_equal(t.data, fresh.tensors()[n].data)


def test_resume_refuses_mismatched_config():
    ds = mini_dataset()
    cp = train(mini_config(epochs=1), ds)
    with pytest.warns(UserWarning, match="config hash"):
        with pytest.raises(ConfigError, match="refusing to resume"):
            train(mini_config(epochs=2, lr=5e-3), ds, resume=cp)
    with pytest.warns(UserWarning):
        forced = train(mini_config(epochs=2, lr=5e-3), ds, resume=cp, force=True)
    assert forced.epoch == 2


def test_resume_refuses_mismatched_data():
    ds = mini_dataset()
    cp = train(mini_config(epochs=1), ds)
    with pytest.warns(UserWarning, match="data fingerprint"):
        with pytest.raises(ConfigError):
            train(mini_config(epochs=2), mini_dataset(1), resume=cp)


def test_training_log_is_json_lines(tmp_path):
    ds = mini_dataset()
    log = tmp_path / "train.jsonl"
    train(mini_config(method="cmlm", epochs=3), ds, log_path=log)
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert [e["epoch"] for e in entries] == [0, 1, 2]
    for e in entries:
        assert e["method"] == "cmlm"
        assert np.isfinite(e["loss"])
        assert e["wall_ms"] > 0


def test_non_finite_gradient_detected_before_optimizer_step():
    # saturated gates keep the forward finite, so the overflow only shows in
    # the backward pass; it must not reach the optimizer
    ds = mini_dataset()
    ds.sequences[0].amount[:] = np.inf
    cfg = mini_config(batch_size=len(ds.sequences))
    params = init_params(cfg.k, ds.vocab_size, cfg.hidden, cfg.seed)
    from evseq.training import TrainingError
    with np.errstate(invalid="ignore"):
        with pytest.raises(TrainingError, match="gradient"):
            compute_gradients(params, list(ds.sequences), cfg, 0, 0)


def test_divergence_rolls_back_to_last_finite_state():
    ds = mini_dataset()
    ds.sequences[0].amount[:] = np.inf  # poisons every batch containing it
    cfg = mini_config(epochs=2, batch_size=len(ds.sequences))
    with np.errstate(invalid="ignore"):
        with pytest.warns(UserWarning, match="diverged"):
            cp = train(cfg, ds)
    assert cp.epoch == 0
    assert cp.loss_history == []
    fresh = init_params(cfg.k, ds.vocab_size, cfg.hidden, cfg.seed)
    for n, t in cp.params.tensors().items():
        assert np.array_equal(t.data, fresh.tensors()[n].data)


@pytest.mark.parametrize("method", METHODS)
def test_mean_loss_decreases_over_training(method):
    spec = SynthSpec(n_sequences=45, len_range=(20, 40), vocab_size=10, beta=0.7)
    base = dict(k=6, hidden=12, batch_size=15, epochs=5, lr=3e-3, n_views=2,
                n_neg=6, n_hard=2, view_len_range=(5, 20), mask_rate=0.2)
    firsts, lasts = [], []
    for seed in range(3):
        ds = normalize_amounts(synthesize_dataset(spec, seed=seed))
        cp = train(TrainConfig(method=method, seed=seed, **base), ds)
        firsts.append(cp.loss_history[0])
        lasts.append(cp.loss_history[-1])
    assert np.mean(lasts) < np.mean(firsts)


# checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ds = mini_dataset()
    cp = train(mini_config(method="hybrid", epochs=2), ds)
    path = tmp_path / "cp.npz"
    save_checkpoint(cp, path)
    back = load_checkpoint(path)
    assert back.epoch == cp.epoch
    assert back.config_hash == cp.config_hash
    assert back.loss_history == cp.loss_history
    assert back.vocab == cp.vocab
    assert back.amount_stats == cp.amount_stats
    assert back.data_fingerprint == cp.data_fingerprint
    assert back.cfg == cp.cfg
    for n, t in cp.params.tensors().items():
        assert np.array_equal(back.params.tensors()[n].data, t.data)
    for n in cp.opt.m:
        assert np.array_equal(back.opt.m[n], cp.opt.m[n])
        assert np.array_equal(back.opt.v[n], cp.opt.v[n])
    assert back.opt.t == cp.opt.t


def test_checkpoint_rejects_truncation(tmp_path):
    ds = mini_dataset()
    cp = train(mini_config(epochs=1), ds)
    path = tmp_path / "cp.npz"
    save_checkpoint(cp, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(path)


def test_checkpoint_rejects_version_mismatch(tmp_path):
    ds = mini_dataset()
    cp = train(mini_config(epochs=1), ds)
    path = tmp_path / "cp.npz"
    save_checkpoint(cp, path)
    with np.load(path, allow_pickle=False) as z:
        arrays = {n: z[n] for n in z.files}
    meta = json.loads(str(arrays["meta"][()]))
    meta["version"] = "evseq-ckpt-0"
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.npz")
