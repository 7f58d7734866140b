import json

import numpy as np
import pytest

from seqmatch.dataio import toy_grammar
from seqmatch.policy import TabularPolicy
from seqmatch.seq_mdp import initial_state, trajectory_from_actions
from seqmatch.trainer import (
    METRIC_COLUMNS,
    AdamW,
    NumericalFailure,
    ReplayBuffer,
    TrainConfig,
    lr_at,
    mixing_beta,
    sample_round,
    sampling_cadence,
    train,
)

QUICK = dict(steps=60, eval_every=20, eval_samples=20, bc_warmup_steps=10, anneal_start=10, anneal_end=30, buffer_capacity=32)


def test_mixing_beta_schedule():
    cfg = TrainConfig(anneal_start=100, anneal_end=500, beta_final=0.2)
    assert mixing_beta(0, cfg) == 1.0
    assert mixing_beta(99, cfg) == 1.0
    assert mixing_beta(300, cfg) == pytest.approx(0.6)
    assert mixing_beta(500, cfg) == pytest.approx(0.2)
    assert mixing_beta(10**6, cfg) == pytest.approx(0.2)
    betas = [mixing_beta(k, cfg) for k in range(0, 700, 7)]
    assert all(a >= b for a, b in zip(betas, betas[1:]))
    assert mixing_beta(1000, TrainConfig(objective="bc")) == 1.0


def test_bc_warmup_overrides_schedule():
    cfg = TrainConfig(bc_warmup_steps=50, anneal_start=0, anneal_end=0, beta_final=0.0)
    assert mixing_beta(49, cfg) == 1.0
    assert mixing_beta(50, cfg) == 0.0


def test_sampling_cadence_examples():
    assert sampling_cadence(TrainConfig(buffer_capacity=100, batch_size=10, reuse_factor=8)) == 80
    assert sampling_cadence(TrainConfig(buffer_capacity=10, batch_size=10, reuse_factor=1)) == 1
    a = sampling_cadence(TrainConfig(buffer_capacity=100, batch_size=10, reuse_factor=4))
    b = sampling_cadence(TrainConfig(buffer_capacity=100, batch_size=10, reuse_factor=8))
    assert b == 2 * a


def test_sampling_cadence_clamps(caplog):
    cfg = TrainConfig(buffer_capacity=1, batch_size=64, reuse_factor=1)
    assert sampling_cadence(cfg) == 1
    assert "clamping" in caplog.text


def test_lr_schedule():
    cfg = TrainConfig(lr=0.1, lr_warmup_steps=10, steps=110, lr_min_frac=0.1)
    assert lr_at(0, cfg) == pytest.approx(0.01)
    assert lr_at(9, cfg) == pytest.approx(0.1)
    assert lr_at(10, cfg) == pytest.approx(0.1)
    assert lr_at(60, cfg) == pytest.approx(0.055)
    assert lr_at(110, cfg) == pytest.approx(0.01)


def test_adamw_skips_masked_entries():
    p = np.array([1.0, -np.inf, 2.0])
    opt = AdamW(p.shape, weight_decay=0.1)
    opt.step(p, np.array([1.0, 5.0, -1.0]), 0.1)
    assert p[1] == -np.inf
    assert p[0] < 1.0 and p[2] > 1.9


def test_replay_buffer_fifo(ab):
    buf = ReplayBuffer(3)
    trajs = [trajectory_from_actions(ab, [i % 2, ab.eos], "model") for i in range(5)]
    assert buf.add(trajs[:2], 0) == 0
    assert buf.add(trajs[2:], 1) == 2
    assert len(buf) == 3
    assert [t for _, t in buf.entries] == trajs[2:]
    steps = [s for s, _ in buf.entries]
    assert steps == sorted(steps)
    with pytest.raises(ValueError):
        buf.add([trajectory_from_actions(ab, [ab.eos], "data")], 2)
    with pytest.raises(ValueError):
        ReplayBuffer(3).sample(np.random.default_rng(0), 1)
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_config_round_trip_and_errors(tmp_path):
    cfg = TrainConfig(divergence="kl", seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"alpha": 0.5, "divergence": "chi2-mixture"}))
    loaded = TrainConfig.from_file(path)
    assert loaded.alpha == 0.5 and loaded.divergence == "chi2_mixture"
    with pytest.raises(ValueError, match="unknown config keys: bogus"):
        TrainConfig.from_dict({"bogus": 1})
    path.write_text("[1, 2]")
    with pytest.raises(ValueError):
        TrainConfig.from_file(path)
    for bad in ({"anneal_start": 10, "anneal_end": 5}, {"beta_final": 2}, {"reuse_factor": 0.5},
                {"gamma": 1.0}, {"objective": "ppo"}, {"divergence": "hellinger"}, {"eta": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_default_discount():
    assert TrainConfig(context_len=8).discount == pytest.approx(8 / 9)
    assert TrainConfig(gamma=0.5).discount == 0.5


def test_sample_round_prompts_start_at_root():
    ds = toy_grammar()
    cfg = TrainConfig(context_len=8)
    policy = TabularPolicy.zeros(ds.vocab, 8)
    data = ds.trajectories(8)
    trajs = sample_round(policy, data, 40, (0, 1, 0), cfg)
    assert len(trajs) == 40
    for t in trajs:
        assert t.source == "model"
        assert t.triples[0].state == initial_state(ds.vocab)
        for a, b in zip(t.triples, t.triples[1:]):
            assert a.next_state == b.state
    again = sample_round(policy, data, 40, (0, 1, 0), cfg, threads=3)
    assert again == trajs


def test_train_is_deterministic_and_thread_invariant(tmp_path):
    ds = toy_grammar()
    cfg = TrainConfig(**QUICK)
    a = train(ds, cfg, tmp_path / "a")
    b = train(ds, cfg, tmp_path / "b")
    c = train(ds, cfg, tmp_path / "c", threads=4)
    ta = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert ta == (tmp_path / "b" / "metrics.csv").read_bytes() == (tmp_path / "c" / "metrics.csv").read_bytes()
    assert a.csv_text().encode() == ta
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    np.testing.assert_array_equal(a.policy.logits, c.policy.logits)
    assert ta.decode().splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert (tmp_path / "a" / "final.ckpt").exists()
    assert b.summary["sampling_rounds"] > 0


def test_train_metrics_rows():
    res = train(toy_grammar(), TrainConfig(**QUICK))
    assert len(res.metrics) == QUICK["steps"] + 1
    assert res.metrics[0]["beta"] == 1.0 and "loss_sm" not in res.metrics[0]
    assert res.metrics[-2]["beta"] == pytest.approx(0.2)
    assert "loss_sm" in res.metrics[-2]
    evals = [r["step"] for r in res.metrics if "kl_exact" in r]
    assert evals == [0, 20, 40, 60]


def test_mle_mode_never_backspaces():
    res = train(toy_grammar(), TrainConfig(objective="mle", **QUICK))
    assert np.all(res.policy.logits[:, res.policy.vocab.backspace] == -np.inf)
    assert res.summary["sampling_rounds"] == 0


def test_kl_small_alpha_tracks_mle_training():
    ds = toy_grammar()
    common = dict(eta=0.0, gamma=0.999, steps=200, eval_every=0, bc_warmup_steps=0, anneal_start=0,
                  anneal_end=0, beta_final=0.0, lr=0.05)
    sm = train(ds, TrainConfig(objective="sm", divergence="kl", alpha=1e-4, include_model_term=False, **common))
    mle = train(ds, TrainConfig(objective="mle", **common), policy=TabularPolicy.zeros(ds.vocab, 8))
    a = np.array([r["loss_total"] for r in sm.metrics[:-1]])
    b = np.array([r["loss_total"] for r in mle.metrics[:-1]])
    assert np.max(np.abs(a - b) / np.abs(b)) < 0.01


def test_non_finite_loss_aborts_with_dump(tmp_path):
    ds = toy_grammar()
    policy = TabularPolicy.zeros(ds.vocab, 8)
    policy.logits[:] = np.nan
    with pytest.raises(NumericalFailure, match="dumped"):
        train(ds, TrainConfig(steps=3, eval_every=0), tmp_path, policy=policy)
    assert (tmp_path / "failure_step0.json").exists()
