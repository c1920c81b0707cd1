import dataclasses
import math

import numpy as np
import pytest
import torch

from dkit.config import RunConfig
from dkit.errors import FormatError, NonFiniteLoss, ShapeMismatch
from dkit.synthdata import make_dataset
from dkit.trainer import (
    CKPT_VERSION,
    OptimizerState,
    checkpoint_bytes,
    initial_checkpoint,
    load_checkpoint,
    lr_at_epoch,
    optimizer_step,
    save_checkpoint,
    train,
)


def small_config(seed=0, s1=4, s2=0, rho=0.25, **train_kw) -> RunConfig:
    return RunConfig.from_dict({
        "dataset": {"n_speakers": 4, "n_emotions": 3, "samples_per_cell": 4, "neutral_only_speakers": [3],
                    "seq_len": [12, 20], "feature_dim": 8, "speaker_factor_dim": 2, "n_tokens": 4, "seed": 5},
        "model": {"latent_dim": 4, "emb_dim": 4, "hidden": 8, "ref_channels": [8] * 6, "ref_gru": 8},
        "train": {"batch_size": 8, "stage1_steps": s1, "stage2_steps": s2, "log_every": 1, "seed": seed,
                  **train_kw},
        "self_augmentation": {"mode": "ENC", "proportion": rho},
    })


@pytest.fixture(scope="module")
def small_data():
    return make_dataset(small_config().dataset)


def assert_params_identical(a: dict, b: dict):
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype
        assert torch.equal(a[k], b[k]), k


# ------------------------------------------------------------------ AdamW


def _one(v):
    return {"w": np.array([v])}


def test_zero_gradient_decoupled_decay():
    p, _ = optimizer_step(_one(1.0), _one(0.0), OptimizerState.zeros_like(_one(1.0)), 2e-4)
    assert p["w"][0] == pytest.approx(0.999998, abs=1e-15)
    p, _ = optimizer_step(_one(1.0), _one(0.0), OptimizerState.zeros_like(_one(1.0)), 2e-4, weight_decay=0.0)
    assert p["w"][0] == 1.0


def test_first_step_magnitude_is_lr():
    p, state = optimizer_step(_one(0.0), _one(1.0), OptimizerState.zeros_like(_one(0.0)), 1e-3)
    assert p["w"][0] == pytest.approx(-1e-3, rel=1e-7)
    assert state.step == 1


def test_geometric_decay_under_zero_gradient():
    params, state = _one(1.0), OptimizerState.zeros_like(_one(1.0))
    for _ in range(10):
        params, state = optimizer_step(params, _one(0.0), state, 1e-2, weight_decay=0.1)
    assert params["w"][0] == pytest.approx(0.999**10, rel=1e-12)


def test_adamw_matches_torch():
    rng = np.random.default_rng(0)
    theta = torch.tensor(rng.standard_normal(5), requires_grad=True)
    ref = torch.optim.AdamW([theta], lr=1e-2, betas=(0.8, 0.99), eps=1e-8, weight_decay=0.01)
    params = {"w": theta.detach().clone()}
    state = OptimizerState.zeros_like(params)
    for _ in range(5):
        g = torch.as_tensor(rng.standard_normal(5))
        theta.grad = g.clone()
        ref.step()
        params, state = optimizer_step(params, {"w": g}, state, 1e-2)
    # the moment step does not read theta, so decay-then-step equals step-then-decay
    torch.testing.assert_close(params["w"], theta.detach(), rtol=0, atol=1e-9)


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        optimizer_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState.zeros_like({"w": np.zeros(2)}), 1e-3)


def test_lr_schedule():
    d = 0.999 ** (1 / 8)
    assert lr_at_epoch(2e-4, d, 0) == 2e-4
    assert lr_at_epoch(2e-4, d, 8) == pytest.approx(1.998e-4, rel=1e-12)
    lrs = [lr_at_epoch(2e-4, d, k) for k in range(50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at_epoch(2e-4, d, -1)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path, small_data):
    ckpt = train(small_config(s1=2), small_data, evaluate_stages=False).checkpoint
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.config.to_dict() == ckpt.config.to_dict()
    assert (back.step, back.stage, back.rng_state) == (ckpt.step, ckpt.stage, ckpt.rng_state)
    assert_params_identical(back.params, ckpt.params)
    assert_params_identical(back.optimizer.exp_avg, ckpt.optimizer.exp_avg)
    assert_params_identical(back.optimizer.exp_avg_sq, ckpt.optimizer.exp_avg_sq)
    assert back.optimizer.step == ckpt.optimizer.step
    assert checkpoint_bytes(back) == checkpoint_bytes(ckpt)


def test_checkpoint_truncated_and_version(tmp_path):
    buf = checkpoint_bytes(initial_checkpoint(small_config()))
    for cut in (3, 10, len(buf) // 2, len(buf) - 1):
        (tmp_path / "t").write_bytes(buf[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t")
    bumped = buf[:4] + (CKPT_VERSION + 1).to_bytes(4, "little") + buf[8:]
    (tmp_path / "v").write_bytes(bumped)
    with pytest.raises(FormatError, match=rf"version {CKPT_VERSION + 1}.*expected {CKPT_VERSION}"):
        load_checkpoint(tmp_path / "v")
    (tmp_path / "m").write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m")


# ------------------------------------------------------------------ train


def test_zero_steps_leave_parameters_unchanged(small_data):
    cfg = small_config(s1=0, s2=0)
    result = train(cfg, small_data, evaluate_stages=False)
    assert_params_identical(result.checkpoint.params, initial_checkpoint(cfg).params)


def test_training_is_deterministic(small_data):
    a = train(small_config(s1=3, s2=2), small_data, evaluate_stages=False)
    b = train(small_config(s1=3, s2=2), small_data, evaluate_stages=False)
    assert_params_identical(a.checkpoint.params, b.checkpoint.params)
    assert [(r.metric, r.value) for r in a.history] == [(r.metric, r.value) for r in b.history]


@pytest.mark.parametrize("split", [2, 4])
def test_resume_matches_uninterrupted(tmp_path, small_data, split):
    cfg = small_config(s1=4, s2=2)
    full = train(cfg, small_data, evaluate_stages=False).checkpoint
    part_cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, stage1_steps=split, stage2_steps=0))
    part = train(part_cfg, small_data, evaluate_stages=False).checkpoint
    save_checkpoint(part, tmp_path / "p.ckpt")
    resumed = train(cfg, small_data, resume=load_checkpoint(tmp_path / "p.ckpt"), evaluate_stages=False).checkpoint
    assert resumed.step == full.step
    assert_params_identical(resumed.params, full.params)
    assert_params_identical(resumed.optimizer.exp_avg, full.optimizer.exp_avg)


def test_stage_two_mask_counts(small_data):
    result = train(small_config(s1=3, s2=4, rho=0.25), small_data, evaluate_stages=False)
    n_train = len(small_data.train)
    per_epoch = math.ceil(n_train / 8)
    for step, stage, count in result.mask_counts:
        if stage == 1:
            assert count == 0
        else:
            local = step - 1 - 3
            B = min(8, n_train - (local % per_epoch) * 8)
            assert count == math.floor(0.25 * B)
    assert [s for _, s, _ in result.mask_counts] == [1, 1, 1, 2, 2, 2, 2]


def test_logged_total_matches_weighted_sum(small_data):
    cfg = small_config(s1=3, loss_weights={"recon": 45.0, "kl": 0.5})
    result = train(cfg, small_data, evaluate_stages=False)
    by_step = {}
    for r in result.history:
        by_step.setdefault(r.step, {})[r.metric] = r.value
    for metrics in by_step.values():
        weights = {"recon": 45.0, "kl": 0.5}
        expected = sum(weights.get(k, 1.0) * v for k, v in metrics.items() if k != "total")
        assert metrics["total"] == pytest.approx(expected, abs=1e-12)


def test_loss_decreases_over_200_steps(small_data):
    drops = []
    for seed in range(3):
        hist = train(small_config(seed=seed, s1=200), small_data, evaluate_stages=False).history
        totals = {r.step: r.value for r in hist if r.metric == "total"}
        drops.append(totals[200] - totals[1])
    assert np.median(drops) < 0


def test_stage_end_evaluation_logged(small_data):
    hist = train(small_config(s1=2, s2=1), small_data).history
    evals = {(r.step, r.metric) for r in hist}
    for step in (2, 3):
        for metric in ("cka_emb", "lk_cka_speaker", "lk_cka_emotion", "secs", "eecs"):
            assert (step, metric) in evals


def test_non_finite_loss_aborts_with_checkpoint(small_data):
    poisoned = make_dataset(small_data.spec)
    for s in poisoned.samples:
        s.features = s.features * np.nan
    cfg = small_config(s1=3)
    with pytest.raises(NonFiniteLoss) as info:
        train(cfg, poisoned, evaluate_stages=False)
    assert info.value.step == 0
    assert_params_identical(info.value.checkpoint.params, initial_checkpoint(cfg).params)
