import math

import numpy as np
import pytest

from msast.data import SynthConfig, VideoSample, generate_synthetic
from msast.errors import DataError, FileFormatError, NumericError
from msast.model import ModelConfig, StageOutputs, build_model, forward_full, predict
from msast.numerics import Parameter, as_tensor
from msast.training import (
    AdamState,
    TrainConfig,
    adam_step,
    capture_smooth_prev,
    cross_entropy_loss,
    load_checkpoint,
    save_checkpoint,
    smoothing_loss,
    total_loss,
    train,
)


# --- cross entropy ------------------------------------------------------------

def test_ce_uniform_logits_is_log_c():
    logits = as_tensor(np.zeros((5, 7)))
    loss = cross_entropy_loss(logits, np.zeros(5, dtype=int))
    assert loss.item() == pytest.approx(math.log(7), abs=1e-4)


def test_ce_confident_correct_is_near_zero():
    logits = np.full((4, 3), -100.0)
    labels = np.array([0, 1, 2, 1])
    logits[np.arange(4), labels] = 100.0
    assert cross_entropy_loss(as_tensor(logits), labels).item() == pytest.approx(0.0, abs=1e-6)


def test_ce_two_frame_closed_form():
    logits = as_tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    loss = cross_entropy_loss(logits, np.array([0, 1]))
    sigma = math.e / (math.e + 1)
    assert loss.item() == pytest.approx(-math.log(sigma), abs=1e-4)


def test_ce_rejects_out_of_range_label():
    with pytest.raises(DataError, match="frame 1"):
        cross_entropy_loss(as_tensor(np.zeros((3, 2))), np.array([0, 5, 1]))


# --- smoothing loss -------------------------------------------------------------

def test_smoothing_constant_logits_zero(rng):
    row = rng.normal(size=4)
    logits = as_tensor(np.tile(row, (6, 1)))
    assert smoothing_loss(logits, 4.0).item() == pytest.approx(0.0, abs=1e-12)


def test_smoothing_clips_at_tau_squared():
    # symmetric flip [L,0] -> [0,L] makes both per-class log-prob gaps
    # exactly L; with L = tau the clip boundary contributes tau^2.
    tau = 4.0
    logits = as_tensor(np.array([[tau, 0.0], [0.0, tau]]))
    assert smoothing_loss(logits, tau).item() == pytest.approx(tau ** 2, abs=1e-5)
    # far beyond the boundary it stays clipped at tau^2
    logits = as_tensor(np.array([[10.0, 0.0], [0.0, 10.0]]))
    assert smoothing_loss(logits, tau).item() == pytest.approx(tau ** 2, abs=1e-5)


def test_smoothing_matches_direct_formula(rng):
    logits = rng.normal(size=(3, 5)) * 3
    tau = 1.5
    z = logits - logits.max(axis=1, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    floored = np.maximum(lsm, np.log(1e-8))
    expected = np.minimum(np.abs(floored[1:] - floored[:-1]), tau) ** 2
    got = smoothing_loss(as_tensor(logits), tau).item()
    assert got == pytest.approx(expected.mean(), abs=1e-10)


def test_smoothing_single_frame_warns_and_returns_zero():
    with pytest.warns(UserWarning):
        loss = smoothing_loss(as_tensor(np.zeros((1, 3))), 4.0)
    assert loss.item() == 0.0


# --- total loss --------------------------------------------------------------------

def test_total_loss_single_stage_lambda_zero(rng):
    logits = as_tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    cfg = TrainConfig(smooth_lambda=0.0)
    got = total_loss(StageOutputs([logits]), labels, cfg).item()
    assert got == pytest.approx(cross_entropy_loss(logits, labels).item())


def test_total_loss_four_identical_stages(rng):
    logits = as_tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    cfg = TrainConfig()
    single = total_loss(StageOutputs([logits]), labels, cfg).item()
    quad = total_loss(StageOutputs([logits] * 4), labels, cfg).item()
    assert quad == pytest.approx(4 * single, rel=1e-6)


def test_total_loss_mixed_stages_componentwise(rng):
    stage_a = as_tensor(rng.normal(size=(6, 4)))
    stage_b = as_tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    cfg = TrainConfig(smooth_tau=2.0, smooth_lambda=0.3)
    expected = sum(
        cross_entropy_loss(s, labels).item() + 0.3 * smoothing_loss(s, 2.0).item()
        for s in (stage_a, stage_b))
    got = total_loss(StageOutputs([stage_a, stage_b]), labels, cfg).item()
    assert got == pytest.approx(expected, rel=1e-6)


# --- adam ---------------------------------------------------------------------------

def _lone_param(value):
    p = Parameter(np.asarray(value, dtype=np.float64), "p")
    state = AdamState(m={"p": np.zeros_like(p.data)}, v={"p": np.zeros_like(p.data)})
    return p, state


def test_adam_first_step_closed_form():
    p, state = _lone_param([0.0])
    p.grad = np.asarray([1.0])
    adam_step([p], state, lr=1e-4)
    assert p.data[0] == pytest.approx(-1e-4, abs=1e-8)
    assert state.step == 1
    assert p.grad is None


def test_adam_zero_gradient_no_change():
    p, state = _lone_param([1.5])
    p.grad = np.asarray([0.0])
    adam_step([p], state, lr=1e-2)
    assert p.data[0] == 1.5
    assert state.step == 1


def test_adam_constant_gradient_stable_steps():
    p, state = _lone_param([0.0])
    p.grad = np.asarray([2.0])
    adam_step([p], state, lr=1e-3)
    first = abs(p.data[0])
    before = p.data[0]
    p.grad = np.asarray([2.0])
    adam_step([p], state, lr=1e-3)
    second = abs(p.data[0] - before)
    assert second == pytest.approx(first, rel=0.01)


def test_adam_rejects_non_finite_gradient():
    p, state = _lone_param([0.0])
    p.grad = np.asarray([np.nan])
    with pytest.raises(NumericError, match="p"):
        adam_step([p], state, lr=1e-3)


# --- training loop ---------------------------------------------------------------------

def _toy_dataset(seed=0, videos=2, T=40):
    cfg = SynthConfig(num_classes=3, num_videos=videos, t_min=T, t_max=T,
                      feature_dim=6, noise_sigma=0.3, self_transition_prob=0.9,
                      skip_prob=0.0, seed=seed)
    train_set, test_set, _ = generate_synthetic(cfg)
    return train_set + test_set


def _toy_model(seed=0, causal=False):
    cfg = ModelConfig(input_dim=6, num_classes=3, kernels=(3, 5), layers_per_stage=2,
                      feature_maps=8, num_decoders=1, causal=causal, dropout=0.3)
    return build_model(cfg, seed=seed)


def test_train_lr_zero_leaves_parameters_untouched():
    model = _toy_model()
    before = {p.name: p.data.copy() for p in model.parameters()}
    train(model, _toy_dataset(), TrainConfig(epochs=2, learning_rate=0.0, seed=1))
    for p in model.parameters():
        assert np.array_equal(p.data, before[p.name]), p.name


def test_train_deterministic_checkpoints(tmp_path):
    paths = []
    for run in range(2):
        model = _toy_model(seed=7)
        state = AdamState.init(model)
        train(model, _toy_dataset(seed=3), TrainConfig(epochs=2, seed=11), state)
        path = tmp_path / f"run{run}.ckpt"
        save_checkpoint(model, state, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_overfit_history_and_monotone_loss():
    # 1-video overfit: dropout off so the loss trajectory is the pure Adam
    # descent; 200 epochs reach 100% frame accuracy with >= 90% of epoch
    # transitions non-increasing.
    cfg = ModelConfig(input_dim=6, num_classes=3, kernels=(3, 5), layers_per_stage=2,
                      feature_maps=8, num_decoders=1, causal=False, dropout=0.0)
    model = build_model(cfg, seed=2)
    dataset = _toy_dataset(seed=9, videos=1, T=60)
    history = train(model, dataset, TrainConfig(epochs=200, learning_rate=5e-4, seed=4))

    sample = dataset[0]
    accuracy = (predict(model, sample.features) == sample.labels).mean()
    assert accuracy == 1.0

    lines = history.to_text().strip().split("\n")
    assert len(lines) == 200
    parts = lines[0].split()
    assert parts[0] == "epoch" and parts[1] == "1" and parts[2] == "loss" and parts[4] == "acc"

    losses = [e.loss for e in history.epochs]
    drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a + 1e-12)
    assert drops >= 0.9 * (len(losses) - 1), "loss should be non-increasing for >=90% of transitions"


def test_train_aborts_on_non_finite_loss_with_identifiers():
    # features large enough to overflow float32 through the attention logits
    model = _toy_model(seed=3)
    sample = VideoSample(id="video_bad",
                         features=np.full((20, 6), 1e20, dtype=np.float32),
                         labels=np.zeros(20, dtype=np.int64))
    with np.errstate(over="ignore", invalid="ignore"), \
            pytest.raises(NumericError, match=r"epoch 1.*video_bad"):
        train(model, [sample], TrainConfig(epochs=1, seed=0))


def test_train_rejects_empty_and_mismatched_data():
    model = _toy_model()
    with pytest.raises(DataError):
        train(model, [], TrainConfig(epochs=1))
    bad = VideoSample(id="bad", features=np.zeros((10, 5), dtype=np.float32),
                      labels=np.zeros(10, dtype=np.int64))
    with pytest.raises(Exception):
        train(model, [bad], TrainConfig(epochs=1))


# --- checkpoints --------------------------------------------------------------------------

def _fresh(seed=0):
    model = _toy_model(seed=seed)
    return model, AdamState.init(model)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model, state = _fresh(seed=3)
    state.step = 17
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(model, state, first)
    loaded_model, loaded_state = load_checkpoint(first)
    save_checkpoint(loaded_model, loaded_state, second)
    assert first.read_bytes() == second.read_bytes()
    assert loaded_state.step == 17


def test_checkpoint_preserves_forward_exactly(tmp_path, rng):
    model, state = _fresh(seed=4)
    feats = rng.normal(size=(20, 6)).astype(np.float32)
    before = forward_full(model, feats).final().copy()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    loaded, _ = load_checkpoint(path)
    after = forward_full(loaded, feats).final()
    assert np.array_equal(before, after)


def test_checkpoint_config_round_trip(tmp_path):
    cfg = ModelConfig(input_dim=5, num_classes=4, kernels=(3, 5, 17), layers_per_stage=3,
                      feature_maps=16, num_decoders=2, causal=True, dropout=0.25, alpha_base=1.5)
    model = build_model(cfg, seed=9)
    path = tmp_path / "c.ckpt"
    save_checkpoint(model, AdamState.init(model), path)
    loaded, _ = load_checkpoint(path)
    assert loaded.cfg == cfg


def test_checkpoint_bad_magic_rejected(tmp_path):
    model, state = _fresh()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FileFormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version_rejected(tmp_path):
    model, state = _fresh()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    blob = bytearray(path.read_bytes())
    blob[8] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(FileFormatError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path):
    model, state = _fresh()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(FileFormatError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    model, state = _fresh()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FileFormatError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_shape_disagreement_rejected(tmp_path):
    model, state = _fresh()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    blob = bytearray(path.read_bytes())
    # feature_maps lives after magic(8) + version(4) + kernel count(4) + two kernels(8) + layers(4)
    offset = 8 + 4 + 4 + 8 + 4
    blob[offset:offset + 4] = (12).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FileFormatError):
        load_checkpoint(path)


# --- gradient check of total loss (invariant) ------------------------------------------------

def test_total_loss_gradient_matches_finite_differences(rng):
    from msast.numerics import finite_diff_check

    cfg = ModelConfig(input_dim=3, num_classes=3, kernels=(3,), layers_per_stage=2,
                      feature_maps=6, num_decoders=1, causal=True, dropout=0.0)
    model = build_model(cfg, seed=5, dtype=np.float64)
    feats = rng.normal(size=(10, 3))
    labels = rng.integers(0, 3, size=10)
    tc = TrainConfig()
    frozen = capture_smooth_prev(forward_full(model, feats, mode="train"))

    def f():
        return total_loss(forward_full(model, feats, mode="train"), labels, tc, frozen)

    assert finite_diff_check(f, model.parameters(), eps=1e-5) <= 1e-4
