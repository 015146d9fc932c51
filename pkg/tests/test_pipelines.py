import numpy as np
import pytest
import torch

from motioninfill.bench import SynthConfig, synth_pair
from motioninfill.cfm import LossWeights
from motioninfill.dit import DiTConfig, MotionDiT
from motioninfill.masking import MaskSamplerConfig, build_edit_timeline
from motioninfill.motion_core import EditSpec, MotionSequence, SpeechFeatureSequence, ValidationError
from motioninfill.pipelines import (
    TrainConfig,
    TrainingError,
    compute_losses,
    collate,
    ema_model,
    edit_motion,
    generate_motion,
    init_train_state,
    load_model,
    lr_at,
    save_train_state,
    train,
    train_step,
)
from motioninfill.sampler import SamplerConfig

TINY = DiTConfig.toy(speech_dim=8, n_layers=1, d_model=32, d_ffn=64)


def tiny_pairs(n=6, T=24):
    return [synth_pair(SynthConfig(seed=k, T=T, D=8)) for k in range(n)]


def train_cfg(**kw):
    base = dict(lr_peak=1e-3, warmup_steps=2, total_steps=20, batch_size=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule_knots_exact():
    cfg = TrainConfig(lr_peak=1e-4, warmup_steps=20_000, total_steps=1_000_000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(20_000, cfg) == 1e-4
    assert lr_at(1_000_000, cfg) == 0.0
    assert lr_at(10_000, cfg) == pytest.approx(5e-5, rel=1e-15)
    assert lr_at(510_000, cfg) == pytest.approx(5e-5, rel=1e-15)


def test_lr_schedule_piecewise_linear():
    cfg = TrainConfig(lr_peak=2.0, warmup_steps=10, total_steps=30)
    lrs = np.array([lr_at(s, cfg) for s in range(31)])
    np.testing.assert_allclose(np.diff(lrs[:11]), 0.2, atol=1e-12)
    np.testing.assert_allclose(np.diff(lrs[10:]), -0.1, atol=1e-12)
    assert lr_at(40, cfg) == 0.0


def test_lr_schedule_without_warmup():
    assert lr_at(0, TrainConfig(lr_peak=1.0, warmup_steps=0, total_steps=4)) == 1.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(ValueError):
        TrainConfig(lr_peak=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_weight_decay_only_on_matrices():
    state = init_train_state(TINY, train_cfg())
    decayed, plain = state.optimizer.param_groups
    assert decayed["weight_decay"] == 0.01 and plain["weight_decay"] == 0.0
    assert all(p.ndim >= 2 for p in decayed["params"])
    assert all(p.ndim < 2 for p in plain["params"])


def test_collate_pads_and_flags():
    pairs = [synth_pair(SynthConfig(seed=0, T=10, D=8)), synth_pair(SynthConfig(seed=1, T=14, D=8))]
    motion, speech, fv, sv = collate(pairs)
    assert motion.shape == (2, 14, 75) and speech.shape == (2, 28, 8)
    assert fv.sum(1).tolist() == [10, 14] and sv.sum(1).tolist() == [20, 28]
    assert torch.all(motion[0, 10:] == 0)


def test_fresh_model_loss_finite_and_positive():
    state = init_train_state(TINY, train_cfg())
    out = train_step(state, tiny_pairs(3), train_cfg(), np.random.default_rng(0))
    assert np.isfinite(out["loss"]) and out["loss"] > 0
    assert out["loss"] == pytest.approx(out["cfm"] + 0.2 * out["ts"])
    assert state.step == 1


def test_smoothness_term_sees_ground_truth_outside_mask():
    torch.manual_seed(0)
    model = MotionDiT(TINY).double()
    g = np.random.default_rng(1)
    x1, x0 = torch.tensor(g.standard_normal((2, 2, 10, 75)))
    speech = torch.tensor(g.standard_normal((2, 20, 8)))
    t = torch.tensor([0.2, 0.7], dtype=torch.float64)
    mask = torch.zeros(2, 10, dtype=torch.bool)
    mask[:, 3:6] = True
    valid, svalid = torch.ones(2, 10, dtype=torch.bool), torch.ones(2, 20, dtype=torch.bool)
    weights = LossWeights(0.2)
    _, _, ts = compute_losses(model, x1, speech, valid, svalid, t, x0, mask, weights)
    _, _, raw = compute_losses(model, x1, speech, valid, svalid, t, x0, mask, weights, ts_composite=False)
    xt = (1 - t[:, None, None]) * x0 + t[:, None, None] * x1
    # a fresh model predicts zero velocity, so x1_hat is xt inside the mask
    want = np.where(mask[..., None].numpy(), xt.numpy(), x1.numpy())
    want = np.abs(np.diff(want, axis=1)).sum(-1).mean()
    assert ts.item() == pytest.approx(want, rel=1e-12)
    assert raw.item() == pytest.approx(np.abs(np.diff(xt.numpy(), axis=1)).sum(-1).mean(), rel=1e-12)


def test_identical_seeds_identical_trajectories():
    pairs = tiny_pairs()
    _, h1 = train(pairs, TINY, train_cfg(), n_steps=6)
    _, h2 = train(pairs, TINY, train_cfg(), n_steps=6)
    _, h3 = train(pairs, TINY, train_cfg(seed=1), n_steps=6)
    assert h1 == h2
    assert h1 != h3


def test_training_updates_ema_and_parameters():
    state, _ = train(tiny_pairs(), TINY, train_cfg(ema_decay=0.5), n_steps=3)
    raw = state.model.state_dict()
    assert any(not torch.equal(raw[k], state.ema.shadow[k]) for k in raw)
    ema = ema_model(state)
    assert all(torch.equal(ema.state_dict()[k], state.ema.shadow[k]) for k in raw)


def test_mixed_lengths_are_bucketed():
    pairs = tiny_pairs(3, T=16) + tiny_pairs(3, T=24)
    state, hist = train(pairs, TINY, train_cfg(), n_steps=4)
    assert len(hist) == 4 and state.step == 4


def test_non_finite_loss_aborts():
    state = init_train_state(TINY, train_cfg())
    with torch.no_grad():
        state.model.head.bias.fill_(float("inf"))
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(state, tiny_pairs(3), train_cfg(), np.random.default_rng(0))


def test_train_rejects_empty_data():
    with pytest.raises(ValidationError):
        train([], TINY, train_cfg())


@pytest.fixture(scope="module")
def trained():
    state, _ = train(tiny_pairs(), TINY, train_cfg(mask_cfg=MaskSamplerConfig(0.2, 0.8)), n_steps=3)
    return ema_model(state)


def test_deletion_without_margin_excises_frames_without_model():
    speech, motion = tiny_pairs(1, T=30)[0]
    out = edit_motion(motion, speech, EditSpec("deletion", 10, 17, 0, 0), model=None)
    np.testing.assert_array_equal(out.data, np.concatenate([motion.data[:10], motion.data[17:]]))


@pytest.mark.parametrize("spec", [
    EditSpec("substitution", 5, 12, 9, 2),
    EditSpec("insertion", 8, 8, 6, 1),
    EditSpec("deletion", 4, 10, 0, 3),
])
def test_edit_preserves_unmasked_frames(trained, spec):
    speech, motion = tiny_pairs(1, T=30)[0]
    timeline = build_edit_timeline(motion.n_frames, spec)
    edited_speech = SpeechFeatureSequence(np.zeros((2 * timeline.new_total_frames, 8)), 50.0)
    out = edit_motion(motion, edited_speech, spec, trained)
    assert out.n_frames == timeline.new_total_frames
    src, dst = timeline.copy_map[:, 0], timeline.copy_map[:, 1]
    assert np.array_equal(out.data[dst], motion.data[src])


def test_edit_rejects_speech_width_mismatch(trained):
    speech, motion = tiny_pairs(1, T=20)[0]
    with pytest.raises(ValidationError):
        edit_motion(motion, SpeechFeatureSequence(np.zeros((40, 5)), 50.0),
                    EditSpec("substitution", 2, 6, 4), trained)


def test_generation_keeps_prefix_bitwise(trained):
    speech, motion = tiny_pairs(1, T=60)[0]
    prefix = MotionSequence(motion.data[:50], motion.fps)
    out = generate_motion(prefix, speech, 10, trained)
    assert out.n_frames == 60
    assert np.array_equal(out.data[:50], prefix.data)


def test_generation_from_scratch_length(trained):
    speech, _ = tiny_pairs(1, T=20)[0]
    out = generate_motion(None, speech, 20, trained)
    assert out.n_frames == 20 and np.isfinite(out.data).all()
    with pytest.raises(ValidationError):
        generate_motion(None, speech, 0, trained)


def test_full_substitution_matches_generation(trained):
    speech, motion = tiny_pairs(1, T=20)[0]
    cfg = SamplerConfig(n_steps=8, seed=4)
    edited = edit_motion(motion, speech, EditSpec("substitution", 0, 20, 20), trained, cfg)
    generated = generate_motion(None, speech, 20, trained, cfg)
    assert np.array_equal(edited.data, generated.data)


def test_checkpoint_round_trip_prefers_ema(tmp_path):
    state, _ = train(tiny_pairs(), TINY, train_cfg(ema_decay=0.5), n_steps=2)
    path = tmp_path / "state.mfz"
    save_train_state(state, path, train_cfg())
    ema = load_model(path)
    raw = load_model(path, use_ema=False)
    for k, v in state.ema.shadow.items():
        assert torch.equal(ema.state_dict()[k], v)
    for k, v in state.model.state_dict().items():
        assert torch.equal(raw.state_dict()[k], v)
