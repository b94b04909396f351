import numpy as np
import pytest
import torch

from apvg.cvg import (
    build_cvg,
    cvg_loss,
    cvg_rollout,
    cvg_step,
    encode_audio_sequence,
    load_cvg,
    noise_sequence,
    train_cvg,
)
from apvg.training import MissingCheckpointError

from .oracles import mean_abs


def test_loss_examples():
    z = torch.zeros(2, 4, 4, 3)
    assert cvg_loss(z, z).item() == 0.0
    assert cvg_loss(z, torch.ones_like(z)).item() == 1.0
    with pytest.raises(ValueError):
        cvg_loss(z, torch.zeros(3, 4, 4, 3))


def test_loss_matches_elementwise_oracle(rng):
    for _ in range(5):
        a, b = rng.random((2, 3, 5, 6, 3))
        assert cvg_loss(torch.as_tensor(a), torch.as_tensor(b)).item() == pytest.approx(mean_abs(a, b), abs=1e-12)
        assert cvg_loss(torch.as_tensor(a), torch.as_tensor(b)).item() == cvg_loss(torch.as_tensor(b), torch.as_tensor(a)).item()


@pytest.fixture(scope="module")
def model(small_config, small_dataset):
    return build_cvg(small_config, small_dataset)


def test_backbone_is_frozen(model):
    assert all(not p.requires_grad for p in model.backbone.parameters())
    model.train()
    assert not model.backbone.training
    model.eval()


def test_audio_features_shape_and_context(model, small_config, small_dataset):
    clips = small_dataset[0].clips
    feats = encode_audio_sequence(model, clips)
    assert feats.shape == (len(clips), small_config.audio_dim)
    np.testing.assert_array_equal(feats, encode_audio_sequence(model, clips.copy()))
    changed = clips.copy()
    changed[1] += 1.0
    other = encode_audio_sequence(model, changed)
    assert not np.allclose(other[2], feats[2])
    np.testing.assert_array_equal(other[0], feats[0])


def test_step_contract(model, small_config, small_dataset, rng):
    feat = encode_audio_sequence(model, small_dataset[0].clips)[0]
    prev = small_dataset[0].frames[0]
    z = rng.normal(size=small_config.noise_dim)
    out = cvg_step(model, feat, prev, z)
    assert out.shape == (64, 64, 3)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, cvg_step(model, feat, prev, z))
    assert not np.array_equal(out, cvg_step(model, feat, prev, z + 1.0))


def test_rollout_length_and_prefix(model, small_config, small_dataset):
    clips = small_dataset[0].clips
    z = noise_sequence(small_config, len(clips))
    full = cvg_rollout(model, clips, z=z)
    assert full.shape == (len(clips), 64, 64, 3)
    prefix = cvg_rollout(model, clips[:3], z=z[:3])
    np.testing.assert_array_equal(prefix, full[:3])


def test_noise_policy(small_config):
    per_frame = noise_sequence(small_config, 4)
    assert not torch.equal(per_frame[0], per_frame[1])
    fixed = noise_sequence(small_config.replace(noise_per_frame=False), 4)
    assert torch.equal(fixed[0], fixed[3])
    assert torch.equal(noise_sequence(small_config, 4), per_frame)


def test_training_and_reload(tmp_path, small_config, small_dataset):
    result = train_cvg(small_dataset, small_config, tmp_path)
    assert len(result.curve.series("l1")) == small_config.cvg_steps
    state = torch.load(tmp_path / "cvg.pt", weights_only=False)["state"]
    assert not any(k.startswith("backbone.") for k in state)
    reloaded = load_cvg(tmp_path, small_config)
    clips = small_dataset[0].clips
    np.testing.assert_array_equal(
        cvg_rollout(reloaded, clips, config=small_config), cvg_rollout(result.model, clips, config=small_config)
    )


def test_missing_checkpoint(tmp_path, small_config):
    with pytest.raises(MissingCheckpointError):
        load_cvg(tmp_path, small_config)


def test_fixed_seed_reproduces_curve(small_config, small_dataset):
    a = train_cvg(small_dataset, small_config, steps=2).curve.rows
    b = train_cvg(small_dataset, small_config, steps=2).curve.rows
    assert a == b
