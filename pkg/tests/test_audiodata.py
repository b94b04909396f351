import json

import librosa
import numpy as np
import pytest
from PIL import Image
from scipy.io import wavfile

from apvg.audiodata import (
    LOG_FLOOR,
    AudioClip,
    DatasetError,
    InsufficientAudioError,
    PairedSequence,
    ToyDatasetSpec,
    extract_cqt,
    fit_audio_stats,
    generate_toy_dataset,
    load_real_dataset,
    mean_frame,
    read_frame,
    toy_keypoints,
    write_dataset,
)
from apvg.core import ConfigError, PipelineConfig

CLIP_SAMPLES = 87 * 256


def test_half_second_gives_one_clip():
    n = int(44100 * 0.506)
    assert CLIP_SAMPLES <= n < 2 * CLIP_SAMPLES
    clips = extract_cqt(np.random.default_rng(0).normal(size=n).astype(np.float32))
    assert clips.shape == (1, 84, 87)
    AudioClip(clips[0])


def test_too_short_audio_rejected():
    with pytest.raises(InsufficientAudioError, match="insufficient audio"):
        extract_cqt(np.zeros(CLIP_SAMPLES - 1, dtype=np.float32))


def test_silence_gives_uniform_floor():
    clip = extract_cqt(np.zeros(CLIP_SAMPLES, dtype=np.float32))[0]
    assert np.all(clip == clip[0, 0])
    assert clip[0, 0] == pytest.approx(np.log(LOG_FLOOR))


def test_clip_count_and_contiguity():
    rng = np.random.default_rng(1)
    y = rng.normal(size=3 * CLIP_SAMPLES + 5000).astype(np.float32)
    clips = extract_cqt(y)
    assert len(clips) == (len(y) // 256) // 87
    full = np.log(np.abs(librosa.cqt(y, sr=44100, hop_length=256, n_bins=84)) + LOG_FLOOR)
    joined = np.concatenate(list(clips), axis=1)
    np.testing.assert_allclose(joined, full[:, : joined.shape[1]], rtol=1e-5, atol=1e-5)


def test_ten_seconds_gives_nineteen_clips():
    assert len(extract_cqt(np.zeros(441000, dtype=np.float32))) == 19


def test_audio_clip_shape_checked():
    with pytest.raises(ValueError):
        AudioClip(np.zeros((84, 86)))
    with pytest.raises(ValueError):
        AudioClip(np.full((84, 87), np.inf))


def test_paired_sequence_alignment():
    with pytest.raises(DatasetError):
        PairedSequence("x", "cello", np.zeros((3, 84, 87)), np.zeros((2, 8, 8, 3)), np.zeros((2, 67, 2)))
    with pytest.raises(DatasetError):
        PairedSequence("x", "cello", np.zeros((1, 84, 87)), np.zeros((1, 8, 8, 3)), np.zeros((1, 67, 2)))


def test_toy_spec_validation():
    with pytest.raises(ConfigError):
        ToyDatasetSpec(sequences=0)
    with pytest.raises(ConfigError):
        ToyDatasetSpec(pitch_low=50, pitch_high=50)


def test_toy_shape_contract(small_config, small_dataset):
    assert len(small_dataset) == small_config.toy_sequences
    for seq in small_dataset:
        assert seq.frames.shape == (small_config.toy_frames, 64, 64, 3)
        assert seq.clips.shape == (small_config.toy_frames, 84, 87)
        assert seq.keypoints.shape == (small_config.toy_frames, 67, 2)
        assert seq.frames.dtype == np.float32
        assert seq.frames.min() >= 0 and seq.frames.max() <= 1


def test_default_toy_scale():
    spec = ToyDatasetSpec.from_config(PipelineConfig())
    assert (spec.sequences, spec.frames, spec.image_size) == (8, 32, 256)


def test_toy_determinism(small_config, small_dataset):
    again = generate_toy_dataset(ToyDatasetSpec.from_config(small_config))
    for a, b in zip(small_dataset, again):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.clips.tobytes() == b.clips.tobytes()
        assert a.keypoints.tobytes() == b.keypoints.tobytes()
        assert a.waveform.tobytes() == b.waveform.tobytes()


def test_constant_pitch_gives_constant_pose():
    seq = generate_toy_dataset(ToyDatasetSpec(sequences=1, frames=3, pitch_low=50, pitch_high=51, image_size=32, seed=3))[0]
    for t in range(len(seq)):
        if seq.pitch[t] == seq.pitch[0]:
            np.testing.assert_array_equal(seq.keypoints[t], seq.keypoints[0])


def test_equal_pitch_means_identical_frames(small_dataset):
    seen = {}
    for seq in small_dataset:
        for t, p in enumerate(seq.pitch):
            if int(p) in seen:
                kp, fr = seen[int(p)]
                assert np.array_equal(kp, seq.keypoints[t]) and np.array_equal(fr, seq.frames[t])
            else:
                seen[int(p)] = (seq.keypoints[t], seq.frames[t])


def test_pose_varies_with_pitch():
    assert not np.allclose(toy_keypoints(0.0), toy_keypoints(1.0))
    assert np.all((toy_keypoints(0.0) > 0) & (toy_keypoints(1.0) < 1))


def test_audio_stats_standardize(small_dataset):
    stats = fit_audio_stats(small_dataset)
    z = np.concatenate([stats.apply(s.clips).ravel() for s in small_dataset])
    assert abs(z.mean()) < 1e-4 and abs(z.std() - 1) < 1e-4


def test_mean_frame(small_dataset):
    expected = np.concatenate([s.frames for s in small_dataset]).mean(axis=0)
    np.testing.assert_allclose(mean_frame(small_dataset, "cello"), expected, rtol=1e-6)
    with pytest.raises(DatasetError):
        mean_frame(small_dataset, "trombone")


# ---------------------------------------------------------------------------
# disk layout and the loader
# ---------------------------------------------------------------------------


@pytest.fixture
def written(tmp_path, small_config, small_dataset):
    write_dataset(small_dataset, tmp_path / "data")
    return tmp_path / "data"


def test_disk_round_trip_is_exact(written, small_config, small_dataset):
    loaded = load_real_dataset(written, small_config)
    assert loaded.skipped == 0 and not loaded.rejected
    for a, b in zip(small_dataset, loaded.sequences):
        assert a.name == b.name
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.keypoints, b.keypoints)
        np.testing.assert_array_equal(a.clips, b.clips)


def test_missing_keypoint_file_skips_sequence(written, small_config):
    (written / "seq_000" / "keypoints" / "000002.json").unlink()
    loaded = load_real_dataset(written, small_config)
    assert loaded.skipped == 1
    assert [s.name for s in loaded.sequences] == ["seq_001"]


def test_wrong_keypoint_count_rejected_with_counts(written, small_config):
    path = written / "seq_001" / "keypoints" / "000000.json"
    path.write_text(json.dumps(json.loads(path.read_text())[:66]))
    loaded = load_real_dataset(written, small_config)
    reason = loaded.rejected["seq_001"]
    assert "66" in reason and "67" in reason


def test_misaligned_audio_rejected(written, small_config):
    sr, audio = wavfile.read(written / "seq_000" / "audio.wav")
    wavfile.write(written / "seq_000" / "audio.wav", sr, audio[: 2 * CLIP_SAMPLES])
    loaded = load_real_dataset(written, small_config)
    assert "misaligned" in loaded.rejected["seq_000"]


def test_unreadable_image_names_path(written, small_config):
    bad = written / "seq_000" / "frames" / "000001.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="000001.png"):
        load_real_dataset(written, small_config)


def test_missing_root():
    with pytest.raises(DatasetError):
        load_real_dataset("/nonexistent/root")


def test_wide_frame_center_cropped(tmp_path):
    img = np.zeros((720, 1280, 3), dtype=np.uint8)
    img[:, :280] = [255, 0, 0]
    img[:, 280:1000] = [0, 255, 0]
    img[:, 1000:] = [0, 0, 255]
    Image.fromarray(img).save(tmp_path / "f.png")
    out = read_frame(tmp_path / "f.png", 256)
    assert out.shape == (256, 256, 3)
    np.testing.assert_allclose(out, np.broadcast_to([0.0, 1.0, 0.0], out.shape))


def test_one_folder_thirty_two_frames(tmp_path):
    seq = generate_toy_dataset(ToyDatasetSpec(sequences=1, frames=32, image_size=32, seed=5))
    write_dataset(seq, tmp_path / "d")
    loaded = load_real_dataset(tmp_path / "d", PipelineConfig(image_size=32))
    assert len(loaded.sequences) == 1 and len(loaded.sequences[0]) == 32
