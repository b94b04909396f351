import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apvg.metrics import (
    KEYPOINT_GROUPS,
    PSNR_CAP,
    REFERENCE_NOTE,
    REFERENCE_SCORES,
    EvalReport,
    SequenceScores,
    mean_keypoint_distance,
    pca_trace,
    plot_traces,
    principal_trace,
    psnr,
    score_sequence,
    ssim,
    write_trace_csv,
)

images = arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1))


def test_psnr_constant_offset():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((2, 2)), np.full((2, 2), 1e-9)) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


@given(images, images)
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identity(rng):
    a = rng.random((32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_skimage(rng):
    from skimage.metrics import structural_similarity

    for shape in [(32, 32, 3), (40, 24, 3), (20, 20)]:
        a = rng.random(shape)
        b = np.clip(a + rng.normal(scale=0.2, size=shape), 0, 1)
        want = structural_similarity(
            a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
            channel_axis=-1 if len(shape) == 3 else None,
        )
        assert ssim(a, b) == pytest.approx(want, abs=1e-4)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


@given(images, images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 - 1e-9 <= s <= 1 + 1e-9


def test_ssim_drops_with_noise(rng):
    a = rng.random((32, 32, 3))
    small = ssim(a, np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1))
    large = ssim(a, np.clip(a + rng.normal(scale=0.3, size=a.shape), 0, 1))
    assert 1 > small > large


def test_keypoint_distance_uniform_offset(rng):
    real = rng.random((5, 67, 2))
    assert mean_keypoint_distance(real + np.array([0.1, 0.0]), real) == pytest.approx(math.sqrt(67 * 0.01))
    assert mean_keypoint_distance(real, real) == 0.0


def test_keypoint_distance_single_frame_and_errors():
    assert mean_keypoint_distance(np.zeros((2, 2)), np.array([[3.0, 4.0], [0, 0]])) == 5.0
    with pytest.raises(ValueError):
        mean_keypoint_distance(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)))


@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-2, 2)), arrays(np.float64, (3, 4, 2), elements=st.floats(-2, 2)))
def test_keypoint_distance_symmetric_nonnegative(a, b):
    d = mean_keypoint_distance(a, b)
    assert d >= 0 and d == mean_keypoint_distance(b, a)


# ---------------------------------------------------------------------------
# PCA trace
# ---------------------------------------------------------------------------


def test_groups_cover_all_points():
    covered = sorted(i for sl in KEYPOINT_GROUPS.values() for i in range(67)[sl])
    assert covered == list(range(67))


def test_constant_sequence_is_degenerate():
    traces = pca_trace(np.full((6, 67, 2), 0.4))
    assert set(traces) == {"body", "left_hand", "right_hand"}
    for tr in traces.values():
        assert tr.degenerate and not tr.values.any() and tr.variance == 0.0


def test_linear_motion_gives_affine_trace(rng):
    base = rng.random((67, 2))
    direction = rng.normal(size=(67, 2))
    t = np.linspace(0, 1, 9)
    kp = base + t[:, None, None] * direction
    for name, tr in pca_trace(kp).items():
        sl = KEYPOINT_GROUPS[name]
        norm = np.linalg.norm(direction[sl])
        assert not tr.degenerate
        # trace is +-(t - mean t) * |direction| restricted to the group
        np.testing.assert_allclose(np.abs(tr.values), np.abs(t - t.mean()) * norm, atol=1e-9)
        assert np.all(np.diff(tr.values) > 0) or np.all(np.diff(tr.values) < 0)


def test_variance_is_top_eigenvalue(rng):
    x = rng.normal(size=(20, 6))
    tr = principal_trace(x)
    cov = np.cov(x.T, bias=True)
    assert tr.variance == pytest.approx(np.linalg.eigvalsh(cov)[-1])
    assert np.var(tr.values) == pytest.approx(tr.variance)
    assert np.linalg.norm(tr.loading) == pytest.approx(1.0)


def test_sign_convention(rng):
    x = rng.normal(size=(12, 5))
    tr = principal_trace(x)
    lead = np.flatnonzero(np.abs(tr.loading) > 1e-9)[0]
    assert tr.loading[lead] > 0
    np.testing.assert_allclose(principal_trace(x * 1.0).values, tr.values)


@given(st.integers(0, 2**32 - 1), st.floats(0, 2 * math.pi))
def test_trace_invariant_to_rotation_up_to_sign(seed, angle):
    rng = np.random.default_rng(seed)
    kp = rng.normal(size=(8, 5, 2)) * np.array([1.0, 0.2])
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    a = pca_trace(kp)["all"]
    b = pca_trace(kp @ rot.T)["all"]
    np.testing.assert_allclose(np.abs(a.values), np.abs(b.values), atol=1e-8)


def test_pca_input_checks():
    with pytest.raises(ValueError):
        pca_trace(np.zeros((4, 67)))
    with pytest.raises(ValueError):
        principal_trace(np.zeros((1, 3)))


def test_trace_outputs(tmp_path, rng):
    kp = rng.random((6, 67, 2))
    traces = pca_trace(kp)
    write_trace_csv(traces, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "frame,body,left_hand,right_hand"
    assert len(lines) == 7
    assert float(lines[3].split(",")[1]) == traces["body"].values[2]
    plot_traces(traces, tmp_path / "t.png", reference=pca_trace(rng.random((6, 67, 2))))
    assert (tmp_path / "t.png").read_bytes()[:4] == b"\x89PNG"


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def test_score_sequence_identical(rng):
    frames = rng.random((3, 16, 16, 3))
    kp = rng.random((3, 67, 2))
    s = score_sequence("x", frames, frames, kp, kp)
    assert (s.frames, s.psnr, s.ssim, s.keypoint_distance) == (3, PSNR_CAP, pytest.approx(1.0), 0.0)
    assert score_sequence("x", frames, frames).keypoint_distance is None
    with pytest.raises(ValueError):
        score_sequence("x", frames, frames[:2])


def test_report_round_trip(tmp_path):
    import json

    rep = EvalReport(
        [SequenceScores("a", 3, 20.0, 0.5, 0.1), SequenceScores("b", 4, 30.0, 0.7, None)],
        {"reference_scores": REFERENCE_SCORES, "reference_note": REFERENCE_NOTE},
    )
    assert rep.mean == {"psnr": 25.0, "ssim": pytest.approx(0.6), "keypoint_distance": 0.1}
    rep.write_json(tmp_path / "r.json")
    back = EvalReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back == rep


def test_reference_scores_are_recorded():
    assert REFERENCE_SCORES["cello"] == {"psnr": 17.073, "ssim": 0.563, "keypoint_distance": 0.117}
    assert REFERENCE_SCORES["trombone"] == {"psnr": 15.910, "ssim": 0.397, "keypoint_distance": 0.392}
    assert "not reproducible" in REFERENCE_NOTE
