import math

import numpy as np
import pytest

from metastab.core import RigidAffine, compose, invert, trajectory_to_array
from metastab.data import JitterSpec, synthetic_suite, texture_corpus
from metastab.flow import RigidFlowProvider
from metastab.metrics import (Detection, FeatureHomographyFit, KnownHomographyFit, accumulate, average_persistence,
                              box_iou, cropping_ratio, distortion_score, evaluate, greedy_matches, pair_motions,
                              stability_from_signal, stability_from_trajectory, stability_score, temporal_iou)

from oracles import stability_direct_dft

FLOW = RigidFlowProvider()


def tone(n, freq, phase=0.3):
    t = np.arange(n)
    return np.cos(2 * np.pi * freq * t / n + phase)


def test_low_band_signal_scores_one():
    # 1-based bins 2..6 are frequencies 1..5 cycles per clip
    for f in range(1, 6):
        assert stability_from_signal(tone(64, f)) >= 0.99


def test_high_band_signal_scores_zero():
    for f in range(14, 33):
        assert stability_from_signal(tone(64, f)) <= 0.05


def test_stability_matches_direct_dft(rng):
    for _ in range(50):
        n = int(rng.integers(8, 80))
        x = rng.normal(size=n) + rng.normal() * np.arange(n) / n
        assert abs(stability_from_signal(x) - stability_direct_dft(x)) <= 1e-9


def test_stability_degenerate_and_invalid():
    assert stability_from_signal(np.full(20, 3.0)) == 1.0
    with pytest.raises(ValueError):
        stability_from_signal([1.0])
    path = np.stack([tone(64, 2), tone(64, 20), np.zeros(64)], axis=1)
    assert stability_from_trajectory(path) == pytest.approx((1.0 + 0.0 + 1.0) / 3, abs=1e-9)


def test_accumulate_composes_rigid_motions():
    m = np.array([[0.0, 1, 2], [0.0, 1, -1]])
    assert np.allclose(accumulate(m), [[0, 0, 0], [0, 1, 2], [0, 2, 1]])
    # a quarter turn rotates the earlier translation as well
    path = accumulate(np.array([[0.0, 1.0, 0.0], [np.pi / 2, 0.0, 0.0]]))
    assert np.allclose(path[-1], [np.pi / 2, 0.0, 1.0])
    # angles keep growing instead of wrapping at pi
    spin = accumulate(np.tile([1.0, 0.0, 0.0], (8, 1)))
    assert np.allclose(spin[:, 0], np.arange(9.0))


def test_accumulate_recovers_recorded_trajectory():
    entry = synthetic_suite(1, n_frames=24, size=48, seed=1, pan_px=0.0, rot_deg=0.0,
                            spec=JitterSpec(bands=(1, 12)))[0]
    true = trajectory_to_array(entry.trajectory)
    true = trajectory_to_array([compose(RigidAffine(*p), invert(RigidAffine(*true[0]))) for p in true])
    est = accumulate(pair_motions(entry.unstable.frames, FLOW))
    assert np.abs(est - true).max(axis=0)[0] < 0.01
    assert np.abs(est - true).max(axis=0)[1:].max() < 0.3


def test_pair_motions_recover_synthetic_shake():
    entry = synthetic_suite(1, n_frames=10, size=48, seed=3, spec=JitterSpec(bands=(1, 5)))[0]
    motions = pair_motions(entry.unstable.frames, FLOW)
    assert motions.shape == (9, 3)
    assert np.all(np.isfinite(motions))


def test_stability_orders_stable_above_shaky():
    entry = synthetic_suite(1, n_frames=48, size=48, seed=0, spec=JitterSpec(bands=(12, 16)))[0]
    shaky = stability_score(entry.unstable.frames, flow=FLOW)
    stable = stability_score(entry.stable.frames, flow=FLOW)
    assert shaky + 0.3 < stable and stable >= 0.95


def _static_video(n=4, size=96):
    img = texture_corpus(1, size=size, seed=0)[0]
    return np.repeat(img[None], n, axis=0)


def test_identity_pair_has_unit_cropping_and_distortion():
    video = _static_video()
    hfit = FeatureHomographyFit(min_inliers=10)
    assert cropping_ratio(video, video, hfit) == pytest.approx(1.0, abs=1e-6)
    assert distortion_score(video, video, hfit) == pytest.approx(1.0, abs=1e-6)
    assert cropping_ratio(video, video, KnownHomographyFit()) == 1.0


def test_anisotropic_warp_distortion_is_half():
    video = _static_video(2, 32)
    H = np.diag([2.0, 1.0, 1.0])
    assert distortion_score(video, video, KnownHomographyFit([H])) == pytest.approx(0.5)
    assert cropping_ratio(video, video, KnownHomographyFit([H])) == pytest.approx(math.sqrt(2))


def test_feature_fit_recovers_zoom():
    import cv2

    img = texture_corpus(1, size=128, seed=1)[0]
    H = np.array([[1.1, 0, -6.4], [0, 1.1, -6.4], [0, 0, 1]])
    warped = cv2.warpPerspective(img.astype(np.float32), H, (128, 128), flags=cv2.INTER_CUBIC)
    fit, ratio = FeatureHomographyFit(min_inliers=10).fit(img, warped)
    assert fit is not None and ratio > 0.5
    assert np.allclose(fit[:2, :2], H[:2, :2], atol=0.01)
    assert np.allclose(fit[:2, 2], H[:2, 2], atol=0.25)


def test_failed_fits_are_skipped():
    video = _static_video(3, 32)
    blank = np.zeros_like(video)
    value, per, skipped = cropping_ratio(video, blank, FeatureHomographyFit(), return_detail=True)
    assert skipped == [0, 1, 2] and per == [] and math.isnan(value)
    with pytest.raises(ValueError, match="frames"):
        cropping_ratio(video, video[:2], KnownHomographyFit())


def _tracks(n, boxes, drift=0.0):
    return [Detection(t, lab, (x + drift * t, y, x + drift * t + 10, y + 10))
            for t in range(n) for lab, (x, y) in boxes]


def test_static_tracks_identities():
    dets = _tracks(12, [("car", (0, 0)), ("person", (30, 30))])
    assert average_persistence(dets, 12) == 12.0
    assert temporal_iou(dets, 12) == 1.0


def test_persistence_stops_at_gap_and_label_change():
    dets = _tracks(10, [("car", (0, 0))])
    dets = [d for d in dets if d.t != 4] + [Detection(4, "tree", (0, 0, 10, 10))]
    assert average_persistence(dets, 10) == 4.0
    assert average_persistence([Detection(1, "car", (0, 0, 1, 1))], 3) == 0.0


def test_temporal_iou_of_drifting_box():
    dets = _tracks(5, [("car", (0, 0))], drift=5.0)
    # a 10px box moved by 5px overlaps 50 of 150
    assert temporal_iou(dets, 5) == pytest.approx(50 / 150)
    assert temporal_iou(dets[:1], 5) == 0.0
    with pytest.raises(ValueError):
        temporal_iou(dets, 1)


def test_greedy_matching_is_one_to_one():
    a = [Detection(0, "x", (0, 0, 10, 10)), Detection(0, "x", (1, 0, 11, 10))]
    b = [Detection(1, "x", (1, 0, 11, 10))]
    m = greedy_matches(a, b, 0.1)
    assert m == [(1, 0, 1.0)]


def test_detection_validation_and_roundtrip():
    d = Detection(3, "car", (-5, 2, 50, 40), 0.9)
    assert Detection.from_dict(d.as_dict()) == d
    assert d.clamped(32, 32).bbox == (0.0, 2.0, 32.0, 32.0)
    assert box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    with pytest.raises(ValueError):
        Detection(0, "car", (5, 5, 5, 9))
    with pytest.raises(ValueError):
        Detection(0, "car", (0, 0, 1, 1), score=1.5)


def test_evaluate_report():
    video = _static_video(8, 64)
    dets = _tracks(8, [("car", (0, 0))])
    rep = evaluate(video, video, hfit=KnownHomographyFit(), detections=dets, flow=FLOW)
    assert rep.stability == 1.0 and rep.cropping == 1.0 and rep.distortion == 1.0
    assert rep.avg_persistence == 8.0 and rep.avg_temporal_iou == 1.0
    assert set(rep.as_dict()) >= {"stability", "cropping", "distortion", "avg_persistence", "avg_temporal_iou"}
    with pytest.raises(ValueError, match="unknown"):
        evaluate(video, video, metrics=("sharpness",))
    with pytest.raises(ValueError, match="detections"):
        evaluate(video, video, metrics=("persistence",))
