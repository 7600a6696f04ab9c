import numpy as np
import pytest
import torch

from metastab.core import AdaptationConfig, RigidAffine
from metastab.data import JitterSpec, synthetic_suite
from metastab.flow import RigidFlowProvider, oracle_flow
from metastab.jerk import (CropSpec, clip_starts, crop_windows, jerk_profile, patch_origins,
                           placement_for_step, select_peaks, targeted_adapt, video_jerk)
from metastab.losses import RandomFeatureExtractor
from metastab.stabilizer import ToyStabilizer, sliding_stabilize

from oracles import jerk_bruteforce, peaks_bruteforce

FLOW = RigidFlowProvider()
FX = RandomFeatureExtractor()


def test_constant_trajectory_has_zero_jerk():
    traj = np.tile([0.01, 2.0, -1.0], (10, 1))
    prof = jerk_profile(traj, diag=50.0)
    assert np.all(prof.deltas == 0)
    assert prof.low_signal


def test_linear_pan_has_unit_jerk_in_raw_units():
    traj = np.zeros((8, 3))
    traj[:, 1] = np.arange(8)
    prof = jerk_profile(traj, raw_units=True)
    assert np.allclose(prof.deltas, 1.0)
    # normalized by the diagonal the pan becomes 1/diag
    assert np.allclose(jerk_profile(traj, diag=4.0).deltas, 0.25)


def test_jerk_matches_bruteforce(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 20))
        traj = rng.normal(size=(n, 3))
        diag = float(rng.uniform(10, 200))
        got = jerk_profile(traj, diag=diag).deltas
        assert np.array_equal(got, jerk_bruteforce(traj.tolist(), diag))


def test_jerk_accepts_affine_sequence():
    traj = [RigidAffine(0.1 * i, i, 0.0) for i in range(4)]
    prof = jerk_profile(traj, raw_units=True)
    assert np.allclose(prof.deltas, np.sqrt(0.01 + 1))
    with pytest.raises(ValueError):
        jerk_profile(np.zeros((1, 3)))


def test_select_peaks_examples():
    assert select_peaks([0, 5, 0, 0, 0, 7, 0], p=2, k=1) == [5, 1]
    assert select_peaks([9, 8, 7], p=3, k=1) == [0]
    prof = jerk_profile(np.zeros((12, 3)))
    assert select_peaks(prof, p=3, k=1) == [0, 3, 6]
    assert prof.low_signal and prof.peaks == [0, 3, 6]
    with pytest.raises(ValueError):
        select_peaks([1, 2], p=-1, k=1)


def test_select_peaks_matches_bruteforce(rng):
    for _ in range(300):
        n = int(rng.integers(1, 40))
        # coarse values make ties common
        deltas = rng.integers(0, 5, size=n).astype(float)
        p, k = int(rng.integers(0, 8)), int(rng.integers(0, 4))
        got = select_peaks(deltas, p, k)
        assert got == peaks_bruteforce(deltas, p, k)
        assert all(abs(a - b) >= 2 * k + 1 for i, a in enumerate(got) for b in got[i + 1:])


def test_select_peaks_scale_invariant(rng):
    deltas = rng.random(50)
    for c in (1e-3, 1.0, 1e4):
        assert select_peaks(deltas * c, 6, 2) == select_peaks(deltas, 6, 2)


def test_clip_starts_shift_and_clamp():
    assert clip_starts([0, 4, 18], n_frames=20, q=5) == [1, 5, 15]
    assert clip_starts([0, 4, 18], n_frames=20, q=5, centered=True) == [0, 3, 15]
    with pytest.raises(ValueError):
        clip_starts([0], n_frames=3, q=5)


def test_patch_origins_diagonals():
    spec = CropSpec(16, 16)
    assert patch_origins(64, 64, spec) == [(0, 0), (24, 24), (48, 48)]
    assert patch_origins(64, 64, spec.with_placement("diag_anti")) == [(0, 48), (24, 24), (48, 0)]
    assert patch_origins(30, 64, spec) == [(0, 0)]
    assert CropSpec.default_for(64, 100) == CropSpec(16, 25)
    assert CropSpec.default_for(40, 40) == CropSpec(16, 16)
    with pytest.raises(ValueError):
        CropSpec(8, 8, "middle")


def test_crop_windows_alternate_and_fallback():
    win = torch.arange(64 * 64, dtype=torch.float64).reshape(1, 1, 64, 64)
    assert placement_for_step(0) == "diag_main" and placement_for_step(1) == "diag_anti"
    p0, _ = crop_windows(win, CropSpec(16, 16), step=0)
    p1, _ = crop_windows(win, CropSpec(16, 16), step=1)
    assert [p.shape[-2:] for p in p0] == [(16, 16)] * 3
    assert p0[0][..., 0, 0].item() == 0 and p1[0][..., 0, 0].item() == 48
    full, m = crop_windows(win[..., :24, :24], CropSpec(16, 16), masks=torch.ones(1, 1, 24, 24))
    assert len(full) == 1 and full[0].shape[-2:] == (24, 24) and m[0].shape[-2:] == (24, 24)


def test_rotation_flow_is_larger_at_corners_than_centre():
    # under camera rotation the corner patches see more motion, which is why they are sampled
    field = oracle_flow(RigidAffine(0.05, 0.0, 0.0), 64, 64)
    mag = np.linalg.norm(np.asarray(field.vectors), axis=-1)
    centre, corner = mag[24:40, 24:40].mean(), mag[:16, :16].mean()
    assert corner > 2 * centre


def test_video_jerk_finds_injected_kick():
    video = synthetic_suite(1, n_frames=16, size=48, seed=0, spec=JitterSpec(rot_deg=0.0, trans_px=0.0, bands=(1, 8)))[0]
    frames = np.asarray(video.unstable.frames).copy()
    frames[9:] = np.roll(frames[9:], 3, axis=2)
    prof = video_jerk(frames, FLOW)
    assert len(prof) == len(frames) - 2
    top = select_peaks(prof, 1, 1)[0]
    assert top in (7, 8)


def _clip(n=20, size=48):
    return synthetic_suite(1, n_frames=n, size=size, seed=2, spec=JitterSpec(bands=(1, n // 2)))[0].unstable.frames


def test_targeted_p_zero_is_baseline():
    video = _clip()
    m = ToyStabilizer(seed=1)
    with torch.no_grad():
        m.conv3.weight.normal_(0, 0.01, generator=torch.Generator().manual_seed(0))
    res = targeted_adapt(m, video, AdaptationConfig(strategy="targeted", p=0, M=3), FLOW, FX)
    assert res.steps == 0 and res.touched_frames == set()
    assert np.array_equal(res.video, sliding_stabilize(m, video, dtype=None))


def test_targeted_steps_and_touched_frames():
    video = _clip(n=30)
    cfg = AdaptationConfig(strategy="targeted", p=2, M=2, alpha=1e-5)
    res = targeted_adapt(ToyStabilizer(seed=1), video, cfg, FLOW, FX)
    assert res.steps == cfg.p * cfg.M == cfg.gradient_steps()
    assert res.label == "TargetedAdapt^(2)_2"
    allowed = set()
    for s in res.clip_starts:
        allowed |= set(range(s, s + cfg.q))
    assert res.touched_frames and res.touched_frames <= allowed
    assert res.video.shape == np.asarray(video).shape
