import warnings

import numpy as np
import pytest
import torch

from metastab.core import RigidAffine
from metastab.flow import RigidFlowProvider, affine_flow, warp
from metastab.losses import (RandomFeatureExtractor, contextual_similarity, gram, inner_quality, inner_stability,
                             inner_total, outer_quality, outer_stability, outer_total, photometric_reconstruction,
                             weighted_total)
from metastab.validation import video_to_tensor


class FixedMotionFlow:
    """Flow stub: every pair moves by the same known rigid motion."""

    def __init__(self, params):
        self.params = torch.as_tensor(params, dtype=torch.float64)

    def flow_tensor(self, a, b, mask_a=None, mask_b=None):
        return affine_flow(self.params.expand(a.shape[0], 3), a.shape[-2], a.shape[-1])


@pytest.fixture(scope="module")
def fx():
    return RandomFeatureExtractor()


@pytest.fixture
def clip(smooth):
    return video_to_tensor(np.stack([smooth(24, 24, seed=s) for s in range(3)]), dtype=torch.float64)


def test_inner_stability_identical_is_zero(clip):
    assert inner_stability(clip, clip, RigidFlowProvider()).item() == 0.0


def test_inner_stability_constant_shift(clip):
    # |u| + |v| of a (3, 0) field is 3 at every pixel, summed over 3 frames
    assert inner_stability(clip, clip, FixedMotionFlow([0, 3, 0])).item() == pytest.approx(9.0)
    assert inner_stability(clip[:1], clip[:1], FixedMotionFlow([0, 3, 0])).item() == pytest.approx(3.0)


def test_inner_stability_measured_shift(smooth):
    img = smooth(32, 32)
    shifted, valid = warp(img, RigidAffine.translation(3, 0))
    v = inner_stability(img[None], shifted[None], RigidFlowProvider(), aligned_masks=valid[None])
    assert v.item() == pytest.approx(3.0, abs=0.1)


def test_inner_stability_length_mismatch(clip):
    with pytest.raises(ValueError):
        inner_stability(clip, clip[:2], RigidFlowProvider())


def test_gram_examples():
    assert torch.all(gram(torch.zeros(4, 3, 3)) == 0)
    f = torch.zeros(4, 3, 3)
    f[2] = 1.0
    g = gram(f)
    expected = torch.zeros(4, 4)
    expected[2, 2] = 9 / (4 * 9)  # sum of squares / (C*H*W) = 1/C
    torch.testing.assert_close(g, expected)
    r = torch.randn(5, 6, 7, generator=torch.Generator().manual_seed(0))
    g = gram(r)
    torch.testing.assert_close(g, g.T)
    assert torch.linalg.eigvalsh(g).min() >= -1e-6


def test_contextual_similarity_properties():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(8, 6, 6, generator=gen)
    assert contextual_similarity(x, x).item() >= 1 - 1e-6
    perm = torch.randperm(36, generator=gen)
    xp = x.reshape(8, -1)[:, perm].reshape(8, 6, 6)
    assert contextual_similarity(xp, x).item() >= 1 - 1e-6
    for _ in range(100):
        a = torch.randn(8, 6, 6, generator=gen)
        b = torch.randn(8, 6, 6, generator=gen)
        assert contextual_similarity(a, b) < contextual_similarity(a, a)
    with pytest.raises(ValueError):
        contextual_similarity(x, torch.randn(4, 6, 6))
    with pytest.raises(ValueError):
        contextual_similarity(torch.zeros(8, 0, 0), x)


def test_inner_quality(clip, fx):
    assert inner_quality(clip, clip, fx).item() == pytest.approx(0.0, abs=1e-6)
    blurred = torch.nn.functional.avg_pool2d(clip, 5, stride=1, padding=2, count_include_pad=False)
    assert inner_quality(blurred, clip, fx).item() > 0
    assert inner_quality(blurred, clip, fx).item() == inner_quality(blurred, clip, RandomFeatureExtractor()).item()


def test_inner_total_arithmetic_and_linearity(clip, fx):
    b = weighted_total({"stability": 2.0, "quality": 0.5}, {"stability": 10.0, "quality": 1.0})
    assert b.total.item() == pytest.approx(20.5)
    blurred = clip.roll(1, dims=-1)
    flow = FixedMotionFlow([0, 1, 0])
    b1 = inner_total(blurred, clip, flow, fx, 10, 1)
    b2 = inner_total(blurred, clip, flow, fx, 20, 3)
    assert abs(b1.total.item() - (10 * b1.stability + b1.quality)) <= 1e-9
    assert b2.total.item() == pytest.approx(20 * b1.stability + 3 * b1.quality, rel=1e-12)
    assert inner_total(clip, clip, RigidFlowProvider(), fx).total.item() <= 1e-6


def test_outer_stability_examples(clip):
    assert outer_stability(clip, clip, RigidFlowProvider()).item() == 0.0

    static = clip[:1].expand(4, -1, -1, -1)
    # regressed static (zero flow), stable pans by (1, 0): squared error 1 per pair
    calls = []

    class Flow:
        def flow_tensor(self, a, b, mask_a=None, mask_b=None):
            calls.append(a)
            p = torch.zeros(3) if len(calls) == 1 else torch.tensor([0.0, 1.0, 0.0])
            return affine_flow(p.double().expand(a.shape[0], 3), a.shape[-2], a.shape[-1])

    pan = torch.stack([clip[0].roll(i, dims=-1) for i in range(4)])
    assert outer_stability(static, pan, Flow()).item() == pytest.approx(3.0)
    calls.clear()
    assert outer_stability(static[:2], pan[:2], Flow()).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        outer_stability(clip[:1], clip[:1], RigidFlowProvider())


def test_outer_quality(clip, fx, smooth):
    assert outer_quality(clip, clip, fx).item() == pytest.approx(0.0, abs=1e-6)
    big = video_to_tensor(np.stack([smooth(48, 48, seed=s) for s in range(3)]), dtype=torch.float64)
    ref = big[..., 8:40, 8:40]
    # mis-registered by one cell of the deepest (stride-4) feature grid
    shifted = big[..., 8:40, 12:44]
    noise = torch.rand(ref.shape, generator=torch.Generator().manual_seed(0), dtype=ref.dtype)
    q_shift, q_noise = outer_quality(shifted, ref, fx).item(), outer_quality(noise, ref, fx).item()
    assert q_shift < 0.1 * q_noise
    f_s, f_r, f_n = fx.extract(shifted)[-1], fx.extract(ref)[-1], fx.extract(noise)[-1]
    l2_ratio = ((f_s - f_r) ** 2).mean().item() / ((f_n - f_r) ** 2).mean().item()
    assert q_shift / q_noise < l2_ratio


def test_outer_total_weights(clip, fx):
    flow = RigidFlowProvider()
    b = outer_total(clip.roll(1, dims=-1), clip, flow, fx)
    assert b.weights == {"stability": 1.0, "quality": 10.0}
    assert abs(b.total.item() - (b.stability + 10 * b.quality)) <= 1e-9
    assert outer_total(clip, clip, flow, fx).total.item() == pytest.approx(0.0, abs=1e-6)


def test_photometric_reconstruction():
    a = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    full = torch.ones(2, 4, 4)
    assert photometric_reconstruction(a, a, full).item() == 0.0
    assert photometric_reconstruction(a + 0.1, a, full).item() == pytest.approx(0.1)
    b = a.clone()
    b[..., 2:] += 1.0
    half = full.clone()
    half[..., 2:] = 0
    assert photometric_reconstruction(b, a, half).item() == 0.0
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert photometric_reconstruction(b, a, torch.zeros(2, 4, 4)).item() == 0.0
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


def test_losses_finite_and_nonnegative(fx):
    gen = torch.Generator().manual_seed(3)
    a = torch.rand(3, 3, 24, 24, generator=gen, dtype=torch.float64)
    b = torch.rand(3, 3, 24, 24, generator=gen, dtype=torch.float64)
    bi = inner_total(a, b, RigidFlowProvider(), fx)
    bo = outer_total(a, b, RigidFlowProvider(), fx)
    for br in (bi, bo):
        assert np.isfinite(br.total.item())
        assert all(v >= -np.log(1 + 1e-5) for v in br.terms.values())
