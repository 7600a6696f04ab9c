"""Dense flow rendering, warping and rigid registration.

Everything image-level applies a ``RigidAffine`` about the frame centre
``((W - 1) / 2, (H - 1) / 2)``. A flow from ``a`` to ``b`` stores, for each
pixel ``p`` of ``a``, the displacement to where that content sits in ``b``.
Bilinear sampling is written with explicit gathers so it can be
differentiated twice (second-order meta-gradients go through it).
"""
from __future__ import annotations

import math
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

from .core import FlowField, RigidAffine, invert
from .validation import check_frame, video_to_tensor


def pixel_grid(h: int, w: int, dtype=torch.float64, device=None):
    """Centred pixel coordinates ``(xc, yc)``, each of shape ``(h, w)``."""
    ys = torch.arange(h, dtype=dtype, device=device) - (h - 1) / 2.0
    xs = torch.arange(w, dtype=dtype, device=device) - (w - 1) / 2.0
    yc, xc = torch.meshgrid(ys, xs, indexing="ij")
    return xc, yc


def _params(a, dtype, device=None) -> torch.Tensor:
    if isinstance(a, RigidAffine):
        return torch.tensor([a.theta, a.tx, a.ty], dtype=dtype, device=device)
    return torch.as_tensor(a, dtype=dtype, device=device)


def affine_flow(params: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Render the flow of rigid ``params = (theta, tx, ty)`` as ``(..., 2, h, w)``.

    ``params`` may carry leading batch dimensions and gradients.
    """
    xc, yc = pixel_grid(h, w, dtype=params.dtype, device=params.device)
    theta, tx, ty = params[..., 0, None, None], params[..., 1, None, None], params[..., 2, None, None]
    c, s = torch.cos(theta), torch.sin(theta)
    u = c * xc - s * yc + tx - xc
    v = s * xc + c * yc + ty - yc
    return torch.stack([u, v], dim=-3)


def oracle_flow(a_to_b: RigidAffine, h: int, w: int) -> FlowField:
    """Analytic global flow of a rigid motion; defined at every pixel (no holes)."""
    if h < 1 or w < 1:
        raise ValueError(f"flow size must be positive, got {h}x{w}")
    vec = affine_flow(_params(a_to_b, torch.float64), h, w)
    return FlowField(vec.permute(1, 2, 0).numpy(), kind="global")


def bilinear_sample(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor, tol: float = 1e-6):
    """Sample ``img`` ``(B, C, H, W)`` at absolute pixel coordinates ``x, y`` ``(B, h, w)``.

    Out-of-range taps contribute zero. Returns ``(samples (B, C, h, w), valid (B, h, w))``
    where ``valid`` marks coordinates inside ``[0, W-1] x [0, H-1]``.
    """
    B, C, H, W = img.shape
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = img.reshape(B, C, H * W)
    out = 0
    for dx, dy, wgt in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).reshape(B, 1, -1).expand(B, C, -1)
        tap = torch.gather(flat, 2, idx).reshape(B, C, *x.shape[1:])
        out = out + tap * (wgt * inside.to(img.dtype)).unsqueeze(1)
    valid = (x >= -tol) & (x <= W - 1 + tol) & (y >= -tol) & (y <= H - 1 + tol)
    return out, valid


def warp_tensor(frames: torch.Tensor, params: torch.Tensor):
    """Move the content of ``frames`` ``(B, C, H, W)`` by the rigid motion ``params``.

    Inverse-mapped bilinear sampling: output pixel ``q`` reads the input at
    ``A^-1(q)``. ``params`` is ``(3,)`` or ``(B, 3)``. Returns the warped
    frames (zero outside the source) and a ``(B, H, W)`` validity mask.
    """
    B, _, H, W = frames.shape
    params = params.to(frames.dtype)
    if params.ndim == 1:
        params = params.expand(B, 3)
    xc, yc = pixel_grid(H, W, dtype=frames.dtype, device=frames.device)
    theta = params[:, 0, None, None]
    tx = params[:, 1, None, None]
    ty = params[:, 2, None, None]
    c, s = torch.cos(theta), torch.sin(theta)
    dx = xc - tx
    dy = yc - ty
    # R^T (q - t), back to absolute coordinates
    sx = c * dx + s * dy + (W - 1) / 2.0
    sy = -s * dx + c * dy + (H - 1) / 2.0
    out, valid = bilinear_sample(frames, sx, sy)
    return out * valid.unsqueeze(1).to(frames.dtype), valid


def warp(frame, a: RigidAffine):
    """Warp one ``H x W x 3`` frame by ``a``; returns ``(frame, mask)`` as arrays."""
    px = check_frame(frame)
    t = video_to_tensor(px, dtype=torch.float64)
    out, valid = warp_tensor(t, _params(a, torch.float64))
    return out[0].permute(1, 2, 0).numpy().copy(), valid[0].numpy().copy()


def to_gray(frames: torch.Tensor) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, 1, H, W)`` luminance-like mean."""
    return frames.mean(dim=1, keepdim=True)


def _image_gradients(img: torch.Tensor):
    """Central differences with replicated borders, ``img`` ``(B, 1, H, W)``."""
    padded = F.pad(img, (1, 1, 1, 1), mode="replicate")
    gx = (padded[:, :, 1:-1, 2:] - padded[:, :, 1:-1, :-2]) / 2.0
    gy = (padded[:, :, 2:, 1:-1] - padded[:, :, :-2, 1:-1]) / 2.0
    return gx, gy


def _erode(mask: torch.Tensor) -> torch.Tensor:
    """3x3 minimum filter of a ``(B, 1, H, W)`` mask; the frame edge is not treated as invalid."""
    padded = F.pad(mask, (1, 1, 1, 1), mode="replicate")
    return -F.max_pool2d(-padded, 3, stride=1)


def _downsample(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[-2:]
    return F.avg_pool2d(img[..., : h - h % 2, : w - w % 2], 2)


def register_rigid(
    a: torch.Tensor,
    b: torch.Tensor,
    mask_a: torch.Tensor | None = None,
    mask_b: torch.Tensor | None = None,
    levels: int = 3,
    iters: int = 10,
    min_size: int = 8,
    init: torch.Tensor | None = None,
    grad_steps: int | None = 1,
) -> torch.Tensor:
    """Rigid motion ``(B, 3)`` taking the content of ``a`` onto ``b``.

    Coarse-to-fine Gauss-Newton on the brightness-constancy residual
    ``b(A(p)) - a(p)`` over pixels valid in both frames. The fixed iteration
    count keeps the result a smooth, differentiable function of both inputs.
    ``a`` and ``b`` are ``(B, C, H, W)``; masks are ``(B, H, W)`` in [0, 1].

    Only the last ``grad_steps`` finest-level iterations are recorded for
    autograd (``None`` records all of them). Near the optimum the earlier
    iterations contribute almost nothing to the derivative, and backpropagating
    through the whole unrolled solve is badly conditioned, so by default the
    gradient is that of one Gauss-Newton step taken from the detached
    solution (the implicit-function derivative of the fixed point).
    """
    ga, gb = to_gray(a), to_gray(b)
    B = ga.shape[0]
    ma = torch.ones_like(ga) if mask_a is None else mask_a.to(ga.dtype).reshape(ga.shape)
    mb = torch.ones_like(gb) if mask_b is None else mask_b.to(gb.dtype).reshape(gb.shape)
    pyramid = [(ga, gb, ma, mb)]
    for _ in range(levels - 1):
        pa, pb, pma, pmb = pyramid[-1]
        if min(pa.shape[-2:]) // 2 < min_size:
            break
        # a coarse pixel is valid only if all four children were
        pyramid.append((
            _downsample(pa), _downsample(pb),
            (_downsample(pma) > 1 - 1e-9).to(pa.dtype),
            (_downsample(pmb) > 1 - 1e-9).to(pb.dtype),
        ))
    params = torch.zeros(B, 3, dtype=ga.dtype, device=ga.device) if init is None else init.clone()
    n_levels = len(pyramid)
    scale = 2.0 ** (n_levels - 1)
    params = params * torch.tensor([1.0, 1.0 / scale, 1.0 / scale], dtype=params.dtype)
    for level in range(n_levels - 1, -1, -1):
        la, lb, lma, lmb = pyramid[level]
        H, W = la.shape[-2:]
        xc, yc = pixel_grid(H, W, dtype=la.dtype, device=la.device)
        gx, gy = _image_gradients(lb)
        core = _erode(lmb)  # central differences are unreliable next to invalid pixels
        stacked = torch.cat([lb * core, gx * core, gy * core, core], dim=1)
        for it in range(iters):
            tracked = grad_steps is None or (level == 0 and it >= iters - grad_steps)
            if not tracked:
                params = params.detach()
            with torch.set_grad_enabled(torch.is_grad_enabled() and tracked):
                params = _gn_step(params, la, lma, stacked, xc, yc, H, W)
        if level > 0:
            params = params * torch.tensor([1.0, 2.0, 2.0], dtype=params.dtype)
    return params


def _gn_step(params, la, lma, stacked, xc, yc, H, W):
    """One Gauss-Newton update of ``params`` ``(B, 3)`` on one pyramid level."""
    theta = params[:, 0, None, None]
    c, s = torch.cos(theta), torch.sin(theta)
    wx = c * xc - s * yc + params[:, 1, None, None]
    wy = s * xc + c * yc + params[:, 2, None, None]
    samp, _ = bilinear_sample(stacked, wx + (W - 1) / 2.0, wy + (H - 1) / 2.0)
    # ``stacked`` holds mask-premultiplied channels, so dividing by the
    # interpolated mask averages valid taps only. That mask also fades to zero
    # within a pixel of any invalid region and serves as a soft weight, which
    # keeps the objective continuous in the motion parameters.
    bm = samp[:, 3]
    norm = bm.clamp_min(1e-12)
    bw, bgx, bgy = samp[:, 0] / norm, samp[:, 1] / norm, samp[:, 2] / norm
    weight = lma[:, 0] * bm
    resid = bw - la[:, 0]
    # d(warped coords)/d(theta)
    dxt = -s * xc - c * yc
    dyt = c * xc - s * yc
    J = torch.stack([bgx * dxt + bgy * dyt, bgx, bgy], dim=-1)  # (B, H, W, 3)
    Jw = J * weight.unsqueeze(-1)
    Hm = torch.einsum("bhwi,bhwj->bij", Jw, J)
    g = torch.einsum("bhwi,bhw->bi", Jw, resid)
    damp = 1e-9 * (Hm.diagonal(dim1=-2, dim2=-1).sum(-1) + 1.0)
    Hm = Hm + damp[:, None, None] * torch.eye(3, dtype=Hm.dtype, device=Hm.device)
    step = torch.linalg.solve(Hm, g.unsqueeze(-1)).squeeze(-1)
    return params - step


@runtime_checkable
class FlowProvider(Protocol):
    """Anything that can estimate a global flow between two frames."""

    def estimate(self, a, b) -> FlowField: ...


class RigidFlowProvider:
    """Desk-scale global-flow provider.

    Registers the two frames with a rigid model and renders the analytic
    flow of the recovered motion, so the field contains camera motion only
    and has no holes at the boundary. ``motion`` / ``flow_tensor`` expose the
    same computation differentiably on batched tensors.
    """

    kind = "global"

    def __init__(self, levels: int = 3, iters: int = 10, min_size: int = 8, grad_steps: int | None = 1):
        self.levels = levels
        self.iters = iters
        self.min_size = min_size
        self.grad_steps = grad_steps

    def motion(self, a: torch.Tensor, b: torch.Tensor, mask_a=None, mask_b=None) -> torch.Tensor:
        return register_rigid(a, b, mask_a, mask_b, levels=self.levels, iters=self.iters,
                              min_size=self.min_size, grad_steps=self.grad_steps)

    def flow_tensor(self, a: torch.Tensor, b: torch.Tensor, mask_a=None, mask_b=None) -> torch.Tensor:
        """``(B, 2, H, W)`` flow from ``a`` to ``b``."""
        params = self.motion(a, b, mask_a, mask_b)
        return affine_flow(params, a.shape[-2], a.shape[-1])

    def estimate_motion(self, a, b, mask_a=None, mask_b=None) -> RigidAffine:
        ta = video_to_tensor(check_frame(a, "a"), dtype=torch.float64)
        tb = video_to_tensor(check_frame(b, "b"), dtype=torch.float64)
        if ta.shape != tb.shape:
            raise ValueError(f"frames differ in shape: {tuple(ta.shape)} vs {tuple(tb.shape)}")
        ma = None if mask_a is None else torch.as_tensor(np.asarray(mask_a), dtype=torch.float64)[None]
        mb = None if mask_b is None else torch.as_tensor(np.asarray(mask_b), dtype=torch.float64)[None]
        with torch.no_grad():
            p = self.motion(ta, tb, ma, mb)[0].tolist()
        return RigidAffine(*p)

    def estimate(self, a, b, mask_a=None, mask_b=None) -> FlowField:
        motion = self.estimate_motion(a, b, mask_a, mask_b)
        h, w = np.asarray(getattr(a, "pixels", a)).shape[:2]
        return oracle_flow(motion, h, w)


class KnownMotionFlowProvider:
    """Flow provider that looks frames up in a table of known motions.

    Useful when a synthetic generator knows the true motion of every frame
    relative to a common reference: the flow between frames ``i`` and ``j``
    is ``A_j . A_i^-1``. Frames are identified by object identity of their
    index in ``frames``.
    """

    kind = "global"

    def __init__(self, frames, motions):
        self._frames = [np.asarray(f) for f in frames]
        self._motions = list(motions)

    def _lookup(self, frame) -> RigidAffine:
        arr = np.asarray(getattr(frame, "pixels", frame))
        for f, m in zip(self._frames, self._motions):
            if f.shape == arr.shape and np.array_equal(f, arr):
                return m
        raise KeyError("frame not registered with KnownMotionFlowProvider")

    def estimate_motion(self, a, b) -> RigidAffine:
        from .core import compose

        return compose(self._lookup(b), invert(self._lookup(a)))

    def estimate(self, a, b) -> FlowField:
        h, w = np.asarray(getattr(a, "pixels", a)).shape[:2]
        return oracle_flow(self.estimate_motion(a, b), h, w)


def flow_magnitude(flow: FlowField) -> float:
    """Mean per-pixel L1 magnitude ``|u| + |v|``."""
    v = flow.vectors
    return float(np.mean(np.abs(v[..., 0]) + np.abs(v[..., 1])))


def frame_diagonal(h: int, w: int) -> float:
    return math.hypot(h, w)
