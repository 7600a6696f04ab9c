"""Rigid-affine estimation from global flow, and clip alignment.

``AffineEstimator`` regresses ``(theta, tx, ty)`` from a dense global flow
field with a small encoder-decoder network. It is trained on randomly
transformed image pairs with a parameter loss plus a pixel loss that warps
the transformed image back onto the original.
"""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import FlowField, RigidAffine, invert
from .flow import affine_flow, warp_tensor
from .validation import check_flow, check_video, video_to_tensor

log = logging.getLogger(__name__)

ARCH_TAG = "affine-encdec-v1"


class AffineNet(nn.Module):
    """Four strided conv stages, a mirrored decoder, global pooling and an FC head.

    The head emits ``(sin, cos, tx, ty)``; translations are in units of the
    network's input width/height.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        c = [4, width, 2 * width, 4 * width, 4 * width]
        enc = []
        for i in range(4):
            enc += [nn.Conv2d(c[i], c[i + 1], 3, stride=2, padding=1), nn.ReLU()]
        self.encoder = nn.Sequential(*enc)
        d = c[::-1]
        dec = []
        for i in range(4):
            out = d[i + 1] if i < 3 else 2 * width
            dec += [nn.ConvTranspose2d(d[i], out, 4, stride=2, padding=1), nn.ReLU()]
        self.decoder = nn.Sequential(*dec)
        self.head = nn.Sequential(
            nn.Linear(2 * width + 4 * width, 64), nn.ReLU(), nn.Linear(64, 4)
        )

    def forward(self, flow: torch.Tensor) -> torch.Tensor:
        B, _, H, W = flow.shape
        ys = torch.linspace(-1, 1, H, dtype=flow.dtype)
        xs = torch.linspace(-1, 1, W, dtype=flow.dtype)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([xx, yy]).expand(B, 2, H, W)
        z = self.encoder(torch.cat([flow, coords], dim=1))
        pooled = torch.cat([self.decoder(z).mean(dim=(2, 3)), z.mean(dim=(2, 3))], dim=1)
        return self.head(pooled)


def _inverse_params(p: torch.Tensor) -> torch.Tensor:
    theta, tx, ty = p[:, 0], p[:, 1], p[:, 2]
    c, s = torch.cos(theta), torch.sin(theta)
    return torch.stack([-theta, -(c * tx + s * ty), -(-s * tx + c * ty)], dim=1)


def random_crops(images: np.ndarray, size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, size, size, 3))
    for i in range(n):
        img = images[rng.integers(len(images))]
        y = rng.integers(0, img.shape[0] - size + 1)
        x = rng.integers(0, img.shape[1] - size + 1)
        out[i] = img[y : y + size, x : x + size]
    return out


class AffineEstimator(BaseEstimator):
    """Flow-to-rigid-motion regressor with a scikit-learn style interface.

    Parameters
    ----------
    input_size : int
        Flows are resampled to ``input_size x input_size`` before the network.
    patch_size : int
        Side of the square image crops the training pairs are built from.
    iters : int
        Optimisation steps used by :meth:`fit`.
    max_rotation_deg, max_translation_frac : float
        Sampling range of the random training transforms.
    affine_weight, pixel_weight : float
        Weights of the parameter loss and the pixel loss.
    """

    def __init__(self, input_size=32, patch_size=64, width=8, iters=4000, batch_size=16, lr=2e-3,
                 max_rotation_deg=10.0, max_translation_frac=0.1,
                 affine_weight=1.0, pixel_weight=1.0, seed=0):
        self.input_size = input_size
        self.patch_size = patch_size
        self.width = width
        self.iters = iters
        self.batch_size = batch_size
        self.lr = lr
        self.max_rotation_deg = max_rotation_deg
        self.max_translation_frac = max_translation_frac
        self.affine_weight = affine_weight
        self.pixel_weight = pixel_weight
        self.seed = seed

    # ------------------------------------------------------------------ fit
    def _sample_params(self, n: int, rng: np.random.Generator) -> np.ndarray:
        s = self.patch_size
        th = rng.uniform(-1, 1, n) * math.radians(self.max_rotation_deg)
        t = rng.uniform(-1, 1, (n, 2)) * self.max_translation_frac * s
        return np.column_stack([th, t])

    def fit(self, images, y=None):
        """Train on random rigid transforms of crops drawn from ``images``."""
        images = check_video(images, name="images")
        s = self.patch_size
        if images.shape[1] < s or images.shape[2] < s:
            raise ValueError(
                f"corpus images ({images.shape[1]}x{images.shape[2]}) are smaller than "
                f"the {s}x{s} training patch"
            )
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        torch.manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        self.net_ = AffineNet(self.width)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=self.lr, total_steps=self.iters,
                                                    pct_start=0.1)
        self.loss_curve_ = []
        for it in range(self.iters):
            crops = torch.as_tensor(random_crops(images, s, self.batch_size, rng).transpose(0, 3, 1, 2),
                                    dtype=torch.float32)
            target = torch.as_tensor(self._sample_params(self.batch_size, rng), dtype=torch.float32)
            moved, _ = warp_tensor(crops, target)
            pred = self.predict_tensor(affine_flow(target, s, s), check=False)
            loss_aff = self._affine_loss(pred, target)
            _, moved_valid = warp_tensor(crops[:, :1], target)
            stacked = torch.cat([moved, moved_valid.unsqueeze(1).to(crops.dtype)], dim=1)
            back, valid = warp_tensor(stacked, _inverse_params(pred))
            restored = back[:, :3]
            mask = ((back[:, 3] > 0.999) & valid).unsqueeze(1).to(crops.dtype).detach()
            loss_pix = ((restored - crops) ** 2 * mask).sum() / (mask.sum() * 3 + 1e-8)
            loss = self.affine_weight * loss_aff + self.pixel_weight * loss_pix
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            self.loss_curve_.append(loss.item())
            if it % 500 == 0:
                log.info("affine iter %d loss %.6f (affine %.6f pixel %.6f)", it, loss.item(),
                         loss_aff.item(), loss_pix.item())
        self.net_.eval()
        return self

    def _affine_loss(self, pred, target):
        s = self.patch_size
        scale = torch.tensor([1.0, 1.0 / s, 1.0 / s], dtype=pred.dtype)
        return (((pred - target) * scale) ** 2).sum(dim=1).mean()

    def _forward(self, flow_px: torch.Tensor) -> torch.Tensor:
        """Network on flows already at ``input_size``; returns ``(B, 3)`` params in input pixels."""
        s = self.input_size
        out = self.net_(flow_px / math.hypot(s, s))
        theta = torch.atan2(out[:, 0], out[:, 1])
        return torch.stack([theta, out[:, 2] * s, out[:, 3] * s], dim=1)

    # -------------------------------------------------------------- predict
    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("AffineEstimator is not fitted; call fit() or load a checkpoint")

    def predict_tensor(self, flows: torch.Tensor, check: bool = True) -> torch.Tensor:
        """``(B, 2, H, W)`` flows in pixels -> ``(B, 3)`` rigid params in pixels."""
        self._check_fitted()
        if check and not torch.all(torch.isfinite(flows)):
            raise ValueError("flow contains non-finite values")
        B, _, H, W = flows.shape
        s = self.input_size
        net_dtype = next(self.net_.parameters()).dtype
        x = flows.to(net_dtype)
        if (H, W) != (s, s):
            x = F.interpolate(x, size=(s, s), mode="bilinear", align_corners=True)
            x = x * torch.tensor([(s - 1) / max(W - 1, 1), (s - 1) / max(H - 1, 1)],
                                 dtype=x.dtype).view(1, 2, 1, 1)
        p = self._forward(x)
        sx, sy = (W - 1) / (s - 1), (H - 1) / (s - 1)
        return torch.stack([p[:, 0], p[:, 1] * sx, p[:, 2] * sy], dim=1).to(flows.dtype)

    def predict(self, flows) -> np.ndarray:
        """Array of ``(n, H, W, 2)`` flows (or a single flow) -> ``(n, 3)`` params."""
        arr = np.asarray(getattr(flows, "vectors", flows), dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        for i, f in enumerate(arr):
            check_flow(f, name=f"flow[{i}]")
        with torch.no_grad():
            t = torch.as_tensor(arr.transpose(0, 3, 1, 2).copy(), dtype=torch.float32)
            return self.predict_tensor(t).double().numpy()

    def estimate(self, flow) -> RigidAffine:
        return RigidAffine(*self.predict(flow)[0])

    # ---------------------------------------------------------- persistence
    def state(self) -> dict:
        self._check_fitted()
        return {k: v.detach().numpy().copy() for k, v in self.net_.state_dict().items()}

    def load_state(self, state: dict):
        self.net_ = AffineNet(self.width)
        self.net_.load_state_dict({k: torch.as_tensor(np.asarray(v)) for k, v in state.items()})
        self.net_.eval()
        return self


AFFINE_ARCH = "affine-encdec-v1"


def save_estimator(path, est: AffineEstimator, meta: dict | None = None):
    """Write a fitted estimator to a checkpoint file."""
    from . import checkpoint

    return checkpoint.save(path, est.state(), AFFINE_ARCH, meta={"params": est.get_params(), **(meta or {})},
                           seed=est.seed, input_norm="flow/diagonal")


def load_estimator(path) -> AffineEstimator:
    from . import checkpoint

    header, state = checkpoint.load(path)
    if header["arch"] != AFFINE_ARCH:
        raise checkpoint.CheckpointError(f"expected an {AFFINE_ARCH} checkpoint, got {header['arch']!r}")
    return AffineEstimator(**header["meta"]["params"]).load_state(state)


def estimate_affine(est: AffineEstimator, flow: FlowField) -> RigidAffine:
    """Regress the rigid motion of a global flow field."""
    if isinstance(flow, FlowField) and flow.kind != "global":
        raise ValueError("estimate_affine expects a global flow field")
    return est.estimate(flow)


def train_affine_estimator(images, iters: int = 4000, seed: int = 0, **params) -> AffineEstimator:
    return AffineEstimator(iters=iters, seed=seed, **params).fit(images)


def clip_motions(frames: torch.Tensor, flow, est: AffineEstimator | None = None) -> torch.Tensor:
    """Motion ``(T-1, 3)`` from frame 0 to each later frame of ``frames`` ``(T, C, H, W)``.

    The flow provider supplies the global flow; ``est`` (if given) regresses
    the motion from it, otherwise the provider's own rigid estimate is used.
    """
    T = frames.shape[0]
    ref = frames[:1].expand(T - 1, *frames.shape[1:])
    with torch.no_grad():
        motion = flow.motion(ref, frames[1:])
        if est is None:
            return motion
        fl = affine_flow(motion, frames.shape[-2], frames.shape[-1])
        return est.predict_tensor(fl).to(frames.dtype)


def align_tensor(frames: torch.Tensor, flow, est: AffineEstimator | None = None):
    """Align every frame of ``frames`` ``(T, C, H, W)`` onto frame 0.

    Returns ``(aligned, masks, motions)``; frame 0 is passed through
    unchanged with a full mask.
    """
    T = frames.shape[0]
    if T < 2:
        raise ValueError("alignment needs at least 2 frames")
    motions = clip_motions(frames, flow, est)
    with torch.no_grad():
        warped, valid = warp_tensor(frames[1:], _inverse_params(motions))
    aligned = torch.cat([frames[:1], warped], dim=0)
    masks = torch.cat([torch.ones_like(valid[:1]), valid], dim=0).to(frames.dtype)
    return aligned, masks, motions


def align_sequence(frames, est: AffineEstimator | None, flow):
    """Align a clip to its first frame; returns ``(aligned, masks, motions)`` as arrays.

    ``motions[t - 1]`` is the estimated motion from frame 0 to frame ``t``.
    """
    video = check_video(frames, min_frames=2, name="clip")
    t = video_to_tensor(video, dtype=torch.float64)
    aligned, masks, motions = align_tensor(t, flow, est)
    from .validation import tensor_to_video

    return (tensor_to_video(aligned), masks.numpy().copy(),
            [RigidAffine(*m) for m in motions.double().tolist()])


__all__ = [
    "AffineEstimator", "AffineNet", "align_sequence", "align_tensor", "clip_motions",
    "estimate_affine", "load_estimator", "save_estimator", "train_affine_estimator", "invert",
]
