"""Training and adaptation objectives.

All losses take ``(T, 3, H, W)`` tensors (arrays are converted) and return
differentiable scalar tensors. Flow-space terms go through a flow provider
with a ``flow_tensor(a, b, mask_a, mask_b)`` method, such as
:class:`metastab.flow.RigidFlowProvider`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import check_same_shape, video_to_tensor

CX_BANDWIDTH = 0.5
CX_EPS = 1e-5


class FeatureExtractor(Protocol):
    def extract(self, frames: torch.Tensor) -> list[torch.Tensor]: ...


class RandomFeatureExtractor(nn.Module):
    """Frozen, fixed-seed random convolutional pyramid.

    Three conv+ReLU stages (the last two strided). Random features keep the
    metric structure the quality losses need without shipping pretrained
    weights.
    """

    def __init__(self, channels=(8, 16, 32), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for i, c_out in enumerate(channels):
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.05)
            conv.requires_grad_(False)
            layers.append(conv)
            c_in = c_out
        self.stages = nn.ModuleList(layers)
        self.seed = seed

    def extract(self, frames: torch.Tensor) -> list[torch.Tensor]:
        x = frames - 0.5
        feats = []
        for conv in self.stages:
            x = F.relu(F.conv2d(x, conv.weight.to(x.dtype), conv.bias.to(x.dtype),
                                stride=conv.stride, padding=conv.padding))
            feats.append(x)
        return feats

    forward = extract


def gram(features: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix of a ``(C, H, W)`` or ``(B, C, H, W)`` map, divided by ``C*H*W``."""
    squeeze = features.ndim == 3
    f = features.unsqueeze(0) if squeeze else features
    B, C, H, W = f.shape
    flat = f.reshape(B, C, H * W)
    g = flat @ flat.transpose(1, 2) / (C * H * W)
    return g[0] if squeeze else g


def contextual_similarity(feat_a: torch.Tensor, feat_b: torch.Tensor,
                          h: float = CX_BANDWIDTH, eps: float = CX_EPS) -> torch.Tensor:
    """Contextual similarity ``CX(a, b)`` of two ``(C, H, W)`` feature maps.

    Each position is a feature vector; vectors are centred on the mean of
    ``b``, compared by cosine distance, normalised by the nearest distance,
    turned into affinities, and each ``b`` vector scores its best match.
    The spatial arrangement is ignored.
    """
    if feat_a.shape[0] != feat_b.shape[0]:
        raise ValueError(f"channel counts differ: {feat_a.shape[0]} vs {feat_b.shape[0]}")
    x = feat_a.reshape(feat_a.shape[0], -1).T
    y = feat_b.reshape(feat_b.shape[0], -1).T
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("contextual similarity needs non-empty feature sets")
    mu = y.mean(dim=0, keepdim=True)
    xn = F.normalize(x - mu, dim=1, eps=1e-12)
    yn = F.normalize(y - mu, dim=1, eps=1e-12)
    d = (1.0 - xn @ yn.T).clamp_min(0.0)  # (N_x, N_y)
    d_rel = d / (d.min(dim=1, keepdim=True).values + eps)
    cx = torch.softmax((1.0 - d_rel) / h, dim=1)
    return cx.max(dim=0).values.mean()


def _as_tensor(v, like=None):
    if isinstance(v, torch.Tensor):
        return v
    return video_to_tensor(v, dtype=torch.float64 if like is None else like.dtype)


def _mask_tensor(masks, video: torch.Tensor):
    if masks is None:
        return None
    m = torch.as_tensor(masks, dtype=video.dtype) if not isinstance(masks, torch.Tensor) else masks
    return m.reshape(video.shape[0], *video.shape[-2:]).to(video.dtype)


def inner_stability(regressed, aligned, flow, aligned_masks=None) -> torch.Tensor:
    """Sum over frames of the mean per-pixel ``|u| + |v|`` of the flow regressed -> aligned."""
    v_hat = _as_tensor(regressed)
    v_tld = _as_tensor(aligned, v_hat)
    check_same_shape(v_hat, v_tld, "regressed and aligned sequences")
    fl = flow.flow_tensor(v_hat, v_tld, None, _mask_tensor(aligned_masks, v_tld))
    return fl.abs().sum(dim=1).mean(dim=(1, 2)).sum()


def _perceptual_terms(fa: list[torch.Tensor], fb: list[torch.Tensor]):
    perceptual = 0
    style = 0
    for a, b in zip(fa, fb):
        perceptual = perceptual + ((a - b) ** 2).mean(dim=(1, 2, 3)).sum()
        style = style + ((gram(a) - gram(b)) ** 2).mean(dim=(1, 2)).sum()
    return perceptual, style


def _neg_log_cx(fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
    terms = [-torch.log(contextual_similarity(a, b)) for a, b in zip(fa, fb)]
    return torch.stack(terms)


def _quality_parts(regressed, aligned, fx):
    v_hat = _as_tensor(regressed)
    v_tld = _as_tensor(aligned, v_hat)
    check_same_shape(v_hat, v_tld, "regressed and aligned sequences")
    fa = fx.extract(v_hat)
    fb = fx.extract(v_tld)
    if len(fa) != len(fb) or any(a.shape != b.shape for a, b in zip(fa, fb)):
        raise ValueError("feature extractor produced mismatched shapes")
    perceptual, style = _perceptual_terms(fa, fb)
    contextual = _neg_log_cx(fa[-1], fb[-1]).sum()
    return perceptual, style, contextual


def inner_quality(regressed, aligned, fx) -> torch.Tensor:
    """Perceptual + Gram + contextual penalty, summed over frames.

    Perceptual and Gram distances are summed over every extractor stage;
    the contextual term uses the deepest stage.
    """
    perceptual, style, contextual = _quality_parts(regressed, aligned, fx)
    return perceptual + style + contextual


@dataclass
class LossBreakdown:
    """A weighted sum of named loss terms.

    ``total`` keeps the autograd graph; ``terms`` and ``weights`` are plain
    floats for logging.
    """

    total: torch.Tensor
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @property
    def stability(self) -> float:
        return self.terms.get("stability", 0.0)

    @property
    def quality(self) -> float:
        return self.terms.get("quality", 0.0)

    def as_dict(self) -> dict:
        return {"total": self.total.item(), "terms": dict(self.terms), "weights": dict(self.weights)}


def weighted_total(terms: dict, weights: dict) -> LossBreakdown:
    total = 0
    for name, value in terms.items():
        total = total + weights[name] * value
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(float(total), dtype=torch.float64)
    return LossBreakdown(
        total=total,
        terms={k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in terms.items()},
        weights={k: float(weights[k]) for k in terms},
    )


def inner_total(regressed, aligned, flow, fx, lambda_s: float = 10.0, lambda_q: float = 1.0,
                aligned_masks=None) -> LossBreakdown:
    """Inner-loop objective: ``lambda_s * stability + lambda_q * quality`` (default 10:1)."""
    terms = {
        "stability": inner_stability(regressed, aligned, flow, aligned_masks),
        "quality": inner_quality(regressed, aligned, fx),
    }
    return weighted_total(terms, {"stability": lambda_s, "quality": lambda_q})


def outer_stability(regressed, stable, flow) -> torch.Tensor:
    """Sum over consecutive pairs of the mean squared difference of the two motion flows."""
    v_hat = _as_tensor(regressed)
    o = _as_tensor(stable, v_hat)
    check_same_shape(v_hat, o, "regressed and stable sequences")
    if v_hat.shape[0] < 2:
        raise ValueError("outer stability needs at least 2 frames")
    f_hat = flow.flow_tensor(v_hat[:-1], v_hat[1:])
    f_o = flow.flow_tensor(o[:-1], o[1:])
    return ((f_hat - f_o) ** 2).sum(dim=1).mean(dim=(1, 2)).sum()


def outer_quality(regressed, stable, fx) -> torch.Tensor:
    """Mean over frames of ``-log CX`` at the deepest extractor stage."""
    v_hat = _as_tensor(regressed)
    o = _as_tensor(stable, v_hat)
    check_same_shape(v_hat, o, "regressed and stable sequences")
    return _neg_log_cx(fx.extract(v_hat)[-1], fx.extract(o)[-1]).mean()


def outer_total(regressed, stable, flow, fx, lambda_s: float = 1.0, lambda_q: float = 10.0) -> LossBreakdown:
    """Outer-loop objective: ``lambda_s * stability + lambda_q * quality`` (default 1:10)."""
    terms = {
        "stability": outer_stability(regressed, stable, flow),
        "quality": outer_quality(regressed, stable, fx),
    }
    return weighted_total(terms, {"stability": lambda_s, "quality": lambda_q})


def photometric_reconstruction(regressed, aligned, masks) -> torch.Tensor:
    """Mean absolute difference over pixels the mask marks valid.

    An all-invalid mask gives 0 and a ``RuntimeWarning``.
    """
    a = _as_tensor(regressed)
    b = _as_tensor(aligned, a)
    check_same_shape(a, b, "patches")
    m = _mask_tensor(masks, a).unsqueeze(1)
    denom = m.sum() * a.shape[1]
    if float(denom) == 0.0:
        warnings.warn("photometric_reconstruction: mask has no valid pixels", RuntimeWarning, stacklevel=2)
        return (a * 0).sum()
    return ((a - b).abs() * m).sum() / denom
