"""Evaluation metrics: stability, cropping, distortion, persistence, temporal IoU."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import cv2
import numpy as np
import torch

from .core import RigidAffine, compose, trajectory_to_array
from .flow import affine_flow
from .validation import check_video, video_to_tensor

log = logging.getLogger(__name__)

LOW_BANDS = (2, 6)  # inclusive, 1-based with bin 1 = DC
DEGENERATE_ENERGY = 1e-12


# -------------------------------------------------------------- stability
def stability_from_signal(signal) -> float:
    """Fraction of AC energy in the lowest bands of a 1-D trajectory.

    Energy is the squared magnitude of the one-sided DFT. With bins counted
    from 1 (bin 1 = DC) the score is ``sum(E[2..6]) / sum(E[2..N])`` where
    ``N`` covers the whole one-sided spectrum. A signal without AC energy
    scores 1.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need a 1-D signal of at least 2 samples")
    energy = np.abs(np.fft.rfft(x)) ** 2
    ac = energy[1:]
    total = ac.sum()
    if total < DEGENERATE_ENERGY:
        return 1.0
    lo, hi = LOW_BANDS
    return float(ac[lo - 2 : hi - 1].sum() / total)


def stability_from_trajectory(positions) -> float:
    """Mean stability over the columns (rotation, x, y) of an ``(n, 3)`` path."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim == 1:
        return stability_from_signal(positions)
    return float(np.mean([stability_from_signal(positions[:, j]) for j in range(positions.shape[1])]))


def pair_motions(video, flow, est=None, batch: int = 32) -> np.ndarray:
    """Rigid motion ``(T-1, 3)`` between each pair of consecutive frames."""
    t = video_to_tensor(check_video(video, min_frames=2), dtype=torch.float64)
    out = []
    with torch.no_grad():
        for s in range(0, t.shape[0] - 1, batch):
            a = t[s : s + batch]
            b = t[s + 1 : s + 1 + batch]
            a = a[: b.shape[0]]
            m = flow.motion(a, b)
            if est is not None:
                m = est.predict_tensor(affine_flow(m, a.shape[-2], a.shape[-1])).double()
            out.append(m)
    return torch.cat(out).numpy()


def accumulate(motions: np.ndarray) -> np.ndarray:
    """Camera path ``(T, 3)`` from per-pair motions (starts at the identity).

    Each pose is the previous one followed by the pair motion, composed as
    rigid transforms. Summing the parameters instead would ignore the
    rotation of earlier translations and let that error drift into the
    low-frequency bands.
    """
    motions = np.asarray(motions, dtype=np.float64)
    if motions.ndim != 2 or motions.shape[1] != 3:
        raise ValueError(f"motions must be (n, 3), got {motions.shape}")
    path = [RigidAffine.identity()]
    for m in motions:
        path.append(compose(RigidAffine(*m), path[-1]))
    out = trajectory_to_array(path)
    out[:, 0] = np.unwrap(out[:, 0])
    return out


def stability_score(video, est=None, flow=None, min_frames: int = 8) -> float:
    """Spectral stability of a video's estimated camera path, in [0, 1].

    Per-pair rigid motions come from ``flow`` (regressed through ``est``
    when given) and are accumulated into rotation, x and y paths.
    """
    from .flow import RigidFlowProvider

    video = check_video(video, min_frames=min_frames)
    flow = flow or RigidFlowProvider()
    return stability_from_trajectory(accumulate(pair_motions(video, flow, est)))


# -------------------------------------------------------- homography based
class HomographyFit(Protocol):
    def fit(self, a, b) -> tuple[np.ndarray | None, float]: ...


class FeatureHomographyFit:
    """SIFT matches plus RANSAC (OpenCV), deterministic under ``seed``.

    Returns ``(None, ratio)`` when fewer than ``min_inliers`` matches agree.
    """

    def __init__(self, min_inliers: int = 20, ransac_thresh: float = 3.0, ratio: float = 0.75,
                 seed: int = 0, upscale: int = 1):
        self.min_inliers = min_inliers
        self.ransac_thresh = ransac_thresh
        self.ratio = ratio
        self.seed = seed
        self.upscale = upscale

    def _gray(self, frame) -> np.ndarray:
        g = (np.clip(np.asarray(frame, dtype=np.float64).mean(axis=2), 0, 1) * 255).astype(np.uint8)
        if self.upscale > 1:
            g = cv2.resize(g, None, fx=self.upscale, fy=self.upscale, interpolation=cv2.INTER_CUBIC)
        return g

    def fit(self, a, b):
        cv2.setRNGSeed(self.seed)
        sift = cv2.SIFT_create()
        ka, da = sift.detectAndCompute(self._gray(a), None)
        kb, db = sift.detectAndCompute(self._gray(b), None)
        if da is None or db is None or len(ka) < 4 or len(kb) < 4:
            return None, 0.0
        matches = cv2.BFMatcher(cv2.NORM_L2).knnMatch(da, db, k=2)
        good = [m[0] for m in matches if len(m) == 2 and m[0].distance < self.ratio * m[1].distance]
        if len(good) < max(4, self.min_inliers):
            return None, 0.0
        s = float(self.upscale)
        pa = np.float32([ka[m.queryIdx].pt for m in good]) / s
        pb = np.float32([kb[m.trainIdx].pt for m in good]) / s
        H, inl = cv2.findHomography(pa, pb, cv2.RANSAC, self.ransac_thresh, maxIters=2000, confidence=0.999)
        if H is None or inl is None:
            return None, 0.0
        n_in = int(inl.sum())
        if n_in < self.min_inliers:
            return None, n_in / len(good)
        return H / H[2, 2], n_in / len(good)


class KnownHomographyFit:
    """Returns preset homographies in call order; identity for identical frames.

    For synthetic pairs whose true warp is known.
    """

    def __init__(self, homographies=None):
        self.homographies = None if homographies is None else [np.asarray(h, float) for h in homographies]
        self._i = 0

    def fit(self, a, b):
        if self.homographies is None:
            if np.array_equal(np.asarray(a), np.asarray(b)):
                return np.eye(3), 1.0
            raise ValueError("KnownHomographyFit without presets only handles identical frames")
        H = self.homographies[self._i % len(self.homographies)]
        self._i += 1
        return H / H[2, 2], 1.0


def _frame_homographies(original, stabilized, hfit):
    orig = check_video(original, name="original")
    stab = check_video(stabilized, name="stabilized")
    if len(orig) != len(stab):
        raise ValueError(f"original has {len(orig)} frames, stabilized {len(stab)}")
    hs, skipped = [], []
    for t, (a, b) in enumerate(zip(orig, stab)):
        H, _ = hfit.fit(a, b)
        if H is None:
            skipped.append(t)
            log.warning("homography fit failed on frame %d; skipped", t)
            continue
        hs.append(H)
    return hs, skipped


def homography_scale(H) -> float:
    return float(math.sqrt(abs(np.linalg.det(np.asarray(H)[:2, :2]))))


def homography_anisotropy(H) -> float:
    sv = np.linalg.svd(np.asarray(H)[:2, :2], compute_uv=False)
    return float(sv.min() / sv.max())


def cropping_ratio(original, stabilized, hfit, return_detail: bool = False):
    """Mean scale ``sqrt|det|`` of the original->stabilized homographies.

    Scale is read in the original-to-stabilized direction, so a zoomed-in
    (cropped) output reports a value above 1 and full-frame output about 1.
    """
    hs, skipped = _frame_homographies(original, stabilized, hfit)
    per_frame = [homography_scale(H) for H in hs]
    value = float(np.mean(per_frame)) if per_frame else float("nan")
    return (value, per_frame, skipped) if return_detail else value


def distortion_score(original, stabilized, hfit, return_detail: bool = False):
    """Minimum over frames of ``sigma_min / sigma_max`` of the homography's linear part."""
    hs, skipped = _frame_homographies(original, stabilized, hfit)
    per_frame = [homography_anisotropy(H) for H in hs]
    value = float(np.min(per_frame)) if per_frame else float("nan")
    return (value, per_frame, skipped) if return_detail else value


# ------------------------------------------------------------- detections
@dataclass(frozen=True)
class Detection:
    t: int
    label: str
    bbox: tuple
    score: float = 1.0

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.bbox)
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate bbox {self.bbox!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "bbox", (x1, y1, x2, y2))

    def clamped(self, width: float, height: float) -> "Detection":
        x1, y1, x2, y2 = self.bbox
        return Detection(self.t, self.label, (max(0.0, x1), max(0.0, y1), min(width, x2), min(height, y2)),
                         self.score)

    def as_dict(self) -> dict:
        return {"t": self.t, "label": self.label, "bbox": list(self.bbox), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(int(d["t"]), str(d["label"]), tuple(d["bbox"]), float(d.get("score", 1.0)))


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _by_frame(detections) -> dict:
    frames: dict = {}
    for d in detections:
        frames.setdefault(d.t, []).append(d)
    return frames


def average_persistence(detections, n_frames: int | None = None, iou_thresh: float = 0.5) -> float:
    """Mean number of consecutive frames that first-frame objects stay detected.

    Each object is followed independently: at every later frame the
    same-label detection with the highest IoU against the tracked box
    continues the track if the IoU reaches ``iou_thresh``. Frame 0 counts.
    Returns 0 (with a logged warning) when frame 0 has no detections.
    """
    frames = _by_frame(detections)
    if n_frames is None:
        n_frames = max(frames) + 1 if frames else 0
    first = frames.get(0, [])
    if not first:
        log.warning("average_persistence: no detections in frame 0")
        return 0.0
    lengths = []
    for obj in first:
        box = obj.bbox
        length = 1
        for t in range(1, n_frames):
            cands = [d for d in frames.get(t, []) if d.label == obj.label]
            best = max(cands, key=lambda d: box_iou(box, d.bbox), default=None)
            if best is None or box_iou(box, best.bbox) < iou_thresh:
                break
            box = best.bbox
            length += 1
        lengths.append(length)
    return float(np.mean(lengths))


def greedy_matches(prev, curr, thresh: float):
    """Greedy one-to-one same-label matching by descending IoU (ties by input order)."""
    pairs = []
    for i, a in enumerate(prev):
        for j, b in enumerate(curr):
            if a.label == b.label:
                iou = box_iou(a.bbox, b.bbox)
                if iou >= thresh and iou > 0:
                    pairs.append((-iou, i, j))
    pairs.sort()
    used_i, used_j, out = set(), set(), []
    for neg, i, j in pairs:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        out.append((i, j, -neg))
    return out


def temporal_iou(detections, n_frames: int | None = None, iou_match_thresh: float = 0.1) -> float:
    """Mean IoU of matched boxes across consecutive frames, averaged over frame pairs.

    Frame pairs with no match contribute 0.
    """
    frames = _by_frame(detections)
    if n_frames is None:
        n_frames = max(frames) + 1 if frames else 0
    if n_frames < 2:
        raise ValueError("temporal IoU needs at least 2 frames")
    scores = []
    for t in range(n_frames - 1):
        m = greedy_matches(frames.get(t, []), frames.get(t + 1, []), iou_match_thresh)
        scores.append(float(np.mean([iou for _, _, iou in m])) if m else 0.0)
    return float(np.mean(scores))


# ------------------------------------------------------------------ report
@dataclass
class MetricsReport:
    stability: float | None = None
    cropping: float | None = None
    distortion: float | None = None
    avg_persistence: float | None = None
    avg_temporal_iou: float | None = None
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


AVAILABLE_METRICS = ("stability", "cropping", "distortion", "persistence", "temporal_iou")


def evaluate(original, stabilized, metrics=AVAILABLE_METRICS, flow=None, est=None, hfit=None,
             detections=None, persistence_iou: float = 0.5, temporal_match_iou: float = 0.1) -> MetricsReport:
    """Compute the requested metrics for one (original, stabilized) pair."""
    unknown = set(metrics) - set(AVAILABLE_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    report = MetricsReport()
    stab = check_video(stabilized, name="stabilized")
    if "stability" in metrics:
        report.stability = stability_score(stab, est=est, flow=flow)
    if "cropping" in metrics or "distortion" in metrics:
        hfit = hfit or FeatureHomographyFit()
        hs, skipped = _frame_homographies(original, stab, hfit)
        report.detail["skipped_frames"] = skipped
        if "cropping" in metrics:
            per = [homography_scale(H) for H in hs]
            report.cropping = float(np.mean(per)) if per else None
            report.detail["cropping_per_frame"] = per
        if "distortion" in metrics:
            per = [homography_anisotropy(H) for H in hs]
            report.distortion = float(np.min(per)) if per else None
            report.detail["distortion_per_frame"] = per
    if {"persistence", "temporal_iou"} & set(metrics):
        if detections is None:
            raise ValueError("persistence / temporal_iou need detections")
        n = len(stab)
        if "persistence" in metrics:
            report.avg_persistence = average_persistence(detections, n, persistence_iou)
        if "temporal_iou" in metrics:
            report.avg_temporal_iou = temporal_iou(detections, n, temporal_match_iou)
    return report
