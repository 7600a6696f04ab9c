"""Jerk localization, peak selection, diagonal crop placement and targeted adaptation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import RigidAffine, trajectory_to_array

log = logging.getLogger(__name__)

LOW_SIGNAL = 1e-12


@dataclass
class JerkProfile:
    """Frame-to-frame jerk magnitudes ``deltas`` (length ``len(trajectory) - 1``)."""

    deltas: np.ndarray
    trajectory: np.ndarray | None = None
    peaks: list = field(default_factory=list)

    @property
    def low_signal(self) -> bool:
        return bool(len(self.deltas) == 0 or np.max(self.deltas) < LOW_SIGNAL)

    def __len__(self) -> int:
        return len(self.deltas)


def jerk_profile(traj, diag: float | None = None, raw_units: bool = False) -> JerkProfile:
    """Norm of the backward difference of successive motion parameters.

    ``traj`` is a sequence of ``RigidAffine`` (or an ``(n, 3)`` array of
    ``(theta, tx, ty)``). By default translations are divided by the frame
    diagonal ``diag`` so rotation (radians) and translation are commensurate;
    ``raw_units=True`` (or ``diag=None``) uses the parameters as given.
    """
    arr = np.asarray(traj, dtype=np.float64) if not _is_affine_seq(traj) else trajectory_to_array(traj)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"trajectory must be (n, 3), got {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError("jerk profile needs at least 2 trajectory samples")
    if not raw_units and diag is not None:
        arr = arr / np.array([1.0, diag, diag])
    diff = arr[1:] - arr[:-1]
    # explicit left-to-right sum: np.sum may reorder the reduction
    deltas = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2)
    return JerkProfile(deltas=deltas, trajectory=arr)


def _is_affine_seq(traj) -> bool:
    return len(traj) > 0 and isinstance(traj[0], RigidAffine)


def select_peaks(profile, p: int, k: int) -> list[int]:
    """Greedy peak picking with exclusion radius ``2k + 1``.

    Samples are visited in order of decreasing jerk (ties: lower index
    first); a sample is taken unless an already-selected index lies within
    ``2k`` of it, so any two picks differ by at least ``2k + 1``. Returns at
    most ``p`` indices into the profile, in selection order. An all-zero
    profile degenerates to index order (see ``JerkProfile.low_signal``).
    """
    deltas = np.asarray(getattr(profile, "deltas", profile), dtype=np.float64)
    if p < 0:
        raise ValueError("p must be >= 0")
    sep = 2 * k + 1
    order = sorted(range(len(deltas)), key=lambda i: (-deltas[i], i))
    chosen: list[int] = []
    for i in order:
        if len(chosen) >= p:
            break
        if all(abs(i - j) >= sep for j in chosen):
            chosen.append(i)
    if isinstance(profile, JerkProfile):
        profile.peaks = list(chosen)
    return chosen


def clip_starts(peaks, n_frames: int, q: int, centered: bool = False) -> list[int]:
    """Map profile indices to the start frame of a ``q``-frame clip.

    Profile index ``i`` compares motions ``i`` and ``i + 1``; with per-pair
    motions that is the jerk at frame ``i + 1``. The clip starts there (or
    is centred on it) and is clamped to fit inside the video.
    """
    if n_frames < q:
        raise ValueError(f"video of {n_frames} frames is shorter than a {q}-frame clip")
    out = []
    for i in peaks:
        frame = int(i) + 1
        start = frame - q // 2 if centered else frame
        out.append(min(max(start, 0), n_frames - q))
    return out


PLACEMENTS = ("diag_main", "diag_anti")


@dataclass(frozen=True)
class CropSpec:
    """Patch size and diagonal placement of the three adaptation patches."""

    patch_h: int
    patch_w: int
    placement: str = "diag_main"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch size must be positive")

    @classmethod
    def default_for(cls, h: int, w: int, placement: str = "diag_main", minimum: int = 16) -> "CropSpec":
        return cls(max(math.ceil(h / 4), minimum), max(math.ceil(w / 4), minimum), placement)

    def with_placement(self, placement: str) -> "CropSpec":
        return CropSpec(self.patch_h, self.patch_w, placement)


def patch_origins(h: int, w: int, spec: CropSpec) -> list[tuple[int, int]]:
    """Top-left ``(y, x)`` of each patch; a single full-frame patch if the frame is too small."""
    ph, pw = spec.patch_h, spec.patch_w
    if h < 2 * ph or w < 2 * pw:
        return [(0, 0)]
    center = ((h - ph) // 2, (w - pw) // 2)
    if spec.placement == "diag_main":
        return [(0, 0), center, (h - ph, w - pw)]
    return [(0, w - pw), center, (h - ph, 0)]


def placement_for_step(step: int) -> str:
    return PLACEMENTS[step % 2]


def crop_windows(windows, spec: CropSpec, step: int = 0, masks=None):
    """Cut the step's diagonal patches out of every frame.

    ``windows`` is any array or tensor whose last two axes are ``(H, W)``
    (e.g. ``(r, 2k+1, 3, H, W)``); ``masks`` likewise. Placement alternates
    between the two diagonals with the parity of ``step``. Returns lists of
    patches (and mask patches) in placement order.
    """
    h, w = windows.shape[-2:]
    use = spec.with_placement(placement_for_step(step))
    origins = patch_origins(h, w, use)
    if origins == [(0, 0)] and (h < 2 * spec.patch_h or w < 2 * spec.patch_w):
        ph, pw = h, w
    else:
        ph, pw = use.patch_h, use.patch_w
    patches = [windows[..., y : y + ph, x : x + pw] for y, x in origins]
    if masks is None:
        return patches, None
    mpatches = [masks[..., y : y + ph, x : x + pw] for y, x in origins]
    return patches, mpatches


def video_jerk(video, flow=None, est=None, raw_units: bool = False) -> JerkProfile:
    """Jerk profile of a ``(T, H, W, 3)`` video from its per-pair rigid motions."""
    from .flow import RigidFlowProvider, frame_diagonal
    from .metrics import pair_motions

    flow = flow or RigidFlowProvider()
    motions = pair_motions(video, flow, est)
    h, w = np.asarray(video[0]).shape[:2]
    return jerk_profile(motions, diag=frame_diagonal(h, w), raw_units=raw_units)


def targeted_adapt(model, video, cfg, flow=None, fx=None, est=None, crop: CropSpec | None = None):
    """Adapt on the ``p`` highest-jerk clips using diagonal patches, then stabilize.

    Each selected clip is aligned to its first frame; every inner step
    crops three patches (diagonal placement alternating with the step
    parity) from the windows and the aligned mid frames and minimizes the
    inner objective plus ``lambda_rec`` times the photometric proxy. The
    total number of gradient steps is ``p * M`` (fewer if the profile runs
    out of separated peaks).
    """
    import torch

    from .flow import RigidFlowProvider
    from .losses import RandomFeatureExtractor
    from .meta import AdaptResult, adapt_on_clips
    from .stabilizer import stabilize_tensor
    from .validation import check_video, tensor_to_video, video_to_tensor

    flow = flow or RigidFlowProvider()
    fx = fx or RandomFeatureExtractor()
    if model.k != cfg.k:
        raise ValueError(f"config k={cfg.k} does not match model k={model.k}")
    arr = check_video(video, min_frames=cfg.q)
    n, h, w = arr.shape[:3]
    dtype = next(model.parameters()).dtype
    frames = video_to_tensor(arr, dtype=dtype)
    profile = video_jerk(arr, flow, est)
    peaks = select_peaks(profile, cfg.p, cfg.k)
    if profile.low_signal:
        log.warning("jerk profile is flat; peaks fall back to index order")
    starts = clip_starts(peaks, n, cfg.q, cfg.centered)
    spec = crop or CropSpec.default_for(h, w)

    def crops_fn(prep, step):
        wins, _ = crop_windows(prep.windows, spec, step)
        alis, msks = crop_windows(prep.aligned, spec, step, prep.masks)
        return list(zip(wins, alis, msks))

    theta, touched, losses, steps = adapt_on_clips(model, frames, starts, cfg, flow, fx, est, crops_fn)
    params = {k: v.detach() for k, v in theta.items()}
    with torch.no_grad():
        out = stabilize_tensor(model, frames, params=params)
    return AdaptResult(tensor_to_video(out), params, cfg.label, steps, starts, touched, losses,
                       peaks=list(peaks), low_signal=profile.low_signal)
