"""Input validation and array/tensor conversion helpers."""
from __future__ import annotations

import numpy as np
import torch


def check_frame(frame, name: str = "frame") -> np.ndarray:
    """Validate a single ``H x W x 3`` frame and return it as float64."""
    arr = np.asarray(getattr(frame, "pixels", frame), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_video(video, min_frames: int = 1, name: str = "video") -> np.ndarray:
    """Validate a ``(T, H, W, 3)`` video and return it as float64.

    Accepts an array, a list of frames, or anything with a ``frames``
    attribute (``FrameStore``, ``Clip``).
    """
    video = getattr(video, "frames", video)
    if isinstance(video, (list, tuple)):
        if len(video) == 0:
            raise ValueError(f"{name} has no frames")
        video = np.stack([check_frame(f, name=f"{name}[{i}]") for i, f in enumerate(video)])
    arr = np.asarray(video, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"{name} must have shape (T, H, W, 3), got {arr.shape}")
    if arr.shape[0] < min_frames:
        raise ValueError(f"{name} needs at least {min_frames} frames, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_flow(flow, name: str = "flow") -> np.ndarray:
    arr = np.asarray(getattr(flow, "vectors", flow), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"{name} must have shape (H, W, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, what: str = "sequences"):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def video_to_tensor(video, dtype=torch.float32) -> torch.Tensor:
    """``(T, H, W, 3)`` array -> ``(T, 3, H, W)`` tensor (tensors pass through)."""
    if isinstance(video, torch.Tensor):
        return video
    arr = np.asarray(video)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def tensor_to_video(t: torch.Tensor) -> np.ndarray:
    """``(T, 3, H, W)`` tensor -> ``(T, H, W, 3)`` float64 array."""
    return t.detach().cpu().double().permute(0, 2, 3, 1).numpy().copy()
