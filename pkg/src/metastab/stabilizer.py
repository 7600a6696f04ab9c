"""Stabilization models and sliding-window inference.

A model maps a temporal window of ``2k + 1`` frames to a stabilized mid
frame. Windows are tensors of shape ``(B, 2k+1, 3, H, W)``. Models are plain
``nn.Module`` objects so parameters can be swapped functionally during
meta-learning (see :func:`regress`).
"""
from __future__ import annotations

import copy
import hashlib
from importlib.metadata import entry_points

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .validation import check_video, tensor_to_video, video_to_tensor

PLUGIN_GROUP = "metastab.stabilizers"


class ToyStabilizer(nn.Module):
    """Three-layer convolutional stabilizer with a residual on the mid frame.

    A zero-initialized 1x1 convolution over the stacked window runs in
    parallel with the three-layer branch, which lets the model learn a
    per-pixel temporal blend of the window directly. The final layer and
    the 1x1 skip start at zero, so a fresh model returns ``I_t`` exactly.

    Both residual branches are multiplied by ``res_scale``. With pixel-unit
    flow losses the raw gradients are large (norms around 1e3), and the
    scale keeps a plain SGD step of ``alpha = 1e-4`` a descent step.
    """

    arch = "toy-v1"

    def __init__(self, k: int = 2, hidden: int = 16, recurrent: bool = False, seed: int = 0,
                 res_scale: float = 0.1):
        super().__init__()
        if hidden > 64:
            raise ValueError("ToyStabilizer is limited to 64 channels")
        self.k = k
        self.hidden = hidden
        self.recurrent = recurrent
        self.seed = seed
        self.res_scale = res_scale
        gen = torch.Generator().manual_seed(seed)
        c_in = 3 * (2 * k + 1)
        self.conv1 = nn.Conv2d(c_in, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv3 = nn.Conv2d(hidden, 3, 3, padding=1)
        self.skip = nn.Conv2d(c_in, 3, 1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            for conv in (self.conv3, self.skip):
                conv.weight.zero_()
                conv.bias.zero_()

    def config(self) -> dict:
        return {"k": self.k, "hidden": self.hidden, "recurrent": self.recurrent, "seed": self.seed,
                "res_scale": self.res_scale}

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        B, n, C, H, W = windows.shape
        if n != 2 * self.k + 1:
            raise ValueError(f"expected windows of {2 * self.k + 1} frames, got {n}")
        x = windows.reshape(B, n * C, H, W)
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        return windows[:, self.k] + self.res_scale * (self.conv3(h) + self.skip(x))

    def regress(self, window) -> np.ndarray:
        """Stabilize a single window of ``(2k+1, H, W, 3)`` frames."""
        frames = getattr(window, "frames", window)
        t = video_to_tensor(check_video(frames, name="window"), dtype=self.conv1.weight.dtype)
        with torch.no_grad():
            out = self(t.unsqueeze(0))
        return tensor_to_video(out)[0]


def regress(model: nn.Module, windows: torch.Tensor, params: dict | None = None) -> torch.Tensor:
    """Run ``model`` on ``windows``, optionally with substitute parameters."""
    if params is None:
        return model(windows)
    return functional_call(model, params, (windows,))


def window_indices(n_frames: int, k: int) -> np.ndarray:
    """``(n_frames, 2k+1)`` frame indices with edge replication at both ends."""
    offsets = np.arange(-k, k + 1)
    return np.clip(np.arange(n_frames)[:, None] + offsets[None], 0, n_frames - 1)


def clip_windows(frames: torch.Tensor, k: int) -> torch.Tensor:
    """All full windows of a clip ``(q, C, H, W)`` -> ``(q - 2k, 2k+1, C, H, W)``."""
    q = frames.shape[0]
    if q < 2 * k + 1:
        raise ValueError(f"clip of {q} frames is shorter than a {2 * k + 1}-frame window")
    idx = torch.arange(q - 2 * k)[:, None] + torch.arange(2 * k + 1)[None]
    return frames[idx]


def stabilize_tensor(model: nn.Module, frames: torch.Tensor, params: dict | None = None,
                     recurrent: bool | None = None, batch: int = 16) -> torch.Tensor:
    """Sliding-window stabilization of ``(T, C, H, W)`` frames.

    Windows near the ends are filled by edge replication. In recurrent mode
    the past half of each window is replaced by the model's own previous
    outputs; ``I_0`` seeds the recurrence.
    """
    k = model.k
    recurrent = model.recurrent if recurrent is None else recurrent
    T = frames.shape[0]
    if T < 2 * k + 1:
        raise ValueError(f"video of {T} frames is shorter than the {2 * k + 1}-frame window")
    idx = torch.as_tensor(window_indices(T, k))
    if not recurrent:
        outs = [regress(model, frames[idx[s : s + batch]], params) for s in range(0, T, batch)]
        return torch.cat(outs, dim=0)
    outputs: list[torch.Tensor] = []
    for t in range(T):
        window = []
        for j, src in enumerate(idx[t].tolist()):
            offset = j - k
            if offset < 0 and t + offset >= 1:
                window.append(outputs[t + offset])
            else:
                window.append(frames[src])
        outputs.append(regress(model, torch.stack(window)[None], params)[0])
    return torch.stack(outputs)


def sliding_stabilize(model: nn.Module, video, recurrent: bool | None = None,
                      dtype: torch.dtype | None = torch.float64) -> np.ndarray:
    """Stabilize a ``(T, H, W, 3)`` video; returns a float64 array of the same shape.

    The model runs in ``dtype`` (a cast copy is used when it differs from the
    model's own), so a zero-residual model reproduces float64 input bitwise.
    ``dtype=None`` keeps the model's precision.
    """
    k = model.k
    arr = check_video(video, min_frames=2 * k + 1)
    own = next(model.parameters()).dtype
    if dtype is not None and dtype != own:
        model = copy.deepcopy(model).to(dtype)
    else:
        dtype = own
    with torch.no_grad():
        out = stabilize_tensor(model, video_to_tensor(arr, dtype=dtype), recurrent=recurrent)
    return tensor_to_video(out)


def clone_params(model: nn.Module) -> dict:
    """Detached copy of the model parameters (``theta_i <- theta``)."""
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def restore(model: nn.Module, snapshot: dict) -> nn.Module:
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(snapshot[name])
    return model


def params_hash(params) -> str:
    """SHA-256 over parameter names and raw bytes (order-independent)."""
    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def build_stabilizer(arch: str, config: dict) -> nn.Module:
    """Instantiate a model from its checkpoint ``arch`` tag.

    ``toy-v1`` is built in; ``plugin:<name>`` resolves an entry point in the
    ``metastab.stabilizers`` group, which must return an ``nn.Module`` with
    ``k`` and ``recurrent`` attributes and the window-to-frame call signature.
    """
    if arch == ToyStabilizer.arch:
        return ToyStabilizer(**config)
    if arch.startswith("plugin:"):
        name = arch.split(":", 1)[1]
        for ep in entry_points(group=PLUGIN_GROUP):
            if ep.name == name:
                return ep.load()(**config)
        raise LookupError(f"no stabilizer plugin named {name!r} in group {PLUGIN_GROUP}")
    raise ValueError(f"unknown stabilizer architecture {arch!r}")


def save_model(path, model: nn.Module, meta: dict | None = None, params: dict | None = None):
    """Write ``model`` (or substitute ``params``) to a checkpoint file."""
    from . import checkpoint

    state = params if params is not None else dict(model.named_parameters())
    arch = getattr(model, "arch", None) or f"plugin:{type(model).__name__}"
    return checkpoint.save(path, {n: t.detach().cpu().numpy() for n, t in state.items()}, arch,
                           meta={"config": model.config() if hasattr(model, "config") else {}, **(meta or {})},
                           seed=getattr(model, "seed", None), input_norm="unit-range")


def load_model(path) -> tuple[nn.Module, dict]:
    """Rebuild a stabilizer from a checkpoint; returns ``(model, header)``."""
    from . import checkpoint

    header, state = checkpoint.load(path)
    model = build_stabilizer(header["arch"], header["meta"].get("config", {}))
    names = {n for n, _ in model.named_parameters()}
    if names != set(state):
        raise checkpoint.CheckpointError(f"checkpoint tensors {sorted(state)} do not match model {sorted(names)}")
    restore(model, {n: torch.as_tensor(v) for n, v in state.items()})
    return model, header
