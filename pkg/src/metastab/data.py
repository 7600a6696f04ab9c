"""Frame storage, procedural content and the synthetic shake generator."""
from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import RigidAffine, read_trajectory_csv, trajectory_from_array, write_trajectory_csv
from .flow import warp_tensor
from .validation import check_video, tensor_to_video, video_to_tensor

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
FRAME_PATTERN = "{:06d}.png"


def quantize(frames: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so frames survive a PNG round trip bit-exactly."""
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class FrameStore:
    """A video held as ``(T, H, W, 3)`` floats in [0, 1] plus its frame rate."""

    frames: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.frames = check_video(self.frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def manifest(self) -> dict:
        return {"version": MANIFEST_VERSION, "fps": self.fps, "width": self.width,
                "height": self.height, "count": len(self)}


def save_frames(frames, path, fps: float = 30.0) -> Path:
    """Write numbered PNGs plus a manifest; the directory appears atomically."""
    store = frames if isinstance(frames, FrameStore) else FrameStore(frames, fps)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        data = np.round(np.clip(store.frames, 0, 1) * 255).astype(np.uint8)
        for i, frame in enumerate(data):
            Image.fromarray(frame, mode="RGB").save(tmp / FRAME_PATTERN.format(i), optimize=False)
        (tmp / MANIFEST_NAME).write_text(json.dumps(store.manifest(), sort_keys=True, indent=2) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_frames(path) -> FrameStore:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{path}: missing {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"{path}: no frames")
    if len(files) != manifest["count"]:
        raise ValueError(f"{path}: manifest lists {manifest['count']} frames, found {len(files)}")
    frames = []
    for f in files:
        arr = np.asarray(Image.open(f).convert("RGB"))
        if arr.shape[:2] != (manifest["height"], manifest["width"]):
            raise ValueError(f"{f}: size {arr.shape[1]}x{arr.shape[0]} differs from manifest "
                             f"{manifest['width']}x{manifest['height']}")
        frames.append(arr)
    return FrameStore(np.stack(frames).astype(np.float64) / 255.0, fps=float(manifest["fps"]))


def load_images(path) -> np.ndarray:
    """Load every image in a directory (PNG/JPEG) as one ``(n, H, W, 3)`` array.

    Images are centre-cropped to the smallest common size.
    """
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    if not files:
        raise ValueError(f"{path}: no images")
    imgs = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files]
    h = min(i.shape[0] for i in imgs)
    w = min(i.shape[1] for i in imgs)
    out = []
    for i in imgs:
        y0 = (i.shape[0] - h) // 2
        x0 = (i.shape[1] - w) // 2
        out.append(i[y0 : y0 + h, x0 : x0 + w])
    return np.stack(out)


# ---------------------------------------------------------------- content
def texture(h: int, w: int, rng: np.random.Generator, scales=(1.5, 4.0, 10.0)) -> np.ndarray:
    """Band-limited colour noise with structure at several scales, in [0, 1]."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    out = np.zeros((h, w, 3))
    for sigma in scales:
        noise = rng.standard_normal((h, w, 3))
        g = np.exp(-2 * (np.pi * sigma) ** 2 * (fx ** 2 + fy ** 2))
        layer = np.real(np.fft.ifft2(np.fft.fft2(noise, axes=(0, 1)) * g[..., None], axes=(0, 1)))
        out += layer / (layer.std() + 1e-12)
    out = (out - out.min()) / (out.max() - out.min())
    return quantize(out)


def texture_corpus(n: int, size: int = 128, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([texture(size, size, rng) for _ in range(n)])


def _warp_frames(frames: np.ndarray, params: np.ndarray) -> np.ndarray:
    t = video_to_tensor(frames, dtype=torch.float64)
    with torch.no_grad():
        out, _ = warp_tensor(t, torch.as_tensor(params, dtype=torch.float64))
    return tensor_to_video(out)


def _center_crop(frames: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = frames.shape[1:3]
    y0 = (H - h) // 2
    x0 = (W - w) // 2
    return frames[:, y0 : y0 + h, x0 : x0 + w]


def make_stable_video(n_frames: int, size: int = 48, margin: int = 16, seed: int = 0,
                      pan_px: float = 3.0, rot_deg: float = 0.5, fps: float = 30.0) -> FrameStore:
    """A smoothly panning view of a random texture, at ``size + 2*margin`` pixels.

    The camera path is a sum of the two lowest-frequency sinusoids, so it
    carries no high-frequency motion. The extra margin lets
    :func:`synth_shake` warp without exposing borders.
    """
    rng = np.random.default_rng(seed)
    big = size + 2 * margin
    pad = int(math.ceil(pan_px + big * math.radians(rot_deg))) + 2
    tex = texture(big + 2 * pad, big + 2 * pad, rng)
    t = np.arange(n_frames) / n_frames
    path = np.zeros((n_frames, 3))
    for j, amp in enumerate((math.radians(rot_deg), pan_px, pan_px)):
        phases = rng.uniform(0, 2 * np.pi, 2)
        path[:, j] = amp * (0.7 * np.sin(2 * np.pi * t + phases[0]) + 0.3 * np.sin(4 * np.pi * t + phases[1]))
    frames = _warp_frames(np.repeat(tex[None], n_frames, axis=0), path)
    return FrameStore(quantize(_center_crop(frames, big, big)), fps=fps)


@dataclass
class JitterSpec:
    """Camera-shake model: smooth base path plus band-limited jitter.

    Amplitudes are peak values. ``bands`` gives the inclusive DFT-bin range
    (in cycles per clip, so bin 1 is the slowest non-constant component) the
    jitter occupies. ``bursts > 0`` modulates the jitter with that many
    localized Gaussian envelopes.
    """

    rot_deg: float = 1.0
    trans_px: float = 2.0
    bands: tuple = (10, 20)
    bursts: int = 0
    burst_width: float = 0.04
    base_rot_deg: float = 0.0
    base_trans_px: float = 0.0

    def as_dict(self) -> dict:
        return {"rot_deg": self.rot_deg, "trans_px": self.trans_px, "bands": list(self.bands),
                "bursts": self.bursts, "burst_width": self.burst_width,
                "base_rot_deg": self.base_rot_deg, "base_trans_px": self.base_trans_px}


def band_limited_signal(n: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-peak random signal whose spectrum occupies bins ``lo..hi`` only."""
    lo = max(int(lo), 1)
    hi = min(int(hi), n // 2)
    if lo > hi:
        raise ValueError(f"empty jitter band {lo}..{hi} for {n} samples")
    spec = np.zeros(n // 2 + 1, dtype=complex)
    spec[lo : hi + 1] = rng.standard_normal(hi - lo + 1) + 1j * rng.standard_normal(hi - lo + 1)
    sig = np.fft.irfft(spec, n=n)
    peak = np.abs(sig).max()
    return sig / peak if peak > 0 else sig


def jitter_trajectory(n: int, spec: JitterSpec, seed: int = 0) -> np.ndarray:
    """``(n, 3)`` array of ``(theta, tx, ty)`` shake offsets."""
    rng = np.random.default_rng(seed)
    amps = np.array([math.radians(spec.rot_deg), spec.trans_px, spec.trans_px])
    out = np.zeros((n, 3))
    if np.any(amps > 0):
        env = np.ones(n)
        if spec.bursts > 0:
            centers = rng.uniform(0.1, 0.9, spec.bursts) * n
            tt = np.arange(n)
            env = sum(np.exp(-0.5 * ((tt - c) / (spec.burst_width * n)) ** 2) for c in centers)
            env = env / env.max()
        for j in range(3):
            sig = band_limited_signal(n, spec.bands[0], spec.bands[1], rng) * env
            peak = np.abs(sig).max()
            out[:, j] = amps[j] * (sig / peak if peak > 0 else sig)
    base = np.array([math.radians(spec.base_rot_deg), spec.base_trans_px, spec.base_trans_px])
    if np.any(base > 0):
        t = np.arange(n) / n
        for j in range(3):
            ph = rng.uniform(0, 2 * np.pi, 2)
            out[:, j] += base[j] * (0.7 * np.sin(2 * np.pi * t + ph[0]) + 0.3 * np.sin(4 * np.pi * t + ph[1]))
    return out


def max_displacement(params: np.ndarray, h: int, w: int) -> float:
    """Largest corner displacement of an ``h x w`` frame over a trajectory."""
    corners = np.array([[-1, -1], [1, -1], [-1, 1], [1, 1]]) * np.array([(w - 1) / 2, (h - 1) / 2])
    worst = 0.0
    for theta, tx, ty in np.atleast_2d(params):
        c, s = math.cos(theta), math.sin(theta)
        moved = corners @ np.array([[c, s], [-s, c]]) + np.array([tx, ty])
        worst = max(worst, float(np.abs(moved - corners).max()))
    return worst


@dataclass
class PairedEntry:
    video_id: str
    unstable: FrameStore
    stable: FrameStore | None = None
    trajectory: list | None = None


@dataclass
class PairedDataset:
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> PairedEntry:
        return self.entries[i]


def synth_shake(stable: FrameStore, spec: JitterSpec, seed: int = 0, margin: int = 16,
                video_id: str = "synth") -> PairedEntry:
    """Shake a stable video and crop both versions to the inner region.

    ``stable`` frames must exceed the output size by ``margin`` on every
    side; the recorded trajectory holds, per frame, the rigid motion taking
    stable content to its shaken position.
    """
    frames = stable.frames
    T, H, W = frames.shape[:3]
    h, w = H - 2 * margin, W - 2 * margin
    if h < 1 or w < 1:
        raise ValueError(f"margin {margin} leaves no output area in {W}x{H} frames")
    params = jitter_trajectory(T, spec, seed)
    needed = max_displacement(params, h, w)
    if needed > margin:
        raise ValueError(f"jitter displaces content by up to {needed:.2f}px but the margin is {margin}px")
    shaken = _center_crop(_warp_frames(frames, params), h, w)
    return PairedEntry(
        video_id=video_id,
        unstable=FrameStore(quantize(shaken), stable.fps),
        stable=FrameStore(_center_crop(frames, h, w).copy(), stable.fps),
        trajectory=trajectory_from_array(params),
    )


def synthetic_suite(n_videos: int, n_frames: int = 48, size: int = 48, spec: JitterSpec | None = None,
                    margin: int = 16, seed: int = 0, pan_px: float = 3.0,
                    rot_deg: float = 0.5) -> PairedDataset:
    """A deterministic set of shaken/stable pairs over independent textures."""
    spec = spec or JitterSpec()
    entries = []
    for i in range(n_videos):
        stable = make_stable_video(n_frames, size=size, margin=margin, seed=seed * 1000 + i, pan_px=pan_px,
                                   rot_deg=rot_deg)
        entries.append(synth_shake(stable, spec, seed=seed * 1000 + i + 500, margin=margin,
                                   video_id=f"synth_{i:03d}"))
    return PairedDataset(entries)


def save_paired_dataset(ds: PairedDataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for e in ds:
        d = root / e.video_id
        save_frames(e.unstable, d / "unstable")
        if e.stable is not None:
            save_frames(e.stable, d / "stable")
        if e.trajectory is not None:
            write_trajectory_csv(d / "trajectory.csv", e.trajectory)
    return root


def load_paired_dataset(root) -> PairedDataset:
    """Load ``root/<video_id>/{unstable,stable}/`` pairs in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    entries = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        if not (d / "unstable").is_dir():
            continue
        stable = load_frames(d / "stable") if (d / "stable").is_dir() else None
        unstable = load_frames(d / "unstable")
        if stable is not None and len(stable) != len(unstable):
            raise ValueError(f"{d}: stable and unstable lengths differ")
        traj = read_trajectory_csv(d / "trajectory.csv") if (d / "trajectory.csv").is_file() else None
        entries.append(PairedEntry(d.name, unstable, stable, traj))
    if not entries:
        raise ValueError(f"{root}: no videos found")
    return PairedDataset(entries)


def identity_entry(frames, video_id: str = "video") -> PairedEntry:
    """Wrap unpaired frames (adaptation-only data)."""
    return PairedEntry(video_id, frames if isinstance(frames, FrameStore) else FrameStore(frames))


__all__ = [
    "FrameStore", "JitterSpec", "PairedDataset", "PairedEntry", "RigidAffine", "load_frames",
    "load_images", "load_paired_dataset", "make_stable_video", "save_frames", "save_paired_dataset",
    "synth_shake", "synthetic_suite", "texture", "texture_corpus",
]
