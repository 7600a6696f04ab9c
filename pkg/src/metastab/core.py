"""Domain types and rigid-affine algebra.

Rotation is stored in radians. Pixel coordinates put the origin at the
top-left corner with x to the right and y downward. ``RigidAffine`` itself
acts on plain coordinates; image-level operations (flow rendering, warping)
apply it about the frame centre.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRAJECTORY_HEADER = ("t", "theta_rad", "tx_px", "ty_px")


def _wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    wrapped = math.atan2(math.sin(theta), math.cos(theta))
    if wrapped == -math.pi:
        return math.pi
    return wrapped


@dataclass(frozen=True)
class RigidAffine:
    """Rotation by ``theta`` followed by translation ``(tx, ty)``."""

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        for name in ("theta", "tx", "ty"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"RigidAffine.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)

    @classmethod
    def identity(cls) -> "RigidAffine":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def rotation(cls, theta: float) -> "RigidAffine":
        return cls(theta, 0.0, 0.0)

    @classmethod
    def translation(cls, tx: float, ty: float) -> "RigidAffine":
        return cls(0.0, tx, ty)

    @classmethod
    def from_matrix(cls, m) -> "RigidAffine":
        m = np.asarray(m, dtype=float)
        if m.shape not in {(3, 3), (2, 3)}:
            raise ValueError(f"expected a 2x3 or 3x3 matrix, got shape {m.shape}")
        return cls(math.atan2(m[1, 0], m[0, 0]), m[0, 2], m[1, 2])

    def to_matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]])

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.tx, self.ty])

    def __matmul__(self, other: "RigidAffine") -> "RigidAffine":
        return compose(self, other)


def compose(a: RigidAffine, b: RigidAffine) -> RigidAffine:
    """Return ``a . b``: apply ``b`` first, then ``a``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return RigidAffine(
        _wrap_angle(a.theta + b.theta),
        c * b.tx - s * b.ty + a.tx,
        s * b.tx + c * b.ty + a.ty,
    )


def invert(a: RigidAffine) -> RigidAffine:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return RigidAffine(
        _wrap_angle(-a.theta),
        -(c * a.tx + s * a.ty),
        -(-s * a.tx + c * a.ty),
    )


def apply_to_point(a: RigidAffine, pt) -> np.ndarray:
    """Homogeneous multiply then dehomogenize."""
    x, y = pt
    h = a.to_matrix() @ np.array([x, y, 1.0])
    return h[:2] / h[2]


def identity_trajectory(n: int) -> list[RigidAffine]:
    return [RigidAffine.identity() for _ in range(n)]


def trajectory_to_array(traj: Sequence[RigidAffine]) -> np.ndarray:
    """Stack a trajectory into an ``(n, 3)`` array of ``(theta, tx, ty)``."""
    if len(traj) == 0:
        return np.zeros((0, 3))
    return np.stack([a.as_array() for a in traj])


def trajectory_from_array(arr) -> list[RigidAffine]:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array, got shape {arr.shape}")
    return [RigidAffine(*row) for row in arr]


def format_trajectory_csv(traj: Sequence[RigidAffine]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAJECTORY_HEADER)
    for t, a in enumerate(traj):
        writer.writerow([t, repr(a.theta), repr(a.tx), repr(a.ty)])
    return buf.getvalue()


def write_trajectory_csv(path, traj: Sequence[RigidAffine]) -> Path:
    path = Path(path)
    path.write_text(format_trajectory_csv(traj), encoding="utf-8", newline="")
    return path


def read_trajectory_csv(path) -> list[RigidAffine]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != TRAJECTORY_HEADER:
            raise ValueError(f"{path}: bad trajectory header {header!r}")
        rows = [row for row in reader if row]
    out = []
    for expected_t, row in enumerate(rows):
        if int(row[0]) != expected_t:
            raise ValueError(f"{path}: rows must be consecutive from t=0 (row {expected_t} has t={row[0]})")
        out.append(RigidAffine(float(row[1]), float(row[2]), float(row[3])))
    return out


@dataclass(frozen=True)
class Frame:
    """An ``H x W x 3`` image with intensities in [0, 1] at time step ``index``."""

    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"Frame pixels must be HxWx3 with H, W >= 1, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("Frame pixels must be finite")
        if self.index < 0:
            raise ValueError("Frame index must be >= 0")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


FLOW_KINDS = ("conventional", "global")


@dataclass(frozen=True)
class FlowField:
    """Dense ``H x W x 2`` displacement field in pixels."""

    vectors: np.ndarray
    kind: str = "global"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"flow vectors must be HxWx2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow contains non-finite values")
        if self.kind not in FLOW_KINDS:
            raise ValueError(f"flow kind must be one of {FLOW_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "vectors", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]


@dataclass(frozen=True)
class TemporalWindow:
    """``2k + 1`` consecutive frames around the mid frame ``mid_index``."""

    frames: np.ndarray
    mid_index: int

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[0] % 2 != 1:
            raise ValueError(f"window must hold an odd number of frames, got shape {frames.shape}")
        object.__setattr__(self, "frames", frames)

    @property
    def k(self) -> int:
        return self.frames.shape[0] // 2

    @property
    def mid(self) -> np.ndarray:
        return self.frames[self.k]


@dataclass(frozen=True)
class Clip:
    """``q = r + 2k`` consecutive frames starting at ``start_index`` of a video."""

    frames: np.ndarray
    start_index: int
    r: int
    k: int

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4:
            raise ValueError(f"clip frames must be (q, H, W, 3), got {frames.shape}")
        if frames.shape[0] != self.r + 2 * self.k:
            raise ValueError(f"clip length {frames.shape[0]} != r + 2k = {self.r + 2 * self.k}")
        object.__setattr__(self, "frames", frames)

    @property
    def q(self) -> int:
        return self.frames.shape[0]

    def windows(self) -> list[TemporalWindow]:
        k = self.k
        return [
            TemporalWindow(self.frames[i : i + 2 * k + 1], self.start_index + i + k)
            for i in range(self.r)
        ]


STRATEGIES = ("vanilla", "targeted")


@dataclass
class AdaptationConfig:
    """Test-time adaptation settings.

    ``M`` is the number of gradient steps taken per sampled task and ``count``
    the number of random clips used by the vanilla strategy (``None`` for
    one pass over all non-overlapping clips); the targeted strategy instead
    adapts on ``p`` jerk peaks.
    """

    M: int = 1
    alpha: float = 1e-4
    p: int = 10
    count: int | None = 100
    strategy: str = "vanilla"
    seed: int = 0
    lambda_s_in: float = 10.0
    lambda_q_in: float = 1.0
    lambda_rec: float = 1.0
    r: int = 5
    k: int = 2
    centered: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.count is not None and self.count < 0:
            raise ValueError("count must be >= 0 or None")
        if self.strategy == "targeted" and self.p < 0:
            raise ValueError("p must be >= 0 for targeted adaptation")
        if min(self.lambda_s_in, self.lambda_q_in, self.lambda_rec) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.r < 1 or self.k < 0:
            raise ValueError("need r >= 1 and k >= 0")

    @property
    def q(self) -> int:
        return self.r + 2 * self.k

    @property
    def label(self) -> str:
        """Run label in ``Strategy^(M)_count`` form, e.g. ``TargetedAdapt^(3)_10``."""
        if self.strategy == "targeted":
            return f"TargetedAdapt^({self.M})_{self.p}"
        return f"VanillaAdapt^({self.M})_{'all' if self.count is None else self.count}"

    def gradient_steps(self, n_frames: int | None = None) -> int:
        """Planned inner steps; a one-pass vanilla run needs the video length."""
        if self.strategy == "targeted":
            return self.p * self.M
        if self.count is None:
            if n_frames is None:
                raise ValueError("a one-pass vanilla run needs n_frames")
            return (max(n_frames - self.q, -1) // self.q + 1) * self.M
        return self.count * self.M


def as_trajectory(traj: Iterable) -> list[RigidAffine]:
    out = []
    for a in traj:
        out.append(a if isinstance(a, RigidAffine) else RigidAffine(*a))
    return out
