"""Synthetic moving-sprite clips with controlled frame deterioration.

Each clip shows one class-bearing sprite (class-specific shape and colour)
drifting over a textured background along a linear-plus-sinusoidal path.
Frames are independently marked degraded with a given probability and then
receive motion blur, an occluder, or both. The sprite's scale also jitters
every frame (mild deformation), which is not counted as a degradation.
"""
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .numcore.rng import Rng

OCCLUDER_GRAY = 0.5
SPEED_CATEGORIES = ("slow", "medium", "fast")

PALETTE = np.array([
    [0.9, 0.1, 0.1], [0.1, 0.8, 0.1], [0.15, 0.25, 0.95], [0.95, 0.9, 0.1],
    [0.9, 0.1, 0.9], [0.1, 0.9, 0.9], [1.0, 0.55, 0.0], [0.5, 0.1, 0.7],
])


@dataclass(frozen=True)
class AnnotatedBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int = 0
    track_id: int = 0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True)
class DegradationSpec:
    blur_len: int = 7
    blur_angle: float = None  # radians; None follows the sprite's motion
    occluder_fraction: float = 1.0
    degrade_prob: float = 0.5
    deformation: float = 0.05

    def __post_init__(self):
        if self.blur_len < 1:
            raise ValueError("blur_len must be >= 1")
        if not 0.0 <= self.occluder_fraction <= 1.0:
            raise ValueError("occluder_fraction must lie in [0, 1]")
        if not 0.0 <= self.degrade_prob <= 1.0:
            raise ValueError("degrade_prob must lie in [0, 1]")
        if not 0.0 <= self.deformation < 1.0:
            raise ValueError("deformation must lie in [0, 1)")


@dataclass
class Clip:
    frames: np.ndarray  # float32 [T, 3, H, W] in [0, 1]
    boxes: list  # one AnnotatedBox per frame
    degraded: np.ndarray  # bool [T]
    class_label: int
    seed: int
    occluders: list = field(default_factory=list, compare=False)

    @property
    def T(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        return (isinstance(other, Clip) and self.seed == other.seed
                and self.class_label == other.class_label
                and np.array_equal(self.frames, other.frames)
                and self.boxes == other.boxes
                and np.array_equal(self.degraded, other.degraded))


def iou(a, b):
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(w, 0.0) * max(h, 0.0)
    return inter / (a.area + b.area - inter)


def motion_iou(track, window=10):
    """Mean over frames of the mean IoU with the boxes ``window`` frames away.

    Tracks shorter than ``window + 1`` use the longest available offset.
    """
    if len(track) < 2:
        raise ValueError("motion IoU needs a track of at least 2 boxes")
    w = min(window, len(track) - 1)
    per_frame = []
    for t, box in enumerate(track):
        vals = [iou(box, track[s]) for s in (t - w, t + w) if 0 <= s < len(track)]
        if vals:
            per_frame.append(sum(vals) / len(vals))
    return sum(per_frame) / len(per_frame)


def speed_category(miou):
    if miou > 0.9:
        return "slow"
    if miou >= 0.7:
        return "medium"
    return "fast"


def motion_iou_category(track, window=10):
    """``(category, mIoU)`` with slow > 0.9 >= medium >= 0.7 > fast."""
    m = motion_iou(track, window)
    return speed_category(m), m


def blur_kernel(length, angle):
    """Normalized line kernel, bilinearly rasterized; point-symmetric."""
    if length < 1:
        raise ValueError("blur length must be >= 1")
    if length == 1:
        return np.ones((1, 1))
    r = int(np.ceil((length - 1) / 2)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    c, s = np.cos(angle), np.sin(angle)
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, length):
        x, y = r + t * c, r + t * s
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        k[y0, x0] += (1 - fx) * (1 - fy)
        k[y0, x0 + 1] += fx * (1 - fy)
        k[y0 + 1, x0] += (1 - fx) * fy
        k[y0 + 1, x0 + 1] += fx * fy
    k = 0.5 * (k + k[::-1, ::-1])
    return k / k.sum()


def apply_motion_blur(frame, length, angle=0.0):
    """Convolve every channel of ``[C, H, W]`` with a line kernel.

    Borders wrap around, which keeps the mean intensity unchanged for any
    kernel direction (reflection only does so for axis-aligned kernels).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if length == 1:
        return frame.copy()
    k = blur_kernel(length, angle)
    return np.stack([ndimage.convolve(ch, k, mode="wrap") for ch in frame])


def apply_occlusion(frame, box, fraction, rng):
    """Paste a gray rectangle of about ``fraction`` of the box area inside the box.

    Returns ``(new_frame, (x0, y0, x1, y1))`` in integer pixels.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("occluder fraction must lie in (0, 1]")
    x0, y0 = int(np.floor(box.x0)), int(np.floor(box.y0))
    x1, y1 = int(np.ceil(box.x1)), int(np.ceil(box.y1))
    bw, bh = x1 - x0, y1 - y0
    if bw < 1 or bh < 1:
        raise ValueError(f"degenerate box {box}")
    side = np.sqrt(fraction)
    ow = min(bw, max(1, int(round(bw * side))))
    oh = min(bh, max(1, int(round(bh * side))))
    ox = x0 + rng.integers(bw - ow + 1)
    oy = y0 + rng.integers(bh - oh + 1)
    out = np.array(frame, dtype=np.float64, copy=True)
    out[:, oy:oy + oh, ox:ox + ow] = OCCLUDER_GRAY
    return out, (ox, oy, ox + ow, oy + oh)


def shape_mask(class_id, h, w):
    """Boolean ``[h, w]`` silhouette for a class."""
    v, u = np.meshgrid(np.linspace(-1, 1, h) if h > 1 else np.zeros(1),
                       np.linspace(-1, 1, w) if w > 1 else np.zeros(1), indexing="ij")
    kind = class_id % 8
    r2 = u * u + v * v
    if kind == 0:
        m = np.ones_like(u, dtype=bool)
    elif kind == 1:
        m = r2 <= 1.0
    elif kind == 2:
        m = v >= 2 * np.abs(u) - 1
    elif kind == 3:
        m = (np.abs(u) < 0.35) | (np.abs(v) < 0.35)
    elif kind == 4:
        m = np.abs(u) + np.abs(v) <= 1.0
    elif kind == 5:
        m = (r2 <= 1.0) & (r2 >= 0.3)
    elif kind == 6:
        m = np.abs(v) < 0.4
    else:
        m = np.abs(u) < 0.4
    return m


def _fold(x, lo, hi):
    """Reflect ``x`` into ``[lo, hi]`` (triangle wave)."""
    span = hi - lo
    if span <= 0:
        return np.full_like(x, lo)
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    base = rng.uniform(0.3, 0.6) + rng.uniform(-0.05, 0.05, size=3)
    tex = np.zeros((H, W))
    for _ in range(2):
        fx, fy = rng.uniform(-6, 6), rng.uniform(-6, 6)
        tex += 0.06 * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return np.clip(base[:, None, None] + tex[None], 0.0, 1.0)


def gen_clip(seed, T, H, W, num_classes, spec=None):
    """Generate one clip; every pixel is a pure function of the arguments."""
    spec = spec or DegradationSpec()
    if min(T, H, W, num_classes) < 1:
        raise ValueError("clip dimensions must be positive")
    size = max(3.0, 0.3 * min(H, W))
    if size * (1 + spec.deformation) > min(H, W):
        raise ValueError(f"sprite of size {size:.1f} does not fit a {H}x{W} frame")
    rng = Rng(seed, stream=0x5EED)
    cls = rng.integers(num_classes)
    color = np.clip(PALETTE[cls % len(PALETTE)] * rng.uniform(0.85, 1.0), 0, 1)
    bg = _background(rng.spawn("background"), H, W)

    motion = rng.spawn("motion")
    speed = 1.2 * motion.uniform() ** 2
    heading = motion.uniform(0, 2 * np.pi)
    amp = 0.8 * motion.uniform()
    omega = motion.uniform(0.3, 1.2)
    phase = motion.uniform(0, 2 * np.pi)
    scales = 1.0 + spec.deformation * motion.uniform(-1, 1, size=T)
    half = size * (1 + spec.deformation) / 2
    cx0, cy0 = motion.uniform(half, W - half), motion.uniform(half, H - half)
    t = np.arange(T, dtype=np.float64)
    wobble = amp * np.sin(omega * t + phase)
    cx = _fold(cx0 + speed * np.cos(heading) * t - wobble * np.sin(heading), half, W - half)
    cy = _fold(cy0 + speed * np.sin(heading) * t + wobble * np.cos(heading), half, H - half)

    deg = rng.spawn("degrade")
    flags_u = deg.uniform(size=T)
    kind_u = deg.integers(3, size=T)
    occl_rng = deg.spawn("occluder")
    kinds = []
    if spec.blur_len > 1:
        kinds.append("blur")
    if spec.occluder_fraction > 0:
        kinds.append("occlusion")
    if len(kinds) == 2:
        kinds.append("both")

    frames = np.empty((T, 3, H, W), dtype=np.float32)
    boxes, flags, occluders = [], np.zeros(T, dtype=bool), []
    for i in range(T):
        sz = size * scales[i]
        x0 = int(np.clip(round(cx[i] - sz / 2), 0, W - 1))
        y0 = int(np.clip(round(cy[i] - sz / 2), 0, H - 1))
        x1 = int(min(W, max(x0 + 1, round(cx[i] - sz / 2) + round(sz))))
        y1 = int(min(H, max(y0 + 1, round(cy[i] - sz / 2) + round(sz))))
        box = AnnotatedBox(float(x0), float(y0), float(x1), float(y1), cls, 0)
        img = bg.copy()
        mask = shape_mask(cls, y1 - y0, x1 - x0)
        patch = img[:, y0:y1, x0:x1]
        patch[:, mask] = color[:, None]
        occ = None
        if kinds and flags_u[i] < spec.degrade_prob:
            flags[i] = True
            kind = kinds[kind_u[i] % len(kinds)]
            if kind in ("occlusion", "both"):
                img, occ = apply_occlusion(img, box, spec.occluder_fraction, occl_rng)
            if kind in ("blur", "both"):
                angle = spec.blur_angle if spec.blur_angle is not None else heading
                img = apply_motion_blur(img, spec.blur_len, angle)
        frames[i] = np.clip(img, 0.0, 1.0)
        boxes.append(box)
        occluders.append(occ)
    return Clip(frames, boxes, flags, cls, int(seed), occluders)


def gen_dataset(n_clips, T, H, W, num_classes, spec=None, seed=0):
    """``n_clips`` clips with per-clip seeds derived from ``seed``."""
    seeds = Rng(seed, stream=0xDA7A).random_raw(2 * n_clips).reshape(-1, 2) if n_clips else np.zeros((0, 2))
    return [gen_clip(int(a) | (int(b) << 32), T, H, W, num_classes, spec) for a, b in seeds]


# --- dataset files -----------------------------------------------------------

DATASET_MAGIC = b"STPV"
DATASET_VERSION = 1


def write_dataset(clips, path):
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(clips)))
        for c in clips:
            T, _, H, W = c.frames.shape
            f.write(struct.pack("<QIIII", c.seed, T, H, W, c.class_label))
            f.write(np.ascontiguousarray(c.frames, dtype="<f4").tobytes())
            for b in c.boxes:
                f.write(struct.pack("<ffffII", b.x0, b.y0, b.x1, b.y1, b.class_id, b.track_id))
            f.write(np.asarray(c.degraded, dtype=np.uint8).tobytes())


def _read(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated dataset: wanted {n} bytes, got {len(buf)}")
    return buf


def read_dataset(path):
    clips = []
    with open(path, "rb") as f:
        magic = _read(f, 4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}")
        version, count = struct.unpack("<II", _read(f, 8))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        for _ in range(count):
            seed, T, H, W, cls = struct.unpack("<QIIII", _read(f, 24))
            frames = np.frombuffer(_read(f, 4 * T * 3 * H * W), dtype="<f4").astype(np.float32)
            frames = frames.reshape(T, 3, H, W)
            boxes = [AnnotatedBox(*struct.unpack("<ffffII", _read(f, 24))) for _ in range(T)]
            flags = np.frombuffer(_read(f, T), dtype=np.uint8).astype(bool)
            clips.append(Clip(frames, boxes, flags, cls, seed))
        if f.read(1):
            raise FormatError("trailing bytes after dataset")
    return clips
