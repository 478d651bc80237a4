"""Synthetic tracking sequences and their on-disk format.

Frames are float64 arrays shaped ``(C, H, W)`` with values in ``[0, 255]``.
A sequence stacks them as ``(T, C, H, W)`` next to a ``(T, 4)`` array of
``x, y, w, h`` groundtruth boxes.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MIN_FRAME_SIDE = 32


class ConfigError(ValueError):
    """Invalid simulation or experiment configuration."""


class SequenceFormatError(ValueError):
    """A sequence directory could not be parsed."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive area, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass
class Sequence:
    frames: np.ndarray  # (T, C, H, W) float64
    groundtruth: np.ndarray  # (T, 4) float64, xywh
    name: str = "seq"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.groundtruth = np.asarray(self.groundtruth, dtype=np.float64).reshape(-1, 4)
        validate_sequence(self)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def box(self, t: int) -> BoundingBox:
        return BoundingBox.from_array(self.groundtruth[t])

    def with_frames(self, frames: np.ndarray, name: str | None = None) -> "Sequence":
        return Sequence(frames, self.groundtruth.copy(), name or self.name)


def validate_frame(frame: np.ndarray) -> None:
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ValueError(f"frame must be (C, H, W) with C in (1, 3), got {frame.shape}")
    if frame.shape[1] < MIN_FRAME_SIDE or frame.shape[2] < MIN_FRAME_SIDE:
        raise ValueError(f"frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}")
    if frame.size and (frame.min() < 0.0 or frame.max() > 255.0):
        raise ValueError("pixel values must lie in [0, 255]")


def validate_sequence(seq: Sequence) -> None:
    if seq.frames.ndim != 4:
        raise ValueError(f"frames must be (T, C, H, W), got {seq.frames.shape}")
    T = seq.frames.shape[0]
    if T < 2:
        raise ValueError(f"a sequence needs at least 2 frames, got {T}")
    if seq.groundtruth.shape[0] != T:
        raise ValueError(f"{T} frames but {seq.groundtruth.shape[0]} groundtruth boxes")
    validate_frame(seq.frames[0])
    if seq.frames.min() < 0.0 or seq.frames.max() > 255.0:
        raise ValueError("pixel values must lie in [0, 255]")
    _, _, H, W = seq.frames.shape
    gt = seq.groundtruth
    if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
        raise ValueError("groundtruth boxes must have positive area")
    outside = (gt[:, 0] >= W) | (gt[:, 1] >= H) | (gt[:, 0] + gt[:, 2] <= 0) | (gt[:, 1] + gt[:, 3] <= 0)
    if np.any(outside):
        raise ValueError(f"groundtruth box {int(np.argmax(outside)) + 1} does not intersect the frame")


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    T: int = 30
    width: int = 128
    height: int = 128
    channels: int = 1
    target_size: tuple[float, float] = (26.0, 38.0)
    motion: float = 4.0
    scale_drift: float = 1.02
    texture_amplitude: float = 50.0
    noise_sigma: float = 2.0
    # per-frame blend rate from the initial target texture to a second one
    appearance_drift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "target_size", tuple(float(v) for v in self.target_size))

    def validate(self) -> None:
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.width < MIN_FRAME_SIDE or self.height < MIN_FRAME_SIDE:
            raise ConfigError(f"frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}")
        lo, hi = self.target_size
        if not 0 < lo <= hi:
            raise ConfigError("target_size must be an increasing pair of positive sizes")
        if self.motion < 0:
            raise ConfigError("motion must be non-negative")
        if not 0.9 <= self.scale_drift <= 1.1:
            raise ConfigError("scale_drift must lie in [0.9, 1.1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0 <= self.appearance_drift <= 1:
            raise ConfigError("appearance_drift must lie in [0, 1]")
        if hi + 2 * self.motion > min(self.width, self.height):
            raise ConfigError(
                f"target size {hi} plus motion {self.motion} does not fit a "
                f"{self.width}x{self.height} frame"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sim keys: {sorted(unknown)}")
        d = dict(d)
        if "target_size" in d:
            d["target_size"] = tuple(float(v) for v in d["target_size"])
        return cls(**d)


def _smooth_texture(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(0, sigma, sigma), mode="wrap")
    field -= field.mean()
    return field / (np.abs(field).max() + 1e-12)


def _target_texture(rng: np.random.Generator, channels: int, size: int = 32) -> np.ndarray:
    """High-contrast checker/gradient mix in [0, 255] on a ``size`` grid."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    cells = rng.integers(3, 6)
    checker = ((np.floor(xx * cells) + np.floor(yy * cells)) % 2) * 2 - 1
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    out = np.empty((channels, size, size))
    for c in range(channels):
        base = rng.uniform(60, 196)
        out[c] = base + 55 * checker + 80 * ramp
    return np.clip(out, 0, 255)


def _render_target(frame: np.ndarray, texture: np.ndarray, box: np.ndarray) -> None:
    x, y, w, h = box
    _, H, W = frame.shape
    size = texture.shape[-1]
    cols = np.arange(max(0, int(np.floor(x))), min(W, int(np.ceil(x + w))))
    rows = np.arange(max(0, int(np.floor(y))), min(H, int(np.ceil(y + h))))
    # pixel centers inside [x, x+w) x [y, y+h)
    cols = cols[(cols + 0.5 >= x) & (cols + 0.5 < x + w)]
    rows = rows[(rows + 0.5 >= y) & (rows + 0.5 < y + h)]
    if cols.size == 0 or rows.size == 0:
        return
    u = (cols + 0.5 - x) / w * size - 0.5
    v = (rows + 0.5 - y) / h * size - 0.5
    vv, uu = np.meshgrid(v, u, indexing="ij")
    for c in range(frame.shape[0]):
        patch = ndimage.map_coordinates(texture[c], [vv, uu], order=1, mode="nearest")
        frame[c, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = patch


def _reflect(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return lo
    for _ in range(4):
        if value > hi:
            value = 2 * hi - value
        elif value < lo:
            value = 2 * lo - value
        else:
            break
    return min(max(value, lo), hi)


def generate_sequence(cfg: SimConfig) -> Sequence:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C, H, W = cfg.channels, cfg.height, cfg.width

    background = 128.0 + cfg.texture_amplitude * _smooth_texture(rng, (C, H, W), sigma=4.0)
    texture = _target_texture(rng, C)
    # a spawned child stream leaves the main draws (and old seeds) untouched
    late = _target_texture(rng.spawn(1)[0], C) if cfg.appearance_drift > 0 else texture

    lo, hi = cfg.target_size
    side = rng.uniform(lo, hi)
    aspect = rng.uniform(0.8, 1.25)
    w = float(np.clip(side * math.sqrt(aspect), lo, hi))
    h = float(np.clip(side / math.sqrt(aspect), lo, hi))
    cx = rng.uniform(w / 2 + cfg.motion, W - w / 2 - cfg.motion)
    cy = rng.uniform(h / 2 + cfg.motion, H - h / 2 - cfg.motion)

    d_lo, d_hi = sorted((cfg.scale_drift, 1.0 / cfg.scale_drift))
    frames = np.empty((cfg.T, C, H, W))
    gt = np.empty((cfg.T, 4))
    for t in range(cfg.T):
        if t > 0:
            s = rng.uniform(d_lo, d_hi)
            nw, nh = w * s, h * s
            # keep size inside the configured range and the box inside the frame
            if lo <= min(nw, nh) and max(nw, nh) <= hi and \
                    nw / 2 <= cx <= W - nw / 2 and nh / 2 <= cy <= H - nh / 2:
                w, h = nw, nh
            dx, dy = rng.uniform(-cfg.motion, cfg.motion, size=2)
            cx = _reflect(cx + dx, w / 2, W - w / 2)
            cy = _reflect(cy + dy, h / 2, H - h / 2)
        box = np.array([cx - w / 2, cy - h / 2, w, h])
        frame = background.copy()
        mix = min(1.0, t * cfg.appearance_drift)
        _render_target(frame, (1 - mix) * texture + mix * late if mix else texture, box)
        if cfg.noise_sigma > 0:
            frame += rng.normal(0.0, cfg.noise_sigma, size=frame.shape)
        frames[t] = np.clip(frame, 0.0, 255.0)
        gt[t] = box
    return Sequence(frames, gt, name=f"synthetic-{cfg.seed:04d}")


# ---------------------------------------------------------------------------
# disk format

_FRAME_RE = re.compile(r"^(\d{8})\.(pgm|ppm)$")


def save_sequence(seq: Sequence, directory: str | Path, lossless: bool = False) -> None:
    """Write numbered PGM/PPM frames plus ``groundtruth.txt``.

    Pixels are rounded to 8 bits. With ``lossless`` the float64 frames are
    also dumped as ``%08d.f64`` together with ``meta.json``.
    """
    if seq is None or len(seq.frames) == 0:
        raise ValueError("cannot save an empty sequence")
    validate_sequence(seq)
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc

    T, C, H, W = seq.frames.shape
    ext = "pgm" if C == 1 else "ppm"
    for t, frame in enumerate(seq.frames, start=1):
        q = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        img = Image.fromarray(q[0], mode="L") if C == 1 else Image.fromarray(np.moveaxis(q, 0, -1), mode="RGB")
        img.save(out / f"{t:08d}.{ext}")
        if lossless:
            frame.astype("<f8").tofile(out / f"{t:08d}.f64")
    with open(out / "groundtruth.txt", "w") as fh:
        for box in seq.groundtruth:
            fh.write(",".join(repr(float(v)) for v in box) + "\n")
    if lossless:
        meta = {"width": W, "height": H, "channels": C, "T": T, "name": seq.name}
        (out / "meta.json").write_text(json.dumps(meta) + "\n")


def read_groundtruth(path: str | Path) -> np.ndarray:
    path = Path(path)
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = re.split(r"[,\s]+", line)
            try:
                values = [float(p) for p in parts]
            except ValueError:
                raise SequenceFormatError(f"{path}:{lineno}: unparsable box {line!r}") from None
            if len(values) != 4:
                raise SequenceFormatError(f"{path}:{lineno}: expected 4 values, got {len(values)}")
            boxes.append(values)
    return np.array(boxes, dtype=np.float64).reshape(-1, 4)


def _read_image(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise SequenceFormatError(f"{path}: cannot read image ({exc})") from exc
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64)[None]
    if img.mode == "RGB":
        return np.moveaxis(np.asarray(img, dtype=np.float64), -1, 0)
    raise SequenceFormatError(f"{path}: unsupported pixel format {img.mode!r}")


def load_sequence(directory: str | Path) -> Sequence:
    """Read a directory written by :func:`save_sequence` (or any
    ``%08d.pgm``/``.ppm`` + ``groundtruth.txt`` layout).

    If ``meta.json`` is present the float64 sidecar frames are used.
    """
    d = Path(directory)
    gt_path = d / "groundtruth.txt"
    if not gt_path.exists():
        raise SequenceFormatError(f"{gt_path}: missing groundtruth file")
    gt = read_groundtruth(gt_path)

    numbered = []
    for p in d.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            numbered.append((int(m.group(1)), p))
    numbered.sort()

    meta_path = d / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
            C, H, W, T = meta["channels"], meta["height"], meta["width"], meta["T"]
        except (ValueError, KeyError) as exc:
            raise SequenceFormatError(f"{meta_path}: bad header ({exc})") from exc
        frames = np.empty((T, C, H, W))
        for t in range(1, T + 1):
            p = d / f"{t:08d}.f64"
            raw = np.fromfile(p, dtype="<f8") if p.exists() else np.empty(0)
            if raw.size != C * H * W:
                raise SequenceFormatError(f"{p}: expected {C * H * W} values, got {raw.size}")
            frames[t - 1] = raw.reshape(C, H, W)
        name = meta.get("name", d.name)
    else:
        if not numbered:
            raise SequenceFormatError(f"{d}: no frame files")
        frames = np.stack([_read_image(p) for _, p in numbered])
        T = frames.shape[0]
        name = d.name

    if gt.shape[0] != T:
        raise SequenceFormatError(f"{gt_path}:{gt.shape[0]}: {T} frames but {gt.shape[0]} groundtruth lines")
    return Sequence(frames, gt, name=name)
