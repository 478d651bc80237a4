"""Two-branch tracking-by-detection model with exact input gradients.

Pipeline per proposal: bilinear crop (P x P x C) -> linear (H) -> ReLU ->
{classification head (2), regression head (4)}. Everything is plain numpy
in float64; the backward pass is written out by hand so gradients with
respect to frame pixels are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .seqio import BoundingBox, Sequence

TARGET, BACKGROUND, IGNORE = 0, 1, -1
POS_IOU, NEG_IOU = 0.7, 0.3
PIXEL_MEAN, PIXEL_SCALE = 127.5, 127.5
MIN_BOX_SIDE = 4.0
REG_IOU = POS_IOU


class LabelingError(RuntimeError):
    """Proposals yielded no positive and no negative label."""


# ---------------------------------------------------------------------------
# boxes


def _as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, BoundingBox):
        return boxes.as_array()[None]
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def iou(a, b) -> np.ndarray | float:
    """Intersection over union of xywh boxes; broadcasts over leading dims."""
    scalar = isinstance(a, BoundingBox) and isinstance(b, BoundingBox)
    a = a.as_array() if isinstance(a, BoundingBox) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, BoundingBox) else np.asarray(b, dtype=np.float64)
    ix = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    iy = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    # edge differences round slightly differently from w * h
    out = np.clip(out, 0.0, 1.0)
    return float(out) if scalar else out


def center_error(a, b) -> np.ndarray:
    a, b = _as_boxes(a), _as_boxes(b)
    return np.hypot(a[:, 0] + a[:, 2] / 2 - b[:, 0] - b[:, 2] / 2,
                    a[:, 1] + a[:, 3] / 2 - b[:, 1] - b[:, 3] / 2)


def encode_reg(box, anchor) -> np.ndarray:
    """Center/log-size offsets of ``box`` relative to ``anchor`` (both xywh)."""
    b, a = _as_boxes(box), _as_boxes(anchor)
    out = np.stack([
        (b[:, 0] + b[:, 2] / 2 - a[:, 0] - a[:, 2] / 2) / a[:, 2],
        (b[:, 1] + b[:, 3] / 2 - a[:, 1] - a[:, 3] / 2) / a[:, 3],
        np.log(b[:, 2] / a[:, 2]),
        np.log(b[:, 3] / a[:, 3]),
    ], axis=1)
    return out[0] if isinstance(box, BoundingBox) and isinstance(anchor, BoundingBox) else out


def decode_reg(offsets, anchor) -> np.ndarray:
    t = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    a = _as_boxes(anchor)
    w = a[:, 2] * np.exp(t[:, 2])
    h = a[:, 3] * np.exp(t[:, 3])
    cx = a[:, 0] + a[:, 2] / 2 + t[:, 0] * a[:, 2]
    cy = a[:, 1] + a[:, 3] / 2 + t[:, 1] * a[:, 3]
    out = np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)
    return out[0] if np.ndim(offsets) == 1 else out


def clip_box(box: np.ndarray, frame_hw: tuple[int, int]) -> np.ndarray:
    """Bound size to [MIN_BOX_SIDE, frame side] and keep the center in frame."""
    H, W = frame_hw
    b = np.array(box, dtype=np.float64).reshape(-1, 4)
    w = np.clip(b[:, 2], MIN_BOX_SIDE, W)
    h = np.clip(b[:, 3], MIN_BOX_SIDE, H)
    cx = np.clip(b[:, 0] + b[:, 2] / 2, 0, W)
    cy = np.clip(b[:, 1] + b[:, 3] / 2, 0, H)
    out = np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)
    return out[0] if np.ndim(box) == 1 else out


# ---------------------------------------------------------------------------
# proposals and labels


def sample_proposals(center, n: int, rng: np.random.Generator,
                     frame_hw: tuple[int, int] | None = None,
                     trans_std: float = 0.3, max_scale: float = 1.3) -> np.ndarray:
    """``n`` boxes around ``center``; row 0 is ``center`` itself.

    Translations are Gaussian with std ``trans_std * sqrt(w h)``; scales are
    log-uniform in ``[1/max_scale, max_scale]``. With ``frame_hw`` the boxes
    are clipped so their centers stay in the frame.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    c = _as_boxes(center)[0]
    out = np.empty((n, 4))
    out[0] = c
    if n > 1:
        k = n - 1
        std = trans_std * np.sqrt(c[2] * c[3])
        shift = rng.normal(0.0, std, size=(k, 2))
        scale = np.exp(rng.uniform(-np.log(max_scale), np.log(max_scale), size=k))
        w, h = c[2] * scale, c[3] * scale
        cx = c[0] + c[2] / 2 + shift[:, 0]
        cy = c[1] + c[3] / 2 + shift[:, 1]
        out[1:] = np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)
    if frame_hw is not None:
        out[1:] = clip_box(out[1:], frame_hw)
    return out


@dataclass
class LabeledProposals:
    boxes: np.ndarray  # (N, 4)
    labels: np.ndarray  # (N,) in {TARGET, BACKGROUND, IGNORE}
    reg_target: BoundingBox
    overlaps: np.ndarray | None = None  # (N,) IoU with reg_target

    @property
    def cls_onehot(self) -> np.ndarray:
        """(N, 2) pairs; IGNORE rows are zero."""
        out = np.zeros((len(self.labels), 2))
        out[self.labels == TARGET, 0] = 1.0
        out[self.labels == BACKGROUND, 1] = 1.0
        return out

    @property
    def positives(self) -> np.ndarray:
        return self.labels == TARGET

    def reg_mask(self, min_iou: float = POS_IOU) -> np.ndarray:
        """Proposals that carry a regression target."""
        if self.overlaps is None:
            self.overlaps = iou(self.boxes, self.reg_target.as_array())
        return self.positives | (self.overlaps >= min_iou)


def assign_labels(boxes, reference: BoundingBox) -> LabeledProposals:
    boxes = _as_boxes(boxes)
    if len(boxes) == 0:
        raise ValueError("no proposals to label")
    ov = iou(boxes, reference.as_array())
    labels = np.full(len(boxes), IGNORE, dtype=np.int64)
    labels[ov >= POS_IOU] = TARGET
    labels[ov <= NEG_IOU] = BACKGROUND
    if not np.any(labels != IGNORE):
        raise LabelingError("no positive or negative proposal")
    return LabeledProposals(boxes, labels, reference, ov)


def sample_labeled(reference: BoundingBox, n: int, rng: np.random.Generator,
                   frame_hw: tuple[int, int], retries: int = 10, **kw) -> LabeledProposals:
    for _ in range(retries):
        boxes = sample_proposals(reference, n, rng, frame_hw, **kw)
        try:
            return assign_labels(boxes, reference)
        except LabelingError:
            continue
    raise LabelingError(f"labeling degenerate after {retries} attempts")


# ---------------------------------------------------------------------------
# bilinear crop


@dataclass
class CropSampler:
    """Sparse linear map from frame pixels to proposal crops.

    ``index[n, i, j, k]`` is the flat (row * W + col) position of the k-th
    bilinear neighbour of grid point (i, j) in proposal n; ``weight`` holds
    the matching interpolation weight.
    """
    index: np.ndarray
    weight: np.ndarray
    frame_hw: tuple[int, int]

    @classmethod
    def build(cls, boxes, P: int, frame_hw: tuple[int, int]) -> "CropSampler":
        H, W = frame_hw
        b = _as_boxes(boxes)
        grid = (np.arange(P) + 0.5) / P
        # pixel j has its center at continuous coordinate j + 0.5
        u = b[:, 0:1] + grid[None] * b[:, 2:3] - 0.5  # (N, P) columns
        v = b[:, 1:2] + grid[None] * b[:, 3:4] - 0.5  # (N, P) rows
        u = np.clip(u, 0.0, W - 1.0)
        v = np.clip(v, 0.0, H - 1.0)
        x0 = np.minimum(np.floor(u), W - 2).astype(np.int64)
        y0 = np.minimum(np.floor(v), H - 2).astype(np.int64)
        fx, fy = u - x0, v - y0
        x0, fx = x0[:, None, :], fx[:, None, :]
        y0, fy = y0[:, :, None], fy[:, :, None]
        base = y0 * W + x0
        index = np.stack([base, base + 1, base + W, base + W + 1], axis=-1)
        weight = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
        return cls(index, weight, (H, W))

    def crop(self, frame: np.ndarray) -> np.ndarray:
        """(C, H, W) frame -> (N, C, P, P) crops."""
        flat = frame.reshape(frame.shape[0], -1)
        vals = flat[:, self.index]  # (C, N, P, P, 4)
        return np.moveaxis((vals * self.weight).sum(-1), 0, 1)

    def adjoint(self, grad_crops: np.ndarray) -> np.ndarray:
        """Scatter-add (N, C, P, P) crop gradients back onto a (C, H, W) field."""
        H, W = self.frame_hw
        C = grad_crops.shape[1]
        idx = self.index.ravel()
        out = np.empty((C, H * W))
        for c in range(C):
            wts = (grad_crops[:, c, :, :, None] * self.weight).ravel()
            out[c] = np.bincount(idx, weights=wts, minlength=H * W)
        return out.reshape(C, H, W)


def crop_resize(frame: np.ndarray, box, P: int) -> np.ndarray:
    """Bilinear P x P crop(s) of ``frame`` over ``box`` with clamp-to-edge.

    A single :class:`BoundingBox` gives a (C, P, P) patch; an (N, 4) array
    gives (N, C, P, P).
    """
    crops = CropSampler.build(box, P, frame.shape[1:]).crop(frame)
    return crops[0] if isinstance(box, BoundingBox) else crops


# ---------------------------------------------------------------------------
# model


@dataclass
class TrackerModel:
    W1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    Wc: np.ndarray  # (2, H)
    bc: np.ndarray  # (2,)
    Wr: np.ndarray | None = None  # (4, H)
    br: np.ndarray | None = None  # (4,)
    P: int = 16
    channels: int = 1
    lam: float = 1.0
    # proposals with at least this IoU get a regression target
    reg_iou: float = REG_IOU
    # the regression head predicts anchor offsets divided by these
    reg_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)

    @property
    def reg_enabled(self) -> bool:
        return self.Wr is not None

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, P: int = 16, hidden: int = 64, channels: int = 1,
             lam: float = 1.0, reg_enabled: bool = True,
             reg_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2),
             init_scale: float = 1.0, reg_iou: float = REG_IOU) -> "TrackerModel":
        D = P * P * channels
        m = cls(
            W1=rng.normal(0.0, init_scale / np.sqrt(D), size=(hidden, D)),
            b1=np.zeros(hidden),
            Wc=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(2, hidden)),
            bc=np.zeros(2),
            P=P, channels=channels, lam=lam, reg_iou=reg_iou, reg_std=tuple(float(v) for v in reg_std),
        )
        if reg_enabled:
            m.Wr = np.zeros((4, hidden))
            m.br = np.zeros(4)
        return m

    def params(self) -> dict[str, np.ndarray]:
        names = ["W1", "b1", "Wc", "bc"] + (["Wr", "br"] if self.reg_enabled else [])
        return {k: getattr(self, k) for k in names}

    def copy(self) -> "TrackerModel":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())

    # checkpoint ------------------------------------------------------------

    def to_json(self) -> str:
        weights = {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params().items()}
        doc = {"P": self.P, "H": self.hidden, "channels": self.channels, "lambda": self.lam,
               "reg_enabled": self.reg_enabled, "reg_iou": self.reg_iou, "reg_std": list(self.reg_std), "weights": weights}
        # json writes floats with repr, which is the shortest roundtrip form
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TrackerModel":
        doc = json.loads(text)
        w = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["weights"].items()}
        m = cls(w["W1"], w["b1"], w["Wc"], w["bc"], w.get("Wr"), w.get("br"),
                P=doc["P"], channels=doc.get("channels", 1), lam=doc["lambda"],
                reg_iou=doc.get("reg_iou", REG_IOU),
                reg_std=tuple(doc.get("reg_std", (0.1, 0.1, 0.2, 0.2))))
        if m.reg_enabled != doc["reg_enabled"] or m.hidden != doc["H"]:
            raise ValueError("checkpoint header disagrees with its weights")
        return m


@dataclass
class ForwardCache:
    sampler: CropSampler
    x: np.ndarray  # (N, D) normalized crops
    pre: np.ndarray  # (N, H)
    hid: np.ndarray  # (N, H)
    logits: np.ndarray  # (N, 2)
    reg: np.ndarray | None  # (N, 4)


def forward(model: TrackerModel, frame: np.ndarray, boxes) -> ForwardCache:
    boxes = boxes.boxes if isinstance(boxes, LabeledProposals) else _as_boxes(boxes)
    sampler = CropSampler.build(boxes, model.P, frame.shape[1:])
    crops = sampler.crop(frame)
    x = (crops.reshape(len(boxes), -1) - PIXEL_MEAN) / PIXEL_SCALE
    pre = x @ model.W1.T + model.b1
    hid = np.maximum(pre, 0.0)
    logits = hid @ model.Wc.T + model.bc
    reg = hid @ model.Wr.T + model.br if model.reg_enabled else None
    return ForwardCache(sampler, x, pre, hid, logits, reg)


def backward(model: TrackerModel, cache: ForwardCache, d_logits: np.ndarray,
             d_reg: np.ndarray | None, wrt_input: bool = True,
             wrt_params: bool = False) -> tuple[np.ndarray | None, dict[str, np.ndarray] | None]:
    """Reverse pass from head gradients to the frame and/or the weights."""
    d_hid = d_logits @ model.Wc
    if d_reg is not None and model.reg_enabled:
        d_hid = d_hid + d_reg @ model.Wr
    d_pre = d_hid * (cache.pre > 0)
    grad_frame = None
    if wrt_input:
        d_x = d_pre @ model.W1 / PIXEL_SCALE
        N = d_x.shape[0]
        grad_frame = cache.sampler.adjoint(d_x.reshape(N, model.channels, model.P, model.P))
    grads = None
    if wrt_params:
        grads = {"W1": d_pre.T @ cache.x, "b1": d_pre.sum(0),
                 "Wc": d_logits.T @ cache.hid, "bc": d_logits.sum(0)}
        if model.reg_enabled:
            dr = np.zeros((len(d_logits), 4)) if d_reg is None else d_reg
            grads["Wr"] = dr.T @ cache.hid
            grads["br"] = dr.sum(0)
    return grad_frame, grads


# ---------------------------------------------------------------------------
# losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, onehot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row softmax cross-entropy and its logit gradient; zero rows give 0."""
    lsm = log_softmax(logits)
    active = onehot.sum(axis=1, keepdims=True)
    loss = -(onehot * lsm).sum(axis=1)
    grad = active * np.exp(lsm) - onehot
    return loss, grad


def smooth_l1(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-summed smooth-L1 (transition at 1) and its gradient."""
    a = np.abs(diff)
    loss = np.where(a < 1.0, 0.5 * diff ** 2, a - 0.5).sum(axis=1)
    grad = np.clip(diff, -1.0, 1.0)
    return loss, grad


@dataclass
class LossBreakdown:
    value: float
    cls: np.ndarray  # (N,) per-proposal L_c, 0 for IGNORE
    reg: np.ndarray  # (N,) per-proposal L_r, 0 for non-positives
    d_logits: np.ndarray
    d_reg: np.ndarray | None


class LossSpec(Protocol):
    def __call__(self, model: TrackerModel, cache: ForwardCache, lp: LabeledProposals) -> LossBreakdown: ...


def branch_losses(model: TrackerModel, cache: ForwardCache, boxes: np.ndarray,
                  cls_onehot: np.ndarray, reg_box, reg_mask: np.ndarray):
    """L_c against ``cls_onehot`` and masked L_r against ``reg_box`` with grads."""
    lc, dlc = cross_entropy(cache.logits, cls_onehot)
    if not model.reg_enabled:
        return lc, dlc, np.zeros(len(boxes)), None
    target = encode_reg(np.broadcast_to(_as_boxes(reg_box), boxes.shape), boxes) / np.asarray(model.reg_std)
    lr, dlr = smooth_l1(cache.reg - target)
    mask = reg_mask.astype(np.float64)
    return lc, dlc, lr * mask, dlr * mask[:, None]


def total_loss(model: TrackerModel, cache: ForwardCache, lp: LabeledProposals) -> LossBreakdown:
    """Summed cross-entropy plus lambda-weighted smooth-L1 over positives."""
    if not np.any(lp.labels != IGNORE):
        raise LabelingError("no labeled proposal")
    lc, dlc, lr, dlr = branch_losses(model, cache, lp.boxes, lp.cls_onehot, lp.reg_target,
                                     lp.reg_mask(model.reg_iou))
    if dlr is None:
        return LossBreakdown(float(lc.sum()), lc, lr, dlc, None)
    return LossBreakdown(float(lc.sum() + model.lam * lr.sum()), lc, lr, dlc, model.lam * dlr)


def loss_value(model: TrackerModel, frame: np.ndarray, lp: LabeledProposals,
               loss_spec: LossSpec = total_loss) -> float:
    return loss_spec(model, forward(model, frame, lp), lp).value


def input_gradient(model: TrackerModel, frame: np.ndarray, lp: LabeledProposals,
                   loss_spec: LossSpec = total_loss) -> np.ndarray:
    """d(loss)/d(frame) with the weights held fixed."""
    cache = forward(model, frame, lp)
    br = loss_spec(model, cache, lp)
    grad, _ = backward(model, cache, br.d_logits, br.d_reg, wrt_input=True)
    return grad


# ---------------------------------------------------------------------------
# training and tracking


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    batch: int = 64
    momentum: float = 0.9
    wide_fraction: float = 0.5
    wide_std: float = 1.0
    wide_scale: float = 2.0
    update_every: int = 0
    update_steps: int = 15
    n_proposals: int = 256

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def training_batch(reference: BoundingBox, frame_hw, cfg: TrainConfig,
                   rng: np.random.Generator) -> LabeledProposals:
    """Mix of near proposals and wide-spread background proposals."""
    n_wide = int(round(cfg.batch * cfg.wide_fraction))
    for _ in range(10):
        boxes = sample_proposals(reference, cfg.batch - n_wide, rng, frame_hw)
        if n_wide:
            wide = sample_proposals(reference, n_wide + 1, rng, frame_hw, trans_std=cfg.wide_std,
                                    max_scale=cfg.wide_scale)[1:]
            boxes = np.concatenate([boxes, wide])
        try:
            return assign_labels(boxes, reference)
        except LabelingError:
            continue
    raise LabelingError("labeling degenerate after 10 attempts")


def fit(model: TrackerModel, frame: np.ndarray, reference: BoundingBox, steps: int,
        lr: float, rng: np.random.Generator, cfg: TrainConfig | None = None
        ) -> tuple[TrackerModel, list[float]]:
    """SGD (with momentum) on the summed loss; returns a new model and losses."""
    cfg = cfg or TrainConfig()
    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    history = []
    for _ in range(steps):
        lp = training_batch(reference, frame.shape[1:], cfg, rng)
        cache = forward(model, frame, lp)
        br = total_loss(model, cache, lp)
        history.append(br.value)
        _, grads = backward(model, cache, br.d_logits, br.d_reg, wrt_input=False, wrt_params=True)
        for k, p in model.params().items():
            velocity[k] = cfg.momentum * velocity[k] - lr * grads[k]
            p += velocity[k]
    return model, history


def train_init(model: TrackerModel, frame1: np.ndarray, gt: BoundingBox, steps: int,
               lr: float, rng: np.random.Generator, cfg: TrainConfig | None = None
               ) -> tuple[TrackerModel, list[float]]:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return fit(model, frame1, gt, steps, lr, rng, cfg)


def online_update(model: TrackerModel, frame: np.ndarray, predicted: BoundingBox, steps: int,
                  lr: float, rng: np.random.Generator, cfg: TrainConfig | None = None) -> TrackerModel:
    if steps <= 0 or lr == 0:
        return model.copy()
    return fit(model, frame, predicted, steps, lr, rng, cfg)[0]


@dataclass(frozen=True)
class TrackState:
    location: BoundingBox
    t: int = 0


def scores(cache: ForwardCache) -> np.ndarray:
    """Target-vs-background log-odds per proposal."""
    return cache.logits[:, TARGET] - cache.logits[:, BACKGROUND]


def track_step(model: TrackerModel, frame: np.ndarray, prev: TrackState,
               rng: np.random.Generator, n: int = 256, motion_penalty: float = 0.0) -> TrackState:
    """Score proposals around ``prev`` and return the best one, refined.

    ``motion_penalty`` subtracts ``k * |center shift|^2 / (w h)`` from each
    proposal's log-odds, a displacement prior in the style of Siamese
    trackers' cosine window. Zero selects on the raw scores.
    """
    boxes = sample_proposals(prev.location, n, rng, frame.shape[1:])
    cache = forward(model, frame, boxes)
    s = scores(cache)
    if motion_penalty:
        p = prev.location
        cx, cy = p.center
        d2 = (boxes[:, 0] + boxes[:, 2] / 2 - cx) ** 2 + (boxes[:, 1] + boxes[:, 3] / 2 - cy) ** 2
        s = s - motion_penalty * d2 / (p.w * p.h)
    best = int(np.argmax(s))
    box = boxes[best]
    if model.reg_enabled:
        box = clip_box(decode_reg(cache.reg[best] * np.asarray(model.reg_std), box), frame.shape[1:])
    return TrackState(BoundingBox.from_array(box), prev.t + 1)


def track_sequence(model: TrackerModel, seq: Sequence, rng: np.random.Generator, n: int = 256,
                   motion_penalty: float = 0.0, updater=None) -> list[TrackState]:
    """One-pass tracking from the groundtruth box of frame 1."""
    state = TrackState(seq.box(0), 0)
    traj = [state]
    for t in range(1, len(seq)):
        state = track_step(model, seq.frames[t], state, rng, n, motion_penalty)
        if updater is not None:
            model = updater(model, seq.frames[t], state)
        traj.append(state)
    return traj
