"""Iterative sign-gradient attack with temporal perturbation transfer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seqio import BoundingBox, Sequence
from .trackmodel import (
    IGNORE,
    ForwardCache,
    LabeledProposals,
    LossBreakdown,
    TrackerModel,
    TrackState,
    branch_losses,
    forward,
    input_gradient,
    sample_labeled,
    track_step,
)

BRANCHES = ("both", "cls", "reg")
REDRAW = ("iteration", "frame", "sequence")
TRANSFER = ("cumulative", "increment")


@dataclass
class AttackConfig:
    epsilon: float = 10.0
    M: int = 10
    offset_frac: float = 0.5
    max_scale: float = 3.0
    min_offset_frac: float = 0.0
    min_scale: float = 1.0
    lam: float | None = None
    temporal: bool = True
    transfer: str = "cumulative"
    branches: str = "both"
    global_clamp: bool = False
    pseudo_redraw: str = "iteration"
    n_proposals: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        if self.pseudo_redraw not in REDRAW:
            raise ValueError(f"pseudo_redraw must be one of {REDRAW}")
        if self.transfer not in TRANSFER:
            raise ValueError(f"transfer must be one of {TRANSFER}")

    @property
    def alpha(self) -> float:
        return self.epsilon / self.M

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PseudoLabels:
    cls: np.ndarray  # (N, 2) reversed pairs, zero rows for IGNORE
    reg: BoundingBox


def make_pseudo_cls(p_c: np.ndarray) -> np.ndarray:
    """Swap target/background in each label pair."""
    return np.asarray(p_c)[..., ::-1].copy()


def draw_perturbation(cfg: AttackConfig, rng: np.random.Generator) -> tuple[float, float]:
    """(offset as a fraction of the box's larger side, scale factor).

    Magnitudes are uniform in [min_offset_frac, offset_frac] and log-uniform
    in [min_scale, max_scale], each with a random sign.
    """
    sign = rng.choice([-1.0, 1.0], size=2)
    frac = sign[0] * rng.uniform(cfg.min_offset_frac, cfg.offset_frac)
    scale = float(np.exp(sign[1] * rng.uniform(np.log(cfg.min_scale), np.log(cfg.max_scale))))
    return frac, scale


def make_pseudo_reg(p_r: BoundingBox, cfg: AttackConfig, rng: np.random.Generator | None = None,
                    offset: float | None = None, scale: float | None = None) -> BoundingBox:
    """Shift x and y by one random offset and scale w and h by one random factor."""
    if offset is None or scale is None:
        frac, s = draw_perturbation(cfg, rng)
        offset = frac * max(p_r.w, p_r.h) if offset is None else offset
        scale = s if scale is None else scale
    return BoundingBox(p_r.x + offset, p_r.y + offset, p_r.w * scale, p_r.h * scale)


def make_pseudo_labels(lp: LabeledProposals, cfg: AttackConfig, rng: np.random.Generator,
                       draw: tuple[float, float] | None = None) -> PseudoLabels:
    """Reversed class pairs and a shifted/scaled box; ``draw`` pins the random pair."""
    if draw is None:
        return PseudoLabels(make_pseudo_cls(lp.cls_onehot), make_pseudo_reg(lp.reg_target, cfg, rng))
    p_r = lp.reg_target
    reg = make_pseudo_reg(p_r, cfg, offset=draw[0] * max(p_r.w, p_r.h), scale=draw[1])
    return PseudoLabels(make_pseudo_cls(lp.cls_onehot), reg)


@dataclass
class AdversarialLoss:
    """Loss difference between true and pseudo labels, usable as a loss spec.

    ``lam`` defaults to the model's regression weight. ``branches`` selects
    which label differences contribute.
    """
    pseudo: PseudoLabels
    lam: float | None = None
    branches: str = "both"

    def __call__(self, model: TrackerModel, cache: ForwardCache, lp: LabeledProposals) -> LossBreakdown:
        lam = model.lam if self.lam is None else self.lam
        pos = lp.reg_mask(model.reg_iou)
        lc_t, dlc_t, lr_t, dlr_t = branch_losses(model, cache, lp.boxes, lp.cls_onehot, lp.reg_target, pos)
        lc_p, dlc_p, lr_p, dlr_p = branch_losses(model, cache, lp.boxes, self.pseudo.cls, self.pseudo.reg, pos)
        use_cls = self.branches in ("both", "cls")
        use_reg = self.branches in ("both", "reg") and model.reg_enabled
        cls_diff = (lc_t - lc_p) if use_cls else np.zeros(len(lp.boxes))
        d_logits = (dlc_t - dlc_p) if use_cls else np.zeros_like(dlc_t)
        if use_reg:
            reg_diff = lr_t - lr_p
            d_reg = lam * (dlr_t - dlr_p)
        else:
            reg_diff = np.zeros(len(lp.boxes))
            d_reg = None
        return LossBreakdown(float(cls_diff.sum() + lam * reg_diff.sum()), cls_diff, reg_diff, d_logits, d_reg)


def adversarial_loss(model: TrackerModel, frame: np.ndarray, lp: LabeledProposals,
                     pl: PseudoLabels, lam: float | None = None, branches: str = "both") -> float:
    return AdversarialLoss(pl, lam, branches)(model, forward(model, frame, lp), lp).value


def attack_step(frame: np.ndarray, r: np.ndarray, alpha: float) -> np.ndarray:
    return np.clip(frame + alpha * np.sign(r), 0.0, 255.0)


def attack_frame(model: TrackerModel, frame: np.ndarray, Sprev: BoundingBox, cfg: AttackConfig,
                 rng: np.random.Generator, draw: tuple[float, float] | None = None) -> np.ndarray:
    """M sign-gradient ascent steps on the adversarial loss around ``Sprev``.

    ``draw`` fixes the pseudo-box offset/scale for every iteration; otherwise
    it is redrawn per iteration or once here, per ``cfg.pseudo_redraw``.
    """
    out = np.array(frame, dtype=np.float64, copy=True)
    if cfg.epsilon == 0:
        return out
    if draw is None and cfg.pseudo_redraw != "iteration":
        draw = draw_perturbation(cfg, rng)
    for _ in range(cfg.M):
        lp = sample_labeled(Sprev, cfg.n_proposals, rng, frame.shape[1:])
        pl = make_pseudo_labels(lp, cfg, rng, draw)
        r = input_gradient(model, out, lp, AdversarialLoss(pl, cfg.lam, cfg.branches))
        out = attack_step(out, r, cfg.alpha)
    return out


def temporal_init_attack(frame_t: np.ndarray, prev_first: np.ndarray, prev_last: np.ndarray) -> np.ndarray:
    return np.clip(frame_t + (prev_last - prev_first), 0.0, 255.0)


class Attacker:
    """Per-frame attack state for a running sequence."""

    def __init__(self, model: TrackerModel, cfg: AttackConfig, rng: np.random.Generator | None = None):
        self.model = model
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.prev_first: np.ndarray | None = None
        self.prev_last: np.ndarray | None = None
        self.draw = draw_perturbation(cfg, self.rng) if cfg.pseudo_redraw == "sequence" else None

    def __call__(self, frame: np.ndarray, Sprev: BoundingBox) -> np.ndarray:
        first = np.array(frame, dtype=np.float64, copy=True)
        if self.cfg.temporal and self.prev_first is not None:
            first = temporal_init_attack(first, self.prev_first, self.prev_last)
        last = attack_frame(self.model, first, Sprev, self.cfg, self.rng, self.draw)
        if self.cfg.global_clamp:
            last = np.clip(last, frame - self.cfg.epsilon, frame + self.cfg.epsilon)
        self.prev_first = frame if self.cfg.transfer == "cumulative" else first
        self.prev_last = last
        return last


def attack_sequence(model: TrackerModel, seq: Sequence, cfg: AttackConfig,
                    rng: np.random.Generator | None = None,
                    track_rng: np.random.Generator | None = None,
                    n_track: int = 256, updater=None, motion_penalty: float = 0.0) -> tuple[Sequence, list[TrackState]]:
    """Attack frames 2..T with the tracker's own previous estimate.

    ``rng`` drives proposals and pseudo labels (default: seeded from
    ``cfg.seed``); ``track_rng`` drives the tracker's own sampling so clean
    and attacked runs can share it. ``updater`` (optional) is called as
    ``updater(model, frame, state) -> model`` after every prediction.
    """
    track_rng = track_rng if track_rng is not None else np.random.default_rng(0)
    attacker = Attacker(model, cfg, rng)
    frames = seq.frames.copy()
    state = TrackState(seq.box(0), 0)
    traj = [state]
    for t in range(1, len(seq)):
        frames[t] = attacker(seq.frames[t], state.location)
        state = track_step(attacker.model, frames[t], state, track_rng, n_track, motion_penalty)
        if updater is not None:
            attacker.model = updater(attacker.model, frames[t], state)
        traj.append(state)
    return seq.with_frames(frames, name=f"{seq.name}-attacked"), traj
