"""Purification defense: subtract truncated adversarial-loss gradients.

The defender never sees the attack. It rebuilds the same adversarial loss
around its own previous estimate and walks the frame *down* that loss, one
truncated gradient step at a time, without touching the model weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import BRANCHES, REDRAW, TRANSFER, AdversarialLoss, AttackConfig, draw_perturbation, make_pseudo_labels
from .seqio import BoundingBox, Sequence
from .trackmodel import TrackerModel, TrackState, input_gradient, sample_labeled, track_step


class CalibrationError(RuntimeError):
    pass


@dataclass
class DefenseConfig:
    epsilon: float = 5.0
    M: int = 10
    beta: float | None = None  # None: calibrate on the first defended frame
    gamma: float = 0.8
    transfer: str = "cumulative"
    lam: float | None = None
    offset_frac: float = 0.5
    max_scale: float = 3.0
    branches: str = "both"
    pseudo_redraw: str = "iteration"
    n_proposals: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        if self.pseudo_redraw not in REDRAW:
            raise ValueError(f"pseudo_redraw must be one of {REDRAW}")
        if self.transfer not in TRANSFER:
            raise ValueError(f"transfer must be one of {TRANSFER}")

    @property
    def alpha_hat(self) -> float:
        return self.epsilon / self.M

    def pseudo_config(self) -> AttackConfig:
        # pseudo labels are built exactly as the attack builds them
        return AttackConfig(epsilon=self.epsilon, M=self.M, offset_frac=self.offset_frac,
                            max_scale=self.max_scale, lam=self.lam, branches=self.branches,
                            pseudo_redraw=self.pseudo_redraw, n_proposals=self.n_proposals)

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown defense keys: {sorted(unknown)}")
        return cls(**d)


def truncate(x: np.ndarray, bound: float) -> np.ndarray:
    return np.clip(x, -bound, bound)


def defense_step(frame: np.ndarray, r: np.ndarray, beta: float, alpha_hat: float) -> np.ndarray:
    return np.clip(frame - truncate(beta * r, alpha_hat), 0.0, 255.0)


def _adv_gradient(model, frame, Sprev, pcfg: AttackConfig, rng, draw=None) -> np.ndarray:
    lp = sample_labeled(Sprev, pcfg.n_proposals, rng, frame.shape[1:])
    pl = make_pseudo_labels(lp, pcfg, rng, draw)
    return input_gradient(model, frame, lp, AdversarialLoss(pl, pcfg.lam, pcfg.branches))


def calibrate_beta(model: TrackerModel, frames, boxes, cfg: DefenseConfig,
                   rng: np.random.Generator | None = None, gradients=None) -> float:
    """Pick beta so the median nonzero ``|beta * r|`` equals ``alpha_hat``.

    ``frames``/``boxes`` are paired sample frames and the boxes to label
    against. Precomputed ``gradients`` skip the model entirely.
    """
    if gradients is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        pcfg = cfg.pseudo_config()
        gradients = [_adv_gradient(model, f, b, pcfg, rng) for f, b in zip(frames, boxes)]
    if len(gradients) == 0:
        raise CalibrationError("need at least one sample frame")
    mags = np.abs(np.concatenate([np.ravel(g) for g in gradients]))
    mags = mags[mags > 0]
    if mags.size == 0:
        raise CalibrationError("all sampled gradients are zero")
    return float(cfg.alpha_hat / np.median(mags))


def defend_frame(model: TrackerModel, frame: np.ndarray, Sprev: BoundingBox, cfg: DefenseConfig,
                 rng: np.random.Generator, beta: float | None = None,
                 draw: tuple[float, float] | None = None) -> np.ndarray:
    """M truncated descent steps on the adversarial loss around ``Sprev``."""
    beta = cfg.beta if beta is None else beta
    if beta is None:
        raise ValueError("beta is not set; calibrate it first")
    out = np.array(frame, dtype=np.float64, copy=True)
    if cfg.alpha_hat == 0:
        return out
    pcfg = cfg.pseudo_config()
    if draw is None and cfg.pseudo_redraw != "iteration":
        draw = draw_perturbation(pcfg, rng)
    for _ in range(cfg.M):
        r = _adv_gradient(model, out, Sprev, pcfg, rng, draw)
        out = defense_step(out, r, beta, cfg.alpha_hat)
    return out


def temporal_init_defense(frame_t: np.ndarray, prev_first: np.ndarray, prev_last: np.ndarray,
                          gamma: float) -> np.ndarray:
    return np.clip(frame_t - gamma * (prev_first - prev_last), 0.0, 255.0)


class Defender:
    """Per-frame defense state for a running sequence.

    The carried-over correction is the full amount removed from the previous
    frame as received, so it accumulates along the sequence.
    """

    def __init__(self, model: TrackerModel, cfg: DefenseConfig, rng: np.random.Generator | None = None):
        self.model = model
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.beta = cfg.beta
        self.prev_first: np.ndarray | None = None
        self.prev_last: np.ndarray | None = None
        pcfg = cfg.pseudo_config()
        self.draw = draw_perturbation(pcfg, self.rng) if cfg.pseudo_redraw == "sequence" else None

    def __call__(self, frame: np.ndarray, Sprev: BoundingBox) -> np.ndarray:
        if self.beta is None:
            self.beta = calibrate_beta(self.model, [frame], [Sprev], self.cfg,
                                       np.random.default_rng(self.cfg.seed))
        first = np.array(frame, dtype=np.float64, copy=True)
        if self.prev_first is not None and self.cfg.gamma > 0:
            first = temporal_init_defense(first, self.prev_first, self.prev_last, self.cfg.gamma)
        last = defend_frame(self.model, first, Sprev, self.cfg, self.rng, self.beta, self.draw)
        self.prev_first = frame if self.cfg.transfer == "cumulative" else first
        self.prev_last = last
        return last


def defend_sequence(model: TrackerModel, seq: Sequence, cfg: DefenseConfig,
                    rng: np.random.Generator | None = None,
                    track_rng: np.random.Generator | None = None,
                    n_track: int = 256, updater=None, motion_penalty: float = 0.0
                    ) -> tuple[Sequence, list[TrackState]]:
    """Purify frames 2..T around the defended tracker's own estimates."""
    track_rng = track_rng if track_rng is not None else np.random.default_rng(0)
    defender = Defender(model, cfg, rng)
    frames = seq.frames.copy()
    state = TrackState(seq.box(0), 0)
    traj = [state]
    for t in range(1, len(seq)):
        frames[t] = defender(seq.frames[t], state.location)
        state = track_step(defender.model, frames[t], state, track_rng, n_track, motion_penalty)
        if updater is not None:
            defender.model = updater(defender.model, frames[t], state)
        traj.append(state)
    return seq.with_frames(frames, name=f"{seq.name}-defended"), traj
