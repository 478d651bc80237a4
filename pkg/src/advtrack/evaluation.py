"""One-pass precision/success metrics, VOT-style reinitialization, reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .attack import Attacker, AttackConfig
from .defense import DefenseConfig, Defender
from .seqio import BoundingBox, Sequence
from .trackmodel import TrackerModel, TrackState, center_error, iou, track_step

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
FAILURE_RUN = 5
BURN_IN = 5
PIPELINES = ("clean", "attack", "defense", "attack+defense")

FRAME_HEADER = ["frame", "pred_x", "pred_y", "pred_w", "pred_h",
                "gt_x", "gt_y", "gt_w", "gt_h", "iou", "center_err"]


@dataclass
class TrajectoryRecord:
    pred: np.ndarray  # (T, 4)
    gt: np.ndarray  # (T, 4)
    iou: np.ndarray
    center_err: np.ndarray
    mode: str = "clean"
    seed: int = 0
    run_id: str = "run"
    config_hash: str = ""
    vot_accuracy: float | None = None
    vot_robustness: int | None = None

    def __post_init__(self):
        n = len(self.pred)
        if not (len(self.gt) == len(self.iou) == len(self.center_err) == n):
            raise ValueError("trajectory record lists differ in length")

    def __len__(self) -> int:
        return len(self.pred)

    @classmethod
    def from_boxes(cls, pred, gt, **meta) -> "TrajectoryRecord":
        pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        return cls(pred, gt, iou(pred, gt), center_error(pred, gt), **meta)

    @classmethod
    def from_states(cls, states: list[TrackState], gt, **meta) -> "TrajectoryRecord":
        return cls.from_boxes(np.stack([s.location.as_array() for s in states]), gt, **meta)


def precision_curve(rec: TrajectoryRecord, thresholds=PRECISION_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of frames whose center error is within each pixel threshold."""
    if len(rec) == 0:
        raise ValueError("empty record")
    th = np.asarray(thresholds, dtype=np.float64)
    return th, (rec.center_err[None, :] <= th[:, None]).mean(axis=1)


def precision_at(rec: TrajectoryRecord, threshold: float = 20.0) -> float:
    return float(np.mean(rec.center_err <= threshold))


def success_curve_auc(rec: TrajectoryRecord, thresholds=SUCCESS_THRESHOLDS
                      ) -> tuple[np.ndarray, np.ndarray, float]:
    """Fraction of frames with IoU above each threshold, and its mean (AUC)."""
    if len(rec) == 0:
        raise ValueError("empty record")
    th = np.asarray(thresholds, dtype=np.float64)
    counts = (rec.iou[None, :] > th[:, None]).sum(axis=1)
    # one division of an integer total keeps the AUC independent of summation order
    return th, counts / len(rec), float(counts.sum() / (len(th) * len(rec)))


# ---------------------------------------------------------------------------
# VOT-style protocol


@dataclass
class VotResult:
    accuracy: float
    robustness: int  # raw failure count
    ious: np.ndarray
    scored: np.ndarray  # bool mask of frames counted in accuracy
    reinit_frames: list[int] = field(default_factory=list)


def vot_protocol(predict: Callable[[int, BoundingBox], BoundingBox], gt,
                 on_reinit: Callable[[int], None] | None = None) -> VotResult:
    """Run ``predict(t, previous_box)`` over frames 1..T-1 with reinitialization.

    After ``FAILURE_RUN`` consecutive zero-overlap frames one failure is
    counted and the tracker restarts from groundtruth on the next frame. The
    restart frame and the following ``BURN_IN - 1`` frames are not scored.
    Frame 0 is initialization and never scored.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    T = len(gt)
    ious = np.zeros(T)
    scored = np.zeros(T, dtype=bool)
    prev = BoundingBox.from_array(gt[0])
    ious[0] = 1.0
    failures, zero_run, skip_until, reinit_at = 0, 0, 0, None
    reinit_frames = []
    for t in range(1, T):
        if reinit_at == t:
            prev = BoundingBox.from_array(gt[t])
            ious[t] = 1.0
            reinit_frames.append(t)
            skip_until = t + BURN_IN
            reinit_at = None
            zero_run = 0
            if on_reinit is not None:
                on_reinit(t)
            continue
        box = predict(t, prev)
        ious[t] = iou(box.as_array(), gt[t])
        scored[t] = t >= skip_until
        zero_run = zero_run + 1 if ious[t] == 0.0 else 0
        if zero_run == FAILURE_RUN:
            failures += 1
            zero_run = 0
            reinit_at = t + 1
        prev = box
    acc = float(ious[scored].mean()) if scored.any() else 0.0
    return VotResult(acc, failures, ious, scored, reinit_frames)


def vot_run(model: TrackerModel, seq: Sequence, pipeline: str = "clean",
            attack_cfg: AttackConfig | None = None, defense_cfg: DefenseConfig | None = None,
            rng: np.random.Generator | None = None, attack_rng=None, defense_rng=None,
            n_track: int = 256, motion_penalty: float = 0.0) -> VotResult:
    """Reinitializing evaluation of one pipeline; attack/defense run inline."""
    if pipeline not in PIPELINES:
        raise ValueError(f"pipeline must be one of {PIPELINES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    attacker = Attacker(model, attack_cfg or AttackConfig(), attack_rng) if "attack" in pipeline else None
    defender = Defender(model, defense_cfg or DefenseConfig(), defense_rng) if "defense" in pipeline else None

    def predict(t: int, prev: BoundingBox) -> BoundingBox:
        frame = seq.frames[t]
        if attacker is not None:
            frame = attacker(frame, prev)
        if defender is not None:
            frame = defender(frame, prev)
        return track_step(model, frame, TrackState(prev, t - 1), rng, n_track, motion_penalty).location

    def reset(_t: int) -> None:
        for agent in (attacker, defender):
            if agent is not None:
                agent.prev_first = agent.prev_last = None

    return vot_protocol(predict, seq.groundtruth, reset)


def random_perturbation_baseline(seq: Sequence, epsilon: float, rng: np.random.Generator) -> Sequence:
    """i.i.d. uniform noise in [-epsilon, epsilon] on frames 2..T, clamped."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    frames = seq.frames.copy()
    if epsilon > 0:
        noise = rng.uniform(-epsilon, epsilon, size=frames[1:].shape)
        frames[1:] = np.clip(frames[1:] + noise, 0.0, 255.0)
    return seq.with_frames(frames, name=f"{seq.name}-rand")


# ---------------------------------------------------------------------------
# reports


def summarize(rec: TrajectoryRecord) -> dict:
    _, _, auc = success_curve_auc(rec)
    return {
        "run_id": rec.run_id,
        "mode": rec.mode,
        "seed": rec.seed,
        "auc": auc,
        "precision_at_20": precision_at(rec, 20.0),
        "vot_accuracy": rec.vot_accuracy,
        "vot_robustness": rec.vot_robustness,  # raw failure count
        "config_hash": rec.config_hash,
    }


def write_frame_csv(rec: TrajectoryRecord, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRAME_HEADER)
        for t in range(len(rec)):
            w.writerow([t + 1, *map(repr, map(float, rec.pred[t])), *map(repr, map(float, rec.gt[t])),
                        repr(float(rec.iou[t])), repr(float(rec.center_err[t]))])


def read_frame_csv(path: str | Path, **meta) -> TrajectoryRecord:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    col = lambda k: np.array([float(r[k]) for r in rows])
    pred = np.stack([col("pred_x"), col("pred_y"), col("pred_w"), col("pred_h")], axis=1)
    gt = np.stack([col("gt_x"), col("gt_y"), col("gt_w"), col("gt_h")], axis=1)
    return TrajectoryRecord(pred, gt, col("iou"), col("center_err"), **meta)


def _write_curve(path: Path, th: np.ndarray, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "value"])
        for a, b in zip(th, values):
            w.writerow([repr(float(a)), repr(float(b))])


def mode_medians(runs: list[dict]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for mode in dict.fromkeys(r["mode"] for r in runs):
        rows = [r for r in runs if r["mode"] == mode and r.get("auc") is not None]
        if not rows:
            continue
        entry = {"n": len(rows),
                 "median_auc": float(np.median([r["auc"] for r in rows])),
                 "median_precision_at_20": float(np.median([r["precision_at_20"] for r in rows]))}
        vot = [r for r in rows if r.get("vot_accuracy") is not None]
        if vot:
            entry["median_vot_accuracy"] = float(np.median([r["vot_accuracy"] for r in vot]))
            entry["total_vot_robustness"] = int(sum(r["vot_robustness"] for r in vot))
        out[mode] = entry
    return out


def write_report(records: list[TrajectoryRecord], directory: str | Path,
                 failures: list[dict] | None = None, extra: dict | None = None) -> dict:
    """Per-run frame CSVs, curve CSVs and one combined ``summary.json``."""
    if not records and not failures:
        raise ValueError("nothing to report")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    runs = []
    for rec in records:
        write_frame_csv(rec, out / "frames" / f"{rec.run_id}.csv")
        th, curve, _ = success_curve_auc(rec)
        _write_curve(out / "curves" / f"{rec.run_id}_success.csv", th, curve)
        th, curve = precision_curve(rec)
        _write_curve(out / "curves" / f"{rec.run_id}_precision.csv", th, curve)
        runs.append(summarize(rec))
    summary = {"schema": 1, "runs": runs, "failures": failures or [], "by_mode": mode_medians(runs)}
    if extra:
        summary.update(extra)
    tmp = out / "summary.json.tmp"
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / "summary.json")
    return summary


def read_summary(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "summary.json").read_text())
