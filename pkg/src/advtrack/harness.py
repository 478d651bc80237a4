"""Experiment matrix: seeds x modes, wired from sequences to reports."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attack import AdversarialLoss, AttackConfig, attack_sequence, make_pseudo_labels
from .defense import DefenseConfig, defend_sequence
from .evaluation import TrajectoryRecord, random_perturbation_baseline, vot_run, write_report
from .seqio import BoundingBox, ConfigError, Sequence, SimConfig, generate_sequence, load_sequence
from .trackmodel import (
    REG_IOU,
    TrackerModel,
    TrainConfig,
    input_gradient,
    loss_value,
    online_update,
    sample_labeled,
    total_loss,
    track_sequence,
    train_init,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("clean", "rand-attack", "attack", "attack+defense", "defense-on-clean")

# one independent stream per purpose so cells do not depend on run order
_STREAM = {"train": 0, "track": 1, "attack": 2, "defense": 3, "rand": 4, "update": 5}


def _strict(cls, d: dict, what: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{what}: {e}") from e


@dataclass
class ModelConfig:
    P: int = 16
    hidden: int = 64
    lam: float = 1.0
    reg_enabled: bool = True
    reg_iou: float = REG_IOU
    reg_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    init_scale: float = 1.0

    def __post_init__(self):
        self.reg_std = tuple(float(v) for v in self.reg_std)
        if self.P < 2 or self.hidden < 1:
            raise ValueError("P must be >= 2 and hidden >= 1")

    def build(self, rng: np.random.Generator, channels: int) -> TrackerModel:
        return TrackerModel.init(rng, P=self.P, hidden=self.hidden, channels=channels, lam=self.lam,
                                 reg_enabled=self.reg_enabled, reg_std=self.reg_std,
                                 init_scale=self.init_scale, reg_iou=self.reg_iou)


@dataclass
class TrackConfig:
    n_proposals: int = 256
    motion_penalty: float = 0.0


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    input: str | None = None  # sequence directory; replaces the simulator
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    # extra attack runs, recorded as mode "attack/<name>"
    attack_variants: dict[str, dict] = field(default_factory=dict)
    modes: tuple[str, ...] = MODES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    rand_epsilon: float | None = None  # None: same as attack.epsilon
    vot: bool = True
    out: str = "report"
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.modes:
            raise ConfigError("at least one mode is required")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}; choose from {MODES}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("modes must be distinct")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be nonempty and distinct")
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        for name, over in self.attack_variants.items():
            if not name or "/" in name:
                raise ConfigError(f"bad attack variant name {name!r}")
            self.variant_config(name)  # validates the overrides
        self.sim.validate()

    def variant_config(self, name: str) -> AttackConfig:
        over = self.attack_variants[name]
        return _strict(AttackConfig, {**asdict(self.attack), **over}, f"attack variant {name!r}")

    @property
    def all_modes(self) -> tuple[str, ...]:
        return self.modes + tuple(f"attack/{v}" for v in self.attack_variants)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        d["seeds"] = list(self.seeds)
        for k in ("model", "sim"):
            d[k] = json.loads(json.dumps(d[k]))
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "version" not in d:
            raise ConfigError("config is missing the 'version' field")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        sections = {"sim": SimConfig, "model": ModelConfig, "train": TrainConfig,
                    "track": TrackConfig, "attack": AttackConfig, "defense": DefenseConfig}
        for key, typ in sections.items():
            if key in kw:
                kw[key] = _strict(typ, kw[key], key)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def preset(name: str) -> ExperimentConfig:
    """Named experiment configurations.

    ``default``: the five-row matrix. ``cls-only``: regression removed, with
    periodic online updates. ``branch-ablation``, ``temporal-ablation`` and
    ``random-baseline`` isolate one attack property each.
    """
    if name == "default":
        return ExperimentConfig()
    if name == "cls-only":
        return ExperimentConfig(model=ModelConfig(reg_enabled=False),
                                train=TrainConfig(update_every=10, update_steps=15),
                                modes=("clean", "attack", "attack+defense"))
    if name == "branch-ablation":
        return ExperimentConfig(modes=("clean", "attack"), vot=False,
                                attack_variants={"cls": {"branches": "cls"}, "reg": {"branches": "reg"}})
    if name == "temporal-ablation":
        return ExperimentConfig(modes=("clean", "attack"), vot=False,
                                attack_variants={"static": {"temporal": False}})
    if name == "random-baseline":
        return ExperimentConfig(modes=("clean", "rand-attack", "attack"), vot=False)
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("default", "cls-only", "branch-ablation", "temporal-ablation", "random-baseline")


# ---------------------------------------------------------------------------
# cells


def cell_rng(seed: int, purpose: str, mode: str = "") -> np.random.Generator:
    salt = int.from_bytes(hashlib.sha256(mode.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, _STREAM[purpose], salt])


def make_sequence(cfg: ExperimentConfig, seed: int) -> Sequence:
    if cfg.input is not None:
        return load_sequence(cfg.input)
    return generate_sequence(replace(cfg.sim, seed=seed))


def make_model(cfg: ExperimentConfig, seq: Sequence, seed: int) -> TrackerModel:
    rng = cell_rng(seed, "train")
    model = cfg.model.build(rng, seq.frame_shape[0])
    model, _ = train_init(model, seq.frames[0], seq.box(0), cfg.train.steps, cfg.train.lr, rng, cfg.train)
    return model


def make_updater(cfg: ExperimentConfig, seed: int, mode: str):
    """Periodic online fine-tuning on the tracker's own predictions, or None."""
    tc = cfg.train
    if tc.update_every <= 0:
        return None
    rng = cell_rng(seed, "update", mode)
    count = [0]

    def update(model, frame, state):
        count[0] += 1
        if count[0] % tc.update_every:
            return model
        return online_update(model, frame, state.location, tc.update_steps, tc.lr, rng, tc)

    return update


class _Seed:
    """Shared per-seed state: the sequence, the trained model, the attacked frames."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg, self.seed = cfg, seed
        self.seq = make_sequence(cfg, seed)
        self.model = make_model(cfg, self.seq, seed)
        self._attacked: dict[str, tuple] = {}

    def attacked(self, mode: str, acfg: AttackConfig):
        if mode not in self._attacked:
            cfg, tk = self.cfg, self.cfg.track
            self._attacked[mode] = attack_sequence(
                self.model, self.seq, acfg, cell_rng(self.seed, "attack", mode),
                cell_rng(self.seed, "track", mode), tk.n_proposals,
                make_updater(cfg, self.seed, mode), tk.motion_penalty)
        return self._attacked[mode]


def run_cell(ctx: _Seed, mode: str) -> TrajectoryRecord:
    cfg, seed, seq, model, tk = ctx.cfg, ctx.seed, ctx.seq, ctx.model, ctx.cfg.track
    track_rng = cell_rng(seed, "track", mode)
    updater = make_updater(cfg, seed, mode)
    vot_kw = dict(rng=cell_rng(seed, "track", "vot:" + mode), n_track=tk.n_proposals,
                  motion_penalty=tk.motion_penalty,
                  attack_rng=cell_rng(seed, "attack", "vot:" + mode),
                  defense_rng=cell_rng(seed, "defense", "vot:" + mode))
    vot_seq, pipeline, acfg = seq, "clean", cfg.attack
    if mode == "clean":
        traj = track_sequence(model, seq, track_rng, tk.n_proposals, tk.motion_penalty, updater)
    elif mode == "rand-attack":
        eps = cfg.attack.epsilon if cfg.rand_epsilon is None else cfg.rand_epsilon
        vot_seq = random_perturbation_baseline(seq, eps, cell_rng(seed, "rand"))
        traj = track_sequence(model, vot_seq, track_rng, tk.n_proposals, tk.motion_penalty, updater)
    elif mode == "attack" or mode.startswith("attack/"):
        if mode != "attack":
            acfg = cfg.variant_config(mode.split("/", 1)[1])
        traj = ctx.attacked(mode, acfg)[1]
        pipeline = "attack"
    elif mode == "attack+defense":
        adv, _ = ctx.attacked("attack", cfg.attack)
        traj = defend_sequence(model, adv, cfg.defense, cell_rng(seed, "defense", mode), track_rng,
                               tk.n_proposals, updater, tk.motion_penalty)[1]
        pipeline = "attack+defense"
    elif mode == "defense-on-clean":
        traj = defend_sequence(model, seq, cfg.defense, cell_rng(seed, "defense", mode), track_rng,
                               tk.n_proposals, updater, tk.motion_penalty)[1]
        pipeline = "defense"
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    rec = TrajectoryRecord.from_states(traj, seq.groundtruth, mode=mode, seed=seed,
                                       run_id=f"s{seed}-{mode.replace('/', '-')}",
                                       config_hash=cfg.config_hash())
    if cfg.vot:
        res = vot_run(model, vot_seq, pipeline, acfg, cfg.defense, **vot_kw)
        rec.vot_accuracy, rec.vot_robustness = res.accuracy, res.robustness
    return rec


def run_seed(cfg: ExperimentConfig, seed: int) -> tuple[list[TrajectoryRecord], list[dict], dict]:
    """All modes for one seed; a failing cell is recorded and skipped."""
    records, failures, timing = [], [], {}
    try:
        ctx = _Seed(cfg, seed)
    except Exception as e:  # noqa: BLE001 - recorded, other seeds continue
        log.exception("seed %d setup failed", seed)
        return [], [{"seed": seed, "mode": m, "error": f"{type(e).__name__}: {e}"} for m in cfg.all_modes], {}
    for mode in cfg.all_modes:
        t0 = time.perf_counter()
        try:
            records.append(run_cell(ctx, mode))
        except Exception as e:  # noqa: BLE001
            log.exception("cell seed=%d mode=%s failed", seed, mode)
            failures.append({"seed": seed, "mode": mode, "error": f"{type(e).__name__}: {e}"})
        timing[f"s{seed}-{mode}"] = time.perf_counter() - t0
    return records, failures, timing


def _run_seed_dict(doc: dict, seed: int):
    return run_seed(ExperimentConfig.from_dict(doc), seed)


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, threads: int = 1) -> Path:
    """Run every seed x mode cell and write the report directory."""
    out = Path(out if out is not None else cfg.out)
    results = {}
    if threads > 1 and len(cfg.seeds) > 1:
        doc = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = {s: pool.submit(_run_seed_dict, doc, s) for s in cfg.seeds}
            results = {s: f.result() for s, f in futs.items()}
    else:
        results = {s: run_seed(cfg, s) for s in cfg.seeds}
    records, failures, timing = [], [], {}
    for s in cfg.seeds:
        r, f, t = results[s]
        records += r
        failures += f
        timing.update(t)
    write_report(records, out, failures,
                 extra={"config_hash": cfg.config_hash(), "config": cfg.to_dict() | {"out": None}})
    # wall-clock numbers live apart from the summary so reruns compare bit-exactly
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# gradient audit


def _fd_fixture(seed: int, i: int):
    rng = np.random.default_rng([seed, i])
    C = 1 if i % 2 == 0 else 3
    H, W = 40, 48
    frame = rng.uniform(20.0, 235.0, size=(C, H, W))
    model = TrackerModel.init(rng, P=8, hidden=16, channels=C, reg_iou=0.3)
    model.b1 = rng.normal(0.0, 0.3, size=model.b1.shape)
    model.Wr = rng.normal(0.0, 0.5, size=model.Wr.shape)
    model.br = rng.normal(0.0, 0.5, size=model.br.shape)
    w, h = rng.uniform(10, 18, size=2)
    x, y = rng.uniform(4, W - w - 4), rng.uniform(4, H - h - 4)
    lp = sample_labeled(BoundingBox(x, y, w, h), 24, rng, (H, W))
    if i % 3 == 2:
        spec = AdversarialLoss(make_pseudo_labels(lp, AttackConfig(), rng))
    else:
        spec = total_loss
    return model, frame, lp, spec


def gradient_audit(seed: int = 0, n_fixtures: int = 20, n_entries: int = 100, h: float = 1e-3) -> float:
    """Max relative error of input_gradient vs central differences.

    Checked on the ``n_entries`` largest-magnitude gradient entries of each
    fixture. Every third fixture uses the adversarial loss, the rest the
    training loss; frames alternate between grey and colour.
    """
    worst = 0.0
    for i in range(n_fixtures):
        model, frame, lp, spec = _fd_fixture(seed, i)
        g = input_gradient(model, frame, lp, spec)
        idx = np.argsort(np.abs(g).ravel())[::-1][:n_entries]
        flat = frame.ravel()
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp = loss_value(model, frame, lp, spec)
            flat[k] = orig - h
            fm = loss_value(model, frame, lp, spec)
            flat[k] = orig
            fd = (fp - fm) / (2 * h)
            a = g.ravel()[k]
            denom = max(abs(a), abs(fd), 1e-12)
            worst = max(worst, abs(a - fd) / denom)
    return worst
