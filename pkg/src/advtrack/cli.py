"""Command-line entry point: ``advtrack <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .attack import attack_sequence
from .defense import defend_sequence
from .evaluation import TrajectoryRecord, precision_at, read_frame_csv, success_curve_auc, write_report
from .harness import PRESETS, ExperimentConfig, cell_rng, gradient_audit, make_model, make_updater, preset, run_experiment
from .seqio import ConfigError, SequenceFormatError, generate_sequence, load_sequence, save_sequence
from .trackmodel import TrackerModel, track_sequence


GRADCHECK_TOL = 1e-4


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = preset(getattr(args, "preset", None) or "default")
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _sequence(args, cfg: ExperimentConfig):
    if args.seq:
        return load_sequence(args.seq)
    return generate_sequence(replace(cfg.sim, seed=cfg.seeds[0]))


def _model(args, cfg: ExperimentConfig, seq):
    if args.model:
        return TrackerModel.from_json(Path(args.model).read_text())
    return make_model(cfg, seq, cfg.seeds[0])


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seq = generate_sequence(replace(cfg.sim, seed=cfg.seeds[0]))
    save_sequence(seq, args.out, lossless=args.lossless)
    print(f"wrote {len(seq)} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seq = _sequence(args, cfg)
    model = make_model(cfg, seq, cfg.seeds[0])
    Path(args.out).write_text(model.to_json())
    print(f"wrote model to {args.out}")
    return 0


def _pipeline(args, mode: str) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    seq = _sequence(args, cfg)
    model = _model(args, cfg, seq)
    tk = cfg.track
    track_rng = cell_rng(seed, "track", mode)
    updater = make_updater(cfg, seed, mode)
    out = Path(args.out)
    if mode == "clean":
        traj = track_sequence(model, seq, track_rng, tk.n_proposals, tk.motion_penalty, updater)
    elif mode == "attack":
        adv, traj = attack_sequence(model, seq, cfg.attack, cell_rng(seed, "attack", mode), track_rng,
                                    tk.n_proposals, updater, tk.motion_penalty)
        save_sequence(adv, out / "frames_out", lossless=True)
    else:
        pur, traj = defend_sequence(model, seq, cfg.defense, cell_rng(seed, "defense", mode), track_rng,
                                    tk.n_proposals, updater, tk.motion_penalty)
        save_sequence(pur, out / "frames_out", lossless=True)
    rec = TrajectoryRecord.from_states(traj, seq.groundtruth, mode=mode, seed=seed,
                                       run_id=f"s{seed}-{mode}", config_hash=cfg.config_hash())
    summary = write_report([rec], out)
    print(json.dumps(summary["runs"][0], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    for path in args.frames:
        rec = read_frame_csv(path)
        _, _, auc = success_curve_auc(rec)
        print(json.dumps({"file": str(path), "auc": auc, "precision_at_20": precision_at(rec, 20.0)}))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.mode:
        if args.mode.startswith("attack/"):
            name = args.mode.split("/", 1)[1]
            if name not in cfg.attack_variants:
                raise ConfigError(f"unknown attack variant {name!r}")
            cfg = replace(cfg, modes=("attack",), attack_variants={name: cfg.attack_variants[name]})
        else:
            cfg = replace(cfg, modes=(args.mode,), attack_variants={})
    out = run_experiment(cfg, args.out, threads=args.threads)
    summary = json.loads((out / "summary.json").read_text())
    for mode, row in summary["by_mode"].items():
        print(f"{mode:18s} median AUC {row['median_auc']:.3f}  precision@20 {row['median_precision_at_20']:.3f}")
    for f in summary["failures"]:
        print(f"FAILED seed={f['seed']} mode={f['mode']}: {f['error']}", file=sys.stderr)
    return 1 if summary["failures"] else 0


def cmd_gradcheck(args) -> int:
    err = gradient_audit(args.seed, args.fixtures)
    print(f"max relative error {err:.3e} over {args.fixtures} fixtures")
    return 0 if err < GRADCHECK_TOL else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advtrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp, out=True, out_required=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--preset", choices=PRESETS, help="built-in config (ignored with --config)")
        sp.add_argument("--seed", type=int, help="override the seed list with one seed")
        if out:
            sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("simulate", help="write a synthetic sequence")
    common(sp)
    sp.add_argument("--lossless", action="store_true", help="also write exact float64 frames")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("train", help="fit a model on frame 1 and save it as JSON")
    common(sp)
    sp.add_argument("--seq", help="sequence directory (default: simulate from --seed)")
    sp.set_defaults(fn=cmd_train)

    for name, mode, text in (("track", "clean", "track a sequence"),
                             ("attack", "attack", "attack a sequence while tracking it"),
                             ("defend", "defense", "purify a sequence while tracking it")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--seq")
        sp.add_argument("--model", help="model JSON (default: train on frame 1)")
        sp.set_defaults(fn=lambda a, m=mode: _pipeline(a, m))

    sp = sub.add_parser("eval", help="metrics from per-frame CSV files")
    sp.add_argument("frames", nargs="+")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("run", help="run the seed x mode matrix")
    common(sp, out_required=False)
    sp.add_argument("--mode", help="run a single mode")
    sp.add_argument("--threads", type=int, default=1, help="worker processes across seeds")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("gradcheck", help="finite-difference audit of input gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fixtures", type=int, default=20)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, SequenceFormatError, ValueError, OSError) as e:
        print(f"advtrack {args.command}: error: {e}", file=sys.stderr)
        return 1


cli_main = main


if __name__ == "__main__":
    sys.exit(main())
