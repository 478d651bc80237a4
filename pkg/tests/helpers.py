import numpy as np

from advtrack.seqio import SimConfig, generate_sequence
from advtrack.trackmodel import TrackerModel, TrainConfig, train_init


def trained(seed: int = 0, sim: dict | None = None, **model_kw):
    """Default synthetic sequence for ``seed`` and a model fit on its frame 1."""
    seq = generate_sequence(SimConfig(seed=seed, **(sim or {})))
    rng = np.random.default_rng(seed)
    model = TrackerModel.init(rng, channels=seq.frame_shape[0], **model_kw)
    tc = TrainConfig()
    model, history = train_init(model, seq.frames[0], seq.box(0), tc.steps, tc.lr, rng, tc)
    return seq, model, history


VARIANTS = {"cls": {"branches": "cls"}, "reg": {"branches": "reg"}, "static": {"temporal": False}}

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def report_criterion(n: int, name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    print(ACCEPTANCE[-1])
    return ok
