"""White-box attack and purification defense for a tracking-by-detection model."""

from .attack import AttackConfig, Attacker, attack_frame, attack_sequence
from .defense import DefenseConfig, Defender, calibrate_beta, defend_frame, defend_sequence
from .evaluation import TrajectoryRecord, precision_curve, success_curve_auc, vot_run, write_report
from .seqio import BoundingBox, Sequence, SimConfig, generate_sequence, load_sequence, save_sequence
from .trackmodel import TrackerModel, TrainConfig, input_gradient, track_sequence, track_step, train_init

__version__ = "0.1.0"
