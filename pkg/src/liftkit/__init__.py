"""Shortcut-augmented data collection for contextual active-positioning tasks."""

from .core import RngStream, block_rotation, clip_ball, clip_interval
from .distortions import DistortionSpec, apply, estimate_lpe_ratio, lpe_constant
from .environment import Dataset, EnvConfig, Trajectory, Transition, read_dataset, reset, step, write_dataset
from .lift import CollectConfig, KnnAugmentor, KnnParams, collect, plain_collect, train_knn_q
from .policies import CoordinateWalk, DirectPolicy, PolicySpec, make_policy, run_episode
from .shortcuts import ShortcutConfig, candidate_set, returns, shortcut_tuples
from .verify import CheckReport, OracleDirectAugmentor, check_shortcut, run_suite, value_of

__version__ = "0.1.0"

__all__ = [
    "RngStream", "block_rotation", "clip_ball", "clip_interval",
    "DistortionSpec", "apply", "estimate_lpe_ratio", "lpe_constant",
    "Dataset", "EnvConfig", "Trajectory", "Transition", "read_dataset", "reset", "step", "write_dataset",
    "CollectConfig", "KnnAugmentor", "KnnParams", "collect", "plain_collect", "train_knn_q",
    "CoordinateWalk", "DirectPolicy", "PolicySpec", "make_policy", "run_episode",
    "ShortcutConfig", "candidate_set", "returns", "shortcut_tuples",
    "CheckReport", "OracleDirectAugmentor", "check_shortcut", "run_suite", "value_of",
]
