"""Training, evaluation, ablation and CLI plumbing."""

from .ablation import AblationResult, ablation_run, expand_grid, write_csv
from .config import ConfigError, TrainConfig, dump_config, load_config
from .evaluate import Confusion, EvalResult, TimingReport, batch_mious, episode_confusion, error_breakdown, evaluate, timing_probe
from .export import FeatureDump, export_features, load_features
from .model import EpisodeTensors, FewShotSegmenter, episode_tensors
from .train import Checkpoint, episodic_train, load_model, lr_at, make_pool, pretrain

__all__ = [
    "AblationResult",
    "Checkpoint",
    "ConfigError",
    "Confusion",
    "EpisodeTensors",
    "EvalResult",
    "FeatureDump",
    "FewShotSegmenter",
    "TimingReport",
    "TrainConfig",
    "ablation_run",
    "batch_mious",
    "dump_config",
    "episode_confusion",
    "episode_tensors",
    "episodic_train",
    "error_breakdown",
    "evaluate",
    "expand_grid",
    "export_features",
    "load_config",
    "load_features",
    "load_model",
    "lr_at",
    "make_pool",
    "pretrain",
    "timing_probe",
    "write_csv",
]
