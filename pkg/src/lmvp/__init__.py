"""Leaked-motion video prediction on a small numpy autodiff core."""
from .data import DataConfig, VideoSet, generate_bouncing, read_videoset, write_videoset
from .model import ModelConfig, ModelParams
from .losses import LossConfig, MetricRecord
from .training import TrainConfig, Trainer, evaluate, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
