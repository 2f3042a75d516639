"""Denoiser, schedule, training and sampling."""
from .checkpoint import Checkpoint, load, save
from .diffusion import IDDPredictor, TrainConfig, sample, train
from .model import Denoiser, IDDConfig
from .schedule import DiffusionSchedule, make_schedule
