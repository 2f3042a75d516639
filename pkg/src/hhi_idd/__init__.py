"""Two-agent interaction-aware motion prediction with a conditional diffusion denoiser."""
from .baselines import constant_vel, predict_windows, zero_vel
from .bvh import parse_bvh, read_bvh, write_bvh
from .dataset import (ClipPair, InteractionWindow, WindowMeta, build_delayed_windows, build_windows, load_prepared,
                      normalize, denormalize, split_by_participant, synth_coupled, write_prepared)
from .errors import InputError
from .evaluation import delayed_eval, evaluate, link_length_report, metrics_csv, mpjpe

__version__ = "0.1.0"
