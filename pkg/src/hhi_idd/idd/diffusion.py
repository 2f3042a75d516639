"""Training and ancestral sampling of the interaction-aware denoiser."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .. import rng
from ..dataset import AGENTS, InteractionWindow, normalize
from ..errors import CheckpointError, InputError, NonFiniteError
from ..nn import AdamState, adam_step, backward
from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .features import (ablation_mask, feature_dim, observed_mask, tensor_to_positions, tokens_per_agent,
                       windows_to_tensor)
from .model import Denoiser, IDDConfig, parameter_count
from .schedule import DiffusionSchedule, make_schedule, noising

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    lr_milestones: tuple[float, float] = (0.75, 0.9)
    lr_decay: float = 0.1
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    channels: int = 64
    heads: int = 4
    ffn: int = 64
    blocks: int = 4
    step_emb: int = 128
    representation: str = "position"
    ablate: str = ""
    standardize: bool = False

    def model_config(self, n_joints: int, obs_len: int, fut_len: int) -> IDDConfig:
        return IDDConfig(
            feat_dim=feature_dim(self.representation),
            n_tokens=2 * tokens_per_agent(self.representation, n_joints),
            obs_len=obs_len, fut_len=fut_len, channels=self.channels, heads=self.heads,
            ffn=self.ffn, blocks=self.blocks, step_emb=self.step_emb, diffusion_steps=self.T,
            representation=self.representation, ablate=self.ablate,
            standardize=self.standardize,
        )


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr`` until the first milestone, then x decay at each milestone."""
    frac = [m * cfg.epochs for m in cfg.lr_milestones]
    drops = sum(epoch >= f for f in frac)
    return cfg.lr * cfg.lr_decay ** drops


def build_model(cfg: IDDConfig, seed: int) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.derive_seed(seed, "init") % (2**63))
        return Denoiser(cfg)


def _masks(cfg: IDDConfig):
    obs = observed_mask(cfg.obs_len, cfg.frames)
    return obs, ablation_mask(cfg.ablate, cfg.n_tokens)


def conditioning(x0: torch.Tensor, cfg: IDDConfig) -> torch.Tensor:
    """Clean observed frames, zero elsewhere and for the ablated agent."""
    obs, keep = _masks(cfg)
    return x0 * obs * keep


def training_loss(model: Callable, x0: torch.Tensor, schedule: DiffusionSchedule, gen: np.random.Generator,
                  cfg: IDDConfig | None = None) -> torch.Tensor:
    """Noise-prediction MSE over the future frames of both agents.

    ``x0`` is a batch of clean normalized windows ``[B, D, K, L]``; ``t`` and
    the noise are drawn from ``gen``.
    """
    cfg = cfg or model.cfg
    B = x0.shape[0]
    t = torch.from_numpy(gen.integers(1, schedule.T + 1, size=B))
    eps = torch.from_numpy(gen.standard_normal(tuple(x0.shape)).astype(np.float32))
    fut = 1.0 - observed_mask(cfg.obs_len, cfg.frames)
    noisy = noising(x0, t, eps, schedule) * fut
    eps_hat = model(conditioning(x0, cfg), noisy, t)
    sq = (eps - eps_hat) ** 2 * fut
    return sq.sum() / (fut.sum() * B * x0.shape[1] * x0.shape[2])


def prepare_tensor(windows: list[InteractionWindow], representation: str) -> torch.Tensor:
    return windows_to_tensor([normalize(w) for w in windows], representation)


def feature_stats(x: torch.Tensor, floor: float = 1e-3) -> tuple[torch.Tensor, torch.Tensor]:
    """Per token and feature mean and std over windows and frames, ``[D, K, 1]`` each."""
    mean = x.mean(dim=(0, 3)).unsqueeze(-1)
    std = x.std(dim=(0, 3)).clamp_min(floor).unsqueeze(-1)
    return mean, std


def stored_stats(ckpt: Checkpoint) -> tuple[torch.Tensor, torch.Tensor] | None:
    if not ckpt.config.standardize:
        return None
    try:
        mean, std = (torch.tensor(ckpt.meta[k], dtype=torch.float32).unsqueeze(-1) for k in ("feature_mean", "feature_std"))
    except KeyError:
        raise CheckpointError("standardized checkpoint lacks its feature statistics") from None
    return mean, std


def _state(model: Denoiser) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def train(cfg: TrainConfig, windows: list[InteractionWindow], ckpt_path=None, resume: bool = False,
          stop_after: int | None = None) -> Checkpoint:
    """Fit a denoiser. Deterministic in ``cfg.seed``.

    When ``ckpt_path`` is given the checkpoint, including optimizer state, is
    rewritten after every epoch; with ``resume`` an unfinished checkpoint at
    that path is continued. ``stop_after`` ends the run after that many
    epochs in total (used to simulate interruption).
    """
    if not windows:
        raise InputError("training set is empty")
    w0 = windows[0]
    mcfg = cfg.model_config(w0.num_joints, w0.obs_len, w0.fut_len)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    x_all = prepare_tensor(windows, cfg.representation)
    model = build_model(mcfg, cfg.seed)
    params = dict(model.named_parameters())
    adam = AdamState(lr=cfg.lr)
    meta = {"epochs": cfg.epochs, "epochs_done": 0, "seed": cfg.seed, "loss_curve": [], "lr_curve": [],
            "n_params": parameter_count(model), "n_windows": len(windows), "train_config": _cfg_dict(cfg)}
    if mcfg.standardize:
        mean, std = feature_stats(x_all)
        meta["feature_mean"], meta["feature_std"] = mean.flatten(1).tolist(), std.flatten(1).tolist()
        x_all = (x_all - mean) / std
    path = Path(ckpt_path) if ckpt_path else None
    if resume and path is not None and path.exists():
        prev = ckpt_io.load(path)
        if prev.config != mcfg or prev.meta.get("train_config") != meta["train_config"]:
            raise CheckpointError(f"{path} was written by a different configuration; refusing to resume")
        with torch.no_grad():
            for k, v in prev.params.items():
                params[k].copy_(v)
        adam = prev.adam or adam
        meta = prev.meta
        log.info("resuming from epoch %d", meta["epochs_done"])
    log.info("denoiser: %d parameters, %d windows", meta["n_params"], len(windows))

    N = x_all.shape[0]
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(meta["epochs_done"], last):
        adam.lr = lr_at_epoch(cfg, epoch)
        order = rng.stream(cfg.seed, f"train/epoch{epoch}/order").permutation(N)
        losses = []
        for b, start in enumerate(range(0, N, cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            gen = rng.stream(cfg.seed, f"train/epoch{epoch}/batch{b}")
            loss = training_loss(model, x_all[idx], schedule, gen, mcfg)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"loss became non-finite at epoch {epoch}, batch {b}; "
                                     f"last good checkpoint: {path}")
            adam_step(params, backward(loss, params), adam)
            losses.append(loss.item() * idx.numel())
        epoch_loss = math.fsum(losses) / N
        meta["loss_curve"].append(epoch_loss)
        meta["lr_curve"].append(adam.lr)
        meta["epochs_done"] = epoch + 1
        log.info("epoch %d/%d  lr %.0e  loss %.5f", epoch + 1, cfg.epochs, adam.lr, epoch_loss)
        if path is not None:
            ckpt_io.save(Checkpoint(mcfg, schedule, _state(model), meta, adam), path)
    return Checkpoint(mcfg, schedule, _state(model), meta, adam)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_milestones"] = list(d["lr_milestones"])
    return d


def load_model(ckpt: Checkpoint) -> Denoiser:
    model = Denoiser(ckpt.config)
    missing = set(dict(model.named_parameters())) ^ set(ckpt.params)
    if missing:
        raise CheckpointError(f"checkpoint parameters do not match the architecture: {sorted(missing)}")
    with torch.no_grad():
        for k, p in model.named_parameters():
            p.copy_(ckpt.params[k])
    model.eval()
    return model


def window_label(w: InteractionWindow, fallback: int) -> str:
    m = w.meta
    if m.clip_id:
        return f"{m.clip_id}/{m.start}/{m.delay}/{m.delayed_agent}"
    return f"#{fallback}"


@torch.no_grad()
def sample(model: Callable, schedule: DiffusionSchedule, x_cond: torch.Tensor, seed: int,
           labels: list[str] | None = None, cfg: IDDConfig | None = None, batch_size: int = 64) -> torch.Tensor:
    """Ancestral reverse chain over the future frames.

    ``x_cond`` is ``[N, D, K, L]`` holding at least the observed frames.
    Each window draws its noise from its own stream keyed by ``labels``, so
    results do not depend on batching or window order. Returns the grid
    with observed frames copied from ``x_cond`` and future frames sampled.
    """
    cfg = cfg or model.cfg
    N = x_cond.shape[0]
    labels = labels or [f"#{i}" for i in range(N)]
    obs = observed_mask(cfg.obs_len, cfg.frames)
    fut = 1.0 - obs
    cond_all = conditioning(x_cond, cfg)
    out = torch.empty_like(x_cond)
    shape = tuple(x_cond.shape[1:])
    for start in range(0, N, batch_size):
        sl = slice(start, min(start + batch_size, N))
        gens = [rng.stream(seed, f"sample/{lab}") for lab in labels[sl]]

        def draw():
            return torch.from_numpy(np.stack([g.standard_normal(shape) for g in gens]).astype(np.float32))

        cond = cond_all[sl]
        x = draw()
        for t in range(schedule.T, 0, -1):
            tt = torch.full((x.shape[0],), t, dtype=torch.long)
            eps_hat = model(cond, x * fut, tt)
            coef = schedule.beta[t] / math.sqrt(1.0 - schedule.alpha_bar[t])
            x = (x - coef * eps_hat) / math.sqrt(schedule.alpha[t])
            if t > 1:
                x = x + schedule.posterior_std(t) * draw()
        out[sl] = x_cond[sl] * obs + x * fut
    return out


class IDDPredictor:
    """Observation -> future predictor backed by a trained checkpoint."""

    def __init__(self, ckpt: Checkpoint, seed: int = 0, num_samples: int = 1, batch_size: int = 64):
        self.ckpt = ckpt
        self.model = load_model(ckpt)
        self.seed = seed
        self.num_samples = num_samples
        self.batch_size = batch_size

    @property
    def representation(self) -> str:
        return self.ckpt.config.representation

    def sample_grid(self, windows: list[InteractionWindow]) -> torch.Tensor:
        normed = [normalize(w) for w in windows]
        stats = stored_stats(self.ckpt)
        x = windows_to_tensor(normed, self.representation)
        if stats is not None:
            x = (x - stats[0]) / stats[1]
        labels = [window_label(w, i) for i, w in enumerate(windows)]
        acc = 0
        for s in range(self.num_samples):
            lab = labels if s == 0 else [f"{lab}/s{s}" for lab in labels]
            acc = acc + sample(self.model, self.ckpt.schedule, x, self.seed, lab, batch_size=self.batch_size)
        acc = acc / self.num_samples
        return acc if stats is None else acc * stats[1] + stats[0]

    def __call__(self, windows: list[InteractionWindow]) -> dict[str, np.ndarray]:
        """Predicted futures ``{agent: [N, F, J, 3]}`` in millimetres."""
        normed = [normalize(w) for w in windows]
        grid = self.sample_grid(windows)
        pos = tensor_to_positions(grid, normed, self.representation)
        offsets = np.stack([w.offset for w in normed])[:, None, None, :]
        scale = normed[0].unit_scale
        return {a: pos[a] / scale + offsets for a in AGENTS}
