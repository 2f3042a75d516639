"""Conversion between interaction windows and the denoiser's tensor grid.

Position mode: one token per joint with its 3 coordinates.
Angle mode: one token per joint with its flattened local rotation matrix,
plus one root token per agent carrying the root translation in its first
three features (the other six are zero padding).
"""
from __future__ import annotations

import numpy as np
import torch

from ..dataset import AGENTS, InteractionWindow
from ..errors import ConfigError
from ..kinematics import JointAngleFrame, forward_kinematics, project_to_so3


def feature_dim(representation: str) -> int:
    return {"position": 3, "angle": 9}[representation]


def tokens_per_agent(representation: str, n_joints: int) -> int:
    return n_joints if representation == "position" else n_joints + 1


def _agent_features(w: InteractionWindow, agent: str, representation: str) -> np.ndarray:
    if representation == "position":
        return np.concatenate([w.obs(agent), w.fut(agent)], axis=0)  # [L, J, 3]
    if w.angles is None:
        raise ConfigError("angle representation needs windows with joint angles")
    f = w.angles[agent]
    L = f.rotations.shape[0]
    rot = f.rotations.reshape(L, -1, 9)
    root = np.zeros((L, 1, 9))
    root[:, 0, :3] = f.root_position
    return np.concatenate([rot, root], axis=1)  # [L, J+1, 9]


def windows_to_tensor(windows: list[InteractionWindow], representation: str) -> torch.Tensor:
    """Normalized windows -> ``[N, D, K, L]`` float32 (caregiver tokens first)."""
    if any(not w.normalized for w in windows):
        raise ConfigError("windows must be normalized before feeding the model")
    arr = np.stack([
        np.concatenate([_agent_features(w, a, representation) for a in AGENTS], axis=1) for w in windows
    ])  # [N, L, K, D]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 2, 1))).float()


def tensor_to_positions(x: torch.Tensor | np.ndarray, windows: list[InteractionWindow], representation: str,
                        fut_only: bool = True) -> dict[str, np.ndarray]:
    """Model-space ``[N, D, K, L]`` -> per-agent positions ``[N, T, J, 3]`` in the windows' units.

    In angle mode the rotation features are projected onto SO(3) and run
    through forward kinematics with each window's skeleton.
    """
    x = x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)
    x = x.astype(np.float64).transpose(0, 3, 2, 1)  # [N, L, K, D]
    O = windows[0].obs_len
    if fut_only:
        x = x[:, O:]
    J = windows[0].num_joints
    per = tokens_per_agent(representation, J)
    out = {}
    for k, a in enumerate(AGENTS):
        block = x[:, :, k * per : (k + 1) * per]
        if representation == "position":
            out[a] = block
            continue
        rots = project_to_so3(block[:, :, :J].reshape(block.shape[0], block.shape[1], J, 3, 3))
        root = block[:, :, J, :3]
        pos = np.empty(rots.shape[:3] + (3,))
        for n, w in enumerate(windows):
            if w.skeletons is None:
                raise ConfigError("angle representation needs window skeletons for forward kinematics")
            parents, offsets = w.skeletons[a]
            # the root track is already in window units, the offsets are millimetres
            pos[n] = forward_kinematics((parents, offsets * w.unit_scale), JointAngleFrame(root[n], rots[n]))
        out[a] = pos
    return out


def observed_mask(cfg_obs_len: int, frames: int) -> torch.Tensor:
    m = torch.zeros(1, 1, 1, frames)
    m[..., :cfg_obs_len] = 1.0
    return m


def ablation_mask(ablate: str, n_tokens: int) -> torch.Tensor:
    """1 for tokens whose observation is kept, 0 for the ablated agent's."""
    keep = torch.ones(1, 1, n_tokens, 1)
    if ablate:
        half = n_tokens // 2
        sl = slice(0, half) if ablate == "cg" else slice(half, n_tokens)
        keep[:, :, sl] = 0.0
    return keep
