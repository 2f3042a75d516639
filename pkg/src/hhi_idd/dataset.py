"""Two-agent interaction windows: building, splitting, normalizing, storing.

Also generates the synthetic coupled corpus used for desk-scale checks: a
leader agent moving along smooth random trajectories and a follower that
responds to it through a delay and a low-pass filter.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .bvh import EndSite, Joint, MotionClip, SkeletonHierarchy, read_bvh, resample
from .errors import InputError, PairingError, SplitError
from .kinematics import JointAngleFrame, clip_to_angles, euler_to_matrix, forward_kinematics

log = logging.getLogger(__name__)

AGENTS = ("cg", "cr")
MM_TO_M = 1e-3


@dataclass
class AgentClip:
    """One agent's motion over a whole take, positions in millimetres."""

    positions: np.ndarray  # [N, J, 3]
    angles: JointAngleFrame | None = None  # N frames, root in mm
    hierarchy: SkeletonHierarchy | None = None

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class ClipPair:
    clip_id: str
    pair_id: str
    task_id: str
    cg: AgentClip
    cr: AgentClip
    fps: int = 24

    def __iter__(self):
        return iter((self.cg, self.cr))


@dataclass
class WindowMeta:
    clip_id: str = ""
    pair_id: str = ""
    task_id: str = ""
    start: int = 0
    delay: int = 0
    delayed_agent: str | None = None


@dataclass
class InteractionWindow:
    obs_cg: np.ndarray
    obs_cr: np.ndarray
    fut_cg: np.ndarray
    fut_cr: np.ndarray
    meta: WindowMeta = field(default_factory=WindowMeta)
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normalized: bool = False
    # per agent: root [O+F, 3] and local rotations [O+F, J, 3, 3]
    angles: dict[str, JointAngleFrame] | None = None
    # per agent: (parents, offsets in mm)
    skeletons: dict[str, tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def obs_len(self) -> int:
        return self.obs_cg.shape[0]

    @property
    def fut_len(self) -> int:
        return self.fut_cg.shape[0]

    @property
    def num_joints(self) -> int:
        return self.obs_cg.shape[1]

    def obs(self, agent: str) -> np.ndarray:
        return getattr(self, f"obs_{agent}")

    def fut(self, agent: str) -> np.ndarray:
        return getattr(self, f"fut_{agent}")

    @property
    def unit_scale(self) -> float:
        """Multiplier from millimetres to this window's coordinate unit."""
        return MM_TO_M if self.normalized else 1.0


@dataclass
class DatasetSplit:
    train: list[InteractionWindow]
    val: list[InteractionWindow]
    test: list[InteractionWindow]

    def pair_ids(self, name: str) -> set[str]:
        return {w.meta.pair_id for w in getattr(self, name)}

    def check_disjoint(self) -> None:
        shared = self.pair_ids("test") & (self.pair_ids("train") | self.pair_ids("val"))
        if shared:
            raise SplitError(f"participant pairs {sorted(shared)} appear in test and train/val")


def _as_clip(clip) -> AgentClip:
    return clip if isinstance(clip, AgentClip) else AgentClip(np.asarray(clip, dtype=np.float64))


def _slice_angles(a: JointAngleFrame | None, lo: int, hi: int):
    if a is None:
        return None
    return JointAngleFrame(a.root_position[lo:hi], a.rotations[lo:hi])


def _skeleton(clip: AgentClip):
    h = clip.hierarchy
    return None if h is None else (h.parents, h.offsets)


def build_delayed_windows(cg_clip, cr_clip, O: int = 24, F: int = 24, delay_frames: int = 0,
                          which_agent_delayed: str = "cg", stride: int = 1,
                          meta: WindowMeta | None = None) -> list[InteractionWindow]:
    """Windows where one agent's observation is shifted ``delay_frames`` ahead.

    The shifted agent contributes frames ``[s+d, s+d+O)`` as observation and
    ``[s+d+O, s+d+O+F)`` as its future; the other agent keeps ``[s, s+O)``
    and ``[s+O, s+O+F)``. Starts whose shifted span runs off the clip are
    skipped.
    """
    cg, cr = _as_clip(cg_clip), _as_clip(cr_clip)
    if len(cg) != len(cr):
        raise PairingError(f"clip lengths differ: cg has {len(cg)} frames, cr has {len(cr)}")
    if cg.positions.shape[1:] != cr.positions.shape[1:]:
        raise PairingError(f"agents have different joint layouts: {cg.positions.shape[1:]} vs {cr.positions.shape[1:]}")
    if which_agent_delayed not in AGENTS:
        raise InputError(f"delayed agent must be one of {AGENTS}, got {which_agent_delayed!r}")
    if delay_frames < 0 or stride < 1 or O < 1 or F < 1:
        raise InputError("need delay >= 0, stride >= 1, O >= 1, F >= 1")
    base = meta or WindowMeta()
    n = len(cg)
    shift = {a: (delay_frames if a == which_agent_delayed else 0) for a in AGENTS}
    clips = {"cg": cg, "cr": cr}
    have_angles = cg.angles is not None and cr.angles is not None
    skeletons = None
    if cg.hierarchy is not None and cr.hierarchy is not None:
        skeletons = {a: _skeleton(clips[a]) for a in AGENTS}
    out = []
    for s in range(0, n - O - F - delay_frames + 1, stride):
        parts = {}
        for a in AGENTS:
            lo = s + shift[a]
            parts[f"obs_{a}"] = clips[a].positions[lo : lo + O].copy()
            parts[f"fut_{a}"] = clips[a].positions[lo + O : lo + O + F].copy()
        angles = None
        if have_angles:
            angles = {a: _slice_angles(clips[a].angles, s + shift[a], s + shift[a] + O + F) for a in AGENTS}
        m = replace(base, start=s, delay=delay_frames,
                    delayed_agent=which_agent_delayed if delay_frames else None)
        out.append(InteractionWindow(**parts, meta=m, angles=angles, skeletons=skeletons))
    return out


def build_windows(cg_clip, cr_clip, O: int = 24, F: int = 24, stride: int = 1,
                  meta: WindowMeta | None = None) -> list[InteractionWindow]:
    """Slide an ``O + F`` window over a paired take.

    Starts are ``0, stride, 2*stride, ...``; a take shorter than ``O + F``
    yields no windows.
    """
    return build_delayed_windows(cg_clip, cr_clip, O, F, 0, "cg", stride, meta)


def windows_from_pair(pair: ClipPair, O: int = 24, F: int = 24, stride: int = 1, delay: int = 0,
                      delayed_agent: str = "cg") -> list[InteractionWindow]:
    meta = WindowMeta(pair.clip_id, pair.pair_id, pair.task_id)
    return build_delayed_windows(pair.cg, pair.cr, O, F, delay, delayed_agent, stride, meta)


def expected_window_count(n_frames: int, O: int, F: int, stride: int, delay: int = 0) -> int:
    span = n_frames - O - F - delay
    return 0 if span < 0 else span // stride + 1


def split_by_participant(windows: list[InteractionWindow], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Assign whole participant pairs to train/val/test.

    Pairs are shuffled with a seeded stream; val and test each get at least
    one pair, train gets the rest.
    """
    pairs = sorted({w.meta.pair_id for w in windows})
    if any(not p for p in pairs):
        raise SplitError("every window needs a participant-pair id")
    if len(pairs) < 3:
        raise SplitError(f"need at least 3 participant pairs for a disjoint split, got {len(pairs)}")
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise SplitError(f"bad split ratios {ratios}")
    r = r / r.sum()
    order = [pairs[i] for i in rng_mod.stream(seed, "split").permutation(len(pairs))]
    n = len(pairs)
    n_test = max(1, int(round(r[2] * n)))
    n_val = max(1, int(round(r[1] * n)))
    n_test = min(n_test, n - 2)
    n_val = min(n_val, n - 1 - n_test)
    test = set(order[:n_test])
    val = set(order[n_test : n_test + n_val])
    split = DatasetSplit(
        train=[w for w in windows if w.meta.pair_id not in test | val],
        val=[w for w in windows if w.meta.pair_id in val],
        test=[w for w in windows if w.meta.pair_id in test],
    )
    split.check_disjoint()
    return split


def normalize(window: InteractionWindow, pelvis_index: int = 0) -> InteractionWindow:
    """Shift both agents so the caregiver pelvis at the last observed frame is
    the origin, then convert millimetres to metres."""
    if window.normalized:
        return window
    anchor = window.obs_cg[-1, pelvis_index].astype(np.float64)
    parts = {f"{k}_{a}": (getattr(window, f"{k}_{a}") - anchor) * MM_TO_M for k in ("obs", "fut") for a in AGENTS}
    angles = None
    if window.angles is not None:
        angles = {a: JointAngleFrame((f.root_position - anchor) * MM_TO_M, f.rotations) for a, f in window.angles.items()}
    return replace(window, **parts, offset=anchor, normalized=True, angles=angles)


def denormalize(window: InteractionWindow) -> InteractionWindow:
    if not window.normalized:
        return window
    anchor = window.offset
    parts = {f"{k}_{a}": getattr(window, f"{k}_{a}") / MM_TO_M + anchor for k in ("obs", "fut") for a in AGENTS}
    angles = None
    if window.angles is not None:
        angles = {a: JointAngleFrame(f.root_position / MM_TO_M + anchor, f.rotations) for a, f in window.angles.items()}
    return replace(window, **parts, offset=np.zeros(3), normalized=False, angles=angles)


# --- synthetic coupled corpus -------------------------------------------------

# Depth-first ordered so any prefix is a valid BVH hierarchy. Millimetres, Y up.
_TEMPLATE = (
    ("Hips", -1, (0.0, 0.0, 0.0)),
    ("Spine", 0, (0.0, 220.0, 0.0)),
    ("Chest", 1, (0.0, 220.0, 0.0)),
    ("Head", 2, (0.0, 200.0, 0.0)),
    ("LeftArm", 2, (170.0, 120.0, 0.0)),
    ("LeftForeArm", 4, (280.0, 0.0, 0.0)),
    ("RightArm", 2, (-170.0, 120.0, 0.0)),
    ("RightForeArm", 6, (-280.0, 0.0, 0.0)),
    ("LeftLeg", 0, (100.0, -450.0, 0.0)),
    ("RightLeg", 0, (-100.0, -450.0, 0.0)),
)
SYNTH_ORDER = "ZXY"
_ROT = tuple(a + "rotation" for a in SYNTH_ORDER)
_POS = ("Xposition", "Yposition", "Zposition")


def synth_hierarchy(n_joints: int, scale: float = 1.0) -> SkeletonHierarchy:
    if not 2 <= n_joints <= len(_TEMPLATE):
        raise InputError(f"synthetic skeleton supports 2..{len(_TEMPLATE)} joints, got {n_joints}")
    joints = []
    for i, (name, parent, off) in enumerate(_TEMPLATE[:n_joints]):
        channels = _POS + _ROT if i == 0 else _ROT
        joints.append(Joint(name, parent, tuple(scale * o for o in off), channels))
    has_child = {j.parent for j in joints}
    ends = tuple(EndSite(i, (0.0, 80.0 * scale, 0.0)) for i in range(n_joints) if i not in has_child)
    return SkeletonHierarchy(tuple(joints), ends)


def band_limited(gen: np.random.Generator, times: np.ndarray, n_channels: int, amplitude,
                 min_period: float = 1.0, max_period: float = 4.0) -> np.ndarray:
    """Per channel, a sum of 1 to 3 sinusoids with periods in ``[min_period, max_period]`` seconds."""
    amplitude = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (n_channels,))
    out = np.zeros((times.size, n_channels))
    for c in range(n_channels):
        m = int(gen.integers(1, 4))
        weights = gen.dirichlet(np.ones(m))
        for w in weights:
            period = gen.uniform(min_period, max_period)
            phase = gen.uniform(0.0, 2 * np.pi)
            out[:, c] += amplitude[c] * w * np.sin(2 * np.pi * times / period + phase)
    return out


def simulate_follower(leader: np.ndarray, delay: int, gain: np.ndarray, smoothing: float,
                      drive_noise: np.ndarray | None = None) -> np.ndarray:
    """First-order low-pass response to the leader delayed by ``delay`` frames.

    ``out[k]`` depends on ``leader[:k-delay+1]`` only (plus the noise).
    Frames before the delay has elapsed hold the leader's first value.
    """
    n = leader.shape[0]
    drive = np.empty_like(leader)
    drive[delay:] = gain * leader[: n - delay]
    drive[:delay] = gain * leader[0]
    if drive_noise is not None:
        drive = drive + drive_noise
    out = np.empty_like(leader)
    out[0] = drive[0]
    for k in range(1, n):
        out[k] = out[k - 1] + smoothing * (drive[k] - out[k - 1])
    return out


@dataclass(frozen=True)
class SynthParams:
    fps: int = 24
    angle_amplitude: float = 30.0  # degrees
    root_amplitude: float = 150.0  # mm
    smoothing: float = 0.35
    # leader sinusoid periods in seconds; short enough that the follower's
    # 1 s future is not already implied by its own past
    min_period: float = 1.0
    max_period: float = 2.0
    partner_distance: float = 700.0  # mm along +Z
    follower_scale: float = 0.92


def _channels_to_agent(channels: np.ndarray, hierarchy: SkeletonHierarchy) -> AgentClip:
    J = len(hierarchy)
    root = channels[:, :3]
    euler = channels[:, 3:].reshape(-1, J, 3)
    angles = JointAngleFrame(root, euler_to_matrix(euler, SYNTH_ORDER))
    return AgentClip(forward_kinematics(hierarchy, angles), angles, hierarchy)


def synth_coupled(seed: int, n_clips: int, clip_len: int, n_joints: int = 8, delay: int = 6,
                  noise_std: float = 0.5, params: SynthParams = SynthParams()) -> list[ClipPair]:
    """Seeded corpus of leader (caregiver) / follower (care receiver) takes.

    ``noise_std`` is the standard deviation of the follower's drive noise,
    in degrees on joint angles and millimetres on root translation. Each
    clip gets its own participant-pair id.
    """
    if not 0 <= delay < clip_len:
        raise InputError(f"delay {delay} must be in [0, clip_len={clip_len})")
    lead_h = synth_hierarchy(n_joints)
    foll_h = synth_hierarchy(n_joints, params.follower_scale)
    n_ch = 3 + 3 * n_joints
    burn = delay + 2 * params.fps
    # one coupling law for the whole corpus
    coupling = rng_mod.stream(seed, "synth/coupling")
    gain = coupling.uniform(0.6, 1.0, n_ch) * coupling.choice([-1.0, 1.0], n_ch)
    gain[:3] = np.abs(gain[:3])
    amp = np.concatenate([np.full(3, params.root_amplitude), np.full(3 * n_joints, params.angle_amplitude)])
    amp[4] *= 0.3  # keep the pelvis roll small
    pairs = []
    for c in range(n_clips):
        gen = rng_mod.stream(seed, f"synth/clip{c}")
        times = np.arange(-burn, clip_len) / params.fps
        leader = band_limited(gen, times, n_ch, amp, params.min_period, params.max_period)
        noise = gen.standard_normal(leader.shape) * noise_std if noise_std > 0 else None
        follower = simulate_follower(leader, delay, gain, params.smoothing, noise)
        leader[:, 1] += 900.0
        follower[:, 1] += 900.0 * params.follower_scale
        follower[:, 2] += params.partner_distance
        follower[:, 3 + 2] += 180.0  # face the leader (yaw is the third ZXY channel)
        leader, follower = leader[burn:], follower[burn:]
        pairs.append(ClipPair(
            clip_id=f"synth{c:04d}", pair_id=f"pair{c:04d}", task_id="synth",
            cg=_channels_to_agent(leader, lead_h), cr=_channels_to_agent(follower, foll_h), fps=params.fps,
        ))
    return pairs


def coupling_proxy(windows: list[InteractionWindow], agent: str = "cr", horizon: int | None = None,
                   history: int = 4, ridge: float = 1e-3) -> tuple[float, float]:
    """Least-squares check that the partner's past helps predict ``agent``'s future.

    Regresses the residual of a constant-velocity extrapolation at
    ``horizon`` on the last ``history`` pelvis-aligned frames of the agent
    alone, then of both agents. Fits on the first half of ``windows``,
    scores mean joint error on the second half. Returns
    ``(own_only_error, with_partner_error)``.
    """
    from .baselines import constant_vel
    from .kinematics import pelvis_align

    partner = "cg" if agent == "cr" else "cr"
    ws = [normalize(w) for w in windows]
    h = (horizon or ws[0].fut_len) - 1

    def feats(w, who):
        return np.concatenate([pelvis_align(w.obs(a)[-history:]).ravel() for a in who])

    targets = np.stack([(pelvis_align(w.fut(agent)) - pelvis_align(constant_vel(w.obs(agent), w.fut_len)))[h].ravel() for w in ws])
    half = len(ws) // 2
    errors = []
    for who in ((agent,), (agent, partner)):
        X = np.stack([feats(w, who) for w in ws])
        X = np.hstack([X, np.ones((len(ws), 1))])
        A, b = X[:half], targets[:half]
        coef = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ b)
        resid = (X[half:] @ coef - targets[half:]).reshape(len(ws) - half, -1, 3)
        errors.append(float(np.linalg.norm(resid, axis=-1).mean()))
    return errors[0], errors[1]


# --- raw BVH ingestion ----------------------------------------------------------

def load_raw_dir(raw_dir, fps: int = 24, unit_scale: float = 1.0) -> list[ClipPair]:
    """Paired ``<take>_cg.bvh`` / ``<take>_cr.bvh`` files plus ``pairs.csv``.

    ``pairs.csv`` has columns ``take,pair_id,task_id``. Takes missing a
    partner file are skipped with a warning. ``unit_scale`` converts file
    units to millimetres.
    """
    raw_dir = Path(raw_dir)
    index = raw_dir / "pairs.csv"
    if not index.exists():
        raise InputError(f"{index} not found")
    with open(index, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"take", "pair_id", "task_id"} - set(rows[0] if rows else {})
    if missing:
        raise InputError(f"{index} lacks columns {sorted(missing)}")
    out = []
    for row in rows:
        take = row["take"]
        files = {a: raw_dir / f"{take}_{a}.bvh" for a in AGENTS}
        absent = [str(p.name) for p in files.values() if not p.exists()]
        if absent:
            log.warning("skipping take %s: missing %s", take, ", ".join(absent))
            continue
        agents = {}
        for a, path in files.items():
            hierarchy, motion = read_bvh(path)
            motion = resample(motion, fps)
            angles = clip_to_angles(hierarchy, motion)
            angles = JointAngleFrame(angles.root_position * unit_scale, angles.rotations)
            scaled = _scale_hierarchy(hierarchy, unit_scale)
            agents[a] = AgentClip(forward_kinematics(scaled, angles), angles, scaled)
        out.append(ClipPair(take, row["pair_id"], row["task_id"], agents["cg"], agents["cr"], fps))
    return out


def _scale_hierarchy(h: SkeletonHierarchy, s: float) -> SkeletonHierarchy:
    if s == 1.0:
        return h
    joints = tuple(replace(j, offset=tuple(s * o for o in j.offset)) for j in h.joints)
    ends = tuple(replace(e, offset=tuple(s * o for o in e.offset)) for e in h.end_sites)
    return SkeletonHierarchy(joints, ends)


def write_raw_dir(pairs: list[ClipPair], out_dir) -> None:
    """Write a corpus as paired BVH files plus ``pairs.csv`` (inverse of :func:`load_raw_dir`)."""
    from .bvh import write_bvh
    from .kinematics import angles_to_clip

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        for a, clip in (("cg", p.cg), ("cr", p.cr)):
            motion = angles_to_clip(clip.hierarchy, clip.angles, 1.0 / p.fps)
            (out_dir / f"{p.clip_id}_{a}.bvh").write_text(write_bvh(clip.hierarchy, motion), encoding="utf-8")
    with open(out_dir / "pairs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["take", "pair_id", "task_id"])
        for p in pairs:
            w.writerow([p.clip_id, p.pair_id, p.task_id])


# --- prepared dataset on disk -------------------------------------------------

MANIFEST = "manifest.jsonl"
DATA = "data.bin"
ANGLES = "angles.bin"
SKELETONS = "skeletons.json"


def write_prepared(out_dir, windows: list[InteractionWindow], splits: list[str] | None = None) -> None:
    """Manifest plus flat little-endian float32 tensors, raw millimetres.

    ``data.bin`` holds, per window, obs_cg, obs_cr, fut_cg, fut_cr. When
    every window carries joint angles, ``angles.bin`` holds per window and
    agent (cg then cr) the root track ``[O+F, 3]`` followed by rotations
    ``[O+F, J, 9]``, and ``skeletons.json`` the per-take skeletons.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with_angles = bool(windows) and all(w.angles is not None and w.skeletons is not None for w in windows)
    skeletons = {}
    offset = angle_offset = 0
    with open(out_dir / DATA, "wb") as data, open(out_dir / MANIFEST, "w", encoding="utf-8") as man:
        ang = open(out_dir / ANGLES, "wb") if with_angles else None
        try:
            for i, w in enumerate(windows):
                w = denormalize(w)
                blob = np.concatenate([w.obs_cg.ravel(), w.obs_cr.ravel(), w.fut_cg.ravel(), w.fut_cr.ravel()])
                raw = blob.astype("<f4").tobytes()
                data.write(raw)
                rec = {
                    "index": i, "clip_id": w.meta.clip_id, "pair_id": w.meta.pair_id,
                    "task_id": w.meta.task_id, "start": w.meta.start, "delay": w.meta.delay,
                    "delayed_agent": w.meta.delayed_agent, "obs": w.obs_len, "fut": w.fut_len,
                    "joints": w.num_joints, "offset": offset, "nbytes": len(raw),
                }
                if splits is not None:
                    rec["split"] = splits[i]
                offset += len(raw)
                if ang is not None:
                    parts = []
                    for a in AGENTS:
                        f = w.angles[a]
                        parts += [f.root_position.ravel(), f.rotations.ravel()]
                    araw = np.concatenate(parts).astype("<f4").tobytes()
                    ang.write(araw)
                    rec["angle_offset"], rec["angle_nbytes"] = angle_offset, len(araw)
                    angle_offset += len(araw)
                    skeletons.setdefault(w.meta.clip_id, {
                        a: {"parents": w.skeletons[a][0].tolist(), "offsets": np.asarray(w.skeletons[a][1]).tolist()}
                        for a in AGENTS
                    })
                man.write(json.dumps(rec, sort_keys=True) + "\n")
        finally:
            if ang is not None:
                ang.close()
    if with_angles:
        (out_dir / SKELETONS).write_text(json.dumps(skeletons, sort_keys=True, indent=1), encoding="utf-8")
    elif (out_dir / ANGLES).exists():
        os.remove(out_dir / ANGLES)


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise InputError(f"no prepared dataset at {path.parent} ({MANIFEST} missing)")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_prepared(in_dir, split: str | None = None) -> list[InteractionWindow]:
    """Windows from a prepared directory, raw millimetres, optionally one split only."""
    in_dir = Path(in_dir)
    records = read_manifest(in_dir)
    if split is not None:
        records = [r for r in records if r.get("split", split) == split]
    data = np.fromfile(in_dir / DATA, dtype="<f4") if records else np.zeros(0, "<f4")
    ang = np.fromfile(in_dir / ANGLES, dtype="<f4") if (in_dir / ANGLES).exists() else None
    skel = json.loads((in_dir / SKELETONS).read_text(encoding="utf-8")) if ang is not None else None
    out = []
    for r in records:
        O, F, J = r["obs"], r["fut"], r["joints"]
        start = r["offset"] // 4
        blob = data[start : start + r["nbytes"] // 4].astype(np.float64)
        sizes = [O * J * 3, O * J * 3, F * J * 3, F * J * 3]
        if blob.size != sum(sizes):
            raise InputError(f"window {r['index']}: data.bin holds {blob.size} values, manifest implies {sum(sizes)}")
        chunks = np.split(blob, np.cumsum(sizes)[:-1])
        angles = skeletons = None
        if ang is not None and "angle_offset" in r:
            a0 = r["angle_offset"] // 4
            ablob = ang[a0 : a0 + r["angle_nbytes"] // 4].astype(np.float64)
            T = O + F
            per = T * 3 + T * J * 9
            angles = {}
            for k, a in enumerate(AGENTS):
                part = ablob[k * per : (k + 1) * per]
                angles[a] = JointAngleFrame(part[: T * 3].reshape(T, 3), part[T * 3 :].reshape(T, J, 3, 3))
            s = skel[r["clip_id"]]
            skeletons = {a: (np.asarray(s[a]["parents"]), np.asarray(s[a]["offsets"], dtype=np.float64)) for a in AGENTS}
        meta = WindowMeta(r["clip_id"], r["pair_id"], r["task_id"], r["start"], r["delay"], r.get("delayed_agent"))
        out.append(InteractionWindow(
            chunks[0].reshape(O, J, 3), chunks[1].reshape(O, J, 3),
            chunks[2].reshape(F, J, 3), chunks[3].reshape(F, J, 3),
            meta=meta, angles=angles, skeletons=skeletons,
        ))
    return out


def take_windows(windows: list[InteractionWindow], n: int, seed: int, label: str) -> list[InteractionWindow]:
    """Seeded subset of ``n`` windows, in original order."""
    if n >= len(windows):
        return list(windows)
    idx = np.sort(rng_mod.stream(seed, label).choice(len(windows), size=n, replace=False))
    return [windows[i] for i in idx]


def stack_positions(windows: list[InteractionWindow]) -> dict[str, np.ndarray]:
    return {f"{k}_{a}": np.stack([getattr(w, f"{k}_{a}") for w in windows]) for k in ("obs", "fut") for a in AGENTS}
