"""Reading, writing and decimating BVH motion-capture files."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BVHParseError, BVHWriteError, InputError

POSITION_CHANNELS = ("Xposition", "Yposition", "Zposition")
ROTATION_CHANNELS = ("Xrotation", "Yrotation", "Zrotation")
VALID_CHANNELS = POSITION_CHANNELS + ROTATION_CHANNELS


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: tuple[float, float, float]
    channels: tuple[str, ...]

    @property
    def rotation_order(self) -> str:
        """Euler axis order as written in the channel list, e.g. ``"ZXY"``."""
        return "".join(c[0] for c in self.channels if c in ROTATION_CHANNELS)


@dataclass(frozen=True)
class EndSite:
    parent: int
    offset: tuple[float, float, float]


@dataclass(frozen=True)
class SkeletonHierarchy:
    joints: tuple[Joint, ...]
    end_sites: tuple[EndSite, ...] = ()

    def __post_init__(self):
        validate_hierarchy(self)

    def __len__(self):
        return len(self.joints)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def parents(self) -> np.ndarray:
        return np.array([j.parent for j in self.joints], dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([j.offset for j in self.joints], dtype=np.float64)

    @property
    def num_channels(self) -> int:
        return sum(len(j.channels) for j in self.joints)

    def channel_slices(self) -> list[slice]:
        out, start = [], 0
        for j in self.joints:
            out.append(slice(start, start + len(j.channels)))
            start += len(j.channels)
        return out

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no joint named {name!r}") from None


@dataclass(frozen=True)
class MotionClip:
    frame_time: float
    frames: np.ndarray = field(repr=False)  # [n_frames, n_channels], rotations in degrees

    def __post_init__(self):
        if not self.frame_time > 0:
            raise InputError(f"frame time must be positive, got {self.frame_time}")
        if self.frames.ndim != 2:
            raise InputError(f"motion must be 2-D [frames, channels], got shape {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def fps(self) -> float:
        return 1.0 / self.frame_time


def validate_hierarchy(h: SkeletonHierarchy) -> None:
    if not h.joints:
        raise InputError("hierarchy has no joints")
    roots = [i for i, j in enumerate(h.joints) if j.parent == -1]
    if roots != [0]:
        raise InputError(f"hierarchy must have exactly one root at index 0, roots at {roots}")
    for i, j in enumerate(h.joints):
        if i and not 0 <= j.parent < i:
            raise InputError(f"joint {j.name!r} has parent {j.parent}, not before it in order")
        if len(j.channels) not in (3, 6):
            raise InputError(f"joint {j.name!r} has {len(j.channels)} channels, need 3 or 6")
        bad = [c for c in j.channels if c not in VALID_CHANNELS]
        if bad:
            raise InputError(f"joint {j.name!r} has unknown channels {bad}")
        rot = [k for k, c in enumerate(j.channels) if c in ROTATION_CHANNELS]
        if len(rot) != 3 or rot != list(range(rot[0], rot[0] + 3)) or len(set(j.rotation_order)) != 3:
            raise InputError(f"joint {j.name!r} needs one contiguous X/Y/Z rotation group")
    for e in h.end_sites:
        if not 0 <= e.parent < len(h.joints):
            raise InputError(f"end site parent {e.parent} out of range")


class _Lines:
    def __init__(self, text: str):
        self.rows = [(n + 1, line.split()) for n, line in enumerate(text.splitlines())]
        self.rows = [(n, toks) for n, toks in self.rows if toks]
        self.pos = 0

    def next(self, what: str):
        if self.pos >= len(self.rows):
            raise BVHParseError(f"unexpected end of file, expected {what}", self.last_line())
        row = self.rows[self.pos]
        self.pos += 1
        return row

    def last_line(self):
        return self.rows[-1][0] if self.rows else 1


def _floats(toks, n, line, what):
    if len(toks) != n:
        raise BVHParseError(f"{what} needs {n} numbers, got {len(toks)}", line)
    try:
        return tuple(float(t) for t in toks)
    except ValueError:
        raise BVHParseError(f"non-numeric value in {what}: {' '.join(toks)}", line) from None


def _expect_brace(lines: _Lines, brace: str):
    line, toks = lines.next(f"'{brace}'")
    if toks != [brace]:
        raise BVHParseError(f"expected '{brace}', got {' '.join(toks)!r}", line)


def _parse_joint(lines: _Lines, name: str, parent: int, joints: list, ends: list):
    _expect_brace(lines, "{")
    line, toks = lines.next("OFFSET")
    if toks[0] != "OFFSET":
        raise BVHParseError(f"expected OFFSET for joint {name!r}", line)
    offset = _floats(toks[1:], 3, line, "OFFSET")
    line, toks = lines.next("CHANNELS")
    if toks[0] != "CHANNELS" or len(toks) < 2:
        raise BVHParseError(f"expected CHANNELS for joint {name!r}", line)
    try:
        n = int(toks[1])
    except ValueError:
        raise BVHParseError(f"bad channel count {toks[1]!r}", line) from None
    channels = tuple(toks[2:])
    if len(channels) != n:
        raise BVHParseError(f"CHANNELS declares {n} but lists {len(channels)}", line)
    for c in channels:
        if c not in VALID_CHANNELS:
            raise BVHParseError(f"unknown channel name {c!r}", line)
    index = len(joints)
    joints.append(Joint(name, parent, offset, channels))
    while True:
        line, toks = lines.next("JOINT, End Site or '}'")
        if toks[0] == "}":
            return
        if toks[0] == "JOINT":
            if len(toks) < 2:
                raise BVHParseError("JOINT without a name", line)
            _parse_joint(lines, " ".join(toks[1:]), index, joints, ends)
        elif toks[:2] == ["End", "Site"]:
            _expect_brace(lines, "{")
            line, toks = lines.next("OFFSET")
            if toks[0] != "OFFSET":
                raise BVHParseError("expected OFFSET in End Site", line)
            ends.append(EndSite(index, _floats(toks[1:], 3, line, "OFFSET")))
            _expect_brace(lines, "}")
        else:
            raise BVHParseError(f"unexpected token {toks[0]!r} inside joint {name!r}", line)


def parse_bvh(text: str) -> tuple[SkeletonHierarchy, MotionClip]:
    lines = _Lines(text)
    line, toks = lines.next("HIERARCHY")
    if toks != ["HIERARCHY"]:
        raise BVHParseError("missing HIERARCHY section", line)
    line, toks = lines.next("ROOT")
    if toks[0] != "ROOT" or len(toks) < 2:
        raise BVHParseError("expected ROOT", line)
    joints: list[Joint] = []
    ends: list[EndSite] = []
    _parse_joint(lines, " ".join(toks[1:]), -1, joints, ends)
    try:
        hierarchy = SkeletonHierarchy(tuple(joints), tuple(ends))
    except InputError as exc:
        raise BVHParseError(str(exc), line) from None

    line, toks = lines.next("MOTION")
    if toks == ["}"]:
        raise BVHParseError("unbalanced braces: extra '}' after hierarchy", line)
    if toks != ["MOTION"]:
        raise BVHParseError(f"missing MOTION section (found {' '.join(toks)!r})", line)
    line, toks = lines.next("Frames:")
    if toks[0] != "Frames:" or len(toks) != 2:
        raise BVHParseError("MOTION section: expected 'Frames: <n>'", line)
    try:
        n_frames = int(toks[1])
    except ValueError:
        raise BVHParseError(f"MOTION section: bad frame count {toks[1]!r}", line) from None
    line, toks = lines.next("Frame Time:")
    if toks[:2] != ["Frame", "Time:"] or len(toks) != 3:
        raise BVHParseError("MOTION section: expected 'Frame Time: <seconds>'", line)
    frame_time = _floats(toks[2:], 1, line, "Frame Time")[0]
    if not frame_time > 0:
        raise BVHParseError(f"MOTION section: frame time must be positive, got {frame_time}", line)

    n_ch = hierarchy.num_channels
    rows = lines.rows[lines.pos:]
    if len(rows) != n_frames:
        raise BVHParseError(
            f"MOTION section declares Frames: {n_frames} but contains {len(rows)} data rows",
            rows[-1][0] if rows else line,
        )
    frames = np.empty((n_frames, n_ch), dtype=np.float64)
    for r, (line, toks) in enumerate(rows):
        frames[r] = _floats(toks, n_ch, line, f"MOTION frame {r}")
    return hierarchy, MotionClip(frame_time, frames)


def read_bvh(path) -> tuple[SkeletonHierarchy, MotionClip]:
    with open(path, encoding="utf-8") as fh:
        return parse_bvh(fh.read())


def _fmt(values) -> str:
    return " ".join(f"{v:.6f}" for v in values)


def write_bvh(hierarchy: SkeletonHierarchy, motion: MotionClip) -> str:
    try:
        validate_hierarchy(hierarchy)
    except InputError as exc:
        raise BVHWriteError(str(exc)) from None
    if not is_document_order(hierarchy):
        raise BVHWriteError("joints are not in depth-first order; indices would change on re-parse")
    if motion.frames.ndim != 2 or motion.frames.shape[1] != hierarchy.num_channels:
        raise BVHWriteError(f"motion has shape {motion.frames.shape}, hierarchy needs "
                            f"{hierarchy.num_channels} channels per frame")
    if not np.isfinite(motion.frames).all():
        raise BVHWriteError("motion contains NaN/Inf")

    children: dict[int, list[int]] = {i: [] for i in range(len(hierarchy))}
    for i, j in enumerate(hierarchy.joints[1:], start=1):
        children[j.parent].append(i)
    ends: dict[int, list[EndSite]] = {}
    for e in hierarchy.end_sites:
        ends.setdefault(e.parent, []).append(e)

    out = ["HIERARCHY"]

    def emit(i: int, depth: int):
        j = hierarchy.joints[i]
        pad = "\t" * depth
        out.append(f"{pad}{'ROOT' if i == 0 else 'JOINT'} {j.name}")
        out.append(pad + "{")
        out.append(f"{pad}\tOFFSET {_fmt(j.offset)}")
        out.append(f"{pad}\tCHANNELS {len(j.channels)} {' '.join(j.channels)}")
        for c in children[i]:
            emit(c, depth + 1)
        for e in ends.get(i, []):
            out.extend([f"{pad}\tEnd Site", pad + "\t{", f"{pad}\t\tOFFSET {_fmt(e.offset)}", pad + "\t}"])
        out.append(pad + "}")

    emit(0, 0)
    out.append("MOTION")
    out.append(f"Frames: {motion.num_frames}")
    out.append(f"Frame Time: {motion.frame_time:.6f}")
    out.extend(_fmt(row) for row in motion.frames)
    return "\n".join(out) + "\n"


def is_document_order(hierarchy: SkeletonHierarchy) -> bool:
    """True when depth-first document order equals index order.

    BVH nests children inside parents, so only depth-first ordered
    hierarchies survive a write/parse round trip with their indices intact.
    """
    order: list[int] = []
    children: dict[int, list[int]] = {i: [] for i in range(len(hierarchy))}
    for i, j in enumerate(hierarchy.joints[1:], start=1):
        children[j.parent].append(i)
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(reversed(children[i]))
    return order == list(range(len(hierarchy)))


def source_fps(frame_time: float) -> int:
    """Integer frame rate of a clip; frame times are printed with 6 decimals."""
    fps = 1.0 / frame_time
    rounded = round(fps)
    if rounded < 1 or abs(fps - rounded) > 1e-3 * rounded:
        raise InputError(f"frame time {frame_time} does not correspond to an integer frame rate")
    return rounded


def resample(motion: MotionClip, dst_fps: int) -> MotionClip:
    """Keep every n-th frame starting at frame 0. No interpolation."""
    src = source_fps(motion.frame_time)
    if dst_fps <= 0 or src % dst_fps:
        raise InputError(f"unsupported rate: {src} Hz -> {dst_fps} Hz is not an integer stride")
    stride = src // dst_fps
    if stride == 1:
        return motion
    return MotionClip(1.0 / dst_fps, motion.frames[::stride].copy())
