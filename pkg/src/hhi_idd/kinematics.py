"""Rotations, forward kinematics and skeleton geometry.

Arrays carry arbitrary leading batch dimensions: a single frame is
``[J, 3]``, a sequence ``[T, J, 3]``, rotations ``[..., 3, 3]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bvh import POSITION_CHANNELS, MotionClip, SkeletonHierarchy
from .errors import ConfigError, RotationError, ShapeError

_AXES = {"X": 0, "Y": 1, "Z": 2}

SO3_TOL = 1e-6


def _check_order(order: str) -> tuple[int, int, int]:
    order = order.upper()
    if len(order) != 3 or sorted(order) != ["X", "Y", "Z"]:
        raise ConfigError(f"rotation order must be a permutation of XYZ, got {order!r}")
    return tuple(_AXES[a] for a in order)


def axis_rotation(axis: int, angle_rad) -> np.ndarray:
    """Elementary right-handed rotation about one coordinate axis."""
    a = np.asarray(angle_rad, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    i, j = (axis + 1) % 3, (axis + 2) % 3
    R[..., axis, axis] = 1.0
    R[..., i, i] = c
    R[..., j, j] = c
    R[..., i, j] = -s
    R[..., j, i] = s
    return R


def euler_to_matrix(angles_deg, order: str) -> np.ndarray:
    """``R = R_a(t1) R_b(t2) R_c(t3)`` for channel order ``abc``, angles in degrees."""
    axes = _check_order(order)
    ang = np.radians(np.asarray(angles_deg, dtype=np.float64))
    if ang.shape[-1] != 3:
        raise ShapeError(f"expected [..., 3] Euler angles, got {ang.shape}")
    R = axis_rotation(axes[0], ang[..., 0])
    R = R @ axis_rotation(axes[1], ang[..., 1])
    return R @ axis_rotation(axes[2], ang[..., 2])


def so3_error(R) -> np.ndarray:
    """Worst of ``|R^T R - I|`` and ``|det R - 1|`` per matrix."""
    R = np.asarray(R, dtype=np.float64)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(axis=(-2, -1))
    return np.maximum(ortho, np.abs(np.linalg.det(R) - 1.0))


def is_so3(R, tol: float = SO3_TOL) -> bool:
    return bool(np.all(so3_error(R) <= tol))


def matrix_to_euler(R, order: str, tol: float = 1e-5) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix`, degrees.

    At gimbal lock (middle angle at +-90 degrees) the third angle is set to
    zero and the whole locked rotation goes to the first channel.
    """
    i, j, k = _check_order(order)
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ShapeError(f"expected [..., 3, 3] matrices, got {R.shape}")
    if not is_so3(R, tol):
        raise RotationError("matrix_to_euler needs SO(3) input; project it first")
    # +1 for cyclic orders (XYZ, YZX, ZXY), -1 otherwise
    s = 1.0 if (j - i) % 3 == 1 else -1.0
    sin_mid = s * R[..., i, k]
    cos_mid = np.hypot(R[..., i, i], R[..., i, j])
    t2 = np.arctan2(sin_mid, cos_mid)
    t1 = np.arctan2(-s * R[..., j, k], R[..., k, k])
    t3 = np.arctan2(-s * R[..., i, j], R[..., i, i])
    locked = cos_mid < 1e-10
    if np.any(locked):
        t1 = np.where(locked, np.arctan2(s * R[..., k, j], R[..., j, j]), t1)
        t3 = np.where(locked, 0.0, t3)
    return np.degrees(np.stack([t1, t2, t3], axis=-1))


def project_to_so3(M) -> np.ndarray:
    """Nearest rotation matrix in Frobenius norm (SVD polar factor with det fix)."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape[-2:] != (3, 3):
        raise ShapeError(f"expected [..., 3, 3] matrices, got {M.shape}")
    if not np.isfinite(M).all():
        raise RotationError("project_to_so3 got non-finite input")
    U, S, Vt = np.linalg.svd(M)
    if np.any(S[..., -1] <= 1e-9 * np.maximum(S[..., 0], 1e-300)):
        raise RotationError("project_to_so3: rank-deficient matrix has no unique nearest rotation")
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.zeros(M.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    return U @ D @ Vt


@dataclass
class JointAngleFrame:
    """Root translation plus one local rotation per joint.

    ``root_position`` is ``[..., 3]`` and ``rotations`` ``[..., J, 3, 3]``;
    leading dims index frames.
    """

    root_position: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        self.root_position = np.asarray(self.root_position, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.rotations.shape[-2:] != (3, 3) or self.root_position.shape[-1] != 3:
            raise ShapeError("JointAngleFrame needs root [...,3] and rotations [...,J,3,3]")
        if self.rotations.shape[:-3] != self.root_position.shape[:-1]:
            raise ShapeError(f"leading dims differ: {self.root_position.shape} vs {self.rotations.shape}")

    @property
    def num_joints(self) -> int:
        return self.rotations.shape[-3]

    def validate(self, tol: float = SO3_TOL) -> None:
        if not is_so3(self.rotations, tol):
            raise RotationError(f"rotations off SO(3) by {so3_error(self.rotations).max():.3g}")


def _parents_and_offsets(hierarchy) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(hierarchy, SkeletonHierarchy):
        return hierarchy.parents, hierarchy.offsets
    parents, offsets = hierarchy
    return np.asarray(parents), np.asarray(offsets, dtype=np.float64)


def forward_kinematics(hierarchy, frame: JointAngleFrame, unit_scale: float = 1.0) -> np.ndarray:
    """Global joint positions ``[..., J, 3]`` from local rotations.

    ``hierarchy`` is a :class:`SkeletonHierarchy` or a ``(parents, offsets)``
    pair. Offsets and root position are multiplied by ``unit_scale``.
    """
    parents, offsets = _parents_and_offsets(hierarchy)
    J = len(parents)
    if frame.num_joints != J:
        raise ShapeError(f"frame has {frame.num_joints} rotations, hierarchy has {J} joints")
    lead = frame.root_position.shape[:-1]
    pos = np.empty(lead + (J, 3))
    glob = np.empty(lead + (J, 3, 3))
    pos[..., 0, :] = frame.root_position * unit_scale
    glob[..., 0, :, :] = frame.rotations[..., 0, :, :]
    for j in range(1, J):
        p = parents[j]
        pos[..., j, :] = pos[..., p, :] + glob[..., p, :, :] @ (offsets[j] * unit_scale)
        glob[..., j, :, :] = glob[..., p, :, :] @ frame.rotations[..., j, :, :]
    return pos


def clip_to_angles(hierarchy: SkeletonHierarchy, motion: MotionClip) -> JointAngleFrame:
    """Per-frame root translation and local rotation matrices of a BVH clip.

    The root translation comes from the root's position channels (its
    offset when it has none). Position channels on non-root joints are
    ignored; those joints sit at their fixed offsets.
    """
    if motion.frames.shape[1] != hierarchy.num_channels:
        raise ShapeError(f"motion has {motion.frames.shape[1]} channels, hierarchy needs {hierarchy.num_channels}")
    n = motion.num_frames
    rots = np.empty((n, len(hierarchy), 3, 3))
    root = np.tile(np.asarray(hierarchy.joints[0].offset), (n, 1))
    for jidx, (joint, sl) in enumerate(zip(hierarchy.joints, hierarchy.channel_slices())):
        block = motion.frames[:, sl]
        names = list(joint.channels)
        rot_cols = [names.index(a + "rotation") for a in joint.rotation_order]
        rots[:, jidx] = euler_to_matrix(block[:, rot_cols], joint.rotation_order)
        if jidx == 0:
            for axis, ch in enumerate(POSITION_CHANNELS):
                if ch in names:
                    root[:, axis] = block[:, names.index(ch)]
    return JointAngleFrame(root, rots)


def angles_to_clip(hierarchy: SkeletonHierarchy, frame: JointAngleFrame, frame_time: float) -> MotionClip:
    """Write root translation and rotations back into BVH channel rows."""
    rows = np.zeros(frame.rotations.shape[:-3] + (hierarchy.num_channels,))
    for jidx, (joint, sl) in enumerate(zip(hierarchy.joints, hierarchy.channel_slices())):
        names = list(joint.channels)
        eul = matrix_to_euler(frame.rotations[..., jidx, :, :], joint.rotation_order)
        for n, axis in enumerate(joint.rotation_order):
            rows[..., sl.start + names.index(axis + "rotation")] = eul[..., n]
        for axis, ch in enumerate(POSITION_CHANNELS):
            if ch in names:
                value = frame.root_position[..., axis] if jidx == 0 else joint.offset[axis]
                rows[..., sl.start + names.index(ch)] = value
    return MotionClip(frame_time, rows.reshape(-1, hierarchy.num_channels))


def clip_positions(hierarchy: SkeletonHierarchy, motion: MotionClip, unit_scale: float = 1.0) -> np.ndarray:
    return forward_kinematics(hierarchy, clip_to_angles(hierarchy, motion), unit_scale)


def link_lengths(positions, hierarchy) -> np.ndarray:
    """Length of every child-to-parent link, ``[..., J-1]`` in joint order 1..J-1."""
    if isinstance(hierarchy, SkeletonHierarchy):
        parents = hierarchy.parents
    elif isinstance(hierarchy, tuple) and len(hierarchy) == 2 and np.ndim(hierarchy[0]) == 1:
        parents = np.asarray(hierarchy[0])
    else:
        parents = np.asarray(hierarchy)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-2] != len(parents):
        raise ShapeError(f"positions have {positions.shape[-2]} joints, hierarchy has {len(parents)}")
    child = np.arange(1, len(parents))
    return np.linalg.norm(positions[..., child, :] - positions[..., parents[child], :], axis=-1)


def pelvis_align(pose, pelvis_index: int = 0) -> np.ndarray:
    """Translate every frame so the pelvis joint sits at the origin."""
    pose = np.asarray(pose)
    if not 0 <= pelvis_index < pose.shape[-2]:
        raise ShapeError(f"pelvis index {pelvis_index} out of range for {pose.shape[-2]} joints")
    return pose - pose[..., pelvis_index : pelvis_index + 1, :]
