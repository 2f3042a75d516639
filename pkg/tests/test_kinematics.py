import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhi_idd.bvh import MotionClip
from hhi_idd.dataset import synth_hierarchy
from hhi_idd.errors import ConfigError, InputError, RotationError
from hhi_idd.kinematics import (JointAngleFrame, angles_to_clip, clip_positions, clip_to_angles, euler_to_matrix,
                                forward_kinematics, is_so3, link_lengths, matrix_to_euler, pelvis_align,
                                project_to_so3)

ORDERS = ["".join(p) for p in itertools.permutations("XYZ")]


def elementary(axis, deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return {
        "X": np.array([[1, 0, 0], [0, c, -s], [0, s, c]]),
        "Y": np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]),
        "Z": np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]),
    }[axis]


def fk_oracle(parents, offsets, root, rots):
    """Recursive definition: global(j) = global(parent) @ local(j)."""
    def glob(j):
        return rots[j] if parents[j] < 0 else glob(parents[j]) @ rots[j]

    def pos(j):
        return root if parents[j] < 0 else pos(parents[j]) + glob(parents[j]) @ offsets[j]

    return np.array([pos(j) for j in range(len(parents))])


def random_rotations(gen, n):
    q = gen.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


class TestEuler:
    @pytest.mark.parametrize("order", ORDERS)
    def test_zero_is_identity(self, order):
        assert np.array_equal(euler_to_matrix([0, 0, 0], order), np.eye(3))

    def test_quarter_turn_z(self):
        R = euler_to_matrix([90, 0, 0], "ZXY")
        assert np.abs(R - np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]])).max() < 1e-12

    @pytest.mark.parametrize("order", ORDERS)
    def test_matches_elementary_product(self, order):
        a = (30.0, 40.0, 50.0)
        ref = elementary(order[0], a[0]) @ elementary(order[1], a[1]) @ elementary(order[2], a[2])
        assert np.abs(euler_to_matrix(a, order) - ref).max() < 1e-6

    def test_orders_differ(self):
        assert np.abs(euler_to_matrix((30, 40, 50), "ZXY") - euler_to_matrix((30, 40, 50), "XYZ")).max() > 0.1

    def test_bad_order(self):
        for order in ("XXY", "ABC", "XY"):
            with pytest.raises(ConfigError):
                euler_to_matrix((0, 0, 0), order)

    def test_identity_to_zero(self):
        assert np.abs(matrix_to_euler(np.eye(3), "ZXY")).max() == 0

    @pytest.mark.parametrize("order", ORDERS)
    def test_round_trip_random(self, order):
        R = random_rotations(np.random.default_rng(1), 1000)
        back = euler_to_matrix(matrix_to_euler(R, order), order)
        assert np.abs(back - R).max() < 1e-5

    @pytest.mark.parametrize("order", ORDERS)
    @pytest.mark.parametrize("mid", [90.0, -90.0, 90.0 - 1e-7, -90.0 + 1e-9])
    def test_round_trip_gimbal_lock(self, order, mid):
        gen = np.random.default_rng(2)
        for a, c in gen.uniform(-180, 180, size=(50, 2)):
            R = euler_to_matrix((a, mid, c), order)
            ang = matrix_to_euler(R, order)
            assert np.abs(euler_to_matrix(ang, order) - R).max() < 1e-5

    def test_gimbal_lock_folds_into_first_channel(self):
        ang = matrix_to_euler(euler_to_matrix((10, 90, 20), "ZXY"), "ZXY")
        assert ang[2] == 0.0 and ang[1] == pytest.approx(90)

    def test_rejects_non_rotation(self):
        with pytest.raises(RotationError):
            matrix_to_euler(2 * np.eye(3), "XYZ")


class TestProjection:
    def test_fixed_point(self):
        R = random_rotations(np.random.default_rng(3), 20)
        assert np.abs(project_to_so3(R) - R).max() < 1e-6

    def test_scaling_removed(self):
        assert np.abs(project_to_so3(2 * np.eye(3)) - np.eye(3)).max() < 1e-12

    def test_reflection_fixed(self):
        out = project_to_so3(np.diag([1.0, 1.0, -1.0]))
        assert is_so3(out)

    def test_perturbation_oracle(self):
        gen = np.random.default_rng(4)
        R = random_rotations(gen, 1000)
        M = R @ (np.eye(3) + 0.01 * gen.standard_normal((1000, 3, 3)))
        P = project_to_so3(M)
        eye_err = np.abs(np.swapaxes(P, -1, -2) @ P - np.eye(3)).max()
        assert eye_err < 1e-6 and np.abs(np.linalg.det(P) - 1).max() < 1e-6
        assert np.linalg.norm(P - R, axis=(1, 2)).max() < 0.05
        # nearest: no small rotation of the output gets closer to M
        for k in range(20):
            best = np.linalg.norm(M[k] - P[k])
            for _ in range(50):
                w = gen.standard_normal(3) * 1e-3
                K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
                Q = P[k] @ (np.eye(3) + K + K @ K / 2)
                Q = project_to_so3(Q)
                assert np.linalg.norm(M[k] - Q) >= best - 1e-12

    def test_rank_deficient(self):
        with pytest.raises(RotationError):
            project_to_so3(np.zeros((3, 3)))
        with pytest.raises(RotationError):
            project_to_so3(np.diag([1.0, 1.0, 0.0]))


class TestForwardKinematics:
    def test_zero_pose_is_cumulative_offsets(self):
        parents = np.array([-1, 0, 1, 2])
        offsets = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3.0]])
        pos = forward_kinematics((parents, offsets), JointAngleFrame(np.zeros(3), np.tile(np.eye(3), (4, 1, 1))))
        assert np.array_equal(pos, np.cumsum(offsets, axis=0))

    def test_quarter_turn(self):
        rots = np.stack([euler_to_matrix((90, 0, 0), "ZXY"), np.eye(3)])
        root = np.array([5.0, 6.0, 7.0])
        pos = forward_kinematics((np.array([-1, 0]), np.array([[0, 0, 0], [1.0, 0, 0]])), JointAngleFrame(root, rots))
        assert np.abs(pos[1] - (root + [0, 1, 0])).max() < 1e-12

    def test_random_chains_against_recursive_oracle(self):
        gen = np.random.default_rng(5)
        for _ in range(1000):
            J = int(gen.integers(2, 8))
            parents = np.array([-1] + [int(gen.integers(0, j)) for j in range(1, J)])
            offsets = gen.uniform(-50, 50, size=(J, 3))
            root = gen.uniform(-1000, 1000, size=3)
            rots = random_rotations(gen, J)
            got = forward_kinematics((parents, offsets), JointAngleFrame(root, rots))
            assert np.abs(got - fk_oracle(parents, offsets, root, rots)).max() < 1e-5

    def test_unit_scale(self):
        h = synth_hierarchy(5)
        frame = JointAngleFrame(np.array([1.0, 2, 3]), random_rotations(np.random.default_rng(6), 5))
        assert np.allclose(forward_kinematics(h, frame, 0.001), forward_kinematics(h, frame) * 0.001)

    def test_translation_equivariance(self):
        h = synth_hierarchy(6)
        rots = random_rotations(np.random.default_rng(7), 6)
        a = forward_kinematics(h, JointAngleFrame(np.zeros(3), rots))
        b = forward_kinematics(h, JointAngleFrame(np.array([10.0, -3, 4]), rots))
        assert np.allclose(b - a, [10.0, -3, 4])

    def test_size_mismatch(self):
        with pytest.raises((InputError, ValueError)):
            forward_kinematics(synth_hierarchy(5), JointAngleFrame(np.zeros(3), np.tile(np.eye(3), (4, 1, 1))))

    def test_clip_angle_round_trip(self):
        h = synth_hierarchy(5)
        frames = np.random.default_rng(8).uniform(-170, 170, size=(4, h.num_channels))
        m = MotionClip(1 / 24, frames)
        ang = clip_to_angles(h, m)
        back = angles_to_clip(h, ang, m.frame_time)
        assert np.abs(clip_positions(h, back) - clip_positions(h, m)).max() < 1e-8


class TestLinkLengths:
    def test_fk_preserves_offsets(self):
        h = synth_hierarchy(8)
        rots = random_rotations(np.random.default_rng(9), 8 * 6).reshape(6, 8, 3, 3)
        pos = forward_kinematics(h, JointAngleFrame(np.zeros((6, 3)), rots))
        L = link_lengths(pos, h)
        assert np.abs(L - np.linalg.norm(h.offsets[1:], axis=1)).max() < 1e-9

    def test_pythagoras(self):
        h = synth_hierarchy(4)
        pos = forward_kinematics(h, JointAngleFrame(np.zeros(3), np.tile(np.eye(3), (4, 1, 1))))
        leaf = [j for j in range(4) if j not in h.parents][0]
        before = link_lengths(pos, h)
        moved = pos.copy()
        moved[leaf] += [3.0, 4.0, 0.0]
        after = link_lengths(moved, h)
        k = leaf - 1
        off = h.offsets[leaf]
        assert after[k] == pytest.approx(np.linalg.norm(off + [3.0, 4.0, 0.0]))
        assert np.array_equal(np.delete(after, k), np.delete(before, k))


class TestPelvisAlign:
    def test_pelvis_to_origin(self):
        pose = np.random.default_rng(10).normal(size=(5, 3))
        pose[0] = 5.0
        out = pelvis_align(pose)
        assert np.array_equal(out[0], np.zeros(3))
        assert np.allclose(out[1:] - out[1], pose[1:] - pose[1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_idempotent_and_translation_invariant(self, seed):
        gen = np.random.default_rng(seed)
        pose = gen.normal(size=(3, 6, 3)) * 100
        a = pelvis_align(pose)
        assert np.array_equal(pelvis_align(a), a)
        assert np.allclose(pelvis_align(pose + gen.normal(size=3) * 1000), a, atol=1e-9)
