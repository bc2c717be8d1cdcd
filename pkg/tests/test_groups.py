import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gtakit import groups
from gtakit.groups import ProductElement, Se3Pose, So2Angle, So3Rotation

seeds = st.integers(0, 2**32 - 1)


def rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def test_so2_wraps_into_range():
    a = So2Angle(-0.5)
    assert 0 <= a.theta < 2 * math.pi
    assert a.theta == pytest.approx(2 * math.pi - 0.5)
    assert So2Angle(7 * math.pi).theta == pytest.approx(math.pi)


def test_so2_compose_keeps_unwrapped_sum():
    a, b = So2Angle(5.0), So2Angle(4.0)
    ab = groups.compose(a, b)
    assert ab.lift == 9.0
    assert ab.theta == pytest.approx(9.0 - 2 * math.pi)
    assert groups.inverse(a).lift == -5.0


def test_so2_is_immutable():
    with pytest.raises(AttributeError):
        So2Angle(1.0).theta = 2.0


def test_so3_rejects_writes():
    r = So3Rotation(np.eye(3))
    with pytest.raises(ValueError):
        r.r[0, 0] = 2.0


def test_se3_compose_matches_homogeneous_product():
    a = Se3Pose(rz(0.3), [1.0, 2.0, 3.0])
    b = Se3Pose(rz(-1.1), [0.5, -1.0, 0.0])
    # frozen: R = Rz(-0.8), T = Rz(0.3) @ (0.5, -1, 0) + (1, 2, 3)
    ab = groups.compose(a, b)
    c, s = math.cos(0.3), math.sin(0.3)
    expect_t = np.array([c * 0.5 + s * 1.0 + 1.0, s * 0.5 - c * 1.0 + 2.0, 3.0])
    np.testing.assert_allclose(ab.rotation.r, rz(-0.8), atol=1e-15)
    np.testing.assert_allclose(ab.translation, expect_t, atol=1e-15)


def test_se3_inverse_closed_form():
    a = Se3Pose(rz(0.7), [1.0, -2.0, 0.5])
    np.testing.assert_allclose(groups.inverse(a).matrix(), np.linalg.inv(a.matrix()), atol=1e-14)


def test_compose_rejects_mixed_groups():
    with pytest.raises(groups.GroupMismatchError):
        groups.compose(So2Angle(1.0), So3Rotation.identity())
    with pytest.raises(groups.GroupMismatchError):
        groups.distance(So2Angle(1.0), So3Rotation.identity())


def test_distance_is_circular_for_angles():
    assert groups.distance(So2Angle(0.01), So2Angle(2 * math.pi - 0.01)) == pytest.approx(0.02)


def test_patch_angles_corners():
    h, w = groups.patch_angles(0, 0, 16, 16)
    assert (h.theta, w.theta) == (0.0, 0.0)
    h, w = groups.patch_angles(15, 7, 16, 8)
    assert h.theta == pytest.approx(2 * math.pi * 15 / 16)
    assert w.theta == pytest.approx(2 * math.pi * 7 / 8)


@pytest.mark.parametrize("ij", [(-1, 0), (0, 16), (16, 0)])
def test_patch_angles_out_of_range(ij):
    with pytest.raises(IndexError):
        groups.patch_angles(*ij, 16, 16)


def test_quaternion_frozen_value():
    # 90 degrees about z
    q = np.array([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)])
    np.testing.assert_allclose(groups.quaternion_to_matrix(q), rz(math.pi / 2), atol=1e-15)


def test_sampled_rotations_are_uniform_enough():
    R = groups.sample_rotations(np.random.default_rng(0), 4000)
    # for Haar measure E[R] = 0 and E[tr R] = 0
    assert np.abs(R.mean(axis=0)).max() < 0.05
    assert abs(np.trace(R, axis1=1, axis2=2).mean()) < 0.05


@given(seeds)
def test_group_axioms_product(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (groups.sample_product(rng) for _ in range(3))
    lhs = groups.compose(groups.compose(a, b), c)
    rhs = groups.compose(a, groups.compose(b, c))
    assert groups.distance(lhs, rhs) < 1e-12
    e = groups.identity_like(a)
    assert groups.distance(groups.compose(a, groups.inverse(a)), e) < 1e-12
    assert groups.distance(groups.compose(e, a), a) < 1e-12


@given(seeds)
def test_sampled_rotation_is_valid(seed):
    r = groups.sample_rotation(np.random.default_rng(seed))
    assert r.is_valid()


@pytest.mark.parametrize("cls", [So2Angle, So3Rotation, Se3Pose, ProductElement])
def test_sample_like_matches_type(cls, rng):
    g = cls.identity()
    assert type(groups.sample_like(g, rng)) is cls
