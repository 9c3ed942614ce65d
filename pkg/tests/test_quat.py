"""Quaternion utilities checked against rotation-matrix arithmetic."""

import numpy as np
import pytest

from seqjepa import quat


def random_unit_quat(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def test_identity_matrix():
    assert np.allclose(quat.to_matrix(quat.IDENTITY), np.eye(3))


def test_qmult_matches_matrix_product():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a, b = random_unit_quat(rng), random_unit_quat(rng)
        left = quat.to_matrix(quat.qmult(a, b))
        right = quat.to_matrix(a) @ quat.to_matrix(b)
        assert np.abs(left - right).max() < 1e-6


def test_qconj_is_matrix_transpose():
    rng = np.random.default_rng(8)
    for _ in range(200):
        q = random_unit_quat(rng)
        assert np.abs(quat.to_matrix(quat.qconj(q)) - quat.to_matrix(q).T).max() < 1e-6


def test_from_z_angle_closed_form():
    theta = np.pi / 3
    q = quat.from_z_angle(theta)
    c, s = np.cos(theta), np.sin(theta)
    expected = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    assert np.allclose(quat.to_matrix(q), expected, atol=1e-12)
    assert np.allclose(q, [np.cos(theta / 2), 0, 0, np.sin(theta / 2)])


def test_from_axis_angle_rodrigues():
    rng = np.random.default_rng(9)
    for _ in range(200):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        theta = rng.uniform(-np.pi, np.pi)
        kx = np.array(
            [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
        )
        rodrigues = np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx
        assert np.abs(quat.to_matrix(quat.from_axis_angle(axis, theta)) - rodrigues).max() < 1e-9


def test_qnormalize_unit_and_zero():
    q = quat.qnormalize(np.array([2.0, 0.0, 0.0, 0.0]))
    assert np.allclose(q, quat.IDENTITY)
    with pytest.raises(ValueError):
        quat.qnormalize(np.zeros(4))


def test_double_cover_sign_irrelevant_in_matrix():
    rng = np.random.default_rng(10)
    q = random_unit_quat(rng)
    assert np.allclose(quat.to_matrix(q), quat.to_matrix(-q))
