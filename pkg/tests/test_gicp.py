from __future__ import annotations

import math

import numpy as np
import pytest
from oracles import structured_scene
from hypothesis import given
from hypothesis import strategies as st

from radarodo.errors import NoCorrespondences, TooFewPoints
from radarodo.geom import Pose, Quat, quat_from_euler_zyx
from radarodo.gicp import GicpConfig, build_gicp_cloud, constraint_weight, gicp_align


def yaw_pose(deg: float, trans=(0.0, 0.0, 0.0)) -> Pose:
    return Pose(0.0, trans, quat_from_euler_zyx((math.radians(deg), 0, 0)))


# -- cloud construction ----------------------------------------------------


def test_planar_covariances_have_vertical_normal(rng):
    pts = np.column_stack([rng.uniform(-5, 5, 30), rng.uniform(-5, 5, 30), np.zeros(30)])
    cloud = build_gicp_cloud(pts)
    for C in cloud.covariances:
        w, v = np.linalg.eigh(C)
        assert np.allclose(w, [1e-3, 1, 1])
        assert abs(abs(v[2, 0]) - 1.0) < 1e-3


def test_covariances_symmetric_psd(rng):
    cloud = build_gicp_cloud(rng.normal(size=(100, 3)))
    assert np.allclose(cloud.covariances, cloud.covariances.transpose(0, 2, 1))
    assert np.all(np.linalg.eigvalsh(cloud.covariances) > 0)


def test_neighbour_count_clamped(rng):
    assert build_gicp_cloud(rng.normal(size=(12, 3)), k_neighbors=20).k == 11


def test_too_few_points(rng):
    with pytest.raises(TooFewPoints):
        build_gicp_cloud(rng.normal(size=(9, 3)))


def test_nearest_matches_all_pairs():
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(100, 3))
    cloud = build_gicp_cloud(pts)
    q = rng.normal(size=(200, 3))
    d, j = cloud.nearest(q)
    D = np.linalg.norm(q[:, None] - pts[None], axis=2)
    assert np.array_equal(j, np.argmin(D, axis=1))
    assert np.allclose(d, D.min(axis=1), atol=1e-12)


def test_nearest_respects_max_dist(rng):
    cloud = build_gicp_cloud(rng.normal(size=(50, 3)))
    d, j = cloud.nearest(np.array([[100.0, 0, 0]]), max_dist=1.0)
    assert math.isinf(d[0]) and j[0] == len(cloud)


# -- alignment -------------------------------------------------------------


def test_self_alignment_identity(rng):
    c = build_gicp_cloud(structured_scene(rng))
    res = gicp_align(c, c, Pose())
    assert np.allclose(res.transform.trans, 0, atol=1e-9)
    assert res.transform.rot.angle() < 1e-9
    assert res.fitness < 1e-12 and res.converged


def test_recovers_pure_shift(rng):
    src = structured_scene(rng)
    res = gicp_align(build_gicp_cloud(src), build_gicp_cloud(src + [0.5, 0, 0]), Pose())
    assert np.allclose(res.transform.trans, [0.5, 0, 0], atol=1e-3)


def test_recovers_yaw_with_noise_monte_carlo():
    rng = np.random.default_rng(31)
    worst_rot, worst_fit = 0.0, 0.0
    for _ in range(20):
        src = structured_scene(rng)
        T = yaw_pose(10.0)
        tgt = T.transform_points(src) + rng.normal(scale=0.02, size=src.shape)
        res = gicp_align(build_gicp_cloud(src), build_gicp_cloud(tgt), yaw_pose(8.0))
        worst_rot = max(worst_rot, math.degrees(res.transform.rot.angle_to(T.rot)))
        worst_fit = max(worst_fit, res.fitness)
    assert worst_rot < 0.5
    assert worst_fit < 4e-3


def test_equivariance(rng):
    src = structured_scene(rng)
    T = Pose(0, [0.2, -0.1, 0.05], quat_from_euler_zyx((0.05, 0.01, -0.01)))
    tgt_c = build_gicp_cloud(T.transform_points(src))
    G = Pose(0, [0.1, 0, 0], quat_from_euler_zyx((0.03, 0, 0)))
    base = gicp_align(build_gicp_cloud(src), tgt_c, G)
    # moving the source by S changes the answer to base * S^-1 and the guess likewise
    S = Pose(0, [1.0, 2.0, 0.3], quat_from_euler_zyx((0.4, 0.02, 0.01)))
    moved = gicp_align(build_gicp_cloud(S.transform_points(src)), tgt_c, G.compose(S.inverse()))
    expect = base.transform.compose(S.inverse())
    assert np.allclose(moved.transform.trans, expect.trans, atol=1e-6)
    assert moved.transform.rot.angle_to(expect.rot) < 1e-6


def test_cost_non_increasing_per_iteration(rng):
    src = structured_scene(rng)
    tgt = yaw_pose(6.0, (0.3, 0.2, 0)).transform_points(src) + rng.normal(scale=0.05, size=src.shape)
    res = gicp_align(build_gicp_cloud(src), build_gicp_cloud(tgt), Pose())
    assert res.cost_history
    for before, after in res.cost_history:
        assert after <= before


def test_no_correspondences(rng):
    c = build_gicp_cloud(rng.normal(size=(50, 3)))
    far = build_gicp_cloud(rng.normal(size=(50, 3)) + 1000)
    with pytest.raises(NoCorrespondences):
        gicp_align(c, far, Pose())


def test_not_converged_is_a_flag(rng):
    src = structured_scene(rng)
    tgt = yaw_pose(5.0, (0.4, 0, 0)).transform_points(src)
    res = gicp_align(build_gicp_cloud(src), build_gicp_cloud(tgt), Pose(), GicpConfig(max_iter=1))
    assert not res.converged and res.iterations == 1


# -- weights ---------------------------------------------------------------


def test_weight_at_threshold():
    assert constraint_weight(3.5) == 1.0 / 7.000001
    assert constraint_weight(3.5) == pytest.approx(0.142857, abs=1e-6)


def test_weight_above_threshold_discards():
    assert constraint_weight(3.6) is None


def test_weight_at_zero():
    assert constraint_weight(0.0) == pytest.approx(1e6)


@given(st.floats(0, 3.5), st.floats(0, 3.5))
def test_weight_strictly_decreasing(a, b):
    if b - a > 1e-9:  # below this the epsilon floor hides the difference
        assert constraint_weight(a) > constraint_weight(b)


@given(st.floats(0, 100))
def test_discard_iff_above_threshold(f):
    assert (constraint_weight(f) is None) == (f > 3.5)


def test_weight_rejects_negative():
    with pytest.raises(ValueError):
        constraint_weight(-1.0)
