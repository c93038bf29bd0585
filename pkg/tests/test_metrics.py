import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from pointup.errors import InvalidArgumentError, InvalidInputError
from pointup.metrics import (REPORT_SCALE, MetricReport, ReferenceMesh, chamfer, closest_point_on_triangle,
                             evaluate, hausdorff_metric, p2f, point_to_mesh_distances,
                             point_triangle_distance)


def sq(p, q):
    return (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2])


def nearest_sq_oracle(a, b):
    return [min(sq(p, q) for q in b) for p in a]


def chamfer_oracle(a, b):
    return math.fsum(nearest_sq_oracle(a, b)) / len(a) + math.fsum(nearest_sq_oracle(b, a)) / len(b)


def hausdorff_oracle(a, b):
    return math.sqrt(max(max(nearest_sq_oracle(a, b)), max(nearest_sq_oracle(b, a))))


clouds = st.integers(1, 24).flatmap(
    lambda n: st.lists(st.tuples(*[st.floats(-10, 10, allow_subnormal=False)] * 3), min_size=n, max_size=n))


@given(clouds, clouds)
def test_against_brute_force(a, b):
    a_arr, b_arr = np.array(a), np.array(b)
    assert chamfer(a_arr, b_arr) == chamfer_oracle(a, b)
    assert hausdorff_metric(a_arr, b_arr) == hausdorff_oracle(a, b)


def test_exact_oracle_on_random_clouds(rng):
    for _ in range(30):
        a = rng.normal(size=(rng.integers(1, 65), 3))
        b = rng.normal(size=(rng.integers(1, 65), 3))
        al, bl = a.tolist(), b.tolist()
        assert chamfer(a, b) == chamfer_oracle(al, bl)
        assert hausdorff_metric(a, b) == hausdorff_oracle(al, bl)


def test_examples():
    a = np.array([[0.0, 0, 0]])
    assert chamfer(a, [[1.0, 0, 0]]) == 2.0
    assert hausdorff_metric(a, [[0.0, 0, 0], [2, 0, 0]]) == 2.0
    pts = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer(pts, pts) == 0 and hausdorff_metric(pts, pts) == 0
    b = pts[:7] + 0.3
    assert chamfer(pts, b) == chamfer(b, pts)
    with pytest.raises(InvalidArgumentError):
        chamfer(np.zeros((0, 3)), pts)
    with pytest.raises(InvalidArgumentError):
        hausdorff_metric(pts, np.zeros((0, 3)))


def test_hausdorff_directional_monotone(rng):
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(12, 3))
    base = max(nearest_sq_oracle(a.tolist(), b.tolist()))
    grown = np.vstack([a, rng.normal(size=(5, 3)) * 3])
    assert max(nearest_sq_oracle(grown.tolist(), b.tolist())) >= base


UNIT = ReferenceMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def test_p2f_hand_cases():
    assert abs(point_to_mesh_distances([[0.25, 0.25, 2]], UNIT)[0] - 2.0) <= 1e-12
    assert abs(point_to_mesh_distances([[2.0, 0, 1]], UNIT)[0] - np.sqrt(2)) <= 1e-12
    np.testing.assert_allclose(closest_point_on_triangle([2.0, 0, 1], *UNIT.vertices), [1, 0, 0], atol=1e-15)
    mean, std = p2f(UNIT.vertices, UNIT)
    assert mean == 0 and std == 0


def test_closest_point_regions():
    a, b, c = UNIT.vertices
    cases = {(-1, -1, 0): (0, 0, 0), (0.5, -1, 0): (0.5, 0, 0), (-1, 0.5, 0): (0, 0.5, 0),
             (1, 1, 0): (0.5, 0.5, 0), (0, 3, 1): (0, 1, 0), (0.2, 0.3, -4): (0.2, 0.3, 0)}
    for p, q in cases.items():
        np.testing.assert_allclose(closest_point_on_triangle(p, a, b, c), q, atol=1e-15)


def test_distance_bounded_by_vertices_and_matches_sampling(rng):
    for _ in range(50):
        tri = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        d = point_triangle_distance(p, *tri)
        assert d <= np.linalg.norm(tri - p, axis=1).min() + 1e-12
        # dense barycentric sampling can only find points at least as far
        u, v = np.meshgrid(np.linspace(0, 1, 60), np.linspace(0, 1, 60))
        keep = u + v <= 1
        samples = tri[0] + u[keep, None] * (tri[1] - tri[0]) + v[keep, None] * (tri[2] - tri[0])
        sampled = np.linalg.norm(samples - p, axis=1).min()
        assert d <= sampled + 1e-12 and sampled - d < 0.05


def test_rigid_invariance(rng):
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(25, 3))
    verts = rng.normal(size=(6, 3))
    mesh = ReferenceMesh(verts, [[0, 1, 2], [2, 3, 4], [1, 4, 5]])
    rot = Rotation.random(random_state=1).as_matrix()
    t = np.array([0.4, -1.2, 3.0])

    def move(x):
        return x @ rot.T + t

    before = evaluate(a, b, mesh)
    after = evaluate(move(a), move(b), ReferenceMesh(move(verts), mesh.triangles))
    for key in MetricReport.FIELDS:
        assert abs(getattr(before, key) - getattr(after, key)) / REPORT_SCALE < 1e-9


def test_evaluate_scaling_and_text(rng):
    a, b = rng.normal(size=(15, 3)), rng.normal(size=(9, 3))
    rep = evaluate(a, b, UNIT)
    assert rep.cd == chamfer(a, b) * 1e3
    assert rep.hd == hausdorff_metric(a, b) * 1e3
    mean, std = p2f(a, UNIT)
    assert (rep.p2f_mean, rep.p2f_std) == (mean * 1e3, std * 1e3)
    assert all(v >= 0 for _, v in rep._items())
    assert evaluate(a, a).cd == 0 and evaluate(a, a).hd == 0
    short = evaluate(a, b)
    assert short.p2f_mean is None
    lines = rep.to_text().splitlines()
    assert [line.split("=")[0].strip() for line in lines] == list(MetricReport.FIELDS)
    assert rep.csv_header() == "cd,hd,p2f_mean,p2f_std"
    assert len(rep.csv_row().split(",")) == 4


def test_mesh_validation():
    with pytest.raises(InvalidInputError):
        ReferenceMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(InvalidInputError):
        ReferenceMesh(np.eye(3), [[0, 1, 1]])
    with pytest.raises(InvalidInputError):
        ReferenceMesh(np.array([[np.nan, 0, 0], [1, 0, 0], [0, 1, 0]]), [[0, 1, 2]])
    with pytest.raises(InvalidArgumentError):
        p2f([[0.0, 0, 0]], ReferenceMesh(np.eye(3), np.zeros((0, 3), int)))
