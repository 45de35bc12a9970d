import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invgraph import autodiff as ad
from invgraph import geometry as geo


# ---------------------------------------------------------------------------
# icosphere
# ---------------------------------------------------------------------------

def test_icosahedron_counts():
    mesh = geo.make_icosphere(0)
    assert mesh.n_vertices == 12
    assert mesh.n_faces == 20
    assert len(mesh.edges()) == 30


def test_subdiv1_counts():
    # V' = V + E = 12 + 30, F' = 4F = 80
    mesh = geo.make_icosphere(1)
    assert mesh.n_vertices == 42
    assert mesh.n_faces == 80


@pytest.mark.parametrize("level", [0, 1, 2, 3])
def test_euler_characteristic(level):
    assert geo.make_icosphere(level).euler_characteristic() == 2


def test_vertices_on_unit_sphere():
    mesh = geo.make_icosphere(2)
    radii = np.linalg.norm(mesh.template_vertices, axis=1)
    assert np.allclose(radii, 1.0, atol=1e-12)


def test_every_vertex_referenced():
    mesh = geo.make_icosphere(1)
    assert set(mesh.faces.ravel()) == set(range(mesh.n_vertices))


def test_faces_oriented_outward():
    mesh = geo.make_icosphere(2)
    tri = mesh.template_vertices[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroids = tri.mean(axis=1)
    assert ((normals * centroids).sum(axis=1) > 0).all()


def test_uv_range_and_seam_duplicates():
    mesh = geo.make_icosphere(2)
    assert mesh.uvs.min() >= 0.0 and mesh.uvs.max() <= 1.0
    # seam handling: no face spans more than half the u range after remap
    for fu in mesh.faces_uv:
        us = mesh.uvs[fu, 0]
        assert us.max() - us.min() < 0.5


def test_subdivisions_out_of_range():
    with pytest.raises(geo.GeometryError):
        geo.make_icosphere(6)
    with pytest.raises(geo.GeometryError):
        geo.make_icosphere(-1)


def test_obj_export(tmp_path):
    mesh = geo.make_icosphere(0)
    path = tmp_path / "sphere.obj"
    geo.export_obj(mesh, path)
    text = path.read_text().splitlines()
    assert sum(1 for ln in text if ln.startswith("v ")) == 12
    assert sum(1 for ln in text if ln.startswith("f ")) == 20
    assert any(ln.startswith("vt ") for ln in text)


# ---------------------------------------------------------------------------
# laplacian / dihedral operators
# ---------------------------------------------------------------------------

def test_icosahedron_laplacian_rows():
    mesh = geo.make_icosphere(0)
    lap = geo.uniform_laplacian(mesh)
    for nb in lap.neighbors:
        assert len(nb) == 5
    assert np.allclose(lap.matrix.sum(axis=1), 1.0)
    assert np.allclose(lap.matrix[lap.matrix > 0], 0.2)


def test_laplacian_residual_shrinks_with_subdivision():
    residuals = []
    for level in (1, 2, 3):
        mesh = geo.make_icosphere(level)
        lap = geo.uniform_laplacian(mesh)
        v = mesh.template_vertices
        residuals.append(np.abs(lap.apply(v) - v).max())
    assert residuals[0] > residuals[1] > residuals[2]


def test_laplacian_translation_invariance():
    mesh = geo.make_icosphere(1)
    lap = geo.uniform_laplacian(mesh)
    v = mesh.template_vertices
    t = np.array([0.3, -1.2, 2.0])
    assert np.allclose(lap.apply(v + t), lap.apply(v) + t, atol=1e-12)


def test_dihedral_pairs_counts():
    assert len(geo.dihedral_pairs(geo.make_icosphere(0))) == 30
    # E' = 2E + 3F = 60 + 60
    assert len(geo.dihedral_pairs(geo.make_icosphere(1))) == 120


def test_dihedral_pairs_share_edge():
    mesh = geo.make_icosphere(1)
    for fa, fb, (u, v) in geo.dihedral_pairs(mesh):
        shared = set(mesh.faces[fa]) & set(mesh.faces[fb])
        assert shared == {u, v}


def test_non_manifold_edge_rejected():
    mesh = geo.make_icosphere(0)
    bad_faces = np.concatenate([mesh.faces, mesh.faces[:1]], axis=0)
    broken = geo.TriMesh(mesh.template_vertices, bad_faces, mesh.uvs,
                         np.concatenate([mesh.faces_uv, mesh.faces_uv[:1]]))
    with pytest.raises(geo.GeometryError, match="non-manifold"):
        geo.dihedral_pairs(broken)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def test_camera_from_bin_angles():
    cam = geo.camera_from_bin(3, 12)
    assert math.isclose(cam.azimuth, math.pi / 2)
    cam0 = geo.camera_from_bin(0, 12)
    assert cam0.azimuth == 0.0 and cam0.elevation == 0.0
    cam11 = geo.camera_from_bin(11, 12)
    assert math.isclose(math.degrees(cam11.azimuth), 330.0)


def test_camera_from_bin_validation():
    with pytest.raises(geo.GeometryError):
        geo.camera_from_bin(0, 1)
    with pytest.raises(geo.GeometryError):
        geo.camera_from_bin(12, 12)


def test_origin_projects_to_image_center():
    for az, el in [(0.0, 0.0), (1.0, 0.2), (4.0, -0.3)]:
        cam = geo.CameraParams(az, el, 2.5)
        screen, depth = geo.project(np.zeros((1, 3)), cam, 64, 64)
        assert np.allclose(screen.data, [[32.0, 32.0]], atol=1e-9)
        assert np.allclose(depth.data, [2.5])


def test_projected_radius_halves_with_distance():
    mesh = geo.make_icosphere(2)
    pts = mesh.template_vertices * 0.05

    def radius(dist):
        cam = geo.CameraParams(0.3, 0.1, dist)
        screen, _ = geo.project(pts, cam, 128, 128)
        return np.abs(screen.data - 64.0).max()

    assert radius(4.0) / radius(8.0) == pytest.approx(2.0, rel=0.02)


def test_azimuth_half_turn_symmetry():
    pts = np.array([[0.2, 0.1, 0.3], [-0.1, 0.05, -0.2]])
    flipped = pts * np.array([-1.0, 1.0, -1.0])
    cam0 = geo.CameraParams(0.0, 0.15, 3.0)
    cam_pi = geo.CameraParams(math.pi, 0.15, 3.0)
    s0, _ = geo.project(flipped, cam0, 64, 64)
    s1, _ = geo.project(pts, cam_pi, 64, 64)
    assert np.allclose(s0.data, s1.data, atol=1e-9)


def test_camera_rotation_equivariance():
    # rotating the camera azimuth by delta == rotating the mesh by -delta about +y
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.4, 0.4, size=(20, 3))
    delta = 0.7
    cam = geo.CameraParams(1.1, 0.2, 3.0)
    cam_rot = geo.CameraParams(1.1 + delta, 0.2, 3.0)
    c, s = math.cos(-delta), math.sin(-delta)
    rot_y = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    s_cam, _ = geo.project(pts, cam_rot, 96, 96)
    s_mesh, _ = geo.project(pts @ rot_y.T, cam, 96, 96)
    assert np.allclose(s_cam.data, s_mesh.data, atol=1e-9)


def test_vertex_behind_near_plane_reports_index():
    cam = geo.CameraParams(0.0, 0.0, 1.0)
    pts = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 5.0]])
    with pytest.raises(geo.GeometryError, match="vertex 1"):
        geo.project(pts, cam, 64, 64)


def test_project_gradients_match_fd():
    rng = np.random.default_rng(5)
    pts = ad.Tensor(rng.uniform(-0.4, 0.4, size=(10, 3)))
    w = ad.Tensor(rng.normal(size=(10, 2)))

    def scalar_of_cam(cam_vec):
        az, el, dist = cam_vec[0], cam_vec[1], cam_vec[2]
        screen, _ = geo.project(pts, (az, el, dist, geo.DEFAULT_FOV), 64, 64)
        return ad.sum_(ad.mul(screen, w))

    err = ad.grad_check(scalar_of_cam, ad.Tensor([0.8, 0.25, 3.0]), eps=1e-4)
    assert err < 1e-4


def test_project_vertex_gradients_match_fd():
    rng = np.random.default_rng(6)
    cam = geo.CameraParams(0.9, 0.1, 3.0)
    w = ad.Tensor(rng.normal(size=(6, 2)))

    def scalar_of_verts(v):
        screen, _ = geo.project(v, cam, 64, 64)
        return ad.sum_(ad.mul(screen, w))

    err = ad.grad_check(scalar_of_verts, ad.Tensor(rng.uniform(-0.4, 0.4, size=(6, 3))))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def test_quat_diff_identity():
    q = geo.camera_to_quaternion(geo.CameraParams(0.7, 0.2, 2.0))
    assert geo.quat_diff(q, q) == (0.0, 0.0)


def test_quat_double_cover():
    q = geo.camera_to_quaternion(geo.CameraParams(0.7, 0.2, 2.0))
    nq = geo.Quaternion(-q.w, -q.x, -q.y, -q.z)
    axis, angle = geo.quat_diff(q, nq)
    assert axis < 1e-9 and angle < 1e-9


def test_quat_diff_same_axis_angle_gap():
    def quat_about(axis, deg):
        axis = np.asarray(axis) / np.linalg.norm(axis)
        half = math.radians(deg) / 2.0
        return geo.Quaternion(math.cos(half), *(math.sin(half) * axis))

    axis, angle = geo.quat_diff(quat_about([0, 1, 0], 30.0), quat_about([0, 1, 0], 31.0))
    assert axis == pytest.approx(0.0, abs=1e-9)
    assert angle == pytest.approx(1.0, abs=1e-9)


@given(st.floats(0.0, 2 * math.pi), st.floats(-0.4, 0.4),
       st.floats(0.0, 2 * math.pi), st.floats(-0.4, 0.4))
@settings(max_examples=40, deadline=None)
def test_quat_diff_symmetry(az1, el1, az2, el2):
    qa = geo.camera_to_quaternion(geo.CameraParams(az1, el1, 2.0))
    qb = geo.camera_to_quaternion(geo.CameraParams(az2, el2, 2.0))
    assert geo.quat_diff(qa, qb) == pytest.approx(geo.quat_diff(qb, qa), abs=1e-9)


def test_camera_quaternion_half_turn():
    qa = geo.camera_to_quaternion(geo.CameraParams(0.0, 0.0, 2.0))
    qb = geo.camera_to_quaternion(geo.CameraParams(math.pi, 0.0, 2.0))
    ra = _quat_to_matrix(qa)
    rb = _quat_to_matrix(qb)
    rel = rb @ ra.T
    angle = math.degrees(math.acos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)))
    assert angle == pytest.approx(180.0, abs=1e-6)


def _quat_to_matrix(q):
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def test_rotation_to_quaternion_roundtrip():
    rng = np.random.default_rng(11)
    for _ in range(20):
        cam = geo.CameraParams(rng.uniform(0, 2 * math.pi), rng.uniform(-0.5, 0.5),
                               rng.uniform(1.5, 4.0))
        R = geo.camera_rotation_matrix(cam)
        q = geo.rotation_to_quaternion(R)
        assert np.allclose(_quat_to_matrix(q), R, atol=1e-9)
