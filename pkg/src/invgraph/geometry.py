"""Sphere-template meshes, perspective cameras, and camera comparison utilities.

Conventions: world up is +y; azimuth 0 places the camera on +z looking at the
origin; azimuth increases toward +x; elevation raises the camera above the
xz-plane. Cameras always look at the world origin with zero roll.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# full vertical field of view (30 degree half-angle); at the default camera
# distance 2.7 a unit sphere spans ~69% of the frame
DEFAULT_FOV = math.radians(60.0)
NEAR_PLANE = 1e-3


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

class TriMesh:
    """Sphere-template triangle mesh with trainable per-vertex offsets.

    `template_vertices` (N,3) lie on the unit sphere; effective vertices are
    template + offsets. `uvs` (M,2) are indexed per corner through
    `faces_uv` (F,3) so the azimuth seam can duplicate texture coordinates
    without breaking watertight connectivity.
    """

    def __init__(self, template_vertices, faces, uvs, faces_uv, offsets=None):
        self.template_vertices = np.asarray(template_vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.uvs = np.asarray(uvs, dtype=np.float64)
        self.faces_uv = np.asarray(faces_uv, dtype=np.int64)
        n = len(self.template_vertices)
        if offsets is None:
            offsets = np.zeros((n, 3))
        self.offsets = offsets  # ndarray or autodiff.Tensor

    @property
    def n_vertices(self):
        return len(self.template_vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def effective_vertices(self):
        """template + offsets; a Tensor when offsets are tracked."""
        if isinstance(self.offsets, ad.Tensor):
            return ad.add(ad.Tensor(self.template_vertices), self.offsets)
        return self.template_vertices + self.offsets

    def effective_vertices_data(self):
        return self.template_vertices + ad.no_tape_data(self.offsets)

    def with_offsets(self, offsets):
        return TriMesh(self.template_vertices, self.faces, self.uvs,
                       self.faces_uv, offsets)

    def edges(self):
        """Unique undirected edges as an (E,2) array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self):
        return self.n_vertices - len(self.edges()) + self.n_faces


def _icosahedron():
    """Unit icosahedron with a vertex on each pole (±y)."""
    lat = math.atan(0.5)
    verts = [(0.0, 1.0, 0.0)]
    for k in range(5):
        az = 2.0 * math.pi * k / 5.0
        verts.append((math.cos(lat) * math.sin(az), math.sin(lat),
                      math.cos(lat) * math.cos(az)))
    for k in range(5):
        az = 2.0 * math.pi * (k + 0.5) / 5.0
        verts.append((math.cos(lat) * math.sin(az), -math.sin(lat),
                      math.cos(lat) * math.cos(az)))
    verts.append((0.0, -1.0, 0.0))
    v = np.array(verts)
    v /= np.linalg.norm(v, axis=1, keepdims=True)

    faces = []
    for k in range(5):
        k1 = (k + 1) % 5
        faces.append((0, 1 + k, 1 + k1))              # top cap
        faces.append((1 + k, 6 + k, 1 + k1))          # upper band
        faces.append((1 + k1, 6 + k, 6 + k1))         # lower band
        faces.append((11, 6 + k1, 6 + k))             # bottom cap
    f = np.array(faces, dtype=np.int64)

    # orient every face outward (counter-clockwise seen from outside)
    tri = v[f]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroids = tri.mean(axis=1)
    flip = (normals * centroids).sum(axis=1) < 0
    f[flip] = f[flip][:, ::-1]
    return v, f


def _subdivide(verts, faces):
    """Midpoint subdivision; midpoints re-projected onto the unit sphere."""
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key in cache:
            return cache[key]
        m = np.array(verts[a]) + np.array(verts[b])
        m /= np.linalg.norm(m)
        verts.append(tuple(m))
        cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts), np.array(out, dtype=np.int64)


def _spherical_uv(verts):
    az = np.arctan2(verts[:, 0], verts[:, 2])
    u = az / (2.0 * math.pi) + 0.5
    v = 0.5 - np.arcsin(np.clip(verts[:, 1], -1.0, 1.0)) / math.pi
    return np.stack([u, v], axis=1)


def _assign_corner_uvs(verts, faces):
    """Per-corner uv indexing with duplicated coordinates along the azimuth seam.

    Seam-crossing faces get wrap copies of their low-u corners (clamped into
    [0,1]); pole corners take the mean azimuth of their face's other corners.
    """
    base = _spherical_uv(verts)
    uvs = [tuple(p) for p in base]
    extra = {}

    def uv_index(vid, u, v):
        key = (vid, round(u, 9))
        if key not in extra:
            uvs.append((u, v))
            extra[key] = len(uvs) - 1
        return extra[key]

    pole = np.abs(verts[:, 1]) > 1.0 - 1e-9
    faces_uv = faces.copy()
    for fi, corners in enumerate(faces):
        u = base[corners, 0].copy()
        live = ~pole[corners]
        # unwrap across the seam using non-pole corners
        if live.sum() >= 2 and u[live].max() - u[live].min() > 0.5:
            for ci in range(3):
                if live[ci] and u[ci] < 0.5:
                    u[ci] += 1.0
        for ci, vid in enumerate(corners):
            if pole[vid]:
                u[ci] = u[live].mean() if live.any() else 0.5
        u = np.minimum(u, 1.0)
        for ci, vid in enumerate(corners):
            if abs(u[ci] - base[vid, 0]) > 1e-12 or pole[vid]:
                faces_uv[fi, ci] = uv_index(vid, float(u[ci]), float(base[vid, 1]))
    return np.array(uvs), faces_uv


def make_icosphere(subdivisions):
    """Watertight unit icosphere with spherical per-corner UVs and zero offsets."""
    if not 0 <= subdivisions <= 5:
        raise GeometryError(f"subdivisions must be in [0, 5], got {subdivisions}")
    verts, faces = _icosahedron()
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
    uvs, faces_uv = _assign_corner_uvs(verts, faces)
    return TriMesh(verts, faces, uvs, faces_uv)


def export_obj(mesh, path):
    """Wavefront OBJ with v/vt/f records (f indices are v/vt, 1-based)."""
    verts = mesh.effective_vertices_data()
    lines = []
    for p in verts:
        lines.append(f"v {p[0]:.8f} {p[1]:.8f} {p[2]:.8f}")
    for t in mesh.uvs:
        lines.append(f"vt {t[0]:.8f} {t[1]:.8f}")
    for f, fu in zip(mesh.faces, mesh.faces_uv):
        lines.append(f"f {f[0]+1}/{fu[0]+1} {f[1]+1}/{fu[1]+1} {f[2]+1}/{fu[2]+1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# mesh regularization operators
# ---------------------------------------------------------------------------

class LaplacianOp:
    """Uniform-weight neighbor averaging; rows sum to 1."""

    def __init__(self, neighbors, matrix):
        self.neighbors = neighbors
        self.matrix = matrix  # dense (N,N); row i averages neighbors of i

    def apply(self, vertices):
        """L @ V for (N,3) vertices; tracks gradients for Tensor input."""
        if isinstance(vertices, ad.Tensor):
            return ad.matmul(ad.Tensor(self.matrix), vertices)
        return self.matrix @ vertices


def uniform_laplacian(mesh):
    n = mesh.n_vertices
    neighbors = [set() for _ in range(n)]
    for a, b, c in mesh.faces:
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    matrix = np.zeros((n, n))
    nb_lists = []
    for i, nb in enumerate(neighbors):
        if not nb:
            raise GeometryError(f"isolated vertex {i}")
        idx = sorted(nb)
        nb_lists.append(idx)
        matrix[i, idx] = 1.0 / len(idx)
    return LaplacianOp(nb_lists, matrix)


def dihedral_pairs(mesh):
    """Adjacent-face pairs per interior edge: list of (face_a, face_b, (v0, v1))."""
    edge_faces = {}
    for fi, (a, b, c) in enumerate(mesh.faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_faces.setdefault(key, []).append(fi)
    pairs = []
    for (u, v), fs in sorted(edge_faces.items()):
        if len(fs) > 2:
            raise GeometryError(f"non-manifold edge {(u, v)} shared by {len(fs)} faces")
        if len(fs) == 2:
            pairs.append((fs[0], fs[1], (u, v)))
    return pairs


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass
class CameraParams:
    """Perspective camera looking at the origin: azimuth/elevation/distance + fixed fov."""

    azimuth: float
    elevation: float
    distance: float
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if self.distance <= 0:
            raise GeometryError(f"camera distance must be positive, got {self.distance}")
        if not 0.0 < self.fov < math.pi:
            raise GeometryError(f"fov must be in (0, pi), got {self.fov}")


def camera_from_bin(bin_index, n_bins, distance=2.7, fov=DEFAULT_FOV):
    """Coarse per-bin camera initialization: azimuth = bin * 2pi/n, elevation 0."""
    if n_bins < 2:
        raise GeometryError(f"need at least 2 bins, got {n_bins}")
    if not 0 <= bin_index < n_bins:
        raise GeometryError(f"bin {bin_index} out of range for {n_bins} bins")
    return CameraParams(azimuth=2.0 * math.pi * bin_index / n_bins,
                        elevation=0.0, distance=distance, fov=fov)


def camera_scalars(cam):
    """Normalize a camera to (azimuth, elevation, distance, fov) Tensors + float fov.

    Accepts CameraParams or a (az, el, dist, fov) tuple whose first three
    entries may be scalar Tensors (trainable cameras).
    """
    if isinstance(cam, CameraParams):
        return (ad.Tensor(np.float64(cam.azimuth)), ad.Tensor(np.float64(cam.elevation)),
                ad.Tensor(np.float64(cam.distance)), cam.fov)
    az, el, dist, fov = cam
    return ad.as_tensor(az), ad.as_tensor(el), ad.as_tensor(dist), float(fov)


def _camera_frame(az, el, dist):
    """Differentiable eye position and world-to-camera rotation rows.

    Returns (eye (3,), rows (3,3)) as Tensors; rows are [right, up, -forward].
    """
    cos_el, sin_el = ad.cos(el), ad.sin(el)
    cos_az, sin_az = ad.cos(az), ad.sin(az)
    ex = ad.mul(cos_el, sin_az)
    ey = sin_el
    ez = ad.mul(cos_el, cos_az)
    eye_dir = ad.concat([ad.reshape(ex, (1,)), ad.reshape(ey, (1,)), ad.reshape(ez, (1,))])
    eye = ad.mul(eye_dir, ad.reshape(dist, (1,)))

    # forward = -eye_dir; right = normalize(cross(forward, +y)) = (-fz, 0, fx)/|.|
    fx = ad.neg(ex)
    fz = ad.neg(ez)
    horiz = ad.sqrt(ad.add(ad.mul(fx, fx), ad.mul(fz, fz)))
    rx = ad.div(ad.neg(fz), horiz)
    rz = ad.div(fx, horiz)
    zero = ad.Tensor(np.zeros(1))
    right = ad.concat([ad.reshape(rx, (1,)), zero, ad.reshape(rz, (1,))])
    # up = cross(right, forward)
    f_vec = ad.neg(eye_dir)
    ux = ad.sub(ad.mul(right[1], f_vec[2]), ad.mul(right[2], f_vec[1]))
    uy = ad.sub(ad.mul(right[2], f_vec[0]), ad.mul(right[0], f_vec[2]))
    uz = ad.sub(ad.mul(right[0], f_vec[1]), ad.mul(right[1], f_vec[0]))
    up = ad.concat([ad.reshape(ux, (1,)), ad.reshape(uy, (1,)), ad.reshape(uz, (1,))])
    rows = ad.concat([ad.reshape(right, (1, 3)), ad.reshape(up, (1, 3)),
                      ad.reshape(ad.neg(f_vec), (1, 3))], axis=0)
    return eye, rows


class CameraFrame:
    """A camera with its differentiable look-at frame built once.

    Rendering several meshes under one camera on a single tape reuses the
    ~40 scalar trig nodes of the frame instead of rebuilding them per render.
    """

    def __init__(self, cam):
        az, el, dist, fov = camera_scalars(cam)
        self.fov = fov
        self.eye, self.rows = _camera_frame(az, el, dist)


def project(vertices, cam, width, height, near=NEAR_PLANE):
    """Perspective look-at projection to pixel coordinates.

    Returns (screen (N,2) Tensor in pixel units, depth (N,) Tensor). Depth
    increases away from the camera; any vertex closer than `near` is an error
    carrying its index. Gradients flow to vertices and camera scalars.
    `cam` may be a CameraParams, an (az, el, dist, fov) tuple of scalars or
    Tensors, or a prebuilt CameraFrame.
    """
    if isinstance(cam, CameraFrame):
        fov = cam.fov
        eye, rows = cam.eye, cam.rows
        verts = ad.as_tensor(vertices)
    else:
        az, el, dist, fov = camera_scalars(cam)
        verts = ad.as_tensor(vertices)
        eye, rows = _camera_frame(az, el, dist)
    rel = ad.sub(verts, ad.reshape(eye, (1, 3)))
    cam_pts = ad.matmul(rel, ad.transpose(rows))  # (N,3) in camera frame
    depth = ad.neg(cam_pts[:, 2])
    bad = np.nonzero(depth.data <= near)[0]
    if bad.size:
        raise GeometryError(f"vertex {int(bad[0])} behind near plane "
                            f"(depth {depth.data[bad[0]]:.3g} <= {near:g})")
    focal = 1.0 / math.tan(fov / 2.0)
    aspect = width / height
    ndc_x = ad.div(ad.mul(cam_pts[:, 0], ad.Tensor(np.float64(focal / aspect))), depth)
    ndc_y = ad.div(ad.mul(cam_pts[:, 1], ad.Tensor(np.float64(focal))), depth)
    px = ad.mul(ad.add(ndc_x, ad.Tensor(np.float64(1.0))), ad.Tensor(np.float64(0.5 * width)))
    py = ad.mul(ad.sub(ad.Tensor(np.float64(1.0)), ndc_y), ad.Tensor(np.float64(0.5 * height)))
    screen = ad.concat([ad.reshape(px, (-1, 1)), ad.reshape(py, (-1, 1))], axis=1)
    return screen, depth


def camera_rotation_matrix(cam):
    """World-to-camera rotation of a CameraParams, as a plain (3,3) array."""
    az, el, dist, _ = camera_scalars(cam)
    _, rows = _camera_frame(az, el, dist)
    return rows.data.copy()


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

@dataclass
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def normalized(self):
        n = math.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)
        if n < 1e-12:
            raise GeometryError("cannot normalize zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def canonical(self):
        """Resolve the q ~ -q double cover by making w non-negative."""
        q = self.normalized()
        return Quaternion(-q.w, -q.x, -q.y, -q.z) if q.w < 0 else q


def rotation_to_quaternion(R):
    """Unit quaternion of a proper rotation matrix."""
    R = np.asarray(R)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = Quaternion(0.25 * s, (R[2, 1] - R[1, 2]) / s,
                       (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        vals = [0.0, 0.0, 0.0]
        vals[i] = 0.25 * s
        vals[j] = (R[j, i] + R[i, j]) / s
        vals[k] = (R[k, i] + R[i, k]) / s
        q = Quaternion((R[k, j] - R[j, k]) / s, *vals)
    return q.normalized()


def camera_to_quaternion(cam):
    """Unit quaternion of the camera's world-to-camera rotation."""
    return rotation_to_quaternion(camera_rotation_matrix(cam))


def quat_diff(a, b):
    """(axis difference, rotation-angle difference) between two rotations, degrees.

    The q ~ -q ambiguity is resolved before comparison; a zero rotation has
    an undefined axis, which compares as 0 degrees.
    """
    qa, qb = a.canonical(), b.canonical()

    def axis_angle(q):
        vec = np.array([q.x, q.y, q.z])
        s = np.linalg.norm(vec)
        angle = 2.0 * math.atan2(s, q.w)
        axis = vec / s if s > 1e-12 else None
        return axis, angle

    axis_a, ang_a = axis_angle(qa)
    axis_b, ang_b = axis_angle(qb)
    if axis_a is None or axis_b is None:
        axis_deg = 0.0
    else:
        axis_deg = math.degrees(math.acos(float(np.clip(np.dot(axis_a, axis_b), -1.0, 1.0))))
    return axis_deg, math.degrees(abs(ang_a - ang_b))
