"""Differentiable rasterizer: textured foreground plus a soft probabilistic silhouette.

Foreground color is a bilinear texture sample at the barycentrically
interpolated UV of the nearest covering face. Hard visibility (which face
covers a pixel, which faces are a pixel's k nearest) is frozen in backward;
gradients flow to vertices through barycentric weights and edge distances,
to the texture through bilinear sampling, and to the camera through the
projection.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import geometry as geo
from ._raster_kernels import rasterize_coverage, select_silhouette_band


class RenderError(RuntimeError):
    pass


class TextureMap:
    """(H_t, W_t, 3) texel values in [0,1]; ndarray input is clamped on construction."""

    def __init__(self, values):
        if isinstance(values, ad.Tensor):
            self.values = values  # trusted to be range-bounded (e.g. sigmoid output)
        else:
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise RenderError(f"texture must be (H, W, 3), got {arr.shape}")
            self.values = np.clip(arr, 0.0, 1.0)

    @property
    def tensor(self):
        return ad.as_tensor(self.values)

    @property
    def data(self):
        return ad.no_tape_data(self.values)

    @property
    def resolution(self):
        d = self.data
        return d.shape[0], d.shape[1]


@dataclass
class RasterConfig:
    width: int = 64
    height: int = 64
    sigma: float = 1e-4        # soft-mask distance kernel, normalized screen units^2
    k_nearest: int = 32        # faces entering each pixel's soft-mask product
    near_plane: float = 1e-3
    band_sigmas: float = 36.0  # mask support cutoff: d^2 <= band_sigmas * sigma

    def __post_init__(self):
        if self.sigma <= 0:
            raise RenderError(f"sigma must be positive, got {self.sigma}")
        if self.k_nearest < 1:
            raise RenderError(f"k_nearest must be >= 1, got {self.k_nearest}")


@dataclass
class RenderOutput:
    rgb: ad.Tensor            # (H,W,3); zero wherever face_index == -1
    soft_mask: ad.Tensor      # (H,W) in [0,1]
    face_index: np.ndarray    # (H,W) int, -1 for background
    barycentric: np.ndarray   # (H,W,3) perspective-correct weights of the covering face
    n_degenerate: int = 0


def _axis(t, idx):
    """Column idx of a (...,C) tensor, keeping leading shape."""
    return ad.slice_(t, (Ellipsis, idx))


def _min2(a, b):
    return ad.sub(b, ad.relu(ad.sub(b, a)))


def _dot2(ax, ay, bx, by):
    return ad.add(ad.mul(ax, bx), ad.mul(ay, by))


def _segment_d2_t(px, py, x1, y1, x2, y2):
    """Squared point-to-segment distance on the tape; p components are constants."""
    dx = ad.sub(x2, x1)
    dy = ad.sub(y2, y1)
    l2 = ad.add(_dot2(dx, dy, dx, dy), ad.Tensor(np.float64(1e-18)))
    t = ad.clamp(ad.div(_dot2(ad.sub(px, x1), ad.sub(py, y1), dx, dy), l2), 0.0, 1.0)
    qx = ad.add(x1, ad.mul(t, dx))
    qy = ad.add(y1, ad.mul(t, dy))
    rx = ad.sub(px, qx)
    ry = ad.sub(py, qy)
    return _dot2(rx, ry, rx, ry)


def _scene_tensors(mesh, cam, cfg):
    verts = mesh.effective_vertices()
    screen, depth = geo.project(verts, cam, cfg.width, cfg.height, cfg.near_plane)
    face_index, bary, _, n_deg = rasterize_coverage(
        np.ascontiguousarray(screen.data), depth.data, mesh.faces,
        cfg.width, cfg.height)
    return screen, depth, face_index, bary, n_deg


def _foreground_rgb(mesh, texture, screen, depth, face_index, cfg):
    """Full-image rgb tensor: interpolated texture on covered pixels, zero elsewhere."""
    h, w = cfg.height, cfg.width
    fg = np.nonzero(face_index.ravel() >= 0)[0]
    zero_row = ad.Tensor(np.zeros((1, 3)))
    if fg.size == 0:
        flat = ad.gather(zero_row, np.zeros(h * w, dtype=np.int64), axis=0)
        return ad.reshape(flat, (h, w, 3))

    fg_faces = face_index.ravel()[fg]
    corner_v = mesh.faces[fg_faces]          # (M,3) vertex ids
    corner_uv = mesh.uvs[mesh.faces_uv[fg_faces]]  # (M,3,2) constants
    pts = ad.gather(screen, corner_v.ravel(), axis=0)
    pts = ad.reshape(pts, (-1, 3, 2))        # (M,3,2)
    zs = ad.reshape(ad.gather(depth, corner_v.ravel(), axis=0), (-1, 3))

    qx = ((fg % w) + 0.5).astype(np.float64)
    qy = ((fg // w) + 0.5).astype(np.float64)
    qx_t, qy_t = ad.Tensor(qx), ad.Tensor(qy)
    ax, ay = ad.slice_(pts, (slice(None), 0, 0)), ad.slice_(pts, (slice(None), 0, 1))
    bx, by = ad.slice_(pts, (slice(None), 1, 0)), ad.slice_(pts, (slice(None), 1, 1))
    cx, cy = ad.slice_(pts, (slice(None), 2, 0)), ad.slice_(pts, (slice(None), 2, 1))

    def cross2(ux, uy, vx, vy):
        return ad.sub(ad.mul(ux, vy), ad.mul(uy, vx))

    area = cross2(ad.sub(bx, ax), ad.sub(by, ay), ad.sub(cx, ax), ad.sub(cy, ay))
    w0 = ad.div(cross2(ad.sub(bx, qx_t), ad.sub(by, qy_t), ad.sub(cx, qx_t), ad.sub(cy, qy_t)), area)
    w1 = ad.div(cross2(ad.sub(cx, qx_t), ad.sub(cy, qy_t), ad.sub(ax, qx_t), ad.sub(ay, qy_t)), area)
    w2 = ad.sub(ad.sub(ad.Tensor(np.float64(1.0)), w0), w1)

    z0, z1, z2 = _axis(zs, 0), _axis(zs, 1), _axis(zs, 2)
    t0 = ad.div(w0, z0)
    t1 = ad.div(w1, z1)
    t2 = ad.div(w2, z2)
    norm = ad.add(ad.add(t0, t1), t2)
    b0, b1, b2 = ad.div(t0, norm), ad.div(t1, norm), ad.div(t2, norm)

    def lerp_uv(col):
        u = ad.add(ad.add(ad.mul(b0, ad.Tensor(corner_uv[:, 0, col])),
                          ad.mul(b1, ad.Tensor(corner_uv[:, 1, col]))),
                   ad.mul(b2, ad.Tensor(corner_uv[:, 2, col])))
        return ad.reshape(u, (-1, 1))

    uv = ad.concat([lerp_uv(0), lerp_uv(1)], axis=1)   # (M,2)
    rgb_fg = ad.bilinear_sample(texture.tensor, uv)    # (M,3)

    perm = np.full(h * w, fg.size, dtype=np.int64)
    perm[fg] = np.arange(fg.size)
    flat = ad.gather(ad.concat([rgb_fg, zero_row], axis=0), perm, axis=0)
    return ad.reshape(flat, (h, w, 3))


def _soft_mask(mesh, screen, face_index, cfg):
    """Full-image soft silhouette; covered pixels are exactly 1 with zero gradient."""
    h, w = cfg.height, cfg.width
    flat_cover = face_index.ravel()
    # vertex positions in normalized [-1,1] screen coords
    screen_n = ad.sub(ad.mul(screen, ad.Tensor(np.array([[2.0 / w, 2.0 / h]]))),
                      ad.Tensor(np.float64(1.0)))
    band, band_faces, _ = select_silhouette_band(
        np.ascontiguousarray(screen_n.data), mesh.faces, flat_cover,
        w, h, cfg.k_nearest, cfg.band_sigmas * cfg.sigma)

    one_row = ad.Tensor(np.ones(1))
    zero_row = ad.Tensor(np.zeros(1))
    if band.size == 0:
        perm = np.where(flat_cover >= 0, 0, 1).astype(np.int64)
        return ad.reshape(ad.gather(ad.concat([one_row, zero_row]), perm, axis=0), (h, w))

    nb, k = band_faces.shape
    valid = band_faces >= 0
    safe_faces = np.where(valid, band_faces, 0)
    corners = mesh.faces[safe_faces.ravel()]  # (nb*k, 3)
    pts = ad.reshape(ad.gather(screen_n, corners.ravel(), axis=0), (nb, k, 3, 2))

    px = np.broadcast_to(((2.0 * ((band % w) + 0.5)) / w - 1.0)[:, None], (nb, k))
    py = np.broadcast_to(((2.0 * ((band // w) + 0.5)) / h - 1.0)[:, None], (nb, k))
    px_t, py_t = ad.Tensor(px.copy()), ad.Tensor(py.copy())

    def corner(ci, col):
        return ad.slice_(pts, (slice(None), slice(None), ci, col))

    ax, ay = corner(0, 0), corner(0, 1)
    bx, by = corner(1, 0), corner(1, 1)
    cx, cy = corner(2, 0), corner(2, 1)
    d2 = _min2(_segment_d2_t(px_t, py_t, ax, ay, bx, by),
               _min2(_segment_d2_t(px_t, py_t, bx, by, cx, cy),
                     _segment_d2_t(px_t, py_t, cx, cy, ax, ay)))
    e = ad.exp(ad.neg(ad.div(d2, ad.Tensor(np.float64(cfg.sigma)))))
    terms = ad.sub(ad.Tensor(np.float64(1.0)), ad.mul(ad.Tensor(valid.astype(np.float64)), e))

    # product over the k slots by pairwise tree reduction
    width = k
    while width > 1:
        half = width // 2
        even = ad.slice_(terms, (slice(None), slice(0, 2 * half, 2)))
        odd = ad.slice_(terms, (slice(None), slice(1, 2 * half, 2)))
        prod = ad.mul(even, odd)
        if width % 2:
            prod = ad.concat([prod, ad.slice_(terms, (slice(None), slice(width - 1, width)))],
                             axis=1)
            width = half + 1
        else:
            width = half
        terms = prod
    mask_band = ad.sub(ad.Tensor(np.float64(1.0)), ad.reshape(terms, (-1,)))

    perm = np.full(h * w, nb + 1, dtype=np.int64)   # default: far row (zero)
    perm[flat_cover >= 0] = nb                      # covered row (one)
    perm[band] = np.arange(nb)
    flat = ad.gather(ad.concat([mask_band, one_row, zero_row]), perm, axis=0)
    return ad.reshape(flat, (h, w))


def rasterize(mesh, texture, cam, cfg):
    """Full differentiable render pass; see RenderOutput for the field contract."""
    screen, depth, face_index, bary, n_deg = _scene_tensors(mesh, cam, cfg)
    rgb = _foreground_rgb(mesh, texture, screen, depth, face_index, cfg)
    mask = _soft_mask(mesh, screen, face_index, cfg)
    return RenderOutput(rgb=rgb, soft_mask=mask, face_index=face_index,
                        barycentric=bary, n_degenerate=n_deg)


def soft_silhouette(mesh, cam, cfg):
    """Soft probabilistic silhouette only (no texture needed)."""
    verts = mesh.effective_vertices()
    screen, depth = geo.project(verts, cam, cfg.width, cfg.height, cfg.near_plane)
    face_index, _, _, _ = rasterize_coverage(
        np.ascontiguousarray(screen.data), depth.data, mesh.faces,
        cfg.width, cfg.height)
    return _soft_mask(mesh, screen, face_index, cfg)


def render(mesh, texture, cam, cfg):
    """(image, soft mask) on one tape: a downstream scalar loss reaches
    offsets, texture, and camera in a single backward pass."""
    out = rasterize(mesh, texture, cam, cfg)
    return out.rgb, out.soft_mask


def hard_mask(mesh, cam, cfg):
    """Binary coverage mask (no gradients)."""
    verts = ad.no_tape_data(mesh.effective_vertices())
    with_no_tape = geo.project(verts, cam, cfg.width, cfg.height, cfg.near_plane)
    screen, depth = with_no_tape
    face_index, _, _, _ = rasterize_coverage(
        np.ascontiguousarray(screen.data), depth.data, mesh.faces,
        cfg.width, cfg.height)
    return (face_index >= 0).astype(np.float64)


# ---------------------------------------------------------------------------
# image i/o
# ---------------------------------------------------------------------------

def to_uint8(values):
    return np.round(255.0 * np.clip(ad.no_tape_data(values), 0.0, 1.0)).astype(np.uint8)


def save_image(path, values):
    """(H,W,3) floats in [0,1] -> 8-bit RGB PNG."""
    Image.fromarray(to_uint8(values), mode="RGB").save(path)


def save_mask(path, values):
    """(H,W) floats in [0,1] -> single-channel PNG."""
    Image.fromarray(to_uint8(values), mode="L").save(path)


def load_image(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
