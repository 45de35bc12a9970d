"""Numba kernels for the non-differentiable parts of rasterization.

These compute hard visibility (z-buffered coverage) and the k-nearest-face
selection for the soft silhouette band. Everything whose gradient matters is
recomputed on the autodiff tape from the selections made here.
"""

import numpy as np
from numba import njit

# screen-space signed area below this (normalized units) counts as degenerate
DEGENERATE_AREA = 1e-12


@njit(cache=True)
def rasterize_coverage(screen, depth, faces, width, height):
    """Z-buffered coverage over pixel centers.

    screen: (N,2) pixel coords, depth: (N,), faces: (F,3).
    Returns (face_index (H,W) with -1 background, perspective-correct
    barycentrics (H,W,3), z-buffer (H,W), degenerate-face count).
    """
    face_index = np.full((height, width), -1, np.int64)
    zbuf = np.full((height, width), 1e30)
    bary = np.zeros((height, width, 3))
    # pixel-units area threshold equivalent to DEGENERATE_AREA in normalized units
    area_eps = DEGENERATE_AREA * (width * height * 0.25)
    n_degenerate = 0
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay = screen[i0, 0], screen[i0, 1]
        bx, by = screen[i1, 0], screen[i1, 1]
        cx, cy = screen[i2, 0], screen[i2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < area_eps:
            n_degenerate += 1
            continue
        xmin = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        xmax = min(int(np.ceil(max(ax, bx, cx) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        ymax = min(int(np.ceil(max(ay, by, cy) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        z0, z1, z2 = depth[i0], depth[i1], depth[i2]
        for py in range(ymin, ymax + 1):
            qy = py + 0.5
            for px in range(xmin, xmax + 1):
                qx = px + 0.5
                w0 = ((bx - qx) * (cy - qy) - (by - qy) * (cx - qx)) / area
                if w0 < 0.0:
                    continue
                w1 = ((cx - qx) * (ay - qy) - (cy - qy) * (ax - qx)) / area
                if w1 < 0.0:
                    continue
                w2 = 1.0 - w0 - w1
                if w2 < 0.0:
                    continue
                inv = w0 / z0 + w1 / z1 + w2 / z2
                z = 1.0 / inv
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    face_index[py, px] = f
                    bary[py, px, 0] = (w0 / z0) / inv
                    bary[py, px, 1] = (w1 / z1) / inv
                    bary[py, px, 2] = (w2 / z2) / inv
    return face_index, bary, zbuf, n_degenerate


@njit(cache=True)
def _segment_d2(px, py, x1, y1, x2, y2):
    dx = x2 - x1
    dy = y2 - y1
    l2 = dx * dx + dy * dy
    if l2 < 1e-18:
        t = 0.0
    else:
        t = ((px - x1) * dx + (py - y1) * dy) / l2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    qx = x1 + t * dx
    qy = y1 + t * dy
    return (px - qx) ** 2 + (py - qy) ** 2


@njit(cache=True)
def select_silhouette_band(screen_n, faces, face_index_flat, width, height,
                           k, d2_cut):
    """For uncovered pixels near the silhouette, pick the k nearest faces.

    screen_n: (N,2) vertex positions in normalized [-1,1] screen coords.
    Returns (band pixel flat ids, (B,k) face ids with -1 padding, (B,k)
    squared distances for reference).
    """
    hw = width * height
    best_d = np.full((hw, k), 1e30)
    best_f = np.full((hw, k), -1, np.int64)
    touched = np.zeros(hw, np.bool_)
    d_cut = np.sqrt(d2_cut)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay = screen_n[i0, 0], screen_n[i0, 1]
        bx, by = screen_n[i1, 0], screen_n[i1, 1]
        cx, cy = screen_n[i2, 0], screen_n[i2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < DEGENERATE_AREA:
            continue
        # pixel bbox of the face expanded by the cutoff radius
        xmin = min(ax, bx, cx) - d_cut
        xmax = max(ax, bx, cx) + d_cut
        ymin = min(ay, by, cy) - d_cut
        ymax = max(ay, by, cy) + d_cut
        pxmin = max(int(np.floor((xmin + 1.0) * 0.5 * width - 0.5)), 0)
        pxmax = min(int(np.ceil((xmax + 1.0) * 0.5 * width - 0.5)), width - 1)
        pymin = max(int(np.floor((ymin + 1.0) * 0.5 * height - 0.5)), 0)
        pymax = min(int(np.ceil((ymax + 1.0) * 0.5 * height - 0.5)), height - 1)
        for py in range(pymin, pymax + 1):
            ny = (2.0 * (py + 0.5)) / height - 1.0
            for px in range(pxmin, pxmax + 1):
                pid = py * width + px
                if face_index_flat[pid] >= 0:
                    continue
                nx = (2.0 * (px + 0.5)) / width - 1.0
                d2 = _segment_d2(nx, ny, ax, ay, bx, by)
                d2b = _segment_d2(nx, ny, bx, by, cx, cy)
                if d2b < d2:
                    d2 = d2b
                d2c = _segment_d2(nx, ny, cx, cy, ax, ay)
                if d2c < d2:
                    d2 = d2c
                if d2 <= d2_cut and d2 < best_d[pid, k - 1]:
                    j = k - 1
                    while j > 0 and best_d[pid, j - 1] > d2:
                        best_d[pid, j] = best_d[pid, j - 1]
                        best_f[pid, j] = best_f[pid, j - 1]
                        j -= 1
                    best_d[pid, j] = d2
                    best_f[pid, j] = f
                    touched[pid] = True
    band = np.nonzero(touched)[0]
    return band, best_f[band], best_d[band]
