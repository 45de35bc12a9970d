"""Reconstruction objective: masked color/perceptual terms, soft IOU, and
mesh regularizers, plus the two-view consistency objective that renders one
prediction into a pair of views."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import renderer as rn

# running diagnostic counters (zero masks, skipped degenerate pairs)
diagnostics = {"zero_mask": 0, "degenerate_pairs": 0}


@dataclass
class LossWeights:
    lambda_col: float = 20.0
    lambda_percept: float = 0.5
    lambda_iou: float = 3.0
    lambda_sm: float = 5.0
    lambda_lap: float = 5.0
    lambda_mov: float = 2.5

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


def _abs(t):
    return ad.add(ad.relu(t), ad.relu(ad.neg(t)))


def _scalar(x):
    return ad.Tensor(np.float64(x))


def loss_col(image, rendered, mask):
    """Masked mean L1 color difference, averaged over channels.

    `image` and `mask` are data; `rendered` may be on the tape. An all-zero
    mask returns 0 and bumps the zero_mask diagnostic.
    """
    m = ad.no_tape_data(mask)
    img = ad.no_tape_data(image)
    denom = float(m.sum())
    if denom == 0.0:
        diagnostics["zero_mask"] += 1
        return _scalar(0.0)
    diff = _abs(ad.sub(ad.Tensor(img), ad.as_tensor(rendered)))
    per_px = ad.sum_(diff, axis=2) if img.ndim == 3 else diff
    channels = img.shape[2] if img.ndim == 3 else 1
    total = ad.sum_(ad.mul(per_px, ad.Tensor(m)))
    return ad.div(total, _scalar(max(denom, 1.0) * channels))


def loss_iou(mask_a, mask_b):
    """1 - soft intersection-over-union; accepts soft masks in [0,1]."""
    a = ad.as_tensor(mask_a)
    b = ad.as_tensor(mask_b)
    inter = ad.sum_(ad.mul(a, b))
    union = ad.sub(ad.add(ad.sum_(a), ad.sum_(b)), inter)
    if abs(float(union.data)) < 1e-9:
        return _scalar(0.0)
    return ad.sub(_scalar(1.0), ad.div(inter, union))


class PerceptProxy:
    """Frozen random convolutional feature stack standing in for a pretrained
    perceptual network: 3 stride-2 stages of 8/16/32 channels, seed-fixed."""

    CHANNELS = (8, 16, 32)

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 3
        for c_out in self.CHANNELS:
            scale = np.sqrt(2.0 / (c_in * 9))
            self.weights.append(ad.Tensor(rng.normal(0.0, scale, size=(c_out, c_in, 3, 3))))
            c_in = c_out

    def features_nchw(self, x):
        """Stage activations for an (N,3,H,W) batch."""
        feats = []
        for wgt in self.weights:
            x = ad.relu(ad.conv2d(x, wgt, stride=2, pad=1))
            feats.append(x)
        return feats

    def features(self, image):
        """Stage activations for an (H,W,3) image (Tensor or array)."""
        t = ad.as_tensor(image)
        h, w, _ = t.shape
        return self.features_nchw(ad.reshape(ad.transpose(t, (2, 0, 1)), (1, 3, h, w)))


_default_proxy = None


def default_percept_proxy():
    global _default_proxy
    if _default_proxy is None:
        _default_proxy = PerceptProxy(seed=0)
    return _default_proxy


def _maxpool_mask(mask, levels):
    """Max-pooled copies of a (H,W) mask at successive halvings."""
    out = []
    m = np.asarray(mask, dtype=np.float64)
    for _ in range(levels):
        h, w = m.shape
        m = m[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).max(axis=(1, 3))
        out.append(m)
    return out


def loss_percept(image, rendered, mask, proxy=None, image_feats=None):
    """Mean masked L1 feature difference over the proxy's stages.

    `image_feats` optionally carries precomputed proxy features of the
    (constant) reference image to avoid recomputing them every step.
    """
    proxy = proxy or default_percept_proxy()
    feats_a = image_feats if image_feats is not None \
        else proxy.features(ad.no_tape_data(image))
    feats_b = proxy.features(rendered)
    masks = _maxpool_mask(ad.no_tape_data(mask), len(feats_a))
    terms = []
    for fa, fb, m in zip(feats_a, feats_b, masks):
        denom = max(float(m.sum()), 1.0) * fa.shape[1]
        diff = ad.sum_(_abs(ad.sub(fa, fb)), axis=1)  # (1,H,W)
        masked = ad.mul(diff, ad.Tensor(m[None, :, :]))
        terms.append(ad.div(ad.sum_(masked), _scalar(denom)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, _scalar(len(terms)))


def loss_lap(mesh, lap_op):
    """Mean squared residual between each vertex and its neighbor average."""
    v = ad.as_tensor(mesh.effective_vertices())
    res = ad.sub(lap_op.apply(v), v)
    return ad.mean(ad.sum_(ad.mul(res, res), axis=1))


def _face_normals(verts_t, faces):
    a = ad.gather(verts_t, faces[:, 0], axis=0)
    b = ad.gather(verts_t, faces[:, 1], axis=0)
    c = ad.gather(verts_t, faces[:, 2], axis=0)
    u = ad.sub(b, a)
    v = ad.sub(c, a)
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    nx = ad.sub(ad.mul(uy, vz), ad.mul(uz, vy))
    ny = ad.sub(ad.mul(uz, vx), ad.mul(ux, vz))
    nz = ad.sub(ad.mul(ux, vy), ad.mul(uy, vx))
    return nx, ny, nz


def loss_flat(mesh, pairs):
    """Mean squared (1 - cos) of dihedral angles between adjacent faces.

    Pairs whose faces are numerically degenerate are skipped with a
    diagnostic count.
    """
    verts_t = ad.as_tensor(mesh.effective_vertices())
    faces = mesh.faces
    nx, ny, nz = _face_normals(verts_t, faces)
    norms = np.sqrt(nx.data ** 2 + ny.data ** 2 + nz.data ** 2)
    fa = np.array([p[0] for p in pairs])
    fb = np.array([p[1] for p in pairs])
    ok = (norms[fa] > 1e-12) & (norms[fb] > 1e-12)
    if not ok.all():
        diagnostics["degenerate_pairs"] += int((~ok).sum())
        fa, fb = fa[ok], fb[ok]
    if fa.size == 0:
        return _scalar(0.0)

    def comp_dot(sel_a, sel_b):
        return ad.add(ad.add(
            ad.mul(ad.gather(nx, sel_a), ad.gather(nx, sel_b)),
            ad.mul(ad.gather(ny, sel_a), ad.gather(ny, sel_b))),
            ad.mul(ad.gather(nz, sel_a), ad.gather(nz, sel_b)))

    dot_ab = comp_dot(fa, fb)
    na = ad.sqrt(ad.add(comp_dot(fa, fa), _scalar(1e-24)))
    nb = ad.sqrt(ad.add(comp_dot(fb, fb), _scalar(1e-24)))
    cos = ad.div(dot_ab, ad.mul(na, nb))
    dev = ad.sub(_scalar(1.0), cos)
    return ad.mean(ad.mul(dev, dev))


def loss_mov(offsets):
    """Offset magnitude penalty plus deviation of magnitudes from their mean."""
    off = ad.as_tensor(offsets)
    sq = ad.sum_(ad.mul(off, off), axis=1)
    norms = ad.sqrt(ad.add(sq, _scalar(1e-20)))
    mu = ad.mean(norms)
    dev = ad.sub(norms, mu)
    return ad.add(ad.mean(sq), ad.mean(ad.mul(dev, dev)))


# cache of (laplacian, dihedral pairs) per mesh topology
_topology_cache = {}


def mesh_operators(mesh):
    key = (mesh.n_vertices, mesh.faces.tobytes())
    if key not in _topology_cache:
        _topology_cache[key] = (geo.uniform_laplacian(mesh), geo.dihedral_pairs(mesh))
    return _topology_cache[key]


def regularizer_terms(mesh):
    """The three shape regularizers as tape scalars (reusable across views)."""
    lap_op, pairs = mesh_operators(mesh)
    return {"sm": loss_flat(mesh, pairs), "lap": loss_lap(mesh, lap_op),
            "mov": loss_mov(mesh.offsets)}


def loss_total(image, mask, mesh, texture, cam, weights, cfg, proxy=None,
               reg_terms=None, image_feats=None):
    """Full per-view objective; returns (scalar Tensor, per-term breakdown)."""
    rendered, soft_mask = rn.render(mesh, texture, cam, cfg)
    terms = dict(reg_terms) if reg_terms is not None else regularizer_terms(mesh)
    terms["col"] = loss_col(image, rendered, mask)
    terms["iou"] = loss_iou(ad.Tensor(ad.no_tape_data(mask)), soft_mask)
    if weights.lambda_percept > 0.0:
        terms["percept"] = loss_percept(image, rendered, mask, proxy, image_feats)
    else:
        terms["percept"] = _scalar(0.0)
    total = _scalar(0.0)
    for name, lam in (("col", weights.lambda_col), ("percept", weights.lambda_percept),
                      ("iou", weights.lambda_iou), ("sm", weights.lambda_sm),
                      ("lap", weights.lambda_lap), ("mov", weights.lambda_mov)):
        total = ad.add(total, ad.mul(_scalar(lam), terms[name]))
    breakdown = {name: float(t.data) for name, t in terms.items()}
    return total, breakdown


def loss_multiview(image_i, image_j, mask_i, mask_j, prediction, cams, weights,
                   cfg, proxy=None, content_ids=None, image_feats=(None, None)):
    """Two-view consistency: one prediction rendered into both views, losses summed.

    `prediction` is the (mesh, texture) inferred from view i; `cams` holds the
    (possibly trainable) cameras of views i and j. The shape regularizers are
    evaluated once and enter both view terms.
    """
    if content_ids is not None and content_ids[0] != content_ids[1]:
        raise ValueError(f"view pair crosses contents: {content_ids[0]} vs {content_ids[1]}")
    mesh, texture = prediction
    cam_i, cam_j = cams
    regs = regularizer_terms(mesh)
    li, bi = loss_total(image_i, mask_i, mesh, texture, cam_i, weights, cfg,
                        proxy, reg_terms=regs, image_feats=image_feats[0])
    lj, bj = loss_total(image_j, mask_j, mesh, texture, cam_j, weights, cfg,
                        proxy, reg_terms=regs, image_feats=image_feats[1])
    breakdown = {k: bi[k] + bj[k] for k in bi}
    return ad.add(li, lj), breakdown


def log_breakdown(fh, iteration, breakdown):
    """Append newline-delimited JSON records (iteration, term, value)."""
    for term, value in breakdown.items():
        fh.write(json.dumps({"iteration": iteration, "term": term, "value": value}) + "\n")


# ---------------------------------------------------------------------------
# batched training path
#
# Mathematically identical to mean_k loss_multiview(...) but evaluates every
# per-view and per-mesh term across the whole batch in a handful of tape ops
# (verified against the per-sample ops by an equivalence test).
# ---------------------------------------------------------------------------

def _batched_regularizers(template, offsets, faces, lap_matrix, pair_idx):
    """(sm, lap, mov) means over a (B,N,3) offset batch."""
    b, n, _ = offsets.shape
    verts = ad.add(offsets, ad.Tensor(template[None, :, :]))

    sq = ad.sum_(ad.mul(offsets, offsets), axis=2)          # (B,N)
    norms = ad.sqrt(ad.add(sq, _scalar(1e-20)))
    mu = ad.mean(norms, axis=1, keepdims=True)
    dev = ad.sub(norms, mu)
    mov = ad.add(ad.mean(sq), ad.mean(ad.mul(dev, dev)))

    flat = ad.reshape(ad.transpose(verts, (1, 0, 2)), (n, b * 3))
    lv = ad.matmul(ad.Tensor(lap_matrix), flat)
    res = ad.sub(lv, flat)
    res = ad.transpose(ad.reshape(res, (n, b, 3)), (1, 0, 2))
    lap = ad.mean(ad.sum_(ad.mul(res, res), axis=2))

    va = ad.gather(verts, faces[:, 0], axis=1)              # (B,F,3)
    vb = ad.gather(verts, faces[:, 1], axis=1)
    vc = ad.gather(verts, faces[:, 2], axis=1)
    u = ad.sub(vb, va)
    v = ad.sub(vc, va)

    def comp(t, i):
        return ad.slice_(t, (slice(None), slice(None), i))

    nx = ad.sub(ad.mul(comp(u, 1), comp(v, 2)), ad.mul(comp(u, 2), comp(v, 1)))
    ny = ad.sub(ad.mul(comp(u, 2), comp(v, 0)), ad.mul(comp(u, 0), comp(v, 2)))
    nz = ad.sub(ad.mul(comp(u, 0), comp(v, 1)), ad.mul(comp(u, 1), comp(v, 0)))
    fa, fb = pair_idx

    def pair_dot(sel_a, sel_b):
        return ad.add(ad.add(
            ad.mul(ad.gather(nx, sel_a, axis=1), ad.gather(nx, sel_b, axis=1)),
            ad.mul(ad.gather(ny, sel_a, axis=1), ad.gather(ny, sel_b, axis=1))),
            ad.mul(ad.gather(nz, sel_a, axis=1), ad.gather(nz, sel_b, axis=1)))

    dot_ab = pair_dot(fa, fb)
    na = ad.sqrt(ad.add(pair_dot(fa, fa), _scalar(1e-24)))
    nb = ad.sqrt(ad.add(pair_dot(fb, fb), _scalar(1e-24)))
    dev = ad.sub(_scalar(1.0), ad.div(dot_ab, ad.mul(na, nb)))
    sm = ad.mean(ad.mul(dev, dev))
    return sm, lap, mov


def batched_pair_loss(rendered, soft_masks, images, masks, view_weights,
                      template, offsets, faces, lap_matrix, pair_idx,
                      weights, proxy=None, image_feats=None):
    """Batch-mean of the two-view objective from stacked per-view renders.

    rendered: list of (H,W,3) rgb Tensors; soft_masks: list of (H,W) Tensors;
    images/masks: (R,H,W,3)/(R,H,W) reference data aligned with the renders;
    view_weights: (R,) per-render multiplicity (2.0 for a collapsed i==j pair);
    offsets: (B,N,3) Tensor of per-sample vertex offsets. Returns
    (total Tensor, breakdown) where total == mean_k loss_multiview(k).
    """
    n_batch = offsets.shape[0]
    r = len(rendered)
    rgb = ad.concat([ad.reshape(t, (1,) + t.shape) for t in rendered], axis=0)
    soft = ad.concat([ad.reshape(t, (1,) + t.shape) for t in soft_masks], axis=0)
    w_r = ad.Tensor(view_weights)

    diff = ad.sum_(_abs(ad.sub(rgb, ad.Tensor(images))), axis=3)     # (R,H,W)
    denoms = np.maximum(masks.sum(axis=(1, 2)), 1.0) * images.shape[3]
    col_per = ad.div(ad.sum_(ad.mul(diff, ad.Tensor(masks)), axis=(1, 2)),
                     ad.Tensor(denoms))
    col = ad.div(ad.sum_(ad.mul(col_per, w_r)), _scalar(n_batch))

    inter = ad.sum_(ad.mul(soft, ad.Tensor(masks)), axis=(1, 2))     # (R,)
    union = ad.sub(ad.add(ad.Tensor(masks.sum(axis=(1, 2))),
                          ad.sum_(soft, axis=(1, 2))), inter)
    iou_per = ad.sub(_scalar(1.0), ad.div(inter, union))
    iou = ad.div(ad.sum_(ad.mul(iou_per, w_r)), _scalar(n_batch))

    if weights.lambda_percept > 0.0:
        proxy = proxy or default_percept_proxy()
        feats_r = proxy.features_nchw(ad.transpose(rgb, (0, 3, 1, 2)))
        if image_feats is None:
            image_feats = [t.data for t in
                           proxy.features_nchw(ad.Tensor(images.transpose(0, 3, 1, 2)))]
        stage_terms = []
        m = masks
        for fr, fi in zip(feats_r, image_feats):
            h, w = m.shape[1] // 2, m.shape[2] // 2
            m = m[:, : 2 * h, : 2 * w].reshape(m.shape[0], h, 2, w, 2).max(axis=(2, 4))
            fdenom = np.maximum(m.sum(axis=(1, 2)), 1.0) * fr.shape[1]
            fdiff = ad.sum_(_abs(ad.sub(fr, ad.Tensor(fi))), axis=1)  # (R,h,w)
            per = ad.div(ad.sum_(ad.mul(fdiff, ad.Tensor(m)), axis=(1, 2)),
                         ad.Tensor(fdenom))
            stage_terms.append(per)
        per_stage = stage_terms[0]
        for t in stage_terms[1:]:
            per_stage = ad.add(per_stage, t)
        percept_per = ad.div(per_stage, _scalar(len(stage_terms)))
        percept = ad.div(ad.sum_(ad.mul(percept_per, w_r)), _scalar(n_batch))
    else:
        percept = _scalar(0.0)

    sm, lap, mov = _batched_regularizers(template, offsets, faces, lap_matrix,
                                         pair_idx)
    two = _scalar(2.0)
    total = ad.add(ad.add(
        ad.add(ad.mul(_scalar(weights.lambda_col), col),
               ad.mul(_scalar(weights.lambda_percept), percept)),
        ad.mul(_scalar(weights.lambda_iou), iou)),
        ad.mul(two, ad.add(ad.add(ad.mul(_scalar(weights.lambda_sm), sm),
                                  ad.mul(_scalar(weights.lambda_lap), lap)),
                           ad.mul(_scalar(weights.lambda_mov), mov))))
    breakdown = {"col": float(col.data), "iou": float(iou.data),
                 "percept": float(percept.data), "sm": 2.0 * float(sm.data),
                 "lap": 2.0 * float(lap.data), "mov": 2.0 * float(mov.data)}
    return total, breakdown
