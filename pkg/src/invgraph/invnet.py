"""Inverse graphics network: a convolutional encoder predicting vertex offsets
and a texture map, trained with the two-view objective while per-bin cameras
are optimized jointly from their coarse bin initialization."""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import datagen as dg
from . import geometry as geo
from . import losses as ls
from . import renderer as rn


class InvnetError(RuntimeError):
    pass


OFFSET_BOUND = 0.35

_TRUNK_CHANNELS = (16, 32, 64, 128, 256)


class EncoderParams:
    """Five stride-2 conv stages + global average pool, with bounded
    shape/texture heads (tanh * 0.35 offsets, sigmoid texture)."""

    def __init__(self, n_vertices, texture_res=32, image_size=64, seed=0):
        self.n_vertices = n_vertices
        self.texture_res = texture_res
        self.image_size = image_size
        rng = np.random.default_rng(seed)
        self.tensors = {}
        c_in = 3
        for i, c_out in enumerate(_TRUNK_CHANNELS):
            scale = math.sqrt(2.0 / (c_in * 9))
            self._add(f"enc.conv{i}.w", rng.normal(0.0, scale, (c_out, c_in, 3, 3)))
            self._add(f"enc.conv{i}.b", np.zeros(c_out))
            c_in = c_out
        feat = _TRUNK_CHANNELS[-1]
        self._add("enc.shape.w", rng.normal(0.0, 0.01, (feat, n_vertices * 3)))
        self._add("enc.shape.b", np.zeros(n_vertices * 3))
        self._add("enc.tex.w", rng.normal(0.0, 0.01, (feat, texture_res * texture_res * 3)))
        self._add("enc.tex.b", np.zeros(texture_res * texture_res * 3))

    def _add(self, name, value):
        self.tensors[name] = ad.Tensor(value, requires_grad=True, name=name)

    def parameters(self):
        return list(self.tensors.values())

    def forward(self, images):
        """images: (B,3,H,W) Tensor in [0,1] -> (offsets (B,N,3), textures (B,r,r,3))."""
        x = ad.as_tensor(images)
        if x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise InvnetError(f"expected {self.image_size}x{self.image_size} input, "
                              f"got {x.shape[2]}x{x.shape[3]}")
        for i in range(len(_TRUNK_CHANNELS)):
            w = self.tensors[f"enc.conv{i}.w"]
            b = self.tensors[f"enc.conv{i}.b"]
            x = ad.conv2d(x, w, stride=2, pad=1)
            x = ad.relu(ad.add(x, ad.reshape(b, (1, -1, 1, 1))))
        feat = ad.mean(x, axis=(2, 3))  # (B, C)
        off = ad.add(ad.matmul(feat, self.tensors["enc.shape.w"]),
                     ad.reshape(self.tensors["enc.shape.b"], (1, -1)))
        offsets = ad.mul(ad.tanh(off), ad.Tensor(np.float64(OFFSET_BOUND)))
        offsets = ad.reshape(offsets, (-1, self.n_vertices, 3))
        tex = ad.add(ad.matmul(feat, self.tensors["enc.tex.w"]),
                     ad.reshape(self.tensors["enc.tex.b"], (1, -1)))
        textures = ad.reshape(ad.sigmoid(tex),
                              (-1, self.texture_res, self.texture_res, 3))
        return offsets, textures

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state):
        for k, t in self.tensors.items():
            t.data[...] = state[k]


def predict(params, image):
    """Single-image prediction without gradient tracking."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvnetError(f"expected (H,W,3) image, got {img.shape}")
    batch = ad.Tensor(img.transpose(2, 0, 1)[None])
    offsets, textures = params.forward(batch)
    return ad.no_tape_data(offsets)[0], rn.TextureMap(ad.no_tape_data(textures)[0])


class CameraBank:
    """Per-bin trainable (azimuth, elevation, distance), fixed fov."""

    def __init__(self, n_bins, distance=2.7, fov=geo.DEFAULT_FOV):
        init = np.stack([[geo.camera_from_bin(b, n_bins, distance, fov).azimuth,
                          0.0, distance] for b in range(n_bins)])
        self.params = ad.Tensor(init, requires_grad=True, name="camera_bank")
        self.n_bins = n_bins
        self.fov = fov

    def camera(self, bin_id):
        """Differentiable camera tuple for the renderer."""
        row = self.params
        return (row[bin_id, 0], row[bin_id, 1], row[bin_id, 2], self.fov)

    def camera_params(self, bin_id):
        az, el, dist = self.params.data[bin_id]
        return geo.CameraParams(float(az), float(el), float(dist), self.fov)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    camera_lr: float = 1e-3
    batch: int = 16
    warmup_iters: int = 300    # color-only phase (paper-scale: 3000)
    total_iters: int = 4000    # paper-scale: 200000
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    seed: int = 0
    mesh_subdiv: int = 2
    texture_res: int = 32
    multiview: bool = True     # False: ablation, single-view loss only
    log_every: int = 50

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise InvnetError("warmup_iters must not exceed total_iters")


class _DatasetCache:
    """Training-facing in-memory view of a built dataset (no oracle access)."""

    def __init__(self, dataset_dir, manifest=None):
        self.dir = dataset_dir
        self.manifest = manifest or dg.load_manifest(dataset_dir)
        cfgd = self.manifest["config"]
        self.raster = rn.RasterConfig(width=cfgd["width"], height=cfgd["height"])
        self.fov = cfgd["fov"]
        self.n_bins = cfgd["n_bins"]
        self.distance = cfgd["distance"]
        self.images = {}
        self.masks = {}
        for rec in self.manifest["records"]:
            key = (rec["content_id"], rec["bin_id"])
            sample = dg.load_sample(dataset_dir, rec)
            self.images[key] = sample.image.astype(np.float32)
            self.masks[key] = sample.mask.astype(np.float32)
        self.by_content = {}
        for rec in self.manifest["records"]:
            self.by_content.setdefault(rec["content_id"], []).append(rec["bin_id"])
        self._feat_cache = {}

    def percept_feats(self, cid, bin_id, proxy):
        """Cached frozen perceptual features of a dataset image (float32 store)."""
        key = (cid, bin_id)
        if key not in self._feat_cache:
            feats = proxy.features(self.image(cid, bin_id))
            self._feat_cache[key] = [f.data.astype(np.float32) for f in feats]
        return [ad.Tensor(f) for f in self._feat_cache[key]]

    def split_records(self, split):
        ids = set(self.manifest["splits"][split])
        return [r for r in self.manifest["records"] if r["content_id"] in ids]

    def image(self, cid, bin_id):
        return self.images[(cid, bin_id)].astype(np.float64)

    def mask(self, cid, bin_id):
        return self.masks[(cid, bin_id)].astype(np.float64)


def train(dataset_dir, cfg, log_path=None, manifest=None):
    """Joint encoder + camera optimization on a built dataset.

    Returns (EncoderParams, CameraBank, history). History records the total
    loss and per-term breakdown every cfg.log_every iterations.
    """
    data = _DatasetCache(dataset_dir, manifest)
    template = geo.make_icosphere(cfg.mesh_subdiv)
    encoder = EncoderParams(template.n_vertices, cfg.texture_res,
                            data.raster.width, seed=cfg.seed)
    bank = CameraBank(data.n_bins, distance=data.distance, fov=data.fov)
    opt_enc = ad.Adam(encoder.parameters(), lr=cfg.lr)
    opt_cam = ad.Adam([bank.params], lr=cfg.camera_lr)
    rng = np.random.default_rng(cfg.seed)
    lap_op, pairs = ls.mesh_operators(template)
    pair_idx = (np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    train_ids = [cid for cid in data.manifest["splits"]["train"]
                 if cid in data.by_content]
    if not train_ids:
        raise InvnetError("no training contents with surviving records")
    single_view_contents = sorted(c for c in train_ids if len(data.by_content[c]) < 2)

    queue = []
    history = []
    log_fh = open(log_path, "w") if log_path else None
    warm_weights = ls.LossWeights(**{**vars(cfg.weights), "lambda_percept": 0.0})

    for it in range(cfg.total_iters):
        while len(queue) < cfg.batch:
            queue.extend(rng.permutation(train_ids))
        batch_ids = [queue.pop(0) for _ in range(cfg.batch)]
        weights = warm_weights if it < cfg.warmup_iters else cfg.weights

        views = []
        for cid in batch_ids:
            bins = data.by_content[cid]
            if len(bins) < 2:
                vi = vj = bins[0]
            else:
                vi, vj = rng.choice(bins, size=2, replace=False)
            if not cfg.multiview:
                vj = vi
            views.append((cid, int(vi), int(vj)))

        images_in = np.stack([data.image(cid, vi).transpose(2, 0, 1)
                              for cid, vi, _ in views])
        proxy = ls.default_percept_proxy()
        with ad.Tape() as tape:
            tape.watch(bank.params)
            offsets, textures = encoder.forward(ad.Tensor(images_in))
            frames = {}

            def frame(b):
                if b not in frames:
                    frames[b] = geo.CameraFrame(bank.camera(b))
                return frames[b]

            rendered, softs, view_w, order = [], [], [], []
            for k, (cid, vi, vj) in enumerate(views):
                mesh = template.with_offsets(offsets[k])
                texture = rn.TextureMap(textures[k])
                targets = [(vi, 2.0)] if vi == vj else [(vi, 1.0), (vj, 1.0)]
                for b, mult in targets:
                    img, m = rn.render(mesh, texture, frame(b), data.raster)
                    rendered.append(img)
                    softs.append(m)
                    view_w.append(mult)
                    order.append((cid, b))
            ref_imgs = np.stack([data.image(c, b) for c, b in order])
            ref_masks = np.stack([data.mask(c, b) for c, b in order])
            feats = None
            if weights.lambda_percept > 0.0:
                per_img = [data.percept_feats(c, b, proxy) for c, b in order]
                feats = [np.concatenate([f[s].data for f in per_img], axis=0)
                         for s in range(len(per_img[0]))]
            total, agg = ls.batched_pair_loss(
                rendered, softs, ref_imgs, ref_masks, np.array(view_w),
                template.template_vertices, offsets, template.faces,
                lap_op.matrix, pair_idx, weights, proxy, feats)
            grads = tape.backward(total)
        opt_enc.step_from(tape, grads)
        opt_cam.step(tape.gradients(grads, [bank.params]))

        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            entry = {"iteration": it, "total": float(total.data), **agg}
            history.append(entry)
            if log_fh:
                ls.log_breakdown(log_fh, it, {"total": entry["total"], **agg})
                log_fh.flush()
    if log_fh:
        log_fh.close()
    if single_view_contents:
        history.append({"single_view_contents": single_view_contents})
    return encoder, bank, history


# ---------------------------------------------------------------------------
# evaluation (the only code paths allowed to read oracle.json)
# ---------------------------------------------------------------------------

def _binary_iou(a, b):
    a = a > 0.5
    b = b > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def eval_iou(encoder, bank, dataset_dir, split="test", manifest=None,
             mesh_subdiv=2, unseen_view=False, rng_seed=0):
    """Mean reprojected binary IOU over a split.

    With unseen_view, the prediction from view i is rendered into a different
    view j of the same content and scored against j's mask.
    """
    data = _DatasetCache(dataset_dir, manifest)
    template = geo.make_icosphere(mesh_subdiv)
    records = data.split_records(split)
    if not records:
        raise InvnetError(f"empty split {split!r}")
    rng = np.random.default_rng(rng_seed)
    scores = []
    for rec in records:
        cid, bin_i = rec["content_id"], rec["bin_id"]
        off, tex = predict(encoder, data.image(cid, bin_i))
        mesh = template.with_offsets(off)
        target_bin = bin_i
        if unseen_view:
            others = [b for b in data.by_content[cid] if b != bin_i]
            if not others:
                continue
            target_bin = int(rng.choice(others))
        cam = bank.camera_params(target_bin)
        pred_mask = rn.hard_mask(mesh, cam, data.raster)
        scores.append(_binary_iou(pred_mask, data.mask(cid, target_bin)))
    if not scores:
        raise InvnetError("no evaluable records")
    return float(np.mean(scores))


def eval_oracle_iou(dataset_dir, split="test"):
    """Oracle pass-through: ground-truth mesh + hidden camera vs stored mask."""
    data = _DatasetCache(dataset_dir)
    views, latents = dg.load_oracle(dataset_dir)
    subdiv = data.manifest["config"]["mesh_subdiv"]
    scores = []
    for rec in data.split_records(split):
        mesh = dg.oracle_mesh(latents[rec["content_id"]], subdiv)
        cam = views.hidden_true_cams[rec["bin_id"]]
        pred_mask = rn.hard_mask(mesh, cam, data.raster)
        scores.append(_binary_iou(pred_mask, data.mask(rec["content_id"], rec["bin_id"])))
    return float(np.mean(scores))


def eval_cameras(bank, oracle_views):
    """Appendix-style camera table: per-bin and mean/max axis/angle differences."""
    if bank.n_bins != oracle_views.n_bins:
        raise InvnetError(f"bank has {bank.n_bins} bins, oracle {oracle_views.n_bins}")
    rows = []
    for b in range(bank.n_bins):
        q_opt = geo.camera_to_quaternion(bank.camera_params(b))
        q_true = geo.camera_to_quaternion(oracle_views.hidden_true_cams[b])
        axis_deg, angle_deg = geo.quat_diff(q_opt, q_true)
        rows.append({"bin": b, "axis_deg": axis_deg, "angle_deg": angle_deg})
    axes = [r["axis_deg"] for r in rows]
    angles = [r["angle_deg"] for r in rows]
    return {"bins": rows,
            "mean_axis_deg": float(np.mean(axes)),
            "mean_angle_deg": float(np.mean(angles)),
            "max_axis_deg": float(np.max(axes)),
            "max_angle_deg": float(np.max(angles))}


def sample_surface(mesh, n_points, seed=0):
    """Area-weighted surface samples; deterministic in (mesh, n, seed)."""
    verts = mesh.effective_vertices_data()
    tris = verts[mesh.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(tris), size=n_points, p=areas / areas.sum())
    u = rng.uniform(0, 1, n_points)
    v = rng.uniform(0, 1, n_points)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tris[chosen]
    return (t[:, 0] * (1 - u - v)[:, None] + t[:, 1] * u[:, None]
            + t[:, 2] * v[:, None])


def chamfer_distance(mesh_a, mesh_b, n_points=2048, seed=0):
    """Mean symmetric nearest-neighbor distance between surface samples."""
    pa = sample_surface(mesh_a, n_points, seed)
    pb = sample_surface(mesh_b, n_points, seed)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def eval_chamfer(encoder, dataset_dir, split="test", n_points=2048,
                 mesh_subdiv=2):
    """Mean symmetric chamfer between predictions and oracle meshes."""
    data = _DatasetCache(dataset_dir)
    _, latents = dg.load_oracle(dataset_dir)
    template = geo.make_icosphere(mesh_subdiv)
    gt_subdiv = data.manifest["config"]["mesh_subdiv"]
    scores = []
    for rec in data.split_records(split):
        off, _ = predict(encoder, data.image(rec["content_id"], rec["bin_id"]))
        pred = template.with_offsets(off)
        truth = dg.oracle_mesh(latents[rec["content_id"]], gt_subdiv)
        scores.append(chamfer_distance(pred, truth, n_points))
    if not scores:
        raise InvnetError("no evaluable records")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, encoder, bank, extra=None):
    tensors = dict(encoder.tensors)
    tensors["camera_bank"] = bank.params
    ad.save_checkpoint(path, tensors)
    meta = {"n_vertices": encoder.n_vertices, "texture_res": encoder.texture_res,
            "image_size": encoder.image_size, "n_bins": bank.n_bins,
            "fov": bank.fov}
    if extra:
        meta.update(extra)
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_model(path):
    state = ad.load_checkpoint(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    encoder = EncoderParams(meta["n_vertices"], meta["texture_res"],
                            meta["image_size"])
    encoder.load_state({k: v for k, v in state.items() if k.startswith("enc.")})
    bank = CameraBank(meta["n_bins"], fov=meta["fov"])
    bank.params.data[...] = state["camera_bank"]
    return encoder, bank, meta
