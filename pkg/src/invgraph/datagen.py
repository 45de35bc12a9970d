"""Procedural synthetic multi-view dataset generator.

Plays the data-generator role of a latent-variable image synthesizer: a fixed
set of viewpoint bins shared across all contents, per-content smooth radial
shape deformations, procedural textures and backgrounds. The training-facing
records expose only images, masks and bin ids; exact cameras, latents and
meshes are written to a separate oracle file consumed only by evaluation.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from . import renderer as rn
from .autodiff import no_tape_data


class DataGenError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# content latents and their scene realization
# ---------------------------------------------------------------------------

COEFF_BOUND = 0.3
N_SHAPE_COEFFS = 16

# monomial products (up to a few degree-3 terms) over unit-sphere coordinates
_BASIS_POWERS = [
    (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (1, 0, 1), (0, 1, 1),
    (2, 1, 0), (2, 0, 1), (1, 2, 0), (0, 2, 1), (1, 0, 2), (0, 1, 2),
]


def _basis_sup_norms():
    """Sup of each basis monomial over the sphere (dense deterministic sampling)."""
    n = 8192
    idx = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * idx / n)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * idx
    pts = np.stack([np.sin(phi) * np.cos(theta), np.cos(phi),
                    np.sin(phi) * np.sin(theta)], axis=1)
    sups = []
    for px, py, pz in _BASIS_POWERS:
        vals = pts[:, 0] ** px * pts[:, 1] ** py * pts[:, 2] ** pz
        sups.append(np.abs(vals).max())
    return np.array(sups)


_BASIS_SUPS = _basis_sup_norms()
# scale so that with all 16 coefficients at the +-0.3 bound the total radial
# offset stays below 16 * 0.3 * 0.2 = 0.96 < 1, keeping radii positive
_BASIS_SCALE = 0.2 / _BASIS_SUPS


@dataclass
class ContentLatent:
    shape_coeffs: np.ndarray  # (16,) in [-COEFF_BOUND, COEFF_BOUND]
    texture_seed: int
    background_seed: int

    def to_dict(self):
        return {"shape_coeffs": [float(c) for c in self.shape_coeffs],
                "texture_seed": int(self.texture_seed),
                "background_seed": int(self.background_seed)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["shape_coeffs"], dtype=np.float64),
                   int(d["texture_seed"]), int(d["background_seed"]))


def sample_content(seed):
    rng = np.random.default_rng(seed)
    coeffs = rng.uniform(-COEFF_BOUND, COEFF_BOUND, size=N_SHAPE_COEFFS)
    return ContentLatent(shape_coeffs=coeffs,
                         texture_seed=int(rng.integers(0, 2 ** 31)),
                         background_seed=int(rng.integers(0, 2 ** 31)))


def radial_offsets(latent, points):
    """Radial deformation field of a latent at unit-sphere points."""
    r = np.zeros(len(points))
    for coeff, scale, (px, py, pz) in zip(latent.shape_coeffs, _BASIS_SCALE,
                                          _BASIS_POWERS):
        r += coeff * scale * (points[:, 0] ** px * points[:, 1] ** py
                              * points[:, 2] ** pz)
    return r


def _procedural_texture(seed, res):
    """2-4 smooth color regions; continuous across the azimuth seam."""
    rng = np.random.default_rng(seed)
    n_regions = int(rng.integers(2, 5))
    colors = rng.uniform(0.08, 0.95, size=(n_regions, 3))
    centers = rng.uniform(0.0, 1.0, size=(n_regions, 2))
    widths = rng.uniform(0.05, 0.25, size=n_regions)
    u, v = np.meshgrid((np.arange(res) + 0.5) / res, (np.arange(res) + 0.5) / res)
    logits = np.zeros((res, res, n_regions))
    for i in range(n_regions):
        du = np.abs(u - centers[i, 0])
        du = np.minimum(du, 1.0 - du)  # wrap in u so the seam stays invisible
        d2 = du ** 2 + (v - centers[i, 1]) ** 2
        logits[:, :, i] = -d2 / widths[i]
    w = np.exp(logits - logits.max(axis=2, keepdims=True))
    w /= w.sum(axis=2, keepdims=True)
    return np.clip(w @ colors, 0.0, 1.0)


def _procedural_background(seed, height, width):
    """Vertical two-color gradient plus low-frequency sinusoidal noise."""
    rng = np.random.default_rng(seed)
    top = rng.uniform(0.1, 0.9, size=3)
    bottom = rng.uniform(0.1, 0.9, size=3)
    ys = np.linspace(0.0, 1.0, height)[:, None, None]
    img = top[None, None, :] * (1.0 - ys) + bottom[None, None, :] * ys
    img = np.broadcast_to(img, (height, width, 3)).copy()
    xx, yy = np.meshgrid(np.linspace(0, 1, width), np.linspace(0, 1, height))
    for _ in range(3):
        freq = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        amp = rng.uniform(0.02, 0.08)
        wave = np.sin(2 * math.pi * freq[0] * xx + phase[0]) \
            * np.sin(2 * math.pi * freq[1] * yy + phase[1])
        img += amp * wave[:, :, None] * rng.uniform(0.3, 1.0, size=3)
    return np.clip(img, 0.0, 1.0)


def content_to_scene(latent, mesh_subdiv=2, texture_res=64, image_size=64):
    """(mesh, texture, background) realization of a content latent."""
    mesh = geo.make_icosphere(mesh_subdiv)
    r = radial_offsets(latent, mesh.template_vertices)
    radii = 1.0 + r
    if (radii <= 0).any():
        raise DataGenError("radial deformation produced non-positive radius")
    mesh = mesh.with_offsets(mesh.template_vertices * r[:, None])
    texture = rn.TextureMap(_procedural_texture(latent.texture_seed, texture_res))
    background = _procedural_background(latent.background_seed, image_size, image_size)
    return mesh, texture, background


# ---------------------------------------------------------------------------
# view table
# ---------------------------------------------------------------------------

@dataclass
class ViewTable:
    """Per-bin hidden true cameras: bin centers plus fixed seeded offsets.

    Azimuth offsets are drawn mean-centered so the unobservable global
    azimuth gauge does not dominate camera-convergence evaluation.
    """

    n_bins: int
    jitter_deg: float
    distance: float
    seed: int
    fov: float = geo.DEFAULT_FOV
    hidden_true_cams: list = field(default_factory=list)

    def bin_camera(self, bin_id):
        """Training-facing coarse initialization (no jitter knowledge)."""
        return geo.camera_from_bin(bin_id, self.n_bins, self.distance, self.fov)

    def to_dict(self):
        return {"n_bins": self.n_bins, "jitter_deg": self.jitter_deg,
                "distance": self.distance, "seed": self.seed, "fov": self.fov,
                "hidden_true_cams": [
                    {"azimuth": c.azimuth, "elevation": c.elevation,
                     "distance": c.distance, "fov": c.fov}
                    for c in self.hidden_true_cams]}

    @classmethod
    def from_dict(cls, d):
        cams = [geo.CameraParams(**c) for c in d.pop("hidden_true_cams")]
        return cls(hidden_true_cams=cams, **d)


def make_view_table(n_bins=12, jitter_deg=15.0, distance=2.7, seed=0,
                    fov=geo.DEFAULT_FOV):
    if n_bins < 2:
        raise DataGenError(f"need at least 2 bins, got {n_bins}")
    if not 0.0 <= jitter_deg <= 20.0:
        raise DataGenError(f"jitter_deg must be in [0, 20], got {jitter_deg}")
    rng = np.random.default_rng(seed)
    az_off = rng.uniform(-jitter_deg, jitter_deg, size=n_bins)
    az_off -= az_off.mean()
    peak = np.abs(az_off).max()
    if peak > jitter_deg:
        az_off *= jitter_deg / peak
    el_off = rng.uniform(0.0, jitter_deg, size=n_bins)
    cams = []
    for b in range(n_bins):
        base = geo.camera_from_bin(b, n_bins, distance, fov)
        cams.append(geo.CameraParams(
            azimuth=base.azimuth + math.radians(az_off[b]),
            elevation=math.radians(el_off[b]),
            distance=distance, fov=fov))
    return ViewTable(n_bins=n_bins, jitter_deg=jitter_deg, distance=distance,
                     seed=seed, fov=fov, hidden_true_cams=cams)


# ---------------------------------------------------------------------------
# dataset build
# ---------------------------------------------------------------------------

@dataclass
class SceneSample:
    image: np.ndarray
    mask: np.ndarray
    bin_id: int
    content_id: int


MIN_MASK_FRAC = 0.10


def passes_area_filter(mask, min_frac=MIN_MASK_FRAC):
    """Keep a sample iff its mask covers at least min_frac of the image."""
    m = np.asarray(mask)
    return float(m.sum()) / m.size >= min_frac


def content_seed(master_seed, content_id):
    return [int(master_seed), int(content_id)]


def render_scene_sample(latent, cam, cfg, mesh_subdiv=2, texture_res=64):
    """Composite one (content, camera) sample: foreground render over background."""
    mesh, texture, background = content_to_scene(
        latent, mesh_subdiv, texture_res, cfg.height)
    rgb, _ = rn.render(mesh, texture, cam, cfg)
    mask = rn.hard_mask(mesh, cam, cfg)
    image = no_tape_data(rgb) + (1.0 - mask)[:, :, None] * background
    return np.clip(image, 0.0, 1.0), mask


def build_dataset(n_contents, views, cfg, out_dir, seed=0, mesh_subdiv=2,
                  texture_res=64, min_mask_frac=MIN_MASK_FRAC, test_frac=0.10,
                  per_sample_jitter_deg=0.0):
    """Render the full (content, bin) grid; write PNGs, manifest, and oracle.

    Samples whose mask covers under `min_mask_frac` of the image are dropped
    and reported. Contents split 90/10 into train/test.
    """
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    jitter_rng = np.random.default_rng([seed, 0xA5])
    records, filtered, latents = [], [], {}
    for cid in range(n_contents):
        latent = sample_content(content_seed(seed, cid))
        latents[cid] = latent
        for b in range(views.n_bins):
            cam = views.hidden_true_cams[b]
            if per_sample_jitter_deg > 0.0:
                d_az, d_el = jitter_rng.uniform(
                    -per_sample_jitter_deg, per_sample_jitter_deg, size=2)
                cam = geo.CameraParams(cam.azimuth + math.radians(d_az),
                                       cam.elevation + math.radians(d_el),
                                       cam.distance, cam.fov)
            image, mask = render_scene_sample(latent, cam, cfg, mesh_subdiv,
                                              texture_res)
            if not passes_area_filter(mask, min_mask_frac):
                filtered.append({"content_id": cid, "bin_id": b,
                                 "area_frac": float(mask.mean())})
                continue
            img_name = f"images/{cid:05d}_{b:02d}.png"
            mask_name = f"masks/{cid:05d}_{b:02d}.png"
            rn.save_image(os.path.join(out_dir, img_name), image)
            rn.save_mask(os.path.join(out_dir, mask_name), mask)
            records.append({"content_id": cid, "bin_id": b,
                            "image": img_name, "mask": mask_name})

    split_rng = np.random.default_rng([seed, 0x5B])
    order = split_rng.permutation(n_contents)
    n_test = max(1, int(round(n_contents * test_frac)))
    test_ids = sorted(int(i) for i in order[:n_test])
    train_ids = sorted(int(i) for i in order[n_test:])

    manifest = {
        "config": {
            "n_contents": n_contents, "n_bins": views.n_bins,
            "jitter_deg": views.jitter_deg, "distance": views.distance,
            "fov": views.fov, "seed": seed, "width": cfg.width,
            "height": cfg.height, "mesh_subdiv": mesh_subdiv,
            "texture_res": texture_res, "min_mask_frac": min_mask_frac,
            "per_sample_jitter_deg": per_sample_jitter_deg,
        },
        "records": records,
        "splits": {"train": train_ids, "test": test_ids},
        "filtered": filtered,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)

    oracle = {"view_table": views.to_dict(),
              "contents": {str(cid): lat.to_dict() for cid, lat in latents.items()}}
    with open(os.path.join(out_dir, "oracle.json"), "w") as fh:
        json.dump(oracle, fh, indent=1, sort_keys=True)
    return manifest


# ---------------------------------------------------------------------------
# loaders: training-facing vs oracle-facing entry points
# ---------------------------------------------------------------------------

def load_manifest(dataset_dir):
    """Training-facing loader: never touches oracle.json."""
    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        return json.load(fh)


def load_sample(dataset_dir, record):
    image = rn.load_image(os.path.join(dataset_dir, record["image"]))
    mask = rn.load_mask(os.path.join(dataset_dir, record["mask"]))
    return SceneSample(image=image, mask=mask, bin_id=record["bin_id"],
                       content_id=record["content_id"])


def load_oracle(dataset_dir):
    """Evaluation-only loader for hidden cameras and latents."""
    with open(os.path.join(dataset_dir, "oracle.json")) as fh:
        raw = json.load(fh)
    views = ViewTable.from_dict(dict(raw["view_table"]))
    contents = {int(k): ContentLatent.from_dict(v)
                for k, v in raw["contents"].items()}
    return views, contents


def oracle_mesh(latent, mesh_subdiv=2):
    """Ground-truth mesh reconstruction from a content latent."""
    mesh = geo.make_icosphere(mesh_subdiv)
    r = radial_offsets(latent, mesh.template_vertices)
    return mesh.with_offsets(mesh.template_vertices * r[:, None])
