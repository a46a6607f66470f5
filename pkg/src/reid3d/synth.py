"""Synthetic striped population: coats, rendered sightings, augmentation, splits.

All randomness flows from explicit `numpy.random.Generator` objects seeded
with (dataset seed, purpose, sample index, ...) tuples, so the output of any
one sample does not depend on how many others were generated before it.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DatasetError, RenderError
from .fit import FitResult, KeypointModel, Observation
from .geometry import (N_SHAPE_MODES, SEMANTIC_MODES, Camera, Pose, QuadrupedModel, TemplateConfig,
                       make_template, posed_mesh, project, rodrigues)
from .render import rasterize, write_mask, write_rgb
from .roi import Detection, write_detections
from .texture import RESOLUTION, TextureMap

log = logging.getLogger(__name__)

IMAGE_SIZE = 256
FOCAL = 500.0
DEPTH = 9.0
TARGET_SPECIES = "grevys_zebra"
DARK = np.array([28.0, 26.0, 24.0])
LIGHT = np.array([236.0, 232.0, 222.0])


# --------------------------------------------------------------------------
# coats


def smooth_noise(u, v, seed: int, cells: int = 6) -> np.ndarray:
    """Value noise in [-1, 1] on a periodic `cells` x `cells` lattice, C1-smooth."""
    rng = np.random.default_rng([seed, 17])
    lattice = rng.uniform(-1.0, 1.0, (cells, cells))
    x = np.asarray(u, float) * cells
    y = np.asarray(v, float) * cells
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    i0, i1 = x0 % cells, (x0 + 1) % cells
    j0, j1 = y0 % cells, (y0 + 1) % cells
    top = lattice[j0, i0] * (1 - sx) + lattice[j0, i1] * sx
    bot = lattice[j1, i0] * (1 - sx) + lattice[j1, i1] * sx
    return top * (1 - sy) + bot * sy


def gen_identity_texture(seed: int, frequency: float, waviness: float = 0.04, contrast: float = 0.9,
                         resolution: int = RESOLUTION) -> TextureMap:
    """Band pattern sin(2 pi f (u + waviness * noise(u, v))) thresholded at zero."""
    if not frequency > 0:
        raise ConfigError(f"stripe frequency must be positive, got {frequency}")
    if not 0.0 <= contrast <= 1.0:
        raise ConfigError(f"contrast must lie in [0, 1], got {contrast}")
    c = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(c, c)
    phase = np.random.default_rng([seed, 3]).uniform(0.0, 1.0)
    s = np.sin(2 * np.pi * (frequency * (u + waviness * smooth_noise(u, v, seed)) + phase))
    mid = (DARK + LIGHT) / 2
    dark = mid + contrast * (DARK - mid)
    light = mid + contrast * (LIGHT - mid)
    color = np.where((s < 0)[..., None], dark, light)
    return TextureMap.full(color)


@dataclass(frozen=True)
class Individual:
    id: str
    texture_seed: int
    shape: tuple[float, ...]
    frequency: float
    waviness: float
    contrast: float

    def texture(self, resolution: int = RESOLUTION) -> TextureMap:
        return gen_identity_texture(self.texture_seed, self.frequency, self.waviness, self.contrast, resolution)

    def to_json(self) -> dict:
        return asdict(self) | {"shape": list(self.shape)}

    @classmethod
    def from_json(cls, d: dict) -> "Individual":
        return cls(d["id"], int(d["texture_seed"]), tuple(d["shape"]), d["frequency"], d["waviness"], d["contrast"])


def make_individuals(n: int, seed: int, frequency_range=(6.0, 16.0), waviness_range=(0.02, 0.08),
                     contrast_range=(0.75, 1.0), shape_scale: float = 0.3) -> list[Individual]:
    rng = np.random.default_rng([seed, 0])
    out = []
    for i in range(n):
        beta = np.zeros(N_SHAPE_MODES)
        beta[:len(SEMANTIC_MODES)] = rng.normal(0.0, shape_scale, len(SEMANTIC_MODES))
        beta[len(SEMANTIC_MODES):] = rng.normal(0.0, shape_scale / 3, N_SHAPE_MODES - len(SEMANTIC_MODES))
        out.append(Individual(
            id=f"z{i:03d}",
            texture_seed=int(rng.integers(0, 2**63 - 1)),
            shape=tuple(float(b) for b in beta),
            frequency=float(rng.uniform(*frequency_range)),
            waviness=float(rng.uniform(*waviness_range)),
            contrast=float(rng.uniform(*contrast_range)),
        ))
    return out


# --------------------------------------------------------------------------
# sightings


@dataclass(frozen=True)
class SightingJitter:
    azimuth: float = 0.35  # radians, rotation about the vertical axis
    tilt: float = 0.08  # radians, elevation and roll
    pose: float = 0.15  # radians per joint axis
    depth: float = 0.1  # relative change of camera distance
    offset: float = 0.08  # image-plane offset as a fraction of the image size
    light: float = 0.4  # perturbation of the light direction


def background(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Low-frequency earthy noise field (H, W, 3) in 0..255."""
    seed = int(rng.integers(0, 2**63 - 1))
    c = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(c, c)
    n1 = smooth_noise(u, v, seed, cells=4)
    n2 = smooth_noise(u, v, seed + 1, cells=9)
    base = rng.uniform([90, 85, 50], [160, 140, 100])
    g = 0.7 * n1 + 0.3 * n2
    return np.clip(base + 45.0 * g[..., None] * np.array([1.0, 0.9, 0.7]), 0, 255)


@dataclass
class Sighting:
    image: np.ndarray  # (H, W, 3) uint8
    observation: Observation
    fit: FitResult
    mask: np.ndarray


def keypoint_visibility(model: QuadrupedModel, fit: FitResult, buf, points) -> np.ndarray:
    """A keypoint is visible when it lands on-screen and is not behind the z-buffer."""
    uv = project(fit.camera, points)
    z = points[:, 2] + fit.camera.translation[2]
    h, w = buf.depth.shape
    col = np.floor(uv[:, 0]).astype(int)
    row = np.floor(uv[:, 1]).astype(int)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    vis = np.zeros(len(points), bool)
    d = buf.depth[row[inside], col[inside]]
    vis[inside] = z[inside] <= d + 0.02 * d
    return vis


def render_sighting(model: QuadrupedModel, ind: Individual, rng: np.random.Generator,
                    jitter: SightingJitter | None = None, texture: TextureMap | None = None,
                    size: int = IMAGE_SIZE, max_retries: int = 10) -> Sighting:
    """Render one right-side sighting with exact ground-truth annotations."""
    jitter = jitter or SightingJitter()
    texture = texture or ind.texture()
    beta = np.asarray(ind.shape)
    kp_model = KeypointModel(model)
    for _ in range(max_retries):
        az = rng.uniform(-jitter.azimuth, jitter.azimuth)
        el, roll = rng.uniform(-jitter.tilt, jitter.tilt, 2)
        rot = rodrigues(np.array([0.0, az, 0.0])) @ rodrigues(np.array([0.0, 0.0, el])) @ \
            rodrigues(np.array([roll, 0.0, 0.0]))
        root = _log_rotation(rot)
        joints = rng.uniform(-jitter.pose, jitter.pose, (model.n_joints - 1, 3))
        pose = Pose(root, joints)
        # keep the framing of a 256 px render at any image size with a fixed focal length
        depth = DEPTH * IMAGE_SIZE / size * (1.0 + rng.uniform(-jitter.depth, jitter.depth))
        offset = rng.uniform(-jitter.offset, jitter.offset, 2) * size
        light = np.array([-0.3, -0.5, -1.0]) + rng.uniform(-jitter.light, jitter.light, 3)
        light /= np.linalg.norm(light)
        bg = background(rng, size)

        mesh = posed_mesh(model, pose, beta)
        centre = (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0)) / 2
        t = np.array([offset[0] * depth / FOCAL - centre[0], offset[1] * depth / FOCAL - centre[1],
                      depth - centre[2]])
        cam = Camera(FOCAL, (size / 2, size / 2), t)
        try:
            buf = rasterize(mesh, cam, (size, size), texture, light)
        except RenderError:
            continue
        sil = buf.silhouette
        if not sil.any() or sil[0].any() or sil[-1].any() or sil[:, 0].any() or sil[:, -1].any():
            continue  # partly off-screen: resample
        fit = FitResult(pose, beta.copy(), cam)
        pts, _ = kp_model.forward(pose, beta, with_jacobian=False)
        uv = project(cam, pts)
        vis = keypoint_visibility(model, fit, buf, pts)
        image = np.where(sil[..., None], buf.color, np.rint(bg)).astype(np.uint8)
        obs = Observation((size, size), uv, vis, mask_bbox(sil), silhouette=sil)
        return Sighting(image, obs, fit, sil)
    raise RenderError(f"no on-screen sighting of {ind.id} after {max_retries} attempts")


def _log_rotation(r: np.ndarray) -> np.ndarray:
    """Axis-angle of a rotation matrix (angles well below pi here)."""
    c = np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(c)
    if theta < 1e-12:
        return np.zeros(3)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return w * theta / (2 * np.sin(theta))


def mask_bbox(mask) -> tuple[float, float, float, float]:
    """Tight box (xmin, ymin, xmax + 1, ymax + 1) of the foreground pixels."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise DatasetError("empty mask has no bounding box")
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    saturation: float = 0.3  # multiplicative factor range 1 +/- s
    contrast: float = 0.3
    brightness: float = 25.0  # additive, 0..255 units
    shift: float = 12.0  # pixels
    rotation: float = 8.0  # degrees

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ConfigError("augmentation ranges must be non-negative")


@dataclass
class Augmented:
    image: np.ndarray
    keypoints: np.ndarray | None
    mask: np.ndarray | None
    params: dict = field(default_factory=dict)


def _geometry(h: int, w: int, angle_deg: float, shift):
    """Forward map out = A @ in + b for a rotation about the image centre plus shift."""
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])  # acts on (x, y)
    centre = np.array([w / 2, h / 2])
    b = centre - rot @ centre + np.asarray(shift, float)
    return rot, b


def augment(image, policy: AugmentPolicy, rng: np.random.Generator, keypoints=None, mask=None) -> Augmented:
    """Colour jitter, shift and rotation; keypoints and mask follow the geometry."""
    img = np.asarray(image, float)
    h, w = img.shape[:2]
    sat = 1.0 + rng.uniform(-policy.saturation, policy.saturation)
    con = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
    bri = rng.uniform(-policy.brightness, policy.brightness)
    shift = rng.uniform(-policy.shift, policy.shift, 2)
    angle = rng.uniform(-policy.rotation, policy.rotation)
    params = {"saturation": sat, "contrast": con, "brightness": bri, "shift": shift.tolist(), "rotation": angle}

    rot, b = _geometry(h, w, angle, shift)
    identity = angle == 0.0 and not shift.any()
    out_mask = None if mask is None else np.asarray(mask, bool)
    kps = None if keypoints is None else np.asarray(keypoints, float)
    if not identity:
        # the resampler maps output (row, col) indices to input indices; index i is at i + 0.5
        inv = np.linalg.inv(rot)
        m_rc = inv[::-1, ::-1]
        off_rc = (inv @ (np.array([0.5, 0.5]) - b) - 0.5)[::-1]
        chans = [ndimage.affine_transform(img[..., c], m_rc, offset=off_rc, order=1, mode="nearest")
                 for c in range(img.shape[2])]
        img = np.stack(chans, -1)
        if out_mask is not None:
            out_mask = ndimage.affine_transform(out_mask.astype(float), m_rc, offset=off_rc, order=1,
                                                mode="constant", cval=0.0) >= 0.5
        if kps is not None:
            kps = kps @ rot.T + b
    if sat != 1.0:
        grey = img.mean(axis=2, keepdims=True)
        img = grey + sat * (img - grey)
    if con != 1.0:
        img = img.mean() + con * (img - img.mean())
    img = img + bri
    img = np.clip(img, 0.0, 255.0)
    if np.asarray(image).dtype == np.uint8:
        img = np.rint(img).astype(np.uint8)
    return Augmented(img, kps, out_mask, params)


# --------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class SynthConfig:
    n_individuals: int = 10
    sightings_per_individual: int = 4
    train_per_individual: int = 2
    augment_factor: int = 25
    seed: int = 7
    image_size: int = IMAGE_SIZE
    jitter: SightingJitter = SightingJitter()
    policy: AugmentPolicy = AugmentPolicy()
    frequency_range: tuple[float, float] = (6.0, 16.0)

    def validate(self) -> None:
        if self.n_individuals < 2:
            raise ConfigError("need at least two individuals")
        if self.sightings_per_individual < 2:
            raise ConfigError("need at least two sightings per individual")
        if not 0 < self.train_per_individual < self.sightings_per_individual:
            raise ConfigError("train_per_individual must lie strictly between 0 and sightings_per_individual")
        if self.augment_factor < 1:
            raise ConfigError("augment_factor counts total copies per training original and must be >= 1")


def _sample_record(ind_id, name, split, source, augmented) -> dict:
    return {"individual_id": ind_id, "id": name, "image": f"images/{name}.png",
            "annotations": f"annotations/{name}.json", "mask": f"masks/{name}.png",
            "split": split, "source": source, "augmented": augmented}


def _write_sample(out: Path, name: str, image, obs: Observation, mask, gt: FitResult | None, species) -> None:
    write_rgb(out / "images" / f"{name}.png", image)
    write_mask(out / "masks" / f"{name}.png", mask)
    obs.image = f"images/{name}.png"
    obs.mask_path = f"masks/{name}.png"
    ann = {"observation": obs.to_json(), "ground_truth": None if gt is None else gt.to_json()}
    (out / "annotations" / f"{name}.json").write_text(json.dumps(ann, sort_keys=True) + "\n")
    if species is not None:
        (out / "images" / f"{name}.species.json").write_text(json.dumps(species, sort_keys=True) + "\n")


def _species_payload(rng: np.random.Generator) -> dict:
    top = float(np.round(rng.uniform(0.45, 0.99), 4))
    rest = float(np.round((1 - top) * rng.uniform(0.3, 0.9), 4))
    return {"predictions": [{"label": TARGET_SPECIES, "score": top},
                            {"label": "plains_zebra", "score": rest}]}


def _detections_for(name: str, bbox, rng: np.random.Generator, size: int) -> list[Detection]:
    """Jittered true box, a nested part box, and a low-score false positive."""
    x1, y1, x2, y2 = bbox
    bw, bh = x2 - x1, y2 - y1
    jit = rng.uniform(-0.04, 0.04, 4) * [bw, bh, bw, bh]
    tb = np.clip(np.array(bbox) + jit, 0, size)
    dets = [Detection(name, tuple(tb), float(np.round(rng.uniform(0.86, 0.999), 4)))]
    cx, cy = rng.uniform(x1 + 0.2 * bw, x2 - 0.35 * bw), rng.uniform(y1 + 0.1 * bh, y2 - 0.35 * bh)
    dets.append(Detection(name, (cx, cy, cx + 0.18 * bw, cy + 0.2 * bh), float(np.round(rng.uniform(0.84, 0.95), 4))))
    fx, fy = rng.uniform(0, size - 40, 2)
    dets.append(Detection(name, (fx, fy, fx + 40, fy + 30), float(np.round(rng.uniform(0.2, 0.8), 4))))
    return dets


def _build_individual(args):
    out, cfg, ind, index = args
    model = make_template(TemplateConfig())
    texture = ind.texture()
    records, dets, gts = [], [], {}
    for s in range(cfg.sightings_per_individual):
        rng = np.random.default_rng([cfg.seed, 1, index, s])
        sighting = render_sighting(model, ind, rng, cfg.jitter, texture, cfg.image_size)
        name = f"{ind.id}_s{s}"
        split = "train" if s < cfg.train_per_individual else "test"
        _write_sample(out, name, sighting.image, sighting.observation, sighting.mask, sighting.fit,
                      _species_payload(rng))
        records.append(_sample_record(ind.id, name, split, name, False))
        dets.extend(_detections_for(name, sighting.observation.bbox, rng, cfg.image_size))
        gts[name] = [list(sighting.observation.bbox)]
        if split != "train":
            continue
        for k in range(1, cfg.augment_factor):
            arng = np.random.default_rng([cfg.seed, 2, index, s, k])
            aug = augment(sighting.image, cfg.policy, arng, sighting.observation.keypoints, sighting.mask)
            if not aug.mask.any():
                raise DatasetError(f"augmentation {k} of {name} moved the animal off-screen")
            kps = aug.keypoints
            vis = sighting.observation.visible & np.all((kps >= 0) & (kps <= cfg.image_size), axis=1)
            obs = Observation((cfg.image_size, cfg.image_size), kps, vis, mask_bbox(aug.mask))
            aname = f"{name}_a{k:02d}"
            _write_sample(out, aname, aug.image, obs, aug.mask, None, None)
            records.append(_sample_record(ind.id, aname, "train", name, True))
    return records, dets, gts


def build_dataset(cfg: SynthConfig, out_dir, jobs: int = 1) -> dict:
    """Render, split and augment a population; write everything under `out_dir`."""
    cfg.validate()
    out = Path(out_dir)
    for sub in ("images", "masks", "annotations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    inds = make_individuals(cfg.n_individuals, cfg.seed, frequency_range=cfg.frequency_range)
    tasks = [(out, cfg, ind, i) for i, ind in enumerate(inds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_build_individual, tasks))
    else:
        results = [_build_individual(t) for t in tasks]
    samples, dets, gts = [], [], {}
    for recs, d, g in results:
        samples.extend(recs)
        dets.extend(d)
        gts.update(g)
    write_detections(out / "detections.jsonl", dets)
    (out / "detections_gt.json").write_text(json.dumps(gts, sort_keys=True) + "\n")
    manifest = {"config": synth_config_to_dict(cfg), "individuals": [i.to_json() for i in inds],
                "samples": samples}
    check_manifest(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def check_manifest(manifest: dict) -> None:
    """Every individual in both splits, and no augmented copy of a test sighting."""
    test_sources = {s["source"] for s in manifest["samples"] if s["split"] == "test"}
    for ind in manifest["individuals"]:
        splits = {s["split"] for s in manifest["samples"] if s["individual_id"] == ind["id"]}
        if splits != {"train", "test"}:
            raise DatasetError(f"individual {ind['id']} is missing from a split")
    for s in manifest["samples"]:
        if s["split"] == "train" and s["source"] in test_sources:
            raise DatasetError(f"training sample {s['id']} leaks test sighting {s['source']}")


def synth_config_to_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


def synth_config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    jit = SightingJitter(**d.pop("jitter", {}))
    pol = AugmentPolicy(**d.pop("policy", {}))
    if "frequency_range" in d:
        d["frequency_range"] = tuple(d["frequency_range"])
    return SynthConfig(jitter=jit, policy=pol, **d)
