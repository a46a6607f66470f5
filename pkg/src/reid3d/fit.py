"""Recover pose, shape and camera translation from keypoints and silhouette.

Parameters are packed as ``[t (3), root (3), joint angles (3*(J-1)), beta (40)]``.
Keypoint and prior residuals have analytic Jacobians; the optional
silhouette term is differentiated by central differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (InitializationError, MetricError, ProjectionError,
                     UnderconstrainedError)
from .geometry import (N_SHAPE_MODES, Camera, Pose, QuadrupedModel, posed_mesh,
                       project_jacobian, rodrigues_jacobian)
from .render import bilinear, distance_transform, rasterize

log = logging.getLogger(__name__)


@dataclass
class Observation:
    image_size: tuple[int, int]
    keypoints: np.ndarray  # (K, 2) pixels
    visible: np.ndarray  # (K,) bool
    bbox: tuple[float, float, float, float]
    silhouette: np.ndarray | None = None
    image: str | None = None
    mask_path: str | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, float).reshape(-1, 2)
        self.visible = np.asarray(self.visible, bool).reshape(-1)
        self.bbox = tuple(float(x) for x in self.bbox)
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate bbox {self.bbox}")
        w, h = self.image_size
        vis = self.keypoints[self.visible]
        if len(vis) and (vis.min() < 0 or np.any(vis[:, 0] > w) or np.any(vis[:, 1] > h)):
            raise ValueError("visible keypoints must lie within the image")

    def shifted(self, dx: float, dy: float) -> "Observation":
        sil = None
        if self.silhouette is not None:
            sil = np.roll(self.silhouette, (int(dy), int(dx)), axis=(0, 1))
        x1, y1, x2, y2 = self.bbox
        return Observation(self.image_size, self.keypoints + [dx, dy], self.visible,
                           (x1 + dx, y1 + dy, x2 + dx, y2 + dy), sil, self.image)

    def to_json(self) -> dict:
        kps = [[float(u), float(v), int(s)] for (u, v), s in zip(self.keypoints, self.visible)]
        out = {"image": self.image, "image_size": list(self.image_size),
               "bbox": list(self.bbox), "keypoints": kps}
        if self.mask_path:
            out["mask_path"] = self.mask_path
        return out

    @classmethod
    def from_json(cls, data: dict, silhouette=None) -> "Observation":
        kps = np.asarray(data["keypoints"], float).reshape(-1, 3)
        return cls(tuple(data["image_size"]), kps[:, :2], kps[:, 2] > 0, tuple(data["bbox"]),
                   silhouette, data.get("image"), data.get("mask_path"))


@dataclass
class FitResult:
    pose: Pose
    shape: np.ndarray
    camera: Camera
    final_cost: float = 0.0
    iterations: int = 0
    converged: bool = True
    history: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "pose": {"root_rotation": self.pose.root_rotation.tolist(),
                     "joint_angles": self.pose.joint_angles.tolist()},
            "beta": np.asarray(self.shape).tolist(),
            "camera": {"focal": self.camera.focal,
                       "principal_point": list(self.camera.principal_point),
                       "translation": self.camera.translation.tolist()},
            "cost": float(self.final_cost),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_json(cls, data: dict) -> "FitResult":
        cam = data["camera"]
        return cls(Pose(data["pose"]["root_rotation"], data["pose"]["joint_angles"]),
                   np.asarray(data["beta"], float),
                   Camera(cam["focal"], tuple(cam["principal_point"]), cam["translation"]),
                   data.get("cost", 0.0), data.get("iterations", 0), data.get("converged", True))


@dataclass
class EnergyWeights:
    kp: float = 1.0
    sil: float = 0.05
    pose: float = 0.01
    shape: float = 0.01


@dataclass
class FitConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    use_silhouette: bool = False
    boundary_samples: int = 64
    max_iterations: int = 200
    tolerance: float = 1e-8
    initial_damping: float = 1e-3
    max_damping: float = 1e10
    fd_step: float = 1e-5
    focal: float = 500.0


# --------------------------------------------------------------------------
# parameter packing


def n_params(n_joints: int) -> int:
    return 3 + 3 * n_joints + N_SHAPE_MODES


def pack(pose: Pose, beta, translation) -> np.ndarray:
    return np.concatenate([np.reshape(translation, 3), pose.root_rotation,
                           pose.joint_angles.reshape(-1), np.reshape(beta, -1)])


def unpack(x: np.ndarray, n_joints: int):
    t = x[:3]
    root = x[3:6]
    ja = x[6:6 + 3 * (n_joints - 1)].reshape(-1, 3)
    beta = x[6 + 3 * (n_joints - 1):]
    return t, Pose(root, ja), beta


# --------------------------------------------------------------------------
# keypoint forward model with analytic Jacobian


class KeypointModel:
    """Posed positions of a vertex subset and their derivatives w.r.t. (pose, beta)."""

    def __init__(self, model: QuadrupedModel, vertex_ids=None):
        ids = model.mesh.keypoint_ids if vertex_ids is None else np.asarray(vertex_ids)
        sk = model.skeleton
        self.n_joints = sk.n_joints
        self.parents = sk.parents
        self.v0 = model.mesh.vertices[ids]
        self.vmodes = model.basis.vertex_modes[:, ids]
        self.weights = sk.skin_weights[ids]
        self.j0 = sk.rest_positions()
        self.jmodes = model.basis.joint_modes
        j = self.n_joints
        sub = np.eye(j, dtype=bool)
        for c in range(j - 1, 0, -1):
            sub[self.parents[c]] |= sub[c]
        self.subtree = sub.astype(float)  # subtree[i, j]: j is in the subtree of i

    def forward(self, pose: Pose, beta, with_jacobian: bool = True):
        """Return (K, 3) posed points and optionally d/d[root, joints, beta] as (K, 3, P-3)."""
        beta = np.asarray(beta, float)
        angles = pose.all_angles()
        rloc, drloc = rodrigues_jacobian(angles)
        jr = self.j0 + np.tensordot(beta, self.jmodes, axes=1)
        v = self.v0 + np.tensordot(beta, self.vmodes, axes=1)
        nj = self.n_joints
        rot = np.zeros((nj, 3, 3))
        pos = np.zeros((nj, 3))
        for i, p in enumerate(self.parents):
            if p < 0:
                rot[i], pos[i] = rloc[i], jr[i]
            else:
                rot[i] = rot[p] @ rloc[i]
                pos[i] = pos[p] + rot[p] @ (jr[i] - jr[p])
        y = np.einsum("jab,vjb->vja", rot, v[:, None, :] - jr[None]) + pos[None]  # (K, J, 3)
        x = np.einsum("vj,vja->va", self.weights, y)
        if not with_jacobian:
            return x, None

        k = len(v)
        jac = np.zeros((k, 3, 3 * nj + N_SHAPE_MODES))
        wy = self.weights[:, :, None] * y  # (K, J, 3)
        sub_wy = np.einsum("ij,vja->via", self.subtree, wy)
        sub_w = self.weights @ self.subtree.T  # (K, J): sum of weights in subtree(i)
        s = sub_wy - sub_w[:, :, None] * pos[None]  # (K, J, 3)
        for i, p in enumerate(self.parents):
            rp = np.eye(3) if p < 0 else rot[p]
            gen = rp @ drloc[i] @ rloc[i].T @ rp.T  # (3, 3, 3)
            jac[:, :, 3 * i:3 * i + 3] = np.einsum("cab,vb->vac", gen, s[:, i])

        dp = np.zeros((N_SHAPE_MODES, nj, 3))
        for i, p in enumerate(self.parents):
            if p < 0:
                dp[:, i] = self.jmodes[:, i]
            else:
                dp[:, i] = dp[:, p] + (self.jmodes[:, i] - self.jmodes[:, p]) @ rot[p].T
        rel = self.vmodes[:, :, None, :] - self.jmodes[:, None, :, :]  # (M, K, J, 3)
        dy = np.einsum("jab,mvjb->mvja", rot, rel) + dp[:, None]
        jac[:, :, 3 * nj:] = np.einsum("vj,mvja->vam", self.weights, dy)
        return x, jac


# --------------------------------------------------------------------------
# energy


class Energy:
    """Residuals of the fitting energy for one observation."""

    def __init__(self, model: QuadrupedModel, obs: Observation, config: FitConfig,
                 camera: Camera | None = None):
        self.model = model
        self.obs = obs
        self.cfg = config
        self.w = config.weights
        self.nj = model.n_joints
        self.kpm = KeypointModel(model)
        w, h = obs.image_size
        self.camera = camera or Camera(config.focal, (w / 2, h / 2), [0, 0, 1.0])
        self.visible = np.asarray(obs.visible, bool)
        self.use_sil = bool(config.use_silhouette and obs.silhouette is not None
                            and np.any(obs.silhouette))
        if not self.visible.any() and not self.use_sil:
            raise UnderconstrainedError("no visible keypoints and no silhouette")
        self.dt = distance_transform(obs.silhouette) if self.use_sil else None

    # silhouette -------------------------------------------------------------

    def boundary_vertices(self, x: np.ndarray) -> np.ndarray:
        """Vertices whose projections sit nearest to 64 evenly spaced boundary pixels."""
        t, pose, beta = unpack(x, self.nj)
        mesh = posed_mesh(self.model, pose, beta)
        cam = self.camera.with_translation(t)
        n = self.cfg.boundary_samples
        uv = _project_unchecked(cam, mesh.vertices)
        try:
            sil = rasterize(mesh, cam, self.obs.image_size).silhouette
        except Exception:
            sil = np.zeros(self.obs.image_size[::-1], bool)
        inner = sil.copy()
        inner[1:-1, 1:-1] &= sil[:-2, 1:-1] & sil[2:, 1:-1] & sil[1:-1, :-2] & sil[1:-1, 2:]
        ys, xs = np.nonzero(sil & ~inner)
        if len(xs) == 0:
            return np.linspace(0, mesh.n_vertices - 1, n).astype(int)
        cx, cy = xs.mean(), ys.mean()
        order = np.lexsort((xs, ys, np.arctan2(ys - cy, xs - cx)))
        pick = order[np.linspace(0, len(order) - 1, n).round().astype(int)]
        pts = np.stack([xs[pick] + 0.5, ys[pick] + 0.5], -1)
        d = ((uv[None, :, :] - pts[:, None, :]) ** 2).sum(-1)
        return np.argmin(d, axis=1)

    def silhouette_residuals(self, x: np.ndarray, vids: np.ndarray) -> np.ndarray:
        t, pose, beta = unpack(x, self.nj)
        km = KeypointModel(self.model, vids)
        pts, _ = km.forward(pose, beta, with_jacobian=False)
        uv = _project_unchecked(self.camera.with_translation(t), pts)
        return np.sqrt(self.w.sil) * bilinear(self.dt, uv)

    # full residual -----------------------------------------------------------

    def residuals(self, x: np.ndarray, vids=None) -> np.ndarray:
        t, pose, beta = unpack(x, self.nj)
        pts, _ = self.kpm.forward(pose, beta, with_jacobian=False)
        parts = [self._kp_residual(pts, t)]
        if self.use_sil:
            if vids is None:
                vids = self.boundary_vertices(x)
            parts.append(self.silhouette_residuals(x, vids))
        parts.append(np.sqrt(self.w.pose) * x[3:3 + 3 * self.nj])
        parts.append(np.sqrt(self.w.shape) * beta)
        return np.concatenate(parts)

    def _kp_residual(self, pts, t):
        pc = pts[self.visible] + t
        if np.any(pc[:, 2] <= 0):
            raise ProjectionError("keypoint behind the camera")
        cx, cy = self.camera.principal_point
        f = self.camera.focal
        uv = np.stack([cx + f * pc[:, 0] / pc[:, 2], cy + f * pc[:, 1] / pc[:, 2]], -1)
        return (np.sqrt(self.w.kp) * (uv - self.obs.keypoints[self.visible])).reshape(-1)

    def jacobian(self, x: np.ndarray, vids=None) -> np.ndarray:
        t, pose, beta = unpack(x, self.nj)
        pts, dpts = self.kpm.forward(pose, beta)
        vis = self.visible
        pj = project_jacobian(self.camera.with_translation(t), pts[vis])  # (Kv, 2, 3)
        np_ = len(x)
        jk = np.zeros((vis.sum(), 2, np_))
        jk[:, :, :3] = pj
        jk[:, :, 3:] = pj @ dpts[vis]
        blocks = [np.sqrt(self.w.kp) * jk.reshape(-1, np_)]
        if self.use_sil:
            if vids is None:
                vids = self.boundary_vertices(x)
            blocks.append(self._silhouette_fd(x, vids))
        prior = np.zeros((3 * self.nj + N_SHAPE_MODES, np_))
        idx = np.arange(3 * self.nj + N_SHAPE_MODES)
        prior[idx, 3 + idx] = np.where(idx < 3 * self.nj, np.sqrt(self.w.pose),
                                       np.sqrt(self.w.shape))
        blocks.append(prior)
        return np.vstack(blocks)

    def _silhouette_fd(self, x, vids):
        h = self.cfg.fd_step
        cols = []
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h
            cols.append((self.silhouette_residuals(x + e, vids)
                         - self.silhouette_residuals(x - e, vids)) / (2 * h))
        return np.stack(cols, axis=1)


def _project_unchecked(camera: Camera, pts):
    pc = pts + camera.translation
    z = np.maximum(pc[:, 2], 1e-9)
    cx, cy = camera.principal_point
    return np.stack([cx + camera.focal * pc[:, 0] / z, cy + camera.focal * pc[:, 1] / z], -1)


def energy_residuals(model: QuadrupedModel, params, obs: Observation,
                     weights: EnergyWeights | None = None, config: FitConfig | None = None,
                     camera: Camera | None = None) -> np.ndarray:
    """Stacked residual vector; its squared norm is the fitting energy.

    `params` is either a packed vector or a ``(Pose, beta, translation)`` triple.
    """
    cfg = config or FitConfig()
    if weights is not None:
        cfg = FitConfig(**{**cfg.__dict__, "weights": weights})
    if isinstance(params, tuple):
        pose, beta, t = params
        params = pack(pose, beta, t)
    return Energy(model, obs, cfg, camera).residuals(np.asarray(params, float))


# --------------------------------------------------------------------------
# initialisation and optimisation


def init_camera_from_bbox(bbox, template_height: float, focal: float,
                          principal_point=(0.0, 0.0), centroid=(0.0, 0.0, 0.0)) -> Camera:
    """Depth by similar triangles; x, y place the template centroid at the bbox centre."""
    x1, y1, x2, y2 = (float(b) for b in bbox)
    bw, bh = x2 - x1, y2 - y1
    if not (bw > 0 and bh > 0):
        raise InitializationError(f"degenerate bbox {bbox}")
    z = focal * template_height / bh
    c = np.asarray(centroid, float)
    cx, cy = principal_point
    depth = z + c[2]
    tx = ((x1 + x2) / 2 - cx) * depth / focal - c[0]
    ty = ((y1 + y2) / 2 - cy) * depth / focal - c[1]
    return Camera(focal, principal_point, [tx, ty, z])


def _stage_masks(n_joints: int):
    n = n_params(n_joints)
    trans = np.zeros(n, bool)
    trans[:3] = True
    root = trans.copy()
    root[3:6] = True
    return [trans, root, np.ones(n, bool)]


def _levenberg_marquardt(energy: Energy, x: np.ndarray, free: np.ndarray, cfg: FitConfig,
                         history: list[float]):
    mu = cfg.initial_damping

    def evaluate(p):
        try:
            vids = energy.boundary_vertices(p) if energy.use_sil else None
            r = energy.residuals(p, vids)
        except ProjectionError:
            return np.inf, None, None
        return float(r @ r), r, vids

    cost, r, vids = evaluate(x)
    if not np.isfinite(cost):
        return x, 0, False, "invalid start"
    if not history:
        history.append(cost)
    for it in range(1, cfg.max_iterations + 1):
        jac = energy.jacobian(x, vids)[:, free]
        g = jac.T @ r
        hess = jac.T @ jac
        if np.max(np.abs(g)) <= 1e-12 * max(1.0, cost):
            return x, it - 1, True, "stationary"
        diag = np.diag(hess).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1.0))
        while True:
            try:
                delta = np.linalg.solve(hess + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = np.full(free.sum(), np.nan)
            trial = x.copy()
            trial[free] += delta
            new_cost, new_r, new_vids = (evaluate(trial) if np.all(np.isfinite(delta))
                                         else (np.inf, None, None))
            if new_cost <= cost:
                mu = max(mu * 0.1, 1e-15)
                rel = (cost - new_cost) / max(cost, 1e-300)
                x, cost, r, vids = trial, new_cost, new_r, new_vids
                history.append(cost)
                if rel < cfg.tolerance:
                    return x, it, True, "relative decrease below tolerance"
                break
            mu *= 10.0
            if mu > cfg.max_damping:
                return x, it, False, "damping cap reached without decrease"
    return x, cfg.max_iterations, False, "iteration limit"


def fit_model(model: QuadrupedModel, obs: Observation, init: FitResult | None = None,
              config: FitConfig | None = None) -> FitResult:
    """Staged Levenberg-Marquardt fit: translation, + root rotation, + everything."""
    cfg = config or FitConfig()
    w, h = obs.image_size
    if init is None:
        v = model.mesh.vertices
        centre = (v.min(axis=0) + v.max(axis=0)) / 2
        cam = init_camera_from_bbox(obs.bbox, model.height(), cfg.focal, (w / 2, h / 2), centre)
        init = FitResult(Pose.zero(model.n_joints), np.zeros(N_SHAPE_MODES), cam)
    energy = Energy(model, obs, cfg, init.camera)
    x = pack(init.pose, init.shape, init.camera.translation)
    history: list[float] = []
    total, converged, reasons = 0, True, []
    stages = _stage_masks(model.n_joints)
    for mask in stages:
        x, its, converged, reason = _levenberg_marquardt(energy, x, mask, cfg, history)
        total += its
        reasons.append(reason)
    r = energy.residuals(x)
    t, pose, beta = unpack(x, model.n_joints)
    if not converged:
        log.warning("fit did not converge: %s", reasons[-1])
    return FitResult(pose, beta, init.camera.with_translation(t), float(r @ r), total,
                     converged, history, {"stages": reasons})


def reproject_keypoints(model: QuadrupedModel, fit: FitResult) -> np.ndarray:
    pts, _ = KeypointModel(model).forward(fit.pose, fit.shape, with_jacobian=False)
    return _project_unchecked(fit.camera, pts)


def pck(predicted, ground_truth, bbox, fraction: float = 0.1, visible=None) -> float:
    """Share of ground-truth-visible keypoints within fraction * max(bbox side)."""
    pred = np.asarray(predicted, float).reshape(-1, 2)
    gt = np.asarray(ground_truth, float).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise MetricError("keypoint counts differ")
    vis = np.ones(len(gt), bool) if visible is None else np.asarray(visible, bool)
    if not vis.any():
        raise MetricError("PCK undefined with zero visible keypoints")
    x1, y1, x2, y2 = bbox
    thresh = fraction * max(x2 - x1, y2 - y1)
    err = np.linalg.norm(pred[vis] - gt[vis], axis=1)
    return float(np.mean(err <= thresh))


def dumps_fit(fit: FitResult) -> str:
    return json.dumps(fit.to_json(), sort_keys=True)


def fit_config_from_dict(data: dict) -> FitConfig:
    data = dict(data)
    weights = EnergyWeights(**data.pop("weights", {}))
    return FitConfig(weights=weights, **data)


def fit_config_to_dict(cfg: FitConfig) -> dict:
    return asdict(cfg)
