"""Software rasterizer and image buffers.

Pixel centres sit at integer + 0.5.  Coverage uses edge functions with a
top-left fill rule; each edge function is evaluated with the edge's
endpoints in a canonical order so two triangles sharing an edge see
exactly opposite values and split the pixels on it without gaps or overlap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import RenderError
from .geometry import Camera, Mesh, to_camera

BACKGROUND = -1
AMBIENT = 0.2


@dataclass(frozen=True)
class RenderBuffers:
    width: int
    height: int
    silhouette: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W), +inf on background
    face_id: np.ndarray  # (H, W), BACKGROUND on background
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    uv: np.ndarray  # (H, W, 2)
    color: np.ndarray | None = None  # (H, W, 3) uint8

    @property
    def coverage(self) -> int:
        return int(self.silhouette.sum())


def _edge(ax, ay, bx, by, px, py):
    """Edge function of a->b at p, computed with endpoints in canonical order."""
    swap = (ax > bx) | ((ax == bx) & (ay > by))
    x0, y0 = np.where(swap, bx, ax), np.where(swap, by, ay)
    x1, y1 = np.where(swap, ax, bx), np.where(swap, ay, by)
    e = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    return np.where(swap, -e, e)


def _top_left(ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def coverage_pairs(screen: np.ndarray, faces: np.ndarray, width: int, height: int):
    """All (face, pixel) pairs whose pixel centre is covered, with screen barycentrics.

    `screen` holds projected (x, y) per vertex.  Degenerate (zero-area)
    triangles cover nothing.  Winding is normalised, so both orientations
    rasterize identically.
    """
    p = screen[faces]  # (F, 3, 2)
    area = _edge(p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1], p[:, 2, 0], p[:, 2, 1])
    order = np.where((area < 0)[:, None], [[0, 2, 1]], [[0, 1, 2]])
    p = np.take_along_axis(p, order[:, :, None], axis=1)
    area = np.abs(area)
    lo = np.ceil(p.min(axis=1) - 0.5).astype(np.int64)
    hi = np.floor(p.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [width - 1, height - 1])
    keep = (area > 0) & np.all(hi >= lo, axis=1)
    fidx = np.nonzero(keep)[0]
    if len(fidx) == 0:
        empty = np.zeros(0, np.int64)
        return empty, empty, empty, np.zeros((0, 3)), order
    nx = hi[fidx, 0] - lo[fidx, 0] + 1
    ny = hi[fidx, 1] - lo[fidx, 1] + 1
    counts = nx * ny
    face = np.repeat(fidx, counts)
    start = np.cumsum(counts) - counts
    local = np.arange(counts.sum()) - np.repeat(start, counts)
    nxr = np.repeat(nx, counts)
    px = np.repeat(lo[fidx, 0], counts) + local % nxr
    py = np.repeat(lo[fidx, 1], counts) + local // nxr
    cx, cy = px + 0.5, py + 0.5
    q = p[face]
    inside = np.ones(len(face), bool)
    lam = np.zeros((len(face), 3))
    for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
        ax, ay, bx, by = q[:, i, 0], q[:, i, 1], q[:, j, 0], q[:, j, 1]
        e = _edge(ax, ay, bx, by, cx, cy)
        inside &= (e > 0) | ((e == 0) & _top_left(ax, ay, bx, by))
        lam[:, k] = e
    lam = lam[inside] / area[face[inside], None]
    return face[inside], px[inside], py[inside], lam, order


def rasterize(mesh: Mesh, camera: Camera, size, texture=None, light=None) -> RenderBuffers:
    """Z-buffered rasterization of `mesh` under `camera` into a (w, h) image."""
    w, h = int(size[0]), int(size[1])
    face_id = np.full((h, w), BACKGROUND, np.int64)
    depth = np.full((h, w), np.inf)
    bary = np.zeros((h, w, 3))
    uvbuf = np.zeros((h, w, 2))
    tex = None if texture is None else np.asarray(getattr(texture, "color", texture))
    color = None if tex is None else np.zeros((h, w, 3), np.uint8)
    if len(mesh.faces) == 0:
        return RenderBuffers(w, h, face_id != BACKGROUND, depth, face_id, bary, uvbuf, color)

    pc = to_camera(camera, mesh.vertices)
    if np.any(pc[:, 2] <= 0):
        raise RenderError("vertex behind the camera; clipping is not implemented")
    cx, cy = camera.principal_point
    screen = np.stack([cx + camera.focal * pc[:, 0] / pc[:, 2],
                       cy + camera.focal * pc[:, 1] / pc[:, 2]], -1)
    face, px, py, lam, order = coverage_pairs(screen, mesh.faces, w, h)
    if len(face):
        tri = np.take_along_axis(mesh.faces, order, axis=1)[face]  # (N, 3) vertex ids
        wz = lam / pc[tri, 2]
        inv = wz.sum(axis=1)
        z = 1.0 / inv
        # nearest face per pixel; equal depths go to the lower face index
        pix = py * w + px
        sel = np.lexsort((face, z, pix))
        first = np.ones(len(sel), bool)
        first[1:] = pix[sel][1:] != pix[sel][:-1]
        win = sel[first]
        yy, xx = py[win], px[win]
        face_id[yy, xx] = face[win]
        depth[yy, xx] = z[win]
        b = wz[win] / inv[win, None]
        # report barycentrics against the face's original vertex order
        o = order[face[win]]
        bary_orig = np.zeros_like(b)
        np.put_along_axis(bary_orig, o, b, axis=1)
        bary[yy, xx] = bary_orig
        uvbuf[yy, xx] = np.einsum("nk,nkc->nc", b, mesh.uv[tri[win]])
        if tex is not None:
            th, tw = tex.shape[:2]
            uvp = uvbuf[yy, xx]
            tx = np.clip((uvp[:, 0] * tw).astype(np.int64), 0, tw - 1)
            ty = np.clip((uvp[:, 1] * th).astype(np.int64), 0, th - 1)
            texel = tex[ty, tx].astype(float)
            if light is not None:
                shade = _shading(pc, mesh.faces[face[win]], np.asarray(light, float))
                texel = texel * (shade[:, None] + AMBIENT)
            color[yy, xx] = np.clip(np.rint(texel), 0, 255).astype(np.uint8)
    return RenderBuffers(w, h, face_id != BACKGROUND, depth, face_id, bary, uvbuf, color)


def _shading(pc, tris, light):
    a, b, c = pc[tris[:, 0]], pc[tris[:, 1]], pc[tris[:, 2]]
    n = np.cross(b - a, c - a)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    # turn normals towards the camera; culling is off so winding is not trusted
    centre = (a + b + c) / 3
    n *= np.where(np.einsum("ij,ij->i", n, centre) > 0, -1.0, 1.0)[:, None]
    return np.maximum(0.0, n @ light)


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance (pixels) to the nearest foreground pixel."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def bilinear(field: np.ndarray, xy) -> np.ndarray:
    """Sample a 2D field at continuous pixel coordinates (centres at +0.5)."""
    xy = np.asarray(xy, float)
    h, w = field.shape
    x = np.clip(xy[..., 0] - 0.5, 0, w - 1)
    y = np.clip(xy[..., 1] - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, int)
    fx, fy = x - x0, y - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    return ((1 - fx) * (1 - fy) * field[y0, x0] + fx * (1 - fy) * field[y0, x1]
            + (1 - fx) * fy * field[y1, x0] + fx * fy * field[y1, x1])


# --------------------------------------------------------------------------
# PNG io


def write_rgb(path, image) -> None:
    Image.fromarray(np.ascontiguousarray(image, np.uint8)).save(Path(path), format="PNG")


def read_rgb(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"), np.uint8).copy()


def write_mask(path, mask) -> None:
    arr = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr).save(Path(path), format="PNG")


def read_mask(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("L")) >= 128
