"""Back-projection of observed pixels into the UV atlas, and pattern chips.

Atlas texel (row, col) covers v in [row/R, (row+1)/R) and u in
[col/R, (col+1)/R); the same nearest-texel convention is used by the
renderer's texture lookup.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BoundsError, EmptyChipError, RenderError
from .geometry import HINDQUARTER_REGION, QuadrupedModel, posed_mesh
from .render import rasterize, read_mask, read_rgb, write_mask, write_rgb

log = logging.getLogger(__name__)

RESOLUTION = 256


@dataclass(frozen=True)
class TextureMap:
    color: np.ndarray  # (R, R, 3) float, 0..255, zero where invisible
    visibility: np.ndarray  # (R, R) bool
    sample_count: np.ndarray  # (R, R) int
    warning: str | None = None

    @property
    def resolution(self) -> int:
        return self.color.shape[0]

    @classmethod
    def full(cls, color) -> "TextureMap":
        color = np.asarray(color, float)
        r = color.shape[0]
        return cls(color, np.ones((r, r), bool), np.ones((r, r), np.int64))


@dataclass(frozen=True)
class PatternChip:
    pixels: np.ndarray  # (H, W, C)
    mask: np.ndarray  # (H, W) bool
    source_region: tuple[float, float, float, float] | None = None

    @property
    def shape(self):
        return self.mask.shape


def splat(colors: np.ndarray, uv: np.ndarray, resolution: int = RESOLUTION):
    """Box-accumulate pixel colours into their nearest texels.

    Contributions are reduced in a fixed (texel, uv, colour) order, so any
    permutation of the input yields identical sums.
    """
    colors = np.asarray(colors, float).reshape(-1, 3)
    uv = np.asarray(uv, float).reshape(-1, 2)
    r = resolution
    tx = np.clip((uv[:, 0] * r).astype(np.int64), 0, r - 1)
    ty = np.clip((uv[:, 1] * r).astype(np.int64), 0, r - 1)
    tex = ty * r + tx
    order = np.lexsort((colors[:, 2], colors[:, 1], colors[:, 0], uv[:, 1], uv[:, 0], tex))
    tex, colors = tex[order], colors[order]
    count = np.bincount(tex, minlength=r * r)
    sums = np.stack([np.bincount(tex, colors[:, c], minlength=r * r) for c in range(3)], -1)
    vis = count > 0
    color = np.zeros((r * r, 3))
    color[vis] = sums[vis] / count[vis, None]
    return TextureMap(color.reshape(r, r, 3), vis.reshape(r, r), count.reshape(r, r))


def backproject(image, fit, model: QuadrupedModel, resolution: int = RESOLUTION) -> TextureMap:
    """Texture atlas of everything the fitted model sees in `image`."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    empty = TextureMap(np.zeros((resolution, resolution, 3)), np.zeros((resolution, resolution), bool),
                       np.zeros((resolution, resolution), np.int64))
    mesh = posed_mesh(model, fit.pose, fit.shape)
    try:
        buf = rasterize(mesh, fit.camera, (w, h))
    except RenderError as exc:
        log.warning("back-projection skipped: %s", exc)
        return TextureMap(empty.color, empty.visibility, empty.sample_count, f"render failed: {exc}")
    if not buf.silhouette.any():
        log.warning("fitted model is off-screen")
        return TextureMap(empty.color, empty.visibility, empty.sample_count, "model off-screen")
    ys, xs = np.nonzero(buf.silhouette)
    return splat(image[ys, xs, :3], buf.uv[ys, xs], resolution)


def crop_region(texture: TextureMap, region=HINDQUARTER_REGION) -> PatternChip:
    """Copy the texels of a UV rectangle (u1, v1, u2, v2); no normalisation."""
    u1, v1, u2, v2 = (float(x) for x in region)
    if not (0.0 <= u1 < u2 <= 1.0 and 0.0 <= v1 < v2 <= 1.0):
        raise BoundsError(f"region {region} is not a rectangle inside [0, 1]^2")
    r = texture.resolution
    nw, nh = int(round((u2 - u1) * r)), int(round((v2 - v1) * r))
    c0, r0 = min(int(round(u1 * r)), r - nw), min(int(round(v1 * r)), r - nh)
    sl = (slice(r0, r0 + nh), slice(c0, c0 + nw))
    return PatternChip(texture.color[sl].copy(), texture.visibility[sl].copy(), (u1, v1, u2, v2))


def chip_from_image(image, box=None) -> PatternChip:
    """Pixel crop (x1, y1, x2, y2) of an image as a fully valid chip."""
    image = np.asarray(image, float)
    h, w = image.shape[:2]
    if box is None:
        box = (0, 0, w, h)
    x1, y1, x2, y2 = box
    x1, y1 = max(0, int(np.floor(x1))), max(0, int(np.floor(y1)))
    x2, y2 = min(w, int(np.ceil(x2))), min(h, int(np.ceil(y2)))
    if x2 <= x1 or y2 <= y1:
        raise EmptyChipError(f"crop box {box} is empty inside the image")
    px = image[y1:y2, x1:x2, :3]
    return PatternChip(px.copy(), np.ones(px.shape[:2], bool))


def normalize_chip(chip: PatternChip) -> PatternChip:
    """Per-channel standardisation over valid pixels; invalid pixels become 0."""
    mask = np.asarray(chip.mask, bool)
    if not mask.any():
        raise EmptyChipError("chip has no valid pixels")
    px = np.asarray(chip.pixels, float)
    vals = px[mask]
    mean = vals.mean(axis=0)
    std = vals.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    out = np.where(std > 0, (px - mean) / scale, 0.0)
    out[~mask] = 0.0
    return PatternChip(out, mask.copy(), chip.source_region)


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) fractional-overlap matrix of a box resampler."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    src = np.arange(n_in)[None, :]
    return np.clip(np.minimum(hi, src + 1) - np.maximum(lo, src), 0.0, None)


def resample_chip(chip: PatternChip, size: int) -> PatternChip:
    """Masked area-average resampling to size x size; empty cells stay invalid."""
    h, w = chip.mask.shape
    ay, ax = _box_weights(h, size), _box_weights(w, size)
    m = chip.mask.astype(float)
    wsum = ay @ m @ ax.T
    px = np.asarray(chip.pixels, float) * m[..., None]
    rows = np.tensordot(ay, px, axes=(1, 0))  # (size, w, C)
    num = np.einsum("jw,iwc->ijc", ax, rows, optimize=True)
    valid = wsum > 1e-12
    out = np.zeros((size, size, px.shape[-1]))
    out[valid] = num[valid] / wsum[valid, None]
    return PatternChip(out, valid, chip.source_region)


def chip_tensor(chip: PatternChip, size: int = 64) -> np.ndarray:
    """(size, size, C+1) network input: resampled pixels plus the mask channel."""
    rs = resample_chip(chip, size)
    return np.concatenate([rs.pixels, rs.mask[..., None].astype(float)], axis=-1)


def prepare_chip(chip: PatternChip, size: int = 64) -> np.ndarray:
    return chip_tensor(normalize_chip(chip), size)


# --------------------------------------------------------------------------
# persistence


def save_texture(texture: TextureMap, stem, region=HINDQUARTER_REGION) -> None:
    stem = Path(stem)
    write_rgb(stem.with_name(stem.name + ".color.png"), np.clip(np.rint(texture.color), 0, 255))
    write_mask(stem.with_name(stem.name + ".visibility.png"), texture.visibility)
    side = {"resolution": texture.resolution, "region": list(region), "warning": texture.warning}
    stem.with_name(stem.name + ".json").write_text(json.dumps(side, sort_keys=True) + "\n")


def load_texture(stem) -> TextureMap:
    stem = Path(stem)
    color = read_rgb(stem.with_name(stem.name + ".color.png")).astype(float)
    vis = read_mask(stem.with_name(stem.name + ".visibility.png"))
    side = json.loads(stem.with_name(stem.name + ".json").read_text())
    color[~vis] = 0.0
    return TextureMap(color, vis, vis.astype(np.int64), side.get("warning"))


def save_chip(chip: PatternChip, stem) -> None:
    """Raw (pre-normalisation) chip as PNG plus mask PNG."""
    stem = Path(stem)
    write_rgb(stem.with_name(stem.name + ".png"), np.clip(np.rint(chip.pixels), 0, 255))
    write_mask(stem.with_name(stem.name + ".mask.png"), chip.mask)


def load_chip(stem) -> PatternChip:
    stem = Path(stem)
    px = read_rgb(stem.with_name(stem.name + ".png")).astype(float)
    return PatternChip(px, read_mask(stem.with_name(stem.name + ".mask.png")))
