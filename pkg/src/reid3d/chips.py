"""The three chip sources compared by the identification study.

whole: the full image, resampled.
crop2d: the hindquarter/back image box spanned by 2D keypoints.
chip3d: the hindquarter/back rectangle of the back-projected UV atlas.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyChipError
from .fit import FitResult
from .geometry import HINDQUARTER_REGION, KEYPOINT_NAMES_16, QuadrupedModel
from .texture import PatternChip, backproject, chip_from_image, crop_region

VARIANTS = ("whole", "crop2d", "chip3d")


def whole_image_chip(image) -> PatternChip:
    return chip_from_image(image)


def hindquarter_box(keypoints, names=KEYPOINT_NAMES_16, region=HINDQUARTER_REGION):
    """Image box over the rear back and hindquarter, from 2D keypoints.

    Horizontally it spans the same fractions of the withers-to-tail-base
    line as the UV region spans of the torso; vertically it runs from the
    higher of hip and tail base down to the lower rear-leg attachment.
    """
    kp = {n: np.asarray(p, float) for n, p in zip(names, np.asarray(keypoints, float))}
    front, rear = kp["withers"], kp["tail_base"]
    xa = front[0] + region[0] * (rear[0] - front[0])
    xb = front[0] + region[2] * (rear[0] - front[0])
    top = min(kp["hip"][1], rear[1])
    legs = [kp[n][1] for n in ("hip_rl", "hip_rr") if n in kp]
    bottom = max(legs) if legs else max(kp["hip"][1], rear[1]) + abs(xb - xa) / 2
    return (min(xa, xb), top, max(xa, xb), bottom)


def crop2d_chip(image, keypoints, names=KEYPOINT_NAMES_16) -> PatternChip:
    return chip_from_image(image, hindquarter_box(keypoints, names))


def chip3d(image, fit: FitResult, model: QuadrupedModel, region=HINDQUARTER_REGION) -> PatternChip:
    tex = backproject(image, fit, model)
    chip = crop_region(tex, region)
    if not chip.mask.any():
        raise EmptyChipError("no visible texels inside the hindquarter region")
    return chip
