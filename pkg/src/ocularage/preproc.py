"""Resizing, iris localization, rubber-sheet normalization, augmentation and standardization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.ndimage import (affine_transform, convolve, gaussian_filter, gaussian_filter1d,
                           map_coordinates)

from .errors import EmptyDataset, SegmentationFailure, ZeroStd

EYE_SIZE = (320, 240)
STRIP_ANGULAR, STRIP_RADIAL = 256, 32

# dataset-specific (mean, std) reported for the real NIR data
NORM_PRESETS = {"eye": (0.5187, 0.2505), "iris": (0.2103, 0.0879)}


def resize(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if (w, h) == (out_w, out_h):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.minimum(np.floor(src).astype(np.intp), max(n_in - 2, 0))
        frac = src - i0
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, frac

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy[:, None]) + bot * fy[:, None]
    return out.astype(np.float32)


# -- boundary localization --------------------------------------------------

@dataclass(frozen=True)
class IrisAnnulus:
    pupil_center: tuple
    pupil_radius: float
    iris_center: tuple
    iris_radius: float
    upper_lid_y: float
    lower_lid_y: float

    def validate(self, width: int, height: int) -> None:
        if not 0 < self.pupil_radius < self.iris_radius:
            raise SegmentationFailure("pupil radius must be positive and below the iris radius")
        for (cx, cy), r in ((self.pupil_center, self.pupil_radius),
                            (self.iris_center, self.iris_radius)):
            if cx - r < 0 or cy - r < 0 or cx + r > width - 1 or cy + r > height - 1:
                raise SegmentationFailure("boundary circle leaves the image")
        if not self.upper_lid_y < self.lower_lid_y:
            raise SegmentationFailure("upper eyelid below lower eyelid")


@dataclass(frozen=True)
class SegmentationConfig:
    pupil_radius_range: tuple = (8, 40)
    iris_radius_max: int = 90
    pupil_threshold: float = 0.04
    iris_threshold: float = 0.04
    min_contrast: float = 0.1
    n_angles: int = 64
    lateral_half_angle: float = 30.0
    smoothing: float = 1.0


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    fx = x - x0
    fy = y - y0
    return ((img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx) * (1 - fy)
            + (img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx) * fy)


def _circle_search(img, centers, radii, angles, sigma):
    """Best (response, cx, cy, r) of the smoothed radial derivative of circular means."""
    cx = centers[:, 0][:, None, None]
    cy = centers[:, 1][:, None, None]
    r = radii[None, :, None]
    xs = np.broadcast_to(cx + r * np.cos(angles), (len(centers), len(radii), len(angles)))
    ys = np.broadcast_to(cy + r * np.sin(angles), xs.shape)
    means = map_coordinates(img, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    means = means.reshape(xs.shape).mean(axis=2)
    deriv = np.gradient(means, radii, axis=1)
    if sigma:
        deriv = gaussian_filter1d(deriv, sigma, axis=1, mode="nearest")
    deriv[:, :1] = -np.inf
    deriv[:, -1:] = -np.inf
    k, j = np.unravel_index(np.argmax(deriv), deriv.shape)
    return float(deriv[k, j]), float(centers[k, 0]), float(centers[k, 1]), float(radii[j])


def _grid(cx, cy, half, step):
    offs = np.arange(-half, half + 1e-9, step)
    gx, gy = np.meshgrid(cx + offs, cy + offs)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _coarse_to_fine(img, seed, half, radii, angles, sigma):
    best = _circle_search(img, _grid(*seed, half, 2.0), radii, angles, sigma)
    fine_r = np.arange(max(radii[0], best[3] - 3), min(radii[-1], best[3] + 3) + 1e-9, 0.5)
    return _circle_search(img, _grid(best[1], best[2], 2.0, 0.5), fine_r, angles, sigma)


def locate_boundaries(image: np.ndarray, config: SegmentationConfig = SegmentationConfig()) -> IrisAnnulus:
    """Find pupil and iris circles plus eyelid rows with an integro-differential search."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if img.max() - img.min() < config.min_contrast:
        raise SegmentationFailure("image has no usable contrast")
    smooth = gaussian_filter(img, 1.0)

    # pupil: seed at the darkest blob, then full-circle search
    dark = gaussian_filter(img, 4.0)
    margin = config.pupil_radius_range[0]
    inner = dark[margin:h - margin, margin:w - margin]
    sy, sx = np.unravel_index(np.argmin(inner), inner.shape)
    seed = (float(sx + margin), float(sy + margin))
    angles = np.linspace(0, 2 * np.pi, config.n_angles, endpoint=False)
    lo, hi = config.pupil_radius_range
    p_resp, pcx, pcy, pr = _coarse_to_fine(smooth, seed, 12.0, np.arange(lo, hi + 1, 1.0),
                                           angles, config.smoothing)
    if p_resp < config.pupil_threshold:
        raise SegmentationFailure(f"weak pupil boundary (response {p_resp:.4f})")

    # iris: lateral arcs only, concentric within +-10 px of the pupil center
    half = math.radians(config.lateral_half_angle)
    side = np.linspace(-half, half, config.n_angles // 2)
    lateral = np.concatenate([side, side + np.pi])
    radii = np.arange(math.ceil(pr * 1.3) + 2, config.iris_radius_max + 1, 1.0)
    if radii.size < 5:
        raise SegmentationFailure("no room for an iris boundary outside the pupil")
    i_resp, icx, icy, ir = _coarse_to_fine(smooth, (pcx, pcy), 10.0, radii, lateral,
                                           config.smoothing)
    if i_resp < config.iris_threshold:
        raise SegmentationFailure(f"weak iris boundary (response {i_resp:.4f})")

    upper, lower = _eyelid_rows(smooth, (pcx, pcy, pr), (icx, icy, ir))
    ann = IrisAnnulus((pcx, pcy), pr, (icx, icy), ir, upper, lower)
    ann.validate(w, h)
    return ann


def _eyelid_rows(img, pupil, iris):
    """Rows of strongest vertical intensity change above and below the pupil, in the iris column band."""
    h, w = img.shape
    pcx, pcy, pr = pupil
    icx, icy, ir = iris
    c0, c1 = int(max(0, round(icx - 0.5 * pr))), int(min(w, round(icx + 0.5 * pr) + 1))
    profile = gaussian_filter1d(img[:, c0:c1].mean(axis=1), 1.5)
    grad = np.gradient(profile)
    top_lo, top_hi = int(max(1, icy - ir - 8)), int(pcy - pr - 4)
    bot_lo, bot_hi = int(pcy + pr + 4), int(min(h - 2, icy + ir + 8))
    upper = float(icy - ir)
    lower = float(icy + ir)
    if top_hi > top_lo:
        upper = float(top_lo + np.argmin(grad[top_lo:top_hi + 1]))
    if bot_hi > bot_lo:
        lower = float(bot_lo + np.argmax(grad[bot_lo:bot_hi + 1]))
    return upper, lower


# -- rubber sheet -----------------------------------------------------------

@dataclass
class NormalizedIris:
    strip: np.ndarray  # (radial 32, angular 256)
    mask: np.ndarray   # same shape, values in {0, 1}


def sample_coordinates(annulus: IrisAnnulus, n_angular=STRIP_ANGULAR, n_radial=STRIP_RADIAL):
    """Image-space (x, y) of every strip cell, each shaped (n_radial, n_angular)."""
    theta = 2 * np.pi * np.arange(n_angular) / n_angular
    rho = ((np.arange(n_radial) + 0.5) / n_radial)[:, None]
    (pcx, pcy), pr = annulus.pupil_center, annulus.pupil_radius
    (icx, icy), ir = annulus.iris_center, annulus.iris_radius
    cos, sin = np.cos(theta)[None, :], np.sin(theta)[None, :]
    x = (1 - rho) * (pcx + pr * cos) + rho * (icx + ir * cos)
    y = (1 - rho) * (pcy + pr * sin) + rho * (icy + ir * sin)
    return x, y


def rubber_sheet(image: np.ndarray, annulus: IrisAnnulus) -> NormalizedIris:
    """Unwrap the annulus into a 32x256 strip (row = radial index) with a validity mask."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x, y = sample_coordinates(annulus)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    mask = inside & (y >= annulus.upper_lid_y) & (y <= annulus.lower_lid_y)
    strip = np.where(inside, _bilinear(img, x, y), 0.0)
    return NormalizedIris(strip.astype(np.float32), mask.astype(np.uint8))


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    affine_prob: float = 1.0
    max_rotation: float = 8.0
    max_translate: float = 0.04
    scale_range: tuple = (0.98, 1.02)
    blur_prob: float = 0.2
    blur_sigma: float = 1.0
    sharpness_prob: float = 0.2
    sharpness_range: tuple = (0.5, 2.0)
    autocontrast_prob: float = 0.2

    def __post_init__(self):
        for name in ("flip_prob", "affine_prob", "blur_prob", "sharpness_prob", "autocontrast_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValueError("scale_range must be (min, max) with 0 < min <= max")
        if self.max_rotation < 0 or self.max_translate < 0 or self.blur_sigma < 0:
            raise ValueError("augmentation magnitudes must be non-negative")

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls(flip_prob=0.0, affine_prob=0.0, blur_prob=0.0, sharpness_prob=0.0,
                   autocontrast_prob=0.0)


_SHARPEN_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def autocontrast(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return img.copy()
    return (img - lo) / (hi - lo)


def augment(image: np.ndarray, policy: AugmentPolicy, seed) -> np.ndarray:
    """Apply flip, affine, blur, sharpness and autocontrast in that order.

    Every gate and parameter is drawn up front from one seeded generator, so
    the random stream does not depend on which transforms fire.
    """
    rng = np.random.default_rng(seed)
    gates = rng.random(5)
    angle = math.radians(rng.uniform(-policy.max_rotation, policy.max_rotation))
    tx, ty = rng.uniform(-policy.max_translate, policy.max_translate, 2)
    scale = rng.uniform(*policy.scale_range)
    sigma = rng.uniform(min(0.1, policy.blur_sigma), policy.blur_sigma)
    sharp = rng.uniform(*policy.sharpness_range)

    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if gates[0] < policy.flip_prob:
        img = img[:, ::-1]
    if gates[1] < policy.affine_prob:
        c, s = math.cos(angle), math.sin(angle)
        # output -> input mapping about the image center, in (row, col) order
        inv = np.array([[c, s], [-s, c]]) / scale
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        shift = np.array([ty * h, tx * w])
        offset = center - inv @ (center + shift)
        img = affine_transform(img, inv, offset=offset, order=1, mode="nearest")
    if gates[2] < policy.blur_prob and policy.blur_sigma > 0:
        img = gaussian_filter(img, sigma, mode="nearest")
    if gates[3] < policy.sharpness_prob:
        smooth = convolve(img, _SHARPEN_KERNEL, mode="nearest")
        img = smooth + sharp * (img - smooth)
    if gates[4] < policy.autocontrast_prob:
        img = autocontrast(img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_strip(strip: np.ndarray, policy: AugmentPolicy, seed) -> np.ndarray:
    """Iris strips only receive the Gaussian blur from the policy."""
    strip_policy = AugmentPolicy(flip_prob=0.0, affine_prob=0.0, blur_prob=policy.blur_prob,
                                 blur_sigma=policy.blur_sigma, sharpness_prob=0.0,
                                 autocontrast_prob=0.0)
    return augment(strip, strip_policy, seed)


# -- standardization --------------------------------------------------------

def compute_dataset_stats(images: Iterable[np.ndarray]) -> tuple[float, float]:
    """Global pixel mean and population std, merged image by image in float64."""
    n, mean, m2 = 0, 0.0, 0.0
    for img in images:
        a = np.asarray(img, dtype=np.float64)
        k = a.size
        if k == 0:
            continue
        mu = a.mean()
        ss = float(((a - mu) ** 2).sum())
        delta = mu - mean
        tot = n + k
        mean += delta * k / tot
        m2 += ss + delta * delta * n * k / tot
        n = tot
    if n == 0:
        raise EmptyDataset("no pixels to compute statistics from")
    return float(mean), float(math.sqrt(m2 / n))


def standardize(x: np.ndarray, mean: float, std: float, mask: np.ndarray | None = None) -> np.ndarray:
    """``(x - mean) / std`` as a channel-first tensor; a mask is appended unscaled."""
    if not std > 0:
        raise ZeroStd(f"standard deviation must be positive, got {std}")
    x = np.asarray(x)
    dtype = np.result_type(x.dtype, np.float32)
    x = x.astype(dtype, copy=False)
    out = (x - dtype.type(mean)) / dtype.type(std)
    if out.ndim == 2:
        out = out[None]
    if mask is not None:
        m = np.asarray(mask, dtype=dtype)
        out = np.concatenate([out, m[None] if m.ndim == 2 else m], axis=0)
    return out


def unstandardize(t: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Inverse of :func:`standardize` on the intensity channel."""
    return np.asarray(t, dtype=np.float64)[0] * std + mean
