"""Seeded, composable image degradation engine.

All operations consume and produce `Image` values (float rasters in [0, 1])
and are pure given their inputs and an explicit numpy Generator, so they are
safe to call concurrently. `compose` realizes a whole `DegradationPlan`:
single / sequential / advanced chaining followed by a mandatory random crop.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, ParameterError

__all__ = [
    "ColorSpace",
    "Image",
    "DegradationStep",
    "DegradationPlan",
    "SpectrumProfile",
    "DEGRADATION_KINDS",
    "default_steps",
    "derive_seed",
    "apply_resize",
    "apply_blur",
    "apply_sharpen",
    "apply_noise",
    "apply_color_jitter",
    "apply_cst",
    "random_crop",
    "compose",
    "radial_spectrum",
    "rgb_to_lab",
    "lab_to_rgb",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "rgb_to_gray",
    "load_image",
    "save_image",
]


class ColorSpace(str, Enum):
    RGB = "RGB"
    LAB = "LAB"
    HSV = "HSV"
    GRAY = "GRAY"


@dataclass
class Image:
    """H×W×3 float raster with every channel normalized into [0, 1].

    GRAY content is stored replicated across the 3 channels so downstream
    consumers always see one tensor shape.
    """

    pixels: np.ndarray
    space: ColorSpace = ColorSpace.RGB

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ParameterError(f"expected H×W×3 pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ParameterError("image must be at least 1×1")
        if not np.isfinite(px).all():
            raise ParameterError("pixels must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ParameterError("pixels must lie in [0, 1]")
        self.pixels = px
        self.space = ColorSpace(self.space)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labeled parts (not Python's salted hash)."""
    h = hashlib.blake2b("\x1f".join(repr(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big") >> 1


# ---------------------------------------------------------------------------
# color space conversions (arrays in, arrays out; unnormalized native ranges)
# ---------------------------------------------------------------------------

# sRGB <-> XYZ (D65) matrices
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _srgb_to_linear(s):
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(l):
    l = np.clip(l, 0.0, None)
    return np.where(l <= 0.0031308, l * 12.92, 1.055 * l ** (1 / 2.4) - 0.055)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] -> CIE-LAB (L in [0,100], a/b roughly [-128, 127])."""
    xyz = _srgb_to_linear(np.asarray(rgb, dtype=np.float64)) @ _RGB2XYZ.T
    t = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    delta = 6.0 / 29.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > delta, f**3, 3 * delta**2 * (f - 4.0 / 29.0))
    rgb = _linear_to_srgb((t * _WHITE_D65) @ _XYZ2RGB.T)
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] -> HSV with H in degrees [0, 360), S and V in [0,1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        c == 0,
        0.0,
        np.where(
            v == r,
            ((g - b) / safe_c) % 6.0,
            np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
        ),
    )
    return np.stack([60.0 * h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h = (hsv[..., 0] % 360.0) / 60.0
    s, v = hsv[..., 1], hsv[..., 2]
    c = v * s
    x = c * (1.0 - np.abs(h % 2.0 - 1.0))
    m = v - c
    zeros = np.zeros_like(c)
    sector = np.floor(h).astype(int) % 6
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    return np.clip(np.stack([r + m, g + m, b + m], axis=-1), 0.0, 1.0)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luminance (BT.601 weights), same shape minus the channel axis."""
    return np.asarray(rgb, dtype=np.float64) @ GRAY_WEIGHTS


# ---------------------------------------------------------------------------
# degradation operations
# ---------------------------------------------------------------------------


def _require_rgb(img: Image, op: str) -> None:
    if img.space is not ColorSpace.RGB:
        raise ParameterError(f"{op} requires an RGB image, got {img.space.value}")


def apply_resize(img: Image, scale: float, rng=None) -> Image:
    """Bilinear rescale by `scale` in [0.25, 1.0]; output dims = round(scale·dims)."""
    _require_rgb(img, "apply_resize")
    if not 0.25 <= scale <= 1.0:
        raise ParameterError(f"resize scale {scale} outside [0.25, 1.0]")
    if scale == 1.0:
        return Image(img.pixels.copy(), img.space)
    new_h = max(1, int(round(scale * img.height)))
    new_w = max(1, int(round(scale * img.width)))
    out = cv2.resize(img.pixels, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    return Image(np.clip(out, 0.0, 1.0), img.space)


def apply_blur(img: Image, sigma: float, rng=None) -> Image:
    """Gaussian blur with reflect padding, sigma in (0, 5]."""
    if not 0.0 < sigma <= 5.0:
        raise ParameterError(f"blur sigma {sigma} outside (0, 5]")
    out = gaussian_filter(img.pixels, sigma=(sigma, sigma, 0.0), mode="reflect")
    return Image(np.clip(out, 0.0, 1.0), img.space)


def apply_sharpen(img: Image, amount: float, sigma: float = 1.0, rng=None) -> Image:
    """Unsharp mask: clip(img + amount·(img − blur(img, sigma)), 0, 1)."""
    if not 0.0 < amount <= 2.0:
        raise ParameterError(f"sharpen amount {amount} outside (0, 2]")
    blurred = gaussian_filter(img.pixels, sigma=(sigma, sigma, 0.0), mode="reflect")
    out = img.pixels + amount * (img.pixels - blurred)
    return Image(np.clip(out, 0.0, 1.0), img.space)


def apply_noise(img: Image, sigma: float, rng: np.random.Generator | None = None) -> Image:
    """Additive iid Gaussian noise, sigma in [0, 0.2], clipped back to [0, 1]."""
    if not 0.0 <= sigma <= 0.2:
        raise ParameterError(f"noise sigma {sigma} outside [0, 0.2]")
    if sigma == 0.0:
        return Image(img.pixels.copy(), img.space)
    if rng is None:
        raise ParameterError("apply_noise with sigma > 0 needs an rng")
    out = img.pixels + rng.normal(0.0, sigma, size=img.pixels.shape)
    return Image(np.clip(out, 0.0, 1.0), img.space)


def _jitter_brightness(px, f):
    return np.clip(px * f, 0.0, 1.0)


def _jitter_contrast(px, f):
    mean = rgb_to_gray(px).mean()
    return np.clip(mean + f * (px - mean), 0.0, 1.0)


def _jitter_saturation(px, f):
    gray = rgb_to_gray(px)[..., None]
    return np.clip(gray + f * (px - gray), 0.0, 1.0)


def _jitter_hue(px, shift_turns):
    hsv = rgb_to_hsv(px)
    hsv[..., 0] = (hsv[..., 0] + shift_turns * 360.0) % 360.0
    return hsv_to_rgb(hsv)


def apply_color_jitter(
    img: Image,
    brightness: tuple[float, float] = (1.0, 1.0),
    contrast: tuple[float, float] = (1.0, 1.0),
    saturation: tuple[float, float] = (1.0, 1.0),
    hue: tuple[float, float] = (0.0, 0.0),
    rng: np.random.Generator | None = None,
) -> Image:
    """Brightness/contrast/saturation/hue jitter in randomized order.

    Factors are drawn uniformly from the given (lo, hi) ranges; hue is a shift
    in turns. Identity factors short-circuit so degenerate ranges reproduce
    the input exactly.
    """
    _require_rgb(img, "apply_color_jitter")
    if rng is None:
        rng = np.random.default_rng(0)
    factors = {
        "brightness": rng.uniform(*brightness),
        "contrast": rng.uniform(*contrast),
        "saturation": rng.uniform(*saturation),
        "hue": rng.uniform(*hue),
    }
    ops = {
        "brightness": _jitter_brightness,
        "contrast": _jitter_contrast,
        "saturation": _jitter_saturation,
        "hue": _jitter_hue,
    }
    identity = {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0, "hue": 0.0}
    order = rng.permutation(sorted(ops))
    px = img.pixels
    for name in order:
        if factors[name] != identity[name]:
            px = ops[name](px, factors[name])
    return Image(px.copy() if px is img.pixels else px, img.space)


def apply_cst(img: Image, target: ColorSpace | str) -> Image:
    """Convert RGB to the target space, each channel affinely normalized to [0, 1].

    LAB: (L/100, (a+128)/255, (b+128)/255). HSV: (H/360, S, V). GRAY is the
    BT.601 luminance replicated to 3 channels. RGB is the identity.
    """
    _require_rgb(img, "apply_cst")
    target = ColorSpace(target)
    if target is ColorSpace.RGB:
        return Image(img.pixels.copy(), ColorSpace.RGB)
    if target is ColorSpace.LAB:
        lab = rgb_to_lab(img.pixels)
        out = np.stack(
            [lab[..., 0] / 100.0, (lab[..., 1] + 128.0) / 255.0, (lab[..., 2] + 128.0) / 255.0],
            axis=-1,
        )
    elif target is ColorSpace.HSV:
        hsv = rgb_to_hsv(img.pixels)
        out = np.stack([hsv[..., 0] / 360.0, hsv[..., 1], hsv[..., 2]], axis=-1)
    else:  # GRAY
        out = np.repeat(rgb_to_gray(img.pixels)[..., None], 3, axis=-1)
    return Image(np.clip(out, 0.0, 1.0), target)


def _reflect_pad_to(px: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    pad_h = max(0, min_h - px.shape[0])
    pad_w = max(0, min_w - px.shape[1])
    if pad_h == 0 and pad_w == 0:
        return px
    return np.pad(px, ((0, pad_h), (0, pad_w), (0, 0)), mode="symmetric")


def random_crop(img: Image, size: int, rng: np.random.Generator) -> Image:
    """size×size window at a uniform offset; undersized inputs are reflect-padded."""
    if size <= 0:
        raise ParameterError(f"crop size {size} must be positive")
    px = _reflect_pad_to(img.pixels, size, size)
    top = int(rng.integers(0, px.shape[0] - size + 1))
    left = int(rng.integers(0, px.shape[1] - size + 1))
    return Image(px[top : top + size, left : left + size].copy(), img.space)


# ---------------------------------------------------------------------------
# plans and composition
# ---------------------------------------------------------------------------

# kinds whose op only accepts RGB input; in advanced (shuffled) composition
# they are skipped once a CST has left RGB space
_RGB_ONLY_KINDS = {"resize", "color_jitter", "cst"}

DEGRADATION_KINDS = ("resize", "blur", "sharpen", "gaussian_noise", "color_jitter", "cst")

_OPS = {
    "resize": apply_resize,
    "blur": apply_blur,
    "sharpen": apply_sharpen,
    "gaussian_noise": apply_noise,
    "color_jitter": apply_color_jitter,
    "cst": apply_cst,
}


@dataclass
class DegradationStep:
    """One degradation with its parameter space.

    Param values may be a (lo, hi) tuple (uniform draw), a list (uniform
    choice) or a scalar/string (fixed).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ParameterError(f"unknown degradation kind {self.kind!r}")

    def sample_params(self, rng: np.random.Generator) -> dict:
        out = {}
        for name, value in self.params.items():
            if isinstance(value, tuple):
                out[name] = float(rng.uniform(value[0], value[1]))
            elif isinstance(value, list):
                out[name] = value[int(rng.integers(len(value)))]
            else:
                out[name] = value
        return out


def default_steps(kinds=DEGRADATION_KINDS) -> list[DegradationStep]:
    """Steps with the default parameter ranges (mild SSL-augmentation magnitudes)."""
    defaults = {
        "resize": {"scale": (0.5, 1.0)},
        "blur": {"sigma": (0.1, 2.0)},
        "sharpen": {"amount": (0.2, 1.0), "sigma": 1.0},
        "gaussian_noise": {"sigma": (0.01, 0.1)},
        "color_jitter": {
            "brightness": (0.8, 1.2),
            "contrast": (0.8, 1.2),
            "saturation": (0.8, 1.2),
            "hue": (-0.05, 0.05),
        },
        "cst": {"target": ["RGB", "LAB", "HSV", "GRAY"]},
    }
    return [DegradationStep(k, dict(defaults[k])) for k in kinds]


@dataclass
class DegradationPlan:
    """Seeded recipe: which degradations apply, how they chain, final crop size.

    composition: "single" (exactly one step), "sequential" (listed order) or
    "advanced" (shuffle, skip each step with skip_prob, repeat the chain a
    random number of times up to max_order). Cropping is always last.
    """

    steps: list[DegradationStep]
    crop_size: int
    composition: str = "sequential"
    skip_prob: float = 0.3
    max_order: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.composition not in ("single", "sequential", "advanced"):
            raise ParameterError(f"unknown composition {self.composition!r}")
        if self.composition == "single" and len(self.steps) != 1:
            raise ParameterError("single composition takes exactly one step")
        if not 0.0 <= self.skip_prob <= 1.0:
            raise ParameterError("skip_prob must be in [0, 1]")
        if self.max_order < 1:
            raise ParameterError("max_order must be >= 1")
        if self.crop_size <= 0:
            raise ParameterError("crop_size must be positive")

    def with_seed(self, seed: int) -> "DegradationPlan":
        return replace(self, seed=seed)


def _apply_step(img: Image, step: DegradationStep, rng, skip_unsatisfied: bool) -> Image:
    if step.kind in _RGB_ONLY_KINDS and img.space is not ColorSpace.RGB:
        if skip_unsatisfied:
            return img
        raise ParameterError(
            f"step {step.kind!r} needs RGB input but image is {img.space.value}"
        )
    kwargs = step.sample_params(rng)
    if step.kind in ("gaussian_noise", "color_jitter"):
        kwargs["rng"] = rng
    return _OPS[step.kind](img, **kwargs)


def compose(img: Image, plan: DegradationPlan) -> Image:
    """Run the plan's steps per its composition mode, then random-crop.

    All randomness derives from plan.seed; the crop offset comes from its own
    derived stream so it does not depend on how many draws the steps used.
    """
    rng = np.random.default_rng(derive_seed(plan.seed, "steps"))
    out = img
    if plan.composition in ("single", "sequential"):
        for step in plan.steps:
            out = _apply_step(out, step, rng, skip_unsatisfied=False)
    else:
        order_count = int(rng.integers(1, plan.max_order + 1))
        for _ in range(order_count):
            for idx in rng.permutation(len(plan.steps)):
                if rng.random() >= plan.skip_prob:
                    out = _apply_step(out, plan.steps[idx], rng, skip_unsatisfied=True)
    crop_rng = np.random.default_rng(derive_seed(plan.seed, "crop"))
    return random_crop(out, plan.crop_size, crop_rng)


# ---------------------------------------------------------------------------
# spectral profiling
# ---------------------------------------------------------------------------


@dataclass
class SpectrumProfile:
    """Radially averaged log-magnitude spectrum: (normalized frequency, log10 mean |F|)."""

    freqs: np.ndarray
    log_mag: np.ndarray

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.float64)
        self.log_mag = np.asarray(self.log_mag, dtype=np.float64)
        if len(self.freqs) < 8:
            raise ParameterError("spectrum profile needs at least 8 bins")
        if not np.isfinite(self.log_mag).all():
            raise ParameterError("spectrum magnitudes must be finite")

    @property
    def bins(self) -> list[tuple[float, float]]:
        return list(zip(self.freqs.tolist(), self.log_mag.tolist()))

    def band_mean(self, lo: float, hi: float) -> float:
        """Mean log magnitude over bins with normalized frequency in [lo, hi)."""
        sel = (self.freqs >= lo) & (self.freqs < hi)
        return float(self.log_mag[sel].mean())


def radial_spectrum(img: Image, n_bins: int | None = None) -> SpectrumProfile:
    """FFT magnitude of the channel mean, averaged over radial annuli, log10-scaled.

    Frequencies are in cycles/pixel, binned linearly from DC to Nyquist (0.5).
    """
    if img.height != img.width:
        raise ParameterError("radial_spectrum requires a square image")
    size = img.height
    if n_bins is None:
        n_bins = max(8, size // 8)
    if n_bins < 8:
        raise ParameterError("n_bins must be >= 8")
    gray = img.pixels.mean(axis=2)
    mag = np.abs(np.fft.fftshift(np.fft.fft2(gray)))
    cy, cx = size // 2, size // 2
    yy, xx = np.indices(mag.shape)
    radius = np.hypot(yy - cy, xx - cx)
    r_max = size / 2.0
    bin_idx = np.minimum((radius / r_max * n_bins).astype(int), n_bins - 1)
    log_mag = np.empty(n_bins)
    for b in range(n_bins):
        sel = bin_idx == b
        log_mag[b] = np.log10(mag[sel].mean() + 1e-12) if sel.any() else -12.0
    freqs = (np.arange(n_bins) + 0.5) * (0.5 / n_bins)
    return SpectrumProfile(freqs, log_mag)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> Image:
    """Read an image file as RGB floats in [0, 1] (3 channels regardless of source)."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise DataError(f"cannot read image {path}")
    return Image(raw[:, :, ::-1].astype(np.float64) / 255.0, ColorSpace.RGB)


def save_image(img: Image, path: str | Path) -> None:
    """Write as 8-bit PNG/etc. via the path suffix (lossless for .png)."""
    px = np.clip(np.round(img.pixels * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), px[:, :, ::-1]):
        raise DataError(f"cannot write image {path}")
