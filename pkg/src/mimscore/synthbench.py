"""Procedural image benchmark with controllable detail and graded degradations.

Every image is a random gradient background plus (detail permitting) a
sinusoidal texture and filled shapes; `grade_quality` then applies blur+noise
whose magnitude scales with a severity in [0, 1], and a strictly decreasing
mos_map turns severity into a 1..5 opinion score. The emitted manifest uses
the curation record format with an added "mos" field, so every downstream
stage (curate / pretrain / finetune / eval) runs on it unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .curation import CurationRecord, foreground_coverage, write_manifest
from .errors import ParameterError
from .imageops import ColorSpace, Image, apply_blur, apply_noise, derive_seed, save_image

__all__ = ["SynthSpec", "default_mos_map", "gen_texture", "grade_quality", "build_manifest"]

MAX_SHAPES = 40
BLUR_SIGMA_MAX = 2.5
NOISE_SIGMA_MAX = 0.04


def default_mos_map(severity: float) -> float:
    return 5.0 - 4.0 * severity


@dataclass
class SynthSpec:
    n_images: int = 100
    size: int = 80
    detail_level: float = 0.7
    severity_range: tuple[float, float] = (0.0, 1.0)
    mos_map: Callable[[float], float] = field(default=default_mos_map)
    mos_noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1 or self.size < 8:
            raise ParameterError("need n_images >= 1 and size >= 8")
        if not 0.0 <= self.detail_level <= 1.0:
            raise ParameterError("detail_level must be in [0, 1]")
        lo, hi = self.severity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError("severity_range must be within [0, 1]")
        grid = np.linspace(0.0, 1.0, 11)
        vals = [self.mos_map(s) for s in grid]
        if not all(a > b for a, b in zip(vals, vals[1:])):
            raise ParameterError("mos_map must be strictly decreasing on [0, 1]")


def _coords(size: int):
    return np.meshgrid(np.arange(size), np.arange(size), indexing="ij")


def _draw_shape(px: np.ndarray, fg: np.ndarray, rng: np.random.Generator) -> None:
    size = px.shape[0]
    yy, xx = _coords(size)
    color = rng.uniform(0.0, 1.0, size=3)
    cy, cx = rng.uniform(0, size, size=2)
    if rng.random() < 0.5:
        r = rng.uniform(size * 0.03, size * 0.15)
        sel = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        hh = rng.uniform(size * 0.03, size * 0.15)
        ww = rng.uniform(size * 0.03, size * 0.15)
        sel = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
    px[sel] = color
    fg[sel] = 1


def gen_texture(spec: SynthSpec, index: int) -> tuple[Image, np.ndarray, int]:
    """Deterministic procedural image for (spec.seed, index).

    Returns (image, foreground mask, shape count). detail_level 0 gives a pure
    gradient; higher levels add a sinusoid and strictly more filled shapes.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "tex", index))
    size = spec.size
    yy, xx = _coords(size)

    c0 = rng.uniform(0.0, 1.0, size=3)
    c1 = rng.uniform(0.0, 1.0, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    proj = (np.cos(theta) * xx + np.sin(theta) * yy).astype(np.float64)
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    px = c0[None, None, :] + t[..., None] * (c1 - c0)[None, None, :]

    if spec.detail_level > 0:
        amp = 0.15 * spec.detail_level
        freq = rng.uniform(2.0, size / 4.0)
        phi = rng.uniform(0, 2 * np.pi)
        angle = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) / size + phi)
        px = px + amp * wave[..., None]

    fg = np.zeros((size, size), dtype=np.uint8)
    n_shapes = int(round(spec.detail_level * MAX_SHAPES))
    for _ in range(n_shapes):
        _draw_shape(px, fg, rng)

    return Image(np.clip(px, 0.0, 1.0), ColorSpace.RGB), fg, n_shapes


def grade_quality(
    img: Image,
    severity: float,
    mos_map: Callable[[float], float] = default_mos_map,
    rng: np.random.Generator | None = None,
) -> tuple[Image, float]:
    """Blur+noise scaled by severity in [0, 1]; mos is exactly mos_map(severity).

    severity 0 leaves the image untouched. Observer noise on the label is the
    manifest builder's job, not this function's, so the returned mos is exact.
    """
    if not 0.0 <= severity <= 1.0:
        raise ParameterError("severity must be in [0, 1]")
    if severity == 0.0:
        return Image(img.pixels.copy(), img.space), float(mos_map(0.0))
    if rng is None:
        rng = np.random.default_rng(0)
    out = apply_blur(img, BLUR_SIGMA_MAX * severity)
    out = apply_noise(out, NOISE_SIGMA_MAX * severity, rng)
    return out, float(mos_map(severity))


def build_manifest(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write n_images degraded rasters + masks and the line-delimited manifest.

    Deterministic per spec: rerunning with the same spec and directory yields
    byte-identical files. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    lo, hi = spec.severity_range
    for index in range(spec.n_images):
        img, fg, n_shapes = gen_texture(spec, index)
        rng = np.random.default_rng(derive_seed(spec.seed, "grade", index))
        severity = float(rng.uniform(lo, hi))
        degraded, mos = grade_quality(img, severity, spec.mos_map, rng)
        mos += float(rng.normal(0.0, spec.mos_noise_sigma))

        name = f"synth_{index:05d}"
        img_path = out_dir / f"{name}.png"
        mask_path = out_dir / f"{name}_mask.png"
        save_image(degraded, img_path)
        mask_img = Image(np.repeat(fg[..., None].astype(np.float64), 3, axis=-1))
        save_image(mask_img, mask_path)
        records.append(
            CurationRecord(
                id=name,
                path=str(img_path),
                width=spec.size,
                height=spec.size,
                object_count=n_shapes,
                fg_mask_path=str(mask_path),
                fc=foreground_coverage(fg),
                mos=round(mos, 6),
            )
        )
    manifest = write_manifest(records, out_dir / "manifest.jsonl")
    meta = {
        "n_images": spec.n_images,
        "size": spec.size,
        "detail_level": spec.detail_level,
        "severity_range": list(spec.severity_range),
        "mos_noise_sigma": spec.mos_noise_sigma,
        "seed": spec.seed,
    }
    (out_dir / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest
