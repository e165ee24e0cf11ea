"""Pretraining and finetuning loops with the evaluation-time testing protocols.

Per-item randomness (degradation, mask, crop) is derived from
hash(run.seed, item_id, epoch), so data order or parallel loading can never
change the realized augmentations; the optimizer step itself is sequential.
Both loops emit line-delimited JSON logs (step, epoch, loss, lr) and are
bit-reproducible for a fixed seed on one device.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn

from .curation import CurationRecord, read_manifest
from .errors import DataError, ParameterError
from .imageops import DegradationPlan, Image, compose, derive_seed, load_image
from .masking import patchify, sample_mask
from .metrics import ScoreTable
from .model import (
    DecoderConfig,
    EncoderConfig,
    FusionConfig,
    MaskedAutoencoder,
    build_autoencoder,
    inflate_temporal,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "PretrainRun",
    "FinetuneRun",
    "ScoreRegressor",
    "cosine_lr",
    "pretrain",
    "finetune",
    "five_crop_predict",
    "sample_video_clips",
    "forward_video",
    "score_records",
]

log = logging.getLogger(__name__)

FINETUNE_TASKS = ("image_quality", "aesthetics", "video_quality")


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup: int = 0) -> float:
    """Linear warmup (optional) then cosine decay from base_lr to 0."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - 1 - warmup)
    t = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


@dataclass
class PretrainRun:
    manifest: str
    out_dir: str
    degradation: DegradationPlan
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mask_ratio: float = 0.75
    epochs: int = 10
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup: int = 0
    checkpoint_every: int = 0  # epochs between intermediate checkpoints; 0 = end only
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ParameterError("mask_ratio must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.degradation.crop_size != self.encoder.input_size:
            raise ParameterError(
                "degradation crop_size must equal the encoder input_size"
            )


@dataclass
class FinetuneRun:
    task: str = "image_quality"
    resize_short: int = 340
    crop: int = 224
    epochs: int = 200
    batch_size: int = 16
    base_lr: float = 2e-5
    weight_decay: float = 0.01
    warmup: int = 0
    head_hidden: int | None = None
    freeze_encoder: bool = False
    clips: int = 4
    clip_len: int = 32
    t_patch: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.task not in FINETUNE_TASKS:
            raise ParameterError(f"unknown finetune task {self.task!r}")
        if self.crop < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("bad finetune run sizes")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "FinetuneRun":
        """Task presets: epochs 200/60/30, lr 2e-5/2e-5/1e-3, wd 0.01/0.01/0.05."""
        presets = {
            "image_quality": dict(epochs=200, base_lr=2e-5, weight_decay=0.01),
            "aesthetics": dict(epochs=60, base_lr=2e-5, weight_decay=0.01),
            "video_quality": dict(epochs=30, base_lr=1e-3, weight_decay=0.05),
        }
        if task not in presets:
            raise ParameterError(f"unknown finetune task {task!r}")
        return cls(task=task, **{**presets[task], **overrides})


class ScoreRegressor(nn.Module):
    """Backbone features -> scalar score through two affine maps with a GELU."""

    def __init__(self, backbone: MaskedAutoencoder, hidden: int | None = None):
        super().__init__()
        d3 = backbone.enc_cfg.stage_dims[2]
        self.backbone = backbone
        self.head = nn.Sequential(
            nn.Linear(d3, hidden or d3), nn.GELU(), nn.Linear(hidden or d3, 1)
        )

    def forward(self, pixels) -> torch.Tensor:
        return self.head(self.backbone.forward_finetune(pixels)).squeeze(-1)

    def predict(self, pixels) -> float:
        with torch.no_grad():
            return float(self.forward(pixels))


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def _write_log(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _resize_short(px: np.ndarray, target: int) -> np.ndarray:
    h, w = px.shape[:2]
    scale = target / min(h, w)
    new_w, new_h = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    return np.clip(cv2.resize(px, (new_w, new_h), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)


def _crop_at(px: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return px[top : top + size, left : left + size]


def _pad_to(px: np.ndarray, size: int) -> np.ndarray:
    pad_h = max(0, size - px.shape[0])
    pad_w = max(0, size - px.shape[1])
    if pad_h or pad_w:
        px = np.pad(px, ((0, pad_h), (0, pad_w), (0, 0)), mode="symmetric")
    return px


def _finetune_input(rec: CurationRecord, run: FinetuneRun, rng: np.random.Generator) -> np.ndarray:
    px = load_image(rec.path).pixels
    if run.task == "aesthetics":
        # direct resize to the input size, aspect ratio not preserved
        return np.clip(
            cv2.resize(px, (run.crop, run.crop), interpolation=cv2.INTER_LINEAR), 0.0, 1.0
        )
    px = _pad_to(_resize_short(px, run.resize_short), run.crop)
    top = int(rng.integers(0, px.shape[0] - run.crop + 1))
    left = int(rng.integers(0, px.shape[1] - run.crop + 1))
    return _crop_at(px, top, left, run.crop)


def _load_video(path: str) -> np.ndarray:
    """Frame stack (T, H, W, 3) in [0, 1] from an .npy/.npz file."""
    if path.endswith(".npz"):
        with np.load(path) as data:
            frames = data[data.files[0]]
    else:
        frames = np.load(path)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise DataError(f"video {path} must be (T, H, W, 3)")
    return np.clip(frames, 0.0, 1.0)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(run: PretrainRun) -> Path:
    """Degradation-fed masked-reconstruction pretraining; returns checkpoint dir.

    Per step: load -> degrade+crop -> sample coarse-grid mask -> reconstruction
    loss, averaged over the batch, one AdamW update. Unreadable images are
    skipped with a warning; a manifest with no readable image is an error.
    """
    records = read_manifest(run.manifest)
    if not records:
        raise DataError(f"empty manifest {run.manifest}")
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_autoencoder(run.encoder, run.fusion, run.decoder, seed=run.seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=run.base_lr, weight_decay=run.weight_decay, betas=(0.9, 0.95)
    )
    grid = run.encoder.coarse_grid
    steps_per_epoch = math.ceil(len(records) / run.batch_size)
    total_steps = max(1, run.epochs * steps_per_epoch)

    log_records: list[dict] = []
    step = 0
    ever_loaded = False
    for epoch in range(run.epochs):
        order = np.random.default_rng(derive_seed(run.seed, "order", epoch)).permutation(len(records))
        for start in range(0, len(order), run.batch_size):
            batch = [records[i] for i in order[start : start + run.batch_size]]
            losses = []
            for rec in batch:
                try:
                    img = load_image(rec.path)
                except DataError as exc:
                    log.warning("skipping %s: %s", rec.id, exc)
                    continue
                ever_loaded = True
                plan = run.degradation.with_seed(derive_seed(run.seed, "degrade", rec.id, epoch))
                degraded = compose(img, plan)
                mask = sample_mask(
                    grid, grid, run.mask_ratio,
                    seed=derive_seed(run.seed, "mask", rec.id, epoch),
                    patch=run.encoder.coarse_patch,
                )
                losses.append(model.forward_pretrain(degraded, mask))
            if not losses:
                continue
            lr = cosine_lr(step, total_steps, run.base_lr, run.warmup)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = torch.stack(losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            log_records.append({"step": step, "epoch": epoch, "loss": float(loss), "lr": lr})
            step += 1
        if run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0 and epoch + 1 < run.epochs:
            save_checkpoint(model, out_dir / f"epoch{epoch + 1:04d}", step=step)
    if run.epochs > 0 and not ever_loaded:
        raise DataError("no readable image in the manifest")

    _write_log(out_dir / "train_log.jsonl", log_records)
    save_checkpoint(model, out_dir, step=step, extra={"epochs": run.epochs})
    return out_dir


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------


def finetune(
    ckpt, run: FinetuneRun, records: list[CurationRecord]
) -> tuple[ScoreRegressor, list[dict]]:
    """Regress the encoder's pooled features onto MOS; returns last-epoch weights.

    `ckpt` is a checkpoint directory or an already-built MaskedAutoencoder.
    The objective is plain MSE to the MOS label.
    """
    if isinstance(ckpt, (str, Path)):
        backbone, _ = load_checkpoint(ckpt)
    else:
        backbone = ckpt
    if run.task != "video_quality" and run.crop != backbone.enc_cfg.input_size:
        raise ParameterError("finetune crop must match the encoder input size")
    missing = [r.id for r in records if r.mos is None]
    if missing:
        raise DataError(f"records missing MOS labels: {missing[:5]}")
    if not records:
        raise DataError("empty finetune dataset")

    torch.manual_seed(derive_seed(run.seed, "head"))
    scorer = ScoreRegressor(backbone, hidden=run.head_hidden)
    if run.freeze_encoder:
        for p in scorer.backbone.parameters():
            p.requires_grad_(False)
        params = list(scorer.head.parameters())
    else:
        params = list(scorer.parameters())
    opt = torch.optim.AdamW(params, lr=run.base_lr, weight_decay=run.weight_decay)

    steps_per_epoch = math.ceil(len(records) / run.batch_size)
    total_steps = max(1, run.epochs * steps_per_epoch)
    log_records: list[dict] = []
    step = 0
    for epoch in range(run.epochs):
        order = np.random.default_rng(derive_seed(run.seed, "order", epoch)).permutation(len(records))
        for start in range(0, len(order), run.batch_size):
            batch = [records[i] for i in order[start : start + run.batch_size]]
            losses = []
            for rec in batch:
                rng = np.random.default_rng(derive_seed(run.seed, "crop", rec.id, epoch))
                if run.task == "video_quality":
                    clips = sample_video_clips(_load_video(rec.path), run.clips, run.clip_len)
                    preds = [
                        scorer.head(forward_video(backbone, clip, run.t_patch)).squeeze(-1)
                        for clip in clips
                    ]
                    pred = torch.stack(preds).mean()
                else:
                    pred = scorer(_finetune_input(rec, run, rng))
                target = torch.as_tensor(rec.mos, dtype=pred.dtype)
                losses.append((pred - target) ** 2)
            lr = cosine_lr(step, total_steps, run.base_lr, run.warmup)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = torch.stack(losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            log_records.append({"step": step, "epoch": epoch, "loss": float(loss), "lr": lr})
            step += 1
    return scorer, log_records


# ---------------------------------------------------------------------------
# testing-time protocols
# ---------------------------------------------------------------------------


def five_crop_predict(scorer: ScoreRegressor, img, crop: int) -> float:
    """Mean prediction over the four corner crops and the center crop."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    px = _pad_to(px, crop)
    h, w = px.shape[:2]
    offsets = [
        (0, 0),
        (0, w - crop),
        (h - crop, 0),
        (h - crop, w - crop),
        ((h - crop) // 2, (w - crop) // 2),
    ]
    scores = [scorer.predict(_crop_at(px, t, l, crop)) for t, l in offsets]
    return float(np.mean(scores))


def sample_video_clips(video, clips: int = 4, clip_len: int = 32) -> list[np.ndarray]:
    """Uniformly spaced fixed-length clips; short videos repeat the last frame."""
    video = np.asarray(video)
    t = video.shape[0]
    if t < 1:
        raise ParameterError("video must have at least one frame")
    max_start = max(0, t - clip_len)
    if clips == 1:
        starts = [max_start // 2]
    else:
        starts = [int(math.floor(i * max_start / (clips - 1))) for i in range(clips)]
    out = []
    for s in starts:
        clip = video[s : s + clip_len]
        if clip.shape[0] < clip_len:
            pad = np.repeat(clip[-1:], clip_len - clip.shape[0], axis=0)
            clip = np.concatenate([clip, pad], axis=0)
        out.append(clip)
    return out


def forward_video(backbone: MaskedAutoencoder, clip, t_patch: int = 2) -> torch.Tensor:
    """Encoder features of a clip via temporally inflated patch embedding.

    Frames are grouped into t_patch-sized temporal patches (padding by
    repeating the last frame), each group is embedded with the inflated
    weights, run through the encoder stages, and features are averaged over
    groups and tokens.
    """
    clip = np.asarray(clip, dtype=np.float64)
    t = clip.shape[0]
    pad = (-t) % t_patch
    if pad:
        clip = np.concatenate([clip, np.repeat(clip[-1:], pad, axis=0)], axis=0)
    enc = backbone.encoder
    w3 = inflate_temporal(enc.patch_embed.weight, t_patch)
    feats = []
    for g in range(clip.shape[0] // t_patch):
        frames = clip[g * t_patch : (g + 1) * t_patch]
        per_frame = [patchify(torch.as_tensor(f, dtype=backbone.dtype), backbone.enc_cfg.patch) for f in frames]
        tokens = torch.cat([ps.tokens for ps in per_frame], dim=1)  # time-major layout
        positions = per_frame[0].positions
        x = tokens @ w3.T + enc.patch_embed.bias + enc.pos_embed[positions]
        stage = enc.forward_features(x, positions)
        feats.append(stage.x3.mean(dim=0))
    return torch.stack(feats).mean(dim=0)


def score_records(
    scorer: ScoreRegressor, records: list[CurationRecord], run: FinetuneRun
) -> ScoreTable:
    """Score every record with the task's testing protocol, paired with its MOS."""
    preds, mos = [], []
    for rec in records:
        if rec.mos is None:
            raise DataError(f"record {rec.id} has no MOS")
        if run.task == "video_quality":
            clips = sample_video_clips(_load_video(rec.path), run.clips, run.clip_len)
            with torch.no_grad():
                vals = [
                    float(scorer.head(forward_video(scorer.backbone, clip, run.t_patch)))
                    for clip in clips
                ]
            preds.append(float(np.mean(vals)))
        elif run.task == "aesthetics":
            px = load_image(rec.path).pixels
            px = np.clip(
                cv2.resize(px, (run.crop, run.crop), interpolation=cv2.INTER_LINEAR), 0.0, 1.0
            )
            preds.append(scorer.predict(px))
        else:
            px = _resize_short(load_image(rec.path).pixels, run.resize_short)
            preds.append(five_crop_predict(scorer, px, run.crop))
        mos.append(rec.mos)
    return ScoreTable(np.array(preds), np.array(mos))
