"""Three-stage hierarchical masked autoencoder with pretrain-only fusion.

Stages 1 and 2 are attention-free channel-MLP token mixers; stage 3 uses
global self-attention. Between stages, 2×2 groups of tokens are merged, so
masks are sampled on the coarsest (stage-3) grid and expanded to fine patches:
every merge group is then entirely visible or entirely masked and the stage
transitions stay well-defined under any masking ratio.

During pretraining the selected shallow stages are spatially pooled to the
stage-3 grid, projected to the decoder width, and combined (learnable
normalized weights or plain sum) before decoding with a single shared mask
token. Finetuning runs the encoder alone and global-averages stage-3 tokens:
no projection, fusion, decoder, or mask-token parameter can receive gradient.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ParameterError
from .imageops import Image
from .masking import MaskPlan, PatchSet, expand_mask, masked_mse, patchify

__all__ = [
    "EncoderConfig",
    "FusionConfig",
    "DecoderConfig",
    "StageFeatures",
    "MaskedAutoencoder",
    "build_autoencoder",
    "inflate_temporal",
    "save_checkpoint",
    "load_checkpoint",
    "param_checksum",
]

MLP_RATIO = 4
MERGE_FACTOR = 4  # two 2× patch merges between the fine and the coarse grid


@dataclass
class EncoderConfig:
    patch: int = 8
    stage_dims: tuple[int, int, int] = (32, 48, 96)
    stage_depths: tuple[int, int, int] = (1, 1, 2)
    heads: int = 4
    input_size: int = 64

    def __post_init__(self):
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        d1, d2, d3 = self.stage_dims
        if not d1 <= d2 <= d3:
            raise ConfigError("stage_dims must be non-decreasing")
        if len(self.stage_depths) != 3 or min(self.stage_depths) < 1:
            raise ConfigError("need three stage depths >= 1")
        if self.input_size % (self.patch * MERGE_FACTOR):
            raise ConfigError("input_size must be divisible by patch·4 (two 2× merges)")
        if d1 % 4 or d3 % self.heads:
            raise ConfigError("stage dim 1 must be divisible by 4, dim 3 by heads")

    @property
    def fine_grid(self) -> int:
        return self.input_size // self.patch

    @property
    def mid_grid(self) -> int:
        return self.fine_grid // 2

    @property
    def coarse_grid(self) -> int:
        return self.fine_grid // 4

    @property
    def coarse_patch(self) -> int:
        return self.patch * MERGE_FACTOR


@dataclass
class FusionConfig:
    fuse_stages: tuple[int, ...] = (1,)
    projection: str = "linear"  # "linear" | "mlp"
    fusion: str = "weighted_pool"  # "weighted_pool" | "sum"

    def __post_init__(self):
        self.fuse_stages = tuple(sorted(int(s) for s in self.fuse_stages))
        if not set(self.fuse_stages) <= {1, 2}:
            raise ConfigError("fuse_stages must be a subset of {1, 2}; stage 3 is always routed")
        if self.projection not in ("linear", "mlp"):
            raise ConfigError(f"unknown projection {self.projection!r}")
        if self.fusion not in ("weighted_pool", "sum"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")


@dataclass
class DecoderConfig:
    dim: int = 64
    depth: int = 1
    heads: int = 4
    norm_pix_loss: bool = False  # per-patch-normalized targets, off by default

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("decoder depth must be >= 1")
        if self.dim % 4 or self.dim % self.heads:
            raise ConfigError("decoder dim must be divisible by 4 and by heads")


@dataclass
class StageFeatures:
    """Per-stage token arrays with their grid positions (ascending order)."""

    x1: torch.Tensor
    pos1: np.ndarray
    x2: torch.Tensor
    pos2: np.ndarray
    x3: torch.Tensor
    pos3: np.ndarray


# ---------------------------------------------------------------------------
# positional encodings and grouping helpers
# ---------------------------------------------------------------------------


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = pos[:, None] * omega[None, :]
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_grid(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2D sine-cosine position table, (grid_h·grid_w, dim), row-major."""
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb_y = _sincos_1d(dim // 2, ys.reshape(-1).astype(np.float64))
    emb_x = _sincos_1d(dim // 2, xs.reshape(-1).astype(np.float64))
    return np.concatenate([emb_y, emb_x], axis=1)


def merge_groups(positions: np.ndarray, grid_w: int, factor: int):
    """Order tokens into complete factor×factor blocks of a row-major grid.

    Returns (gather order, block positions on the coarser grid). Raises when
    any block is only partially present — masks must be coarse-aligned.
    """
    r, c = positions // grid_w, positions % grid_w
    g = (r // factor) * (grid_w // factor) + (c // factor)
    s = (r % factor) * factor + (c % factor)
    k = factor * factor
    if positions.size % k:
        raise ParameterError("token count is not a multiple of the merge group size")
    order = np.lexsort((s, g))
    g_sorted = g[order].reshape(-1, k)
    s_sorted = s[order].reshape(-1, k)
    if not (g_sorted == g_sorted[:, :1]).all() or not (s_sorted == np.arange(k)).all():
        raise ParameterError("visible tokens do not form complete merge groups")
    return order, g_sorted[:, 0].copy()


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class MlpBlock(nn.Module):
    """Attention-free token mixer: per-token channel MLP with residual."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, MLP_RATIO * dim)

    def forward(self, x):
        return x + self.mlp(self.norm(x))


class AttnBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, MLP_RATIO * dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """Concatenate a 2×2 token group channelwise, normalize, project."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.reduce = nn.Linear(4 * dim_in, dim_out)

    def forward(self, x):
        return self.reduce(self.norm(x))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class HierarchicalEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d1, d2, d3 = cfg.stage_dims
        n1, n2, n3 = cfg.stage_depths
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * 3, d1)
        pos = sincos_grid(d1, cfg.fine_grid, cfg.fine_grid)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float(), persistent=False)
        self.stage1 = nn.ModuleList(MlpBlock(d1) for _ in range(n1))
        self.merge1 = PatchMerge(d1, d2)
        self.stage2 = nn.ModuleList(MlpBlock(d2) for _ in range(n2))
        self.merge2 = PatchMerge(d2, d3)
        self.stage3 = nn.ModuleList(AttnBlock(d3, cfg.heads) for _ in range(n3))
        self.norm = nn.LayerNorm(d3)

    def embed(self, tokens: torch.Tensor, positions: np.ndarray) -> torch.Tensor:
        """Patch pixels -> stage-1 width plus the fine-grid position code."""
        return self.patch_embed(tokens) + self.pos_embed[positions]

    def forward_features(self, x: torch.Tensor, positions: np.ndarray) -> StageFeatures:
        """Run the three stages over already-embedded tokens ((n, d1) input)."""
        cfg = self.cfg
        x = x.unsqueeze(0)
        for blk in self.stage1:
            x = blk(x)
        x1, pos1 = x, positions
        order, pos2 = merge_groups(pos1, cfg.fine_grid, 2)
        x = self.merge1(x[:, order].reshape(1, -1, 4 * cfg.stage_dims[0]))
        for blk in self.stage2:
            x = blk(x)
        x2 = x
        order, pos3 = merge_groups(pos2, cfg.mid_grid, 2)
        x = self.merge2(x[:, order].reshape(1, -1, 4 * cfg.stage_dims[1]))
        for blk in self.stage3:
            x = blk(x)
        x3 = self.norm(x)
        return StageFeatures(x1.squeeze(0), pos1, x2.squeeze(0), pos2, x3.squeeze(0), pos3)


class FusionModule(nn.Module):
    """Pretrain-only projections for the fused shallow stages (+ pool weights)."""

    def __init__(self, cfg: FusionConfig, stage_dims, dec_dim: int):
        super().__init__()
        self.cfg = cfg
        self.projs = nn.ModuleDict(
            {f"s{s}": _make_projection(cfg.projection, stage_dims[s - 1], dec_dim) for s in cfg.fuse_stages}
        )
        if cfg.fusion == "weighted_pool":
            # one logit per routed stage, ordered [3, *fuse_stages]
            self.logits = nn.Parameter(torch.zeros(1 + len(cfg.fuse_stages)))
        else:
            self.logits = None

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)


def _make_projection(kind: str, dim_in: int, dim_out: int) -> nn.Module:
    if kind == "linear":
        return nn.Linear(dim_in, dim_out)
    return nn.Sequential(nn.Linear(dim_in, dim_out), nn.GELU(), nn.Linear(dim_out, dim_out))


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------


class MaskedAutoencoder(nn.Module):
    def __init__(self, enc: EncoderConfig, fus: FusionConfig, dec: DecoderConfig, seed: int = 0):
        super().__init__()
        self.enc_cfg, self.fus_cfg, self.dec_cfg = enc, fus, dec
        self.seed = seed
        self.encoder = HierarchicalEncoder(enc)
        d3 = enc.stage_dims[2]
        # stage-3 features always reach the decoder through this projection
        self.dec_embed = _make_projection(fus.projection, d3, dec.dim)
        self.fusion = FusionModule(fus, enc.stage_dims, dec.dim) if fus.fuse_stages else None
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dec.dim))
        pos = sincos_grid(dec.dim, enc.coarse_grid, enc.coarse_grid)
        self.register_buffer("dec_pos", torch.from_numpy(pos).float(), persistent=False)
        self.dec_blocks = nn.ModuleList(AttnBlock(dec.dim, dec.heads) for _ in range(dec.depth))
        self.dec_norm = nn.LayerNorm(dec.dim)
        out_dim = enc.coarse_patch * enc.coarse_patch * 3
        self.head = nn.Linear(dec.dim, out_dim)

    # -- plumbing ------------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def _as_pixels(self, img) -> torch.Tensor:
        px = img.pixels if isinstance(img, Image) else img
        if isinstance(px, torch.Tensor):
            t = px.to(self.dtype)
        else:
            t = torch.as_tensor(np.asarray(px), dtype=self.dtype)
        s = self.enc_cfg.input_size
        if t.shape != (s, s, 3):
            raise ParameterError(f"expected {s}×{s}×3 pixels, got {tuple(t.shape)}")
        return t

    def _check_plan(self, plan: MaskPlan) -> None:
        g = self.enc_cfg.coarse_grid
        if plan.grid_h != g or plan.grid_w != g:
            raise ParameterError(
                f"mask plan grid {plan.grid_h}×{plan.grid_w} != coarse grid {g}×{g}"
            )

    # -- pretraining path ----------------------------------------------------

    def encode_stages(self, visible: PatchSet) -> StageFeatures:
        """Stage features for a coarse-aligned set of visible fine patches."""
        order = np.argsort(visible.positions)
        positions = visible.positions[order]
        tokens = visible.tokens[order]
        if not isinstance(tokens, torch.Tensor):
            tokens = torch.as_tensor(np.asarray(tokens), dtype=self.dtype)
        x = self.encoder.embed(tokens.to(self.dtype), positions)
        return self.encoder.forward_features(x, positions)

    def fuse_multiscale(self, feats: StageFeatures) -> torch.Tensor:
        """Project routed stages to decoder width and combine on the coarse grid."""
        parts = [self.dec_embed(feats.x3)]
        if self.fusion is not None:
            cfg = self.enc_cfg
            for s in self.fus_cfg.fuse_stages:
                xs, ps, grid_w, factor = (
                    (feats.x1, feats.pos1, cfg.fine_grid, 4)
                    if s == 1
                    else (feats.x2, feats.pos2, cfg.mid_grid, 2)
                )
                order, groups = merge_groups(ps, grid_w, factor)
                if not np.array_equal(groups, feats.pos3):
                    raise ParameterError("pooled groups disagree with stage-3 positions")
                k = factor * factor
                pooled = xs[order].reshape(-1, k, xs.shape[-1]).mean(dim=1)
                parts.append(self.fusion.projs[f"s{s}"](pooled))
            if self.fus_cfg.fusion == "weighted_pool":
                w = self.fusion.weights()
                return sum(w[i] * p for i, p in enumerate(parts))
        return sum(parts)

    def decode_reconstruct(self, fused: torch.Tensor, plan: MaskPlan) -> PatchSet:
        """Fill masked slots with the shared token, decode, return masked predictions.

        `fused` rows must be ordered by ascending visible coarse position,
        which is how fuse_multiscale emits them.
        """
        self._check_plan(plan)
        n = plan.n_patches
        if fused.shape[0] != n - len(plan.masked_positions):
            raise ParameterError("fused token count disagrees with the plan")
        seq = self.mask_token.expand(1, n, self.dec_cfg.dim).clone()
        seq[0, plan.visible_positions] = fused
        seq = seq + self.dec_pos
        for blk in self.dec_blocks:
            seq = blk(seq)
        out = self.head(self.dec_norm(seq)).squeeze(0)
        return PatchSet(out[plan.mask], plan.masked_positions)

    def forward_pretrain(self, img, plan: MaskPlan, target=None) -> torch.Tensor:
        """Masked-reconstruction loss; `target` defaults to the input image."""
        self._check_plan(plan)
        px = self._as_pixels(img)
        fine = patchify(px, self.enc_cfg.patch)
        fine_mask = expand_mask(plan, MERGE_FACTOR)
        visible = PatchSet(fine.tokens[~fine_mask], fine.positions[~fine_mask])
        feats = self.encode_stages(visible)
        if not np.array_equal(feats.pos3, plan.visible_positions):
            raise ParameterError("stage-3 positions disagree with the plan")
        fused = self.fuse_multiscale(feats)
        pred = self.decode_reconstruct(fused, plan)
        tpx = px if target is None else self._as_pixels(target)
        coarse = patchify(tpx, self.enc_cfg.coarse_patch)
        tgt_tokens = coarse.tokens[plan.mask]
        if self.dec_cfg.norm_pix_loss:
            mean = tgt_tokens.mean(dim=-1, keepdim=True)
            var = tgt_tokens.var(dim=-1, keepdim=True)
            tgt_tokens = (tgt_tokens - mean) / (var + 1e-6) ** 0.5
        tgt = PatchSet(tgt_tokens, coarse.positions[plan.mask])
        return masked_mse(pred, tgt, plan)

    # -- finetuning path -----------------------------------------------------

    def forward_finetune(self, img) -> torch.Tensor:
        """Encoder-only features of a full image: mean over stage-3 tokens.

        No projection, fusion, decoder, or mask-token parameter participates.
        """
        px = self._as_pixels(img)
        full = patchify(px, self.enc_cfg.patch)
        x = self.encoder.embed(full.tokens, full.positions)
        feats = self.encoder.forward_features(x, full.positions)
        return feats.x3.mean(dim=0)

    # -- reporting -----------------------------------------------------------

    def param_counts(self) -> dict:
        def count(module) -> int:
            return sum(p.numel() for p in module.parameters()) if module is not None else 0

        counts = {
            "encoder": count(self.encoder),
            "projection": count(self.fusion.projs) if self.fusion is not None else 0,
            "fusion_weights": (
                self.fusion.logits.numel()
                if self.fusion is not None and self.fusion.logits is not None
                else 0
            ),
            "mask_token": self.mask_token.numel(),
            "decoder": count(self.dec_embed)
            + count(self.dec_blocks)
            + count(self.dec_norm)
            + count(self.head),
        }
        counts["total"] = sum(counts.values())
        return counts

    def pretrain_parameter_names(self) -> list[str]:
        """Names of parameters that exist only for pretraining."""
        names = ["mask_token"]
        names += [f"dec_embed.{n}" for n, _ in self.dec_embed.named_parameters()]
        if self.fusion is not None:
            names += [f"fusion.{n}" for n, _ in self.fusion.named_parameters()]
        names += [f"dec_blocks.{n}" for n, _ in self.dec_blocks.named_parameters()]
        names += [f"dec_norm.{n}" for n, _ in self.dec_norm.named_parameters()]
        names += [f"head.{n}" for n, _ in self.head.named_parameters()]
        return names


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_autoencoder(
    enc: EncoderConfig, fus: FusionConfig, dec: DecoderConfig, seed: int = 0
) -> MaskedAutoencoder:
    """Construct with deterministic initialization: same seed, same parameters."""
    torch.manual_seed(seed)
    model = MaskedAutoencoder(enc, fus, dec, seed=seed)
    model.apply(_init_weights)
    with torch.no_grad():
        model.mask_token.normal_(std=0.02)
    return model


def inflate_temporal(weights2d: torch.Tensor, t_patch: int) -> torch.Tensor:
    """Patch-embedding weights for t_patch-frame temporal patches.

    Replicates the 2D weights along a leading temporal input axis and divides
    by t_patch, so a static clip embeds exactly like the still frame. Input
    layout of the inflated matrix is time-major: frame0 pixels, frame1 pixels…
    """
    if t_patch < 1:
        raise ParameterError("t_patch must be >= 1")
    if t_patch == 1:
        return weights2d.clone()
    return weights2d.repeat(1, t_patch) / t_patch


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: MaskedAutoencoder, out_dir: str | Path, step: int = 0, extra: dict | None = None) -> Path:
    """Directory checkpoint: manifest.json (config echo) + weights.npz by name."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": 1,
        "seed": model.seed,
        "step": step,
        "encoder": asdict(model.enc_cfg),
        "fusion": asdict(model.fus_cfg),
        "decoder": asdict(model.dec_cfg),
        "extra": extra or {},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    np.savez(out_dir / "weights.npz", **arrays)
    return out_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[MaskedAutoencoder, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    enc = EncoderConfig(**{**manifest["encoder"], "stage_dims": tuple(manifest["encoder"]["stage_dims"]), "stage_depths": tuple(manifest["encoder"]["stage_depths"])})
    fus = FusionConfig(**{**manifest["fusion"], "fuse_stages": tuple(manifest["fusion"]["fuse_stages"])})
    dec = DecoderConfig(**manifest["decoder"])
    model = build_autoencoder(enc, fus, dec, seed=manifest["seed"])
    with np.load(ckpt_dir / "weights.npz") as data:
        state = {name: torch.from_numpy(data[name]) for name in data.files}
    model.load_state_dict(state, strict=True)
    return model, manifest


def param_checksum(model: nn.Module) -> str:
    """SHA-256 over all parameter names and raw bytes, in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
