"""Patch grids, random masks, visible/masked splits, and the masked MSE loss.

Token math here uses only operations shared by numpy arrays and torch
tensors (reshape / swapaxes / fancy indexing / mean), so the same functions
serve both offline checks (numpy) and the differentiable training path
(torch) without a second implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .imageops import Image

__all__ = [
    "MaskPlan",
    "PatchSet",
    "patchify",
    "unpatchify",
    "sample_mask",
    "split_visible",
    "masked_mse",
    "expand_mask",
]


@dataclass
class MaskPlan:
    """A boolean patch mask over a grid_h×grid_w grid (True = masked)."""

    grid_h: int
    grid_w: int
    ratio: float
    mask: np.ndarray
    seed: int | None = None
    patch: int | None = None  # patch side in pixels, when known to the caller

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        n = self.grid_h * self.grid_w
        if self.mask.size != n:
            raise ParameterError(f"mask has {self.mask.size} entries, grid has {n}")
        want = int(round(self.ratio * n))
        if int(self.mask.sum()) != want:
            raise ParameterError(
                f"mask cardinality {int(self.mask.sum())} != round(ratio·N) = {want}"
            )

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def visible_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


@dataclass
class PatchSet:
    """Flattened patch tokens with their row-major grid positions.

    tokens: (N, patch²·C) numpy array or torch tensor; positions: (N,) int.
    """

    tokens: object
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1)
        if self.tokens.shape[0] != self.positions.size:
            raise ParameterError("token count must match position count")
        if np.unique(self.positions).size != self.positions.size:
            raise ParameterError("positions must be unique")

    def __len__(self) -> int:
        return self.positions.size


def _pixels_of(img):
    return img.pixels if isinstance(img, Image) else img


def patchify(img, patch: int) -> PatchSet:
    """Non-overlapping row-major patches, each flattened to patch²·C values."""
    px = _pixels_of(img)
    h, w, c = px.shape
    if patch <= 0:
        raise ParameterError("patch size must be positive")
    if h % patch or w % patch:
        raise ParameterError(f"dims {h}×{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tokens = px.reshape(gh, patch, gw, patch, c).swapaxes(1, 2).reshape(gh * gw, -1)
    return PatchSet(tokens, np.arange(gh * gw))


def unpatchify(patches: PatchSet, height: int, width: int):
    """Exact inverse of patchify; returns the raster array (same backend as tokens).

    The full grid must be present. Returns an array rather than an Image so
    pre-clip decoder predictions (outside [0, 1]) can be assembled too.
    """
    n = len(patches)
    if height * width % n:
        raise ParameterError("grid does not tile the requested dims")
    patch_area_c = patches.tokens.shape[1]
    # infer patch side from the raster area: n · patch² = H · W
    patch = int(round((height * width / n) ** 0.5))
    if n * patch * patch != height * width:
        raise ParameterError("patch count incompatible with dims")
    c = patch_area_c // (patch * patch)
    if patch * patch * c != patch_area_c:
        raise ParameterError("token length is not patch²·C")
    gh, gw = height // patch, width // patch
    expected = np.arange(gh * gw)
    order = np.argsort(patches.positions)
    if not np.array_equal(patches.positions[order], expected):
        raise ParameterError("positions must cover the full grid exactly once")
    tokens = patches.tokens[order]
    return tokens.reshape(gh, gw, patch, patch, c).swapaxes(1, 2).reshape(height, width, c)


def sample_mask(grid_h: int, grid_w: int, ratio: float, seed: int, patch: int | None = None) -> MaskPlan:
    """Uniform random subset of round(ratio·N) masked patches, deterministic per seed."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError("ratio must be in (0, 1)")
    n = grid_h * grid_w
    n_masked = int(round(ratio * n))
    if n_masked < 1 or n_masked >= n:
        raise ParameterError(f"ratio {ratio} masks {n_masked} of {n} patches")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_masked, replace=False)
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    return MaskPlan(grid_h, grid_w, ratio, mask, seed=seed, patch=patch)


def split_visible(patches: PatchSet, plan: MaskPlan) -> tuple[PatchSet, PatchSet]:
    """Partition a full patch set into (visible, masked-target) per the plan."""
    if len(patches) != plan.n_patches:
        raise ParameterError(
            f"patch count {len(patches)} != grid size {plan.n_patches}"
        )
    masked_sel = plan.mask[patches.positions]
    visible = PatchSet(patches.tokens[~masked_sel], patches.positions[~masked_sel])
    target = PatchSet(patches.tokens[masked_sel], patches.positions[masked_sel])
    return visible, target


def masked_mse(pred: PatchSet, target: PatchSet, plan: MaskPlan):
    """Mean squared error over masked patches and their pixels.

    Both sets must cover exactly the plan's masked positions (any order).
    Returns a float for numpy tokens and a 0-dim tensor for torch tokens, so
    the loss stays differentiable on the training path.
    """
    want = plan.masked_positions
    p_order = np.argsort(pred.positions)
    t_order = np.argsort(target.positions)
    if not np.array_equal(pred.positions[p_order], want):
        raise ParameterError("pred does not cover exactly the masked positions")
    if not np.array_equal(target.positions[t_order], want):
        raise ParameterError("target does not cover exactly the masked positions")
    diff = pred.tokens[p_order] - target.tokens[t_order]
    loss = (diff * diff).mean()
    return loss if hasattr(loss, "backward") else float(loss)


def expand_mask(plan: MaskPlan, factor: int) -> np.ndarray:
    """Flat boolean mask on the factor×-finer grid (each cell expands to factor²).

    This is how a mask sampled on the coarsest stage grid drives which fine
    patches the encoder sees: every merge group is then entirely visible or
    entirely masked.
    """
    if factor < 1:
        raise ParameterError("factor must be >= 1")
    grid = plan.mask.reshape(plan.grid_h, plan.grid_w)
    fine = np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)
    return fine.reshape(-1)
