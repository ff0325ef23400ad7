"""Derived labels: one-hot maps, patch presence labels, pseudo-labels, uncertainty masks.

Tensors are channel-first and batched: label maps are ``(B, H, W)`` integer
tensors, probability maps ``(B, C, H, W)``, patch presence labels
``(B, C, rows, cols)`` with entries in {0, 1}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .datagen import IGNORE_INDEX


@dataclass(frozen=True)
class PatchGrid:
    """Rectangular tiling of an image into coarse patches.

    The last row/column of patches may hang over the image edge; pixels that
    fall outside the image simply do not exist.
    """

    patch_height: int
    patch_width: int
    rows: int
    cols: int

    @classmethod
    def for_image(cls, height: int, width: int, patch_height: int, patch_width: int | None = None):
        patch_width = patch_height if patch_width is None else patch_width
        if patch_height < 1 or patch_width < 1:
            raise ValueError("patch size must be positive")
        return cls(patch_height, patch_width, math.ceil(height / patch_height), math.ceil(width / patch_width))

    def check(self, height: int, width: int) -> None:
        ok_rows = (self.rows - 1) * self.patch_height < height <= self.rows * self.patch_height
        ok_cols = (self.cols - 1) * self.patch_width < width <= self.cols * self.patch_width
        if not (ok_rows and ok_cols):
            raise ValueError(
                f"{self.rows}x{self.cols} grid of {self.patch_height}x{self.patch_width} patches "
                f"does not tile a {height}x{width} image"
            )

    def pool_any(self, mask: torch.Tensor) -> torch.Tensor:
        """Per-patch logical OR of a ``(B, K, H, W)`` {0,1} map."""
        H, W = mask.shape[-2:]
        self.check(H, W)
        pad_h = self.rows * self.patch_height - H
        pad_w = self.cols * self.patch_width - W
        if pad_h or pad_w:
            mask = F.pad(mask, (0, pad_w, 0, pad_h))
        B, K = mask.shape[:2]
        tiles = mask.reshape(B, K, self.rows, self.patch_height, self.cols, self.patch_width)
        return tiles.amax(dim=(3, 5))


def one_hot(labels: torch.Tensor, num_classes: int, ignore_index: int = IGNORE_INDEX,
            dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(B, H, W)`` labels to ``(B, C, H, W)``; ignore pixels get an all-zero vector."""
    labels = labels.long()
    valid = labels != ignore_index
    if ((labels < 0) | ((labels >= num_classes) & valid)).any():
        raise ValueError(f"label values must lie in [0, {num_classes}) or equal {ignore_index}")
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    out = F.one_hot(safe, num_classes).permute(0, 3, 1, 2).to(dtype)
    return out * valid.unsqueeze(1).to(dtype)


def coarse_labels_from_truth(labels: torch.Tensor, grid: PatchGrid, num_classes: int,
                             ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """W for source patches: class c is present iff any pixel of class c lies in the patch."""
    return grid.pool_any(one_hot(labels, num_classes, ignore_index))


def _check_probs(probs: torch.Tensor, atol: float = 1e-5) -> None:
    sums = probs.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol, rtol=0):
        raise ValueError("probabilities must sum to 1 over the class axis")


def coarse_labels_from_prediction(probs: torch.Tensor, grid: PatchGrid, th_w: float = 0.9) -> torch.Tensor:
    """W for target patches: class c is present iff some pixel has P[c] > th_w."""
    if not 0.0 < th_w < 1.0:
        raise ValueError(f"th_w must lie in (0, 1), got {th_w}")
    probs = probs.detach()
    _check_probs(probs)
    return grid.pool_any((probs > th_w).to(probs.dtype))


def pseudo_labels(probs: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax. Ties go to the smallest class index."""
    # torch.argmax returns the first maximal index
    return probs.detach().argmax(dim=1)


def uncertainty_mask(probs: torch.Tensor, th_n: float = 0.5) -> torch.Tensor:
    """``(B, H, W)`` {0,1} mask of pixels whose top probability is strictly below th_n."""
    if not 0.0 < th_n <= 1.0:
        raise ValueError(f"th_n must lie in (0, 1], got {th_n}")
    probs = probs.detach()
    return (probs.amax(dim=1) < th_n).to(probs.dtype)
