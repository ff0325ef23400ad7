"""Confusion matrices, per-class IoU / mIoU, and the three-variant ablation ladder."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .datagen import IGNORE_INDEX, Dataset, Sample
from .nets import SegmentationNet
from .trainer import VARIANTS, TrainConfig, train, with_variant

log = logging.getLogger(__name__)

# mIoU of the three nested models on GTA5 -> Cityscapes, kept for context only
PAPER_LADDER = {"basic": 34.9, "class": 37.0, "full": 37.7}


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, truth, pred) -> "ConfusionMatrix":
        truth = np.asarray(truth).ravel().astype(np.int64)
        pred = np.asarray(pred).ravel().astype(np.int64)
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction sizes differ")
        keep = truth != self.ignore_index
        truth, pred = truth[keep], pred[keep]
        C = self.num_classes
        if truth.size and (truth.max() >= C or truth.min() < 0 or pred.max() >= C or pred.min() < 0):
            raise ValueError(f"class index out of range for {C} classes")
        self.counts += np.bincount(truth * C + pred, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IoUReport:
    per_class: list[Optional[float]]  # None where the union is empty
    miou: float

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class, "miou": self.miou}


def iou_report(cm: ConfusionMatrix | np.ndarray) -> IoUReport:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    diag = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=1) + counts.sum(axis=0) - diag
    per_class = [None if u == 0 else float(d / u) for d, u in zip(diag, union)]
    defined = [v for v in per_class if v is not None]
    miou = float(np.mean(defined)) if defined else float("nan")
    return IoUReport(per_class, miou)


def rare_classes(pixel_counts: np.ndarray, fraction: float = 1 / 3) -> list[int]:
    """Bottom tercile of classes by training pixel frequency (at least one class)."""
    C = len(pixel_counts)
    k = max(1, int(round(C * fraction)))
    order = sorted(range(C), key=lambda c: (pixel_counts[c], -c))
    return sorted(order[:k])


def mean_over(report: IoUReport, classes: Iterable[int]) -> float:
    vals = [report.per_class[c] for c in classes if report.per_class[c] is not None]
    return float(np.mean(vals)) if vals else float("nan")


@torch.no_grad()
def predict(seg: SegmentationNet, image: np.ndarray) -> np.ndarray:
    param = next(seg.parameters())
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0)
    seg.eval()
    _, probs = seg(x.to(param.device, param.dtype))
    return probs.argmax(dim=1)[0].cpu().numpy()


def evaluate(seg: SegmentationNet, samples: list[Sample], num_classes: int,
             ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes, ignore_index)
    for s in samples:
        if s.labels is None:
            raise ValueError(f"sample {s.id} has no labels to evaluate against")
        cm.accumulate(s.labels, predict(seg, s.image))
    return cm


def write_report(report: IoUReport, out_dir: Path | str, *, rare: Optional[list[int]] = None,
                 extra: Optional[dict] = None, plots: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if rare is not None:
        payload["rare_classes"] = rare
        payload["rare_class_iou"] = mean_over(report, rare)
    payload.update(extra or {})
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou"])
        for c, v in enumerate(report.per_class):
            w.writerow([c, "" if v is None else repr(v)])
        w.writerow(["mIoU", repr(report.miou)])
        if rare is not None:
            w.writerow(["rare_class_iou", repr(payload["rare_class_iou"])])
    if plots:
        _bar_plot(report, out_dir / "iou.png")
    return out_dir


def _bar_plot(report: IoUReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vals = [0.0 if v is None else v for v in report.per_class]
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(vals), 3))
    ax.bar(range(len(vals)), vals)
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.set_title(f"mIoU {report.miou:.3f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# ablation ladder
# ---------------------------------------------------------------------------

@dataclass
class AblationCell:
    variant: str
    seed: int
    miou: float = float("nan")
    rare_iou: float = float("nan")
    per_class: list = field(default_factory=list)
    error: Optional[str] = None


@dataclass
class AblationTable:
    cells: list[AblationCell]
    rare: list[int]

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for v in VARIANTS:
            cells = [c for c in self.cells if c.variant == v and c.error is None]
            m = np.array([c.miou for c in cells])
            r = np.array([c.rare_iou for c in cells])
            out[v] = {
                "n": len(cells),
                "miou_mean": float(m.mean()) if len(m) else math.nan,
                "miou_std": float(m.std(ddof=1)) if len(m) > 1 else 0.0,
                "rare_mean": float(r.mean()) if len(r) else math.nan,
                "rare_std": float(r.std(ddof=1)) if len(r) > 1 else 0.0,
            }
        return out

    def cell(self, variant: str, seed: int) -> AblationCell:
        return next(c for c in self.cells if c.variant == variant and c.seed == seed)

    def to_dict(self) -> dict:
        return {
            "rare_classes": self.rare,
            "cells": [c.__dict__ for c in self.cells],
            "summary": self.summary(),
            "paper_reference_miou": PAPER_LADDER,
        }

    def write(self, out_dir: Path | str) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", "miou", "rare_iou", "error"])
            for c in self.cells:
                w.writerow([c.variant, c.seed, repr(c.miou), repr(c.rare_iou), c.error or ""])
            w.writerow([])
            w.writerow(["variant", "miou_mean", "miou_std", "rare_mean", "rare_std", "paper_miou"])
            for v, s in self.summary().items():
                w.writerow([v, s["miou_mean"], s["miou_std"], s["rare_mean"], s["rare_std"], PAPER_LADDER[v]])
        return out_dir


def run_ablation(base_config: TrainConfig, source: Dataset, target: Dataset, seeds: list[int],
                 out_dir: Path | str, *, eval_split: str = "val",
                 variants: tuple[str, ...] = VARIANTS) -> AblationTable:
    """Train and score every (variant, seed) cell on held-out target data.

    A failing cell is recorded with its error and the remaining cells still run.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    from dataclasses import replace

    from .nets import build_from_checkpoint

    out_dir = Path(out_dir)
    rare = rare_classes(source.class_pixel_counts("train"))
    target_train = target.without_labels()
    cells = []
    for seed in seeds:
        for variant in variants:
            cell = AblationCell(variant, seed)
            run_dir = out_dir / f"{variant}-seed{seed}"
            try:
                cfg = replace(with_variant(base_config, variant), seed=seed)
                train(cfg, source, target_train, run_dir)
                seg, _, _ = build_from_checkpoint(run_dir / "checkpoints" / "final.ckpt")
                report = iou_report(evaluate(seg, target.splits[eval_split], target.num_classes))
                cell.miou, cell.per_class = report.miou, report.per_class
                cell.rare_iou = mean_over(report, rare)
                write_report(report, run_dir, rare=rare)
            except Exception as exc:  # keep the rest of the ladder going
                log.exception("ablation cell %s/seed %d failed", variant, seed)
                cell.error = f"{type(exc).__name__}: {exc}"
            log.info("ablation %s seed %d: mIoU %.4f rare %.4f", variant, seed, cell.miou, cell.rare_iou)
            cells.append(cell)
    table = AblationTable(cells, rare)
    table.write(out_dir)
    return table
