"""Alternating adversarial training: E,S minimize the segmentation plus adversarial
losses, D minimizes the fine and coarse discriminator losses."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses as L
from .datagen import IGNORE_INDEX, Dataset, Sample
from .labels import PatchGrid, coarse_labels_from_prediction, coarse_labels_from_truth, one_hot
from .nets import (Discriminator, DiscSpec, EncoderSpec, SegmentationNet, build_from_checkpoint,
                   patch_size, save_checkpoint)

log = logging.getLogger(__name__)

VARIANTS = ("basic", "class", "full")
LOG_COLUMNS = ("step",) + L.COMPONENT_TERMS + L.TOTAL_TERMS + ("lr_es", "lr_d")


class ConfigError(ValueError):
    """Invalid configuration or incompatible inputs."""


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    crop_height: int = 64
    crop_width: int = 64
    sgd_lr: float = 2.5e-4
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    adam_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    lr_power: float = 0.9
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    th_w: float = 0.9
    th_n: float = 0.5
    variant: str = "full"
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    disc_fine_channels: tuple[int, ...] = (64, 128, 256, 512, 1)
    disc_coarse_hidden: tuple[int, ...] = (256, 512)
    update_order: str = "es_first"
    checkpoint_every: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    device: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "disc_fine_channels", tuple(self.disc_fine_channels))
        object.__setattr__(self, "disc_coarse_hidden", tuple(self.disc_coarse_hidden))
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("sgd_lr", "adam_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.crop_height % self.encoder.stride or self.crop_width % self.encoder.stride:
            raise ConfigError(
                f"crop {self.crop_height}x{self.crop_width} is not divisible by stride {self.encoder.stride}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.update_order not in ("es_first", "d_first"):
            raise ConfigError("update_order must be 'es_first' or 'd_first'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 < self.th_w < 1 or not 0 < self.th_n <= 1:
            raise ConfigError("thresholds out of range")

    @property
    def class_conditional(self) -> bool:
        return self.variant != "basic"

    @property
    def coarse(self) -> bool:
        return self.variant == "full"

    def effective_weights(self) -> L.LossWeights:
        """Basic variant: plain CE and plain fine discriminator (alpha = beta = 1)."""
        if self.variant == "basic":
            return replace(self.weights, alpha=1.0, beta=1.0)
        return self.weights

    def disc_spec(self, num_classes: int) -> DiscSpec:
        return DiscSpec(num_classes=num_classes, fine_channels=self.disc_fine_channels,
                        coarse_tail_channels=self.disc_coarse_hidden + (2 * num_classes,))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = asdict(self.encoder)
        d["disc_fine_channels"] = list(self.disc_fine_channels)
        d["disc_coarse_hidden"] = list(self.disc_coarse_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("weights"), dict):
            d["weights"] = L.LossWeights(**d["weights"])
        if isinstance(d.get("encoder"), dict):
            d["encoder"] = EncoderSpec(**d["encoder"])
        return cls(**d)


def with_variant(config: TrainConfig, variant: str) -> TrainConfig:
    return replace(config, variant=variant)


def poly_lr(base: float, step: int, total: int, power: float) -> float:
    if total <= 0:
        return base
    return base * (1.0 - min(step, total) / total) ** power


def param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextmanager
def deterministic_mode(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


class PairedStream:
    """Seed-determined (source, target) crop pairs; batch ``i`` depends only on (seed, i)."""

    def __init__(self, source: list[Sample], target: list[Sample], crop: tuple[int, int], seed: int,
                 dtype=torch.float32):
        if not source:
            raise ConfigError("source dataset is empty")
        if not target:
            raise ConfigError("target dataset is empty")
        if any(s.labels is None for s in source):
            raise ConfigError("every source sample needs labels")
        for s in (source[0], target[0]):
            if s.image.shape[0] < crop[0] or s.image.shape[1] < crop[1]:
                raise ConfigError(f"crop {crop} is larger than image {s.image.shape[:2]}")
        self.source, self.target, self.crop, self.seed, self.dtype = source, target, crop, seed, dtype

    def _crop(self, rng, sample: Sample, with_labels: bool):
        H, W = sample.image.shape[:2]
        ch, cw = self.crop
        y = int(rng.integers(0, H - ch + 1))
        x = int(rng.integers(0, W - cw + 1))
        img = torch.from_numpy(np.ascontiguousarray(sample.image[y:y + ch, x:x + cw].transpose(2, 0, 1)))
        img = img.to(self.dtype).unsqueeze(0)
        lab = None
        if with_labels:
            lab = torch.from_numpy(sample.labels[y:y + ch, x:x + cw].astype(np.int64)).unsqueeze(0)
        return img, lab

    def batch(self, step: int):
        rng = np.random.default_rng([self.seed, step, 7])
        s = self.source[int(rng.integers(len(self.source)))]
        t = self.target[int(rng.integers(len(self.target)))]
        img_s, lab_s = self._crop(rng, s, True)
        img_t, _ = self._crop(rng, t, False)
        return img_s, lab_s, img_t


class Trainer:
    """Owns E,S (SGD with momentum) and D (Adam) and runs single alternating steps."""

    def __init__(self, config: TrainConfig, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        self.dtype = getattr(torch, config.dtype)
        self.device = torch.device(config.device)
        torch.manual_seed(config.seed)
        self.seg = SegmentationNet(config.encoder, num_classes).to(self.device, self.dtype)
        self.disc = Discriminator(config.disc_spec(num_classes), config.encoder.feature_channels)
        self.disc.to(self.device, self.dtype)
        self.opt_es = torch.optim.SGD(self.seg.parameters(), lr=config.sgd_lr,
                                      momentum=config.sgd_momentum, weight_decay=config.weight_decay)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=config.adam_lr,
                                      betas=(config.adam_beta1, config.adam_beta2))
        self.step = 0
        self.patch = patch_size(config.encoder, self.disc.spec)

    # -- learning rates --------------------------------------------------
    def learning_rates(self, step: int) -> tuple[float, float]:
        c = self.config
        return (poly_lr(c.sgd_lr, step, c.iterations, c.lr_power),
                poly_lr(c.adam_lr, step, c.iterations, c.lr_power))

    def _set_lr(self, step: int):
        lr_es, lr_d = self.learning_rates(step)
        for g in self.opt_es.param_groups:
            g["lr"] = lr_es
        for g in self.opt_d.param_groups:
            g["lr"] = lr_d
        return lr_es, lr_d

    # -- losses ----------------------------------------------------------
    def _disc_terms(self, feats_s, feats_t, size, onehot_s, probs_t, W_src, W_tgt, weights):
        c = self.config
        U_s, Os_s, Ot_s = self.disc(feats_s, size)
        U_t, Os_t, Ot_t = self.disc(feats_t, size)
        terms = L.fine_losses(U_s, U_t, onehot_s, probs_t, weights, c.th_n, c.class_conditional)
        if c.coarse:
            co = L.coarse_losses(Os_s, Ot_s, Os_t, Ot_t, W_src, W_tgt, weights)
            terms["d_coarse"], terms["adv_coarse"] = co["d_coarse"], co["adv_coarse"]
        else:
            zero = torch.zeros((), dtype=U_s.dtype, device=U_s.device)
            terms["d_coarse"] = terms["adv_coarse"] = zero
        return terms

    def _es_update(self, img_s, lab_s, feats_s, feats_t, P_s, P_t, ctx):
        weights = ctx["weights"]
        size = img_s.shape[-2:]
        seg_ce = L.seg_cross_entropy(P_s, lab_s)
        dice = L.dice_loss(P_s, ctx["onehot_s"], weights.epsilon, valid=lab_s != IGNORE_INDEX)
        pred = L.blend_pred(seg_ce, dice, weights.alpha)
        self.disc.requires_grad_(False)
        try:
            terms = self._disc_terms(feats_s, feats_t, size, ctx["onehot_s"], P_t.detach(),
                                     ctx["W_src"], ctx["W_tgt"], weights)
        finally:
            self.disc.requires_grad_(True)
        total = pred + terms["adv_fine"] + terms["adv_coarse"]
        self.opt_es.zero_grad(set_to_none=True)
        total.backward()
        self.opt_es.step()
        return {"seg_ce": seg_ce, "dice": dice, "pred": pred,
                **{k: terms[k] for k in ("adv1", "adv2", "adv_fine", "adv_coarse")}}

    def _d_update(self, img_s, feats_s, feats_t, P_t, ctx, check):
        weights = ctx["weights"]
        terms = self._disc_terms(feats_s.detach(), feats_t.detach(), img_s.shape[-2:], ctx["onehot_s"],
                                 P_t.detach(), ctx["W_src"], ctx["W_tgt"], weights)
        total = terms["d_fine"] + terms["d_coarse"]
        self.opt_d.zero_grad(set_to_none=True)
        if check:
            self.seg.zero_grad(set_to_none=True)
        total.backward()
        if check:
            leaked = [n for n, p in self.seg.named_parameters() if p.grad is not None and p.grad.abs().max() > 0]
            ctx["detached"] = not leaked
        self.opt_d.step()
        return {k: terms[k] for k in ("d1", "d2", "d_fine", "d_coarse")}

    def train_step(self, img_s, lab_s, img_t, check_isolation: bool = False) -> L.LossReport:
        """One alternating update on a single source crop and a single target crop.

        With ``check_isolation`` the report also carries ``es_kept_d``,
        ``d_kept_es`` and ``detached`` flags (1.0 = property held).
        """
        c = self.config
        weights = c.effective_weights()
        img_s, img_t = img_s.to(self.device, self.dtype), img_t.to(self.device, self.dtype)
        lab_s = lab_s.to(self.device)
        lr_es, lr_d = self._set_lr(self.step)
        H, W = img_s.shape[-2:]
        grid = PatchGrid.for_image(H, W, self.patch)
        self.seg.train()
        self.disc.train()

        feats_s, P_s = self.seg(img_s)
        feats_t, P_t = self.seg(img_t)
        for name, P in (("source", P_s), ("target", P_t)):
            if not torch.isfinite(P).all():
                raise TrainingError(f"non-finite {name} segmentation output at step {self.step}")
        ctx = {
            "weights": weights,
            "onehot_s": one_hot(lab_s, self.num_classes, dtype=self.dtype),
            "W_src": coarse_labels_from_truth(lab_s, grid, self.num_classes).to(self.dtype),
            "W_tgt": coarse_labels_from_prediction(P_t.detach(), grid, c.th_w),
        }
        flags = {}
        if c.update_order == "es_first":
            d_before = param_digest(self.disc) if check_isolation else None
            es_terms = self._es_update(img_s, lab_s, feats_s, feats_t, P_s, P_t, ctx)
            if check_isolation:
                flags["es_kept_d"] = float(param_digest(self.disc) == d_before)
                s_before = param_digest(self.seg)
            d_terms = self._d_update(img_s, feats_s, feats_t, P_t, ctx, check_isolation)
            if check_isolation:
                flags["d_kept_es"] = float(param_digest(self.seg) == s_before)
        else:
            s_before = param_digest(self.seg) if check_isolation else None
            d_terms = self._d_update(img_s, feats_s, feats_t, P_t, ctx, check_isolation)
            if check_isolation:
                flags["d_kept_es"] = float(param_digest(self.seg) == s_before)
                d_before = param_digest(self.disc)
            es_terms = self._es_update(img_s, lab_s, feats_s, feats_t, P_s, P_t, ctx)
            if check_isolation:
                flags["es_kept_d"] = float(param_digest(self.disc) == d_before)
        if check_isolation:
            flags["detached"] = float(ctx.get("detached", False))

        values = {k: float(v.detach()) for k, v in {**es_terms, **d_terms}.items()}
        for name, v in values.items():
            if not math.isfinite(v):
                raise TrainingError(f"non-finite loss term {name!r} at step {self.step}: {v}")
        terms = L.compose_totals(values)
        terms.update(lr_es=lr_es, lr_d=lr_d, **flags)
        self.step += 1
        return L.LossReport(terms)

    # -- checkpoints -----------------------------------------------------
    def save(self, path: Path | str) -> Path:
        extra = {
            "step": self.step,
            "opt_es": self.opt_es.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "config": self.config.to_dict(),
        }
        return save_checkpoint(path, self.seg, self.disc, extra=extra)

    def load(self, path: Path | str) -> None:
        seg, disc, payload = build_from_checkpoint(
            path, self.config.encoder, self.disc.spec, self.num_classes)
        self.seg.load_state_dict(seg.state_dict())
        self.disc.load_state_dict(disc.state_dict())
        extra = payload["extra"]
        if "opt_es" in extra:
            self.opt_es.load_state_dict(extra["opt_es"])
            self.opt_d.load_state_dict(extra["opt_d"])
        self.step = int(extra.get("step", 0))


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory for one command invocation."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory is locked by another command: {lock}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _format(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_log(path: Path | str) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(config: TrainConfig, source: Dataset, target: Dataset, run_dir: Path | str, *,
          resume: Optional[Path | str] = None, resolved_config: Optional[dict] = None,
          split: str = "train") -> Path:
    """Run ``config.iterations`` steps; writes ``log.csv``, checkpoints and the resolved config."""
    run_dir = Path(run_dir)
    if source.num_classes != target.num_classes:
        raise ConfigError("source and target class counts differ")
    if split not in target.splits or not target.splits[split]:
        raise ConfigError(f"target dataset has no samples in split {split!r}")
    if split not in source.splits or not source.splits[split]:
        raise ConfigError(f"source dataset has no samples in split {split!r}")
    for ds in (source, target):
        H, W = ds.splits[split][0].image.shape[:2]
        try:
            config.encoder.check_input(H, W)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    with run_lock(run_dir):
        trainer = Trainer(config, source.num_classes)
        stream = PairedStream(source.splits[split], target.splits[split],
                              (config.crop_height, config.crop_width), config.seed, trainer.dtype)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        resolved = resolved_config if resolved_config is not None else {"train": config.to_dict()}
        (run_dir / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

        log_path = run_dir / "log.csv"
        if resume is not None:
            trainer.load(resume)
            rows = [r for r in read_log(log_path) if r["step"] < trainer.step] if log_path.exists() else []
            mode = "w"
        else:
            rows, mode = [], "w"
        with deterministic_mode(config.deterministic), open(log_path, mode, newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in rows:
                writer.writerow([int(r["step"])] + [_format(r[k]) for k in LOG_COLUMNS[1:]])
            while trainer.step < config.iterations:
                step = trainer.step
                report = trainer.train_step(*stream.batch(step))
                writer.writerow([step] + [_format(report[k]) for k in LOG_COLUMNS[1:]])
                if config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                    fh.flush()
                    trainer.save(run_dir / "checkpoints" / f"step-{trainer.step}.ckpt")
                if step % 250 == 0:
                    log.info("step %d total_ES=%.4f total_D=%.4f", step, report["total_ES"], report["total_D"])
        trainer.save(run_dir / "checkpoints" / "final.ckpt")
    return run_dir
