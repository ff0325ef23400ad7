"""Segmentation and adaptation losses for class-conditional domain adaptation.

Shape conventions (all batched, channel-first):

* probability maps ``(B, C, H, W)``, label maps ``(B, H, W)``
* one-hot maps ``(B, C, H, W)``; ignore pixels are all-zero
* fine discriminator maps ``(B, H, W)`` or ``(B, 1, H, W)``, sigmoid scores
* coarse discriminator scores ``(B, C, rows, cols)``, raw (pre-activation)

Per-image quantities (dice, the class-conditional fine terms) are computed per
image and then averaged over the batch. Source/target domain labels are 0/1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

from .datagen import IGNORE_INDEX
from .labels import one_hot, pseudo_labels, uncertainty_mask

PROB_CLAMP = 1e-12
SOURCE, TARGET = 0, 1

COMPONENT_TERMS = (
    "seg_ce", "dice", "pred",
    "d1", "adv1", "d2", "adv2", "d_fine", "adv_fine",
    "d_coarse", "adv_coarse",
)
TOTAL_TERMS = ("total_D", "total_ES")


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.0003
    lambda_t: float = 0.0003
    lambda_c: float = 0.001
    lambda_n: float = 1.0
    alpha: float = 0.7
    beta: float = 0.5
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        for name in ("lambda_s", "lambda_t", "lambda_c", "lambda_n"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossReport:
    """Named scalar loss terms of one training step."""

    terms: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.terms[name]

    def as_row(self) -> dict[str, float]:
        return {k: self.terms[k] for k in COMPONENT_TERMS + TOTAL_TERMS if k in self.terms}


def compose_totals(terms: Mapping) -> dict:
    """Add ``total_D`` (fine + coarse discriminator) and ``total_ES`` (pred + both adversarial)."""
    missing = [k for k in ("d_fine", "d_coarse", "pred", "adv_fine", "adv_coarse") if k not in terms]
    if missing:
        raise ValueError(f"missing component terms: {', '.join(missing)}")
    out = dict(terms)
    out["total_D"] = terms["d_fine"] + terms["d_coarse"]
    out["total_ES"] = terms["pred"] + terms["adv_fine"] + terms["adv_coarse"]
    return out


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


def _check_scores(p: torch.Tensor, what: str) -> None:
    if torch.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise ValueError(f"{what} must be sigmoid scores in [0, 1]")


def bce(p: torch.Tensor, target: float | torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy of scores ``p`` against ``target``."""
    p = _clamp(p)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def _as_map(u: torch.Tensor) -> torch.Tensor:
    return u.squeeze(1) if u.dim() == 4 else u


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def seg_cross_entropy(probs: torch.Tensor, labels: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean of -log P[true class] over the non-ignore pixels."""
    labels = labels.long()
    valid = labels != ignore_index
    if not valid.any():
        raise ValueError("every pixel is ignore; nothing to score")
    idx = torch.where(valid, labels, torch.zeros_like(labels))
    p = probs.gather(1, idx.unsqueeze(1)).squeeze(1)
    nll = -torch.log(p.clamp_min(PROB_CLAMP))
    return nll[valid].mean()


def dice_loss(probs: torch.Tensor, truth_onehot: torch.Tensor, eps: float = 1e-5,
              valid: Optional[torch.Tensor] = None, skip_absent: bool = False) -> torch.Tensor:
    """One minus the class-averaged soft dice score.

    ``valid`` is an optional ``(B, H, W)`` mask that removes ignore pixels from
    the prediction sums too. With ``skip_absent`` the class average only runs
    over classes present in the ground truth of each image.
    """
    if probs.shape != truth_onehot.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(truth_onehot.shape)}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if valid is not None:
        probs = probs * valid.unsqueeze(1).to(probs.dtype)
    inter = (truth_onehot * probs).sum(dim=(2, 3))
    denom = (truth_onehot + probs).sum(dim=(2, 3)) + eps
    per_class = 2.0 * inter / denom
    if skip_absent:
        present = (truth_onehot.sum(dim=(2, 3)) > 0).to(per_class.dtype)
        score = (per_class * present).sum(1) / present.sum(1).clamp_min(1.0)
    else:
        score = per_class.mean(dim=1)
    return 1.0 - score.mean()


def blend_pred(seg_ce, dice, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * seg_ce + (1.0 - alpha) * dice


# ---------------------------------------------------------------------------
# fine-scale adaptation
# ---------------------------------------------------------------------------

def basic_domain_losses(map_s: torch.Tensor, map_t: torch.Tensor, weights: LossWeights):
    """Plain domain classification (d1) and its confusion counterpart (adv1)."""
    _check_scores(map_s, "source discriminator map")
    _check_scores(map_t, "target discriminator map")
    d1 = weights.lambda_s * bce(map_s, SOURCE).mean() + weights.lambda_t * bce(map_t, TARGET).mean()
    adv1 = weights.lambda_s * bce(map_s, TARGET).mean() + weights.lambda_t * bce(map_t, SOURCE).mean()
    return d1, adv1


def _class_masked_mean(per_pixel: torch.Tensor, onehot: torch.Tensor, eps: float) -> torch.Tensor:
    # per-class masked mean of a (B, H, W) map, averaged over classes -> (B,)
    num = (onehot * per_pixel.unsqueeze(1)).sum(dim=(2, 3))
    den = onehot.sum(dim=(2, 3)) + eps
    return (num / den).mean(dim=1)


def fine_cbce_source(U_s: torch.Tensor, truth_onehot: torch.Tensor, domain_label: int,
                     eps: float = 1e-5) -> torch.Tensor:
    """Class-conditional BCE: every class present in the image weighs the same."""
    U_s = _as_map(U_s)
    _check_scores(U_s, "fine source map")
    return _class_masked_mean(bce(U_s, domain_label), truth_onehot, eps).mean()


def fine_cbce_target(U_t: torch.Tensor, pseudo_onehot: torch.Tensor, mask: torch.Tensor,
                     domain_label: int, lambda_n: float = 1.0, eps: float = 1e-5) -> torch.Tensor:
    """Class-conditional BCE on pseudo-labels plus an up-weighted uncertain-pixel term."""
    U_t = _as_map(U_t)
    _check_scores(U_t, "fine target map")
    b = bce(U_t, domain_label)
    class_term = _class_masked_mean(b, pseudo_onehot, eps)
    uncertain = (mask * b).sum(dim=(1, 2)) / (mask.sum(dim=(1, 2)) + eps)
    return (class_term + lambda_n * uncertain).mean()


def fine_losses(U_s: torch.Tensor, U_t: torch.Tensor, truth_onehot: torch.Tensor,
                probs_t: torch.Tensor, weights: LossWeights, th_n: float = 0.5,
                class_conditional: bool = True) -> dict[str, torch.Tensor]:
    """d1/adv1, d2/adv2 and their beta blends on upsampled fine maps.

    With ``class_conditional=False`` the class-conditional pair is skipped
    (reported as 0) and the blend collapses to d1/adv1.
    """
    d1, adv1 = basic_domain_losses(_as_map(U_s), _as_map(U_t), weights)
    if not class_conditional:
        zero = torch.zeros((), dtype=d1.dtype, device=d1.device)
        return {"d1": d1, "adv1": adv1, "d2": zero, "adv2": zero, "d_fine": d1, "adv_fine": adv1}
    C = probs_t.shape[1]
    pseudo = one_hot(pseudo_labels(probs_t), C, dtype=probs_t.dtype)
    mask = uncertainty_mask(probs_t, th_n)
    eps = weights.epsilon

    def d2_like(src_label, tgt_label):
        return (weights.lambda_s * fine_cbce_source(U_s, truth_onehot, src_label, eps)
                + weights.lambda_t * fine_cbce_target(U_t, pseudo, mask, tgt_label, weights.lambda_n, eps))

    d2 = d2_like(SOURCE, TARGET)
    adv2 = d2_like(TARGET, SOURCE)
    beta = weights.beta
    return {
        "d1": d1, "adv1": adv1, "d2": d2, "adv2": adv2,
        "d_fine": beta * d1 + (1.0 - beta) * d2,
        "adv_fine": beta * adv1 + (1.0 - beta) * adv2,
    }


# ---------------------------------------------------------------------------
# coarse-scale class-conditional branch
# ---------------------------------------------------------------------------

def presence_scores(O_s: torch.Tensor, O_t: torch.Tensor) -> torch.Tensor:
    """O^c = sigmoid(O^s + O^t), per class."""
    return torch.sigmoid(O_s + O_t)


def domain_softmax(O_s: torch.Tensor, O_t: torch.Tensor) -> torch.Tensor:
    """O^st: per-class two-way softmax, last axis = (source, target)."""
    return torch.softmax(torch.stack([O_s, O_t], dim=-1), dim=-1)


def coarse_losses(Os_src: torch.Tensor, Ot_src: torch.Tensor,
                  Os_tgt: Optional[torch.Tensor], Ot_tgt: Optional[torch.Tensor],
                  W_src: torch.Tensor, W_tgt: Optional[torch.Tensor],
                  weights: LossWeights,
                  target_presence: Optional[torch.Tensor] = None) -> dict[str, torch.Tensor]:
    """Patch-level classification and class-conditional domain losses.

    The classification term BCE(O^c, W) is averaged over classes and over the
    patches of both domains, and appears unchanged in both the discriminator
    and the adversarial loss. The domain terms sum over classes weighted by the
    source presence bits W_src and, for target patches, by the detached
    presence score O^c (or ``target_presence`` when given), then average over
    patches. Pass ``None`` for the target arrays to score source patches only.
    """
    lam_s, lam_t, lam_c = weights.lambda_s, weights.lambda_t, weights.lambda_c
    Oc_src = presence_scores(Os_src, Ot_src)
    logst_src = torch.log_softmax(torch.stack([Os_src, Ot_src], dim=-1), dim=-1)

    cls_terms = [F.binary_cross_entropy_with_logits(Os_src + Ot_src, W_src, reduction="none").flatten()]
    d_src = (W_src * -logst_src[..., SOURCE]).sum(dim=1).mean()
    a_src = (W_src * -logst_src[..., TARGET]).sum(dim=1).mean()
    out = {"Oc_src": Oc_src, "Ost_src": logst_src.exp()}

    has_target = Os_tgt is not None
    if has_target:
        Oc_tgt = presence_scores(Os_tgt, Ot_tgt)
        logst_tgt = torch.log_softmax(torch.stack([Os_tgt, Ot_tgt], dim=-1), dim=-1)
        w_t = Oc_tgt.detach() if target_presence is None else target_presence
        d_tgt = (w_t * -logst_tgt[..., TARGET]).sum(dim=1).mean()
        a_tgt = (w_t * -logst_tgt[..., SOURCE]).sum(dim=1).mean()
        if W_tgt is not None:
            cls_terms.append(
                F.binary_cross_entropy_with_logits(Os_tgt + Ot_tgt, W_tgt, reduction="none").flatten()
            )
        out.update(Oc_tgt=Oc_tgt, Ost_tgt=logst_tgt.exp())
    else:
        d_tgt = a_tgt = torch.zeros((), dtype=Os_src.dtype, device=Os_src.device)

    cls = torch.cat(cls_terms).mean()
    out["cls"] = lam_c * cls
    out["d_coarse"] = lam_c * cls + lam_s * d_src + lam_t * d_tgt
    out["adv_coarse"] = lam_c * cls + lam_s * a_src + lam_t * a_tgt
    return out
