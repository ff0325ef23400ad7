"""Analytic (autograd) vs central finite-difference gradient checks for every loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .. import losses as L
from ..labels import one_hot

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
REL_FLOOR = 1e-6


@dataclass
class GradCase:
    name: str
    fn: Callable[..., torch.Tensor]
    inputs: dict[str, np.ndarray]  # differentiated
    constants: dict  # passed through untouched


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    instances: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)


def analytic_grad(case: GradCase) -> dict[str, np.ndarray]:
    tensors = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True) for k, v in case.inputs.items()}
    out = case.fn(**tensors, **case.constants)
    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    return {
        k: (np.zeros_like(case.inputs[k]) if g is None else g.detach().numpy())
        for k, g in zip(tensors, grads)
    }


def numeric_grad(case: GradCase, step: float = DEFAULT_STEP) -> dict[str, np.ndarray]:
    def f(values: dict[str, np.ndarray]) -> float:
        with torch.no_grad():
            t = {k: torch.tensor(v, dtype=torch.float64) for k, v in values.items()}
            return float(case.fn(**t, **case.constants))

    out = {}
    for name, base in case.inputs.items():
        g = np.zeros_like(base)
        work = {k: v.copy() for k, v in case.inputs.items()}
        arr = work[name]
        for idx in np.ndindex(base.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = f(work)
            arr[idx] = orig - step
            fm = f(work)
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def max_relative_error(a: dict[str, np.ndarray], n: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for k in n:
        denom = np.maximum(np.maximum(np.abs(a[k]), np.abs(n[k])), REL_FLOOR)
        worst = max(worst, float(np.max(np.abs(a[k] - n[k]) / denom)))
    return worst


def check_case(case: GradCase, step: float = DEFAULT_STEP,
               grad_fn: Optional[Callable[[GradCase], dict]] = None) -> float:
    analytic = (grad_fn or analytic_grad)(case)
    return max_relative_error(analytic, numeric_grad(case, step))


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------

def _probs(rng, C, H, W):
    z = rng.normal(size=(1, C, H, W)) * 1.5
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _onehot(rng, C, H, W):
    labels = torch.from_numpy(rng.integers(0, C, size=(1, H, W)))
    return one_hot(labels, C, dtype=torch.float64).numpy()


def _scores(rng, *shape):
    return rng.uniform(0.05, 0.95, size=shape)


def make_cases(rng: np.random.Generator, C: int, H: int, W: int) -> list[GradCase]:
    """One random instance of every loss, keyed by a short name."""
    if min(C, H, W) < 1:
        raise ValueError(f"sizes must be positive, got C={C} H={H} W={W}")
    C = max(C, 2)
    wts = L.LossWeights(lambda_s=rng.uniform(0.2, 1), lambda_t=rng.uniform(0.2, 1),
                        lambda_c=rng.uniform(0.2, 1), lambda_n=rng.uniform(0.2, 2),
                        alpha=rng.uniform(), beta=rng.uniform(), epsilon=1e-5)
    labels = rng.integers(0, C, size=(1, H, W))
    probs_t = _probs(rng, C, H, W)
    rows, cols = 2, 2
    presence = rng.uniform(0.05, 0.95, size=(1, C, rows, cols))

    def seg_ce(probs):
        return L.seg_cross_entropy(probs, torch.from_numpy(labels))

    def dice(probs, onehot):
        return L.dice_loss(probs, onehot, eps=1e-5)

    def pred(seg_ce, dice):
        return L.blend_pred(seg_ce, dice, wts.alpha)

    def d1(map_s, map_t):
        return L.basic_domain_losses(map_s, map_t, wts)[0]

    def adv1(map_s, map_t):
        return L.basic_domain_losses(map_s, map_t, wts)[1]

    def cbce_s(U, onehot, l_d):
        return L.fine_cbce_source(U, onehot, l_d, 1e-5)

    def cbce_t(U, pseudo, mask, l_d):
        return L.fine_cbce_target(U, pseudo, mask, l_d, wts.lambda_n, 1e-5)

    def fine(U_s, U_t, onehot, key):
        return L.fine_losses(U_s, U_t, onehot, torch.from_numpy(probs_t), wts, th_n=0.5)[key]

    def coarse(Os_s, Ot_s, Os_t, Ot_t, W_src, key):
        W_tgt = (torch.from_numpy(presence) > 0.5).to(torch.float64)
        return L.coarse_losses(Os_s, Ot_s, Os_t, Ot_t, W_src, W_tgt, wts,
                               target_presence=torch.from_numpy(presence))[key]

    def totals(d_fine, d_coarse, pred, adv_fine, adv_coarse, key):
        terms = dict(d_fine=d_fine, d_coarse=d_coarse, pred=pred, adv_fine=adv_fine, adv_coarse=adv_coarse)
        return L.compose_totals(terms)[key]

    O = lambda: rng.normal(size=(1, C, rows, cols))
    W_src = (rng.uniform(size=(1, C, rows, cols)) > 0.5).astype(np.float64)
    # Binary maps (one-hot labels, masks, presence bits) are constants: a
    # finite-difference step on them leaves the domain the losses are defined on.
    binary = lambda a: torch.from_numpy(a)
    fine_in = lambda: {"U_s": _scores(rng, 1, H, W), "U_t": _scores(rng, 1, H, W)}
    coarse_in = lambda: {"Os_s": O(), "Ot_s": O(), "Os_t": O(), "Ot_t": O()}
    scal = lambda: rng.uniform(0.1, 2.0, size=())
    cases = [
        GradCase("seg_cross_entropy", seg_ce, {"probs": _probs(rng, C, H, W)}, {}),
        GradCase("dice_loss", dice, {"probs": _probs(rng, C, H, W)}, {"onehot": binary(_onehot(rng, C, H, W))}),
        GradCase("blend_pred", pred, {"seg_ce": scal(), "dice": scal()}, {}),
        GradCase("basic_d1", d1, {"map_s": _scores(rng, 1, H, W), "map_t": _scores(rng, 1, H, W)}, {}),
        GradCase("basic_adv1", adv1, {"map_s": _scores(rng, 1, H, W), "map_t": _scores(rng, 1, H, W)}, {}),
    ]
    for l_d in (0, 1):
        cases.append(GradCase(f"fine_cbce_source[l={l_d}]", cbce_s,
                              {"U": _scores(rng, 1, H, W)}, {"onehot": binary(_onehot(rng, C, H, W)), "l_d": l_d}))
        cases.append(GradCase(
            f"fine_cbce_target[l={l_d}]", cbce_t,
            {"U": _scores(rng, 1, H, W)},
            {"pseudo": binary(_onehot(rng, C, H, W)),
             "mask": binary((rng.uniform(size=(1, H, W)) < 0.4).astype(np.float64)), "l_d": l_d}))
    for key in ("d2", "adv2", "d_fine", "adv_fine"):
        cases.append(GradCase(f"fine_losses.{key}", fine, fine_in(),
                              {"onehot": binary(_onehot(rng, C, H, W)), "key": key}))
    for key in ("d_coarse", "adv_coarse"):
        cases.append(GradCase(f"coarse_losses.{key}", coarse, coarse_in(), {"W_src": binary(W_src), "key": key}))
    for key in ("total_D", "total_ES"):
        cases.append(GradCase(f"compose_totals.{key}", totals,
                              {k: scal() for k in ("d_fine", "d_coarse", "pred", "adv_fine", "adv_coarse")},
                              {"key": key}))
    return cases


def run_gradcheck(seed: int = 0, sizes: tuple[int, int, int] = (4, 6, 5), instances: int = 20,
                  step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL,
                  grad_fn: Optional[Callable[[GradCase], dict]] = None) -> list[GradResult]:
    """Check every loss on ``instances`` random inputs; one result per loss."""
    C, H, W = sizes
    if min(sizes) < 1:
        raise ValueError(f"sizes must be positive, got {sizes}")
    if instances < 1:
        raise ValueError("instances must be >= 1")
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for case in make_cases(rng, C, H, W):
            err = check_case(case, step, grad_fn)
            worst[case.name] = max(worst.get(case.name, 0.0), err)
    return [GradResult(name, err, instances, tol) for name, err in worst.items()]
