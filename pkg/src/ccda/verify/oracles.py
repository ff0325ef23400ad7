"""Naive nested-loop reference implementations of every loss.

These take plain numpy arrays (same layouts as :mod:`ccda.losses`) and use
scalar ``math`` operations only, so they share no code path with the
vectorized versions.
"""
from __future__ import annotations

import math

import numpy as np

CLAMP = 1e-12


def _clampp(p: float) -> float:
    return min(max(p, CLAMP), 1.0 - CLAMP)


def bce(p: float, t: float) -> float:
    p = _clampp(p)
    return -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))


def _map(u: np.ndarray) -> np.ndarray:
    return u[:, 0] if u.ndim == 4 else u


def seg_cross_entropy(probs, labels, ignore_index=255) -> float:
    B, C, H, W = probs.shape
    total, count = 0.0, 0
    for b in range(B):
        for h in range(H):
            for w in range(W):
                y = int(labels[b, h, w])
                if y == ignore_index:
                    continue
                total += -math.log(max(float(probs[b, y, h, w]), CLAMP))
                count += 1
    if count == 0:
        raise ValueError("all pixels ignored")
    return total / count


def dice_loss(probs, onehot, eps=1e-5) -> float:
    B, C, H, W = probs.shape
    acc = 0.0
    for b in range(B):
        score = 0.0
        for c in range(C):
            inter = 0.0
            denom = 0.0
            for h in range(H):
                for w in range(W):
                    y = float(onehot[b, c, h, w])
                    p = float(probs[b, c, h, w])
                    inter += y * p
                    denom += y + p
            score += 2.0 * inter / (denom + eps)
        acc += 1.0 - score / C
    return acc / B


def blend_pred(seg_ce, dice, alpha) -> float:
    return alpha * seg_ce + (1.0 - alpha) * dice


def _mean_bce(u, t) -> float:
    flat = np.asarray(u, dtype=np.float64).ravel()
    return sum(bce(float(x), t) for x in flat) / len(flat)


def basic_domain_losses(map_s, map_t, lambda_s, lambda_t):
    d1 = lambda_s * _mean_bce(map_s, 0) + lambda_t * _mean_bce(map_t, 1)
    adv1 = lambda_s * _mean_bce(map_s, 1) + lambda_t * _mean_bce(map_t, 0)
    return d1, adv1


def fine_cbce_source(U, onehot, l_d, eps=1e-5) -> float:
    U = _map(U)
    B, C, H, W = onehot.shape
    acc = 0.0
    for b in range(B):
        per = 0.0
        for c in range(C):
            num = den = 0.0
            for h in range(H):
                for w in range(W):
                    y = float(onehot[b, c, h, w])
                    num += y * bce(float(U[b, h, w]), l_d)
                    den += y
            per += num / (den + eps)
        acc += per / C
    return acc / B


def fine_cbce_target(U, pseudo_onehot, mask, l_d, lambda_n=1.0, eps=1e-5) -> float:
    U = _map(U)
    B, C, H, W = pseudo_onehot.shape
    acc = fine_cbce_source(U, pseudo_onehot, l_d, eps) * B
    for b in range(B):
        num = den = 0.0
        for h in range(H):
            for w in range(W):
                n = float(mask[b, h, w])
                num += n * bce(float(U[b, h, w]), l_d)
                den += n
        acc += lambda_n * num / (den + eps)
    return acc / B


def argmax_labels(probs) -> np.ndarray:
    B, C, H, W = probs.shape
    out = np.zeros((B, H, W), dtype=np.int64)
    for b in range(B):
        for h in range(H):
            for w in range(W):
                best, best_c = -math.inf, 0
                for c in range(C):
                    if probs[b, c, h, w] > best:
                        best, best_c = probs[b, c, h, w], c
                out[b, h, w] = best_c
    return out


def uncertainty_mask(probs, th_n) -> np.ndarray:
    B, C, H, W = probs.shape
    out = np.zeros((B, H, W))
    for b in range(B):
        for h in range(H):
            for w in range(W):
                out[b, h, w] = 1.0 if max(probs[b, :, h, w]) < th_n else 0.0
    return out


def one_hot(labels, C, ignore_index=255) -> np.ndarray:
    B, H, W = labels.shape
    out = np.zeros((B, C, H, W))
    for b in range(B):
        for h in range(H):
            for w in range(W):
                y = int(labels[b, h, w])
                if y != ignore_index:
                    out[b, y, h, w] = 1.0
    return out


def fine_losses(U_s, U_t, onehot_s, probs_t, lambda_s, lambda_t, lambda_n, beta, th_n, eps=1e-5):
    d1, adv1 = basic_domain_losses(_map(U_s), _map(U_t), lambda_s, lambda_t)
    pseudo = one_hot(argmax_labels(probs_t), probs_t.shape[1])
    mask = uncertainty_mask(probs_t, th_n)
    d2 = (lambda_s * fine_cbce_source(U_s, onehot_s, 0, eps)
          + lambda_t * fine_cbce_target(U_t, pseudo, mask, 1, lambda_n, eps))
    adv2 = (lambda_s * fine_cbce_source(U_s, onehot_s, 1, eps)
            + lambda_t * fine_cbce_target(U_t, pseudo, mask, 0, lambda_n, eps))
    return {
        "d1": d1, "adv1": adv1, "d2": d2, "adv2": adv2,
        "d_fine": beta * d1 + (1 - beta) * d2,
        "adv_fine": beta * adv1 + (1 - beta) * adv2,
    }


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def _two_way_ce(a: float, b: float, k: int) -> float:
    # -log softmax([a, b])[k]
    m = max(a, b)
    lse = m + math.log(math.exp(a - m) + math.exp(b - m))
    return lse - (a if k == 0 else b)


def coarse_losses(Os_src, Ot_src, Os_tgt, Ot_tgt, W_src, W_tgt, lambda_s, lambda_t, lambda_c,
                  target_presence=None):
    """Loop version of the coarse-branch losses; same averaging conventions."""
    cls_sum, cls_n = 0.0, 0
    B, C, R, K = Os_src.shape
    d_s = a_s = 0.0
    for b in range(B):
        for r in range(R):
            for k in range(K):
                for c in range(C):
                    s, t = float(Os_src[b, c, r, k]), float(Ot_src[b, c, r, k])
                    w = float(W_src[b, c, r, k])
                    cls_sum += bce(_sigmoid(s + t), w)
                    cls_n += 1
                    d_s += w * _two_way_ce(s, t, 0)
                    a_s += w * _two_way_ce(s, t, 1)
    d_s /= B * R * K
    a_s /= B * R * K
    d_t = a_t = 0.0
    if Os_tgt is not None:
        Bt, _, Rt, Kt = Os_tgt.shape
        for b in range(Bt):
            for r in range(Rt):
                for k in range(Kt):
                    for c in range(C):
                        s, t = float(Os_tgt[b, c, r, k]), float(Ot_tgt[b, c, r, k])
                        w = (_sigmoid(s + t) if target_presence is None
                             else float(target_presence[b, c, r, k]))
                        if W_tgt is not None:
                            cls_sum += bce(_sigmoid(s + t), float(W_tgt[b, c, r, k]))
                            cls_n += 1
                        d_t += w * _two_way_ce(s, t, 1)
                        a_t += w * _two_way_ce(s, t, 0)
        d_t /= Bt * Rt * Kt
        a_t /= Bt * Rt * Kt
    cls = cls_sum / cls_n
    return {
        "cls": lambda_c * cls,
        "d_coarse": lambda_c * cls + lambda_s * d_s + lambda_t * d_t,
        "adv_coarse": lambda_c * cls + lambda_s * a_s + lambda_t * a_t,
    }


def patch_presence_from_labels(labels, C, patch_h, patch_w, ignore_index=255) -> np.ndarray:
    B, H, W = labels.shape
    rows, cols = -(-H // patch_h), -(-W // patch_w)
    out = np.zeros((B, C, rows, cols))
    for b in range(B):
        for h in range(H):
            for w in range(W):
                y = int(labels[b, h, w])
                if y != ignore_index:
                    out[b, y, h // patch_h, w // patch_w] = 1.0
    return out


def patch_presence_from_probs(probs, patch_h, patch_w, th_w) -> np.ndarray:
    B, C, H, W = probs.shape
    rows, cols = -(-H // patch_h), -(-W // patch_w)
    out = np.zeros((B, C, rows, cols))
    for b in range(B):
        for c in range(C):
            for h in range(H):
                for w in range(W):
                    if probs[b, c, h, w] > th_w:
                        out[b, c, h // patch_h, w // patch_w] = 1.0
    return out
