"""Training objectives: supervised CE, pseudo-label consistency, teacher
self-training and frozen-prior distillation.

Every per-pixel term here is a weighted negative log-likelihood
``sum_i w_i * -log p_i[y_i]``; the ``*_objective`` factories return callables
that produce both the value and its gradient with respect to the logits so
they can be plugged into :func:`ffreedg.model.loss_and_grad`.  Pseudo-labels
are constants (no gradient flows into the network that produced them).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import argmax_with_conf, as_array

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

# names used for LossBreakdown fields and Pass objectives alike
L_SUP = "l_sup"
L_CONS_S1 = "l_cons_s1"
L_CONS_S2 = "l_cons_s2"
L_TEACHER = "l_teacher"
L_MCLIP_S1 = "l_mclip_s1"
L_MCLIP_S2 = "l_mclip_s2"
COMPONENTS = (L_SUP, L_CONS_S1, L_CONS_S2, L_TEACHER, L_MCLIP_S1, L_MCLIP_S2)


def _nll_terms(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = as_array(probs, ndim=2)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != p.shape[0]:
        raise ValueError("labels and probabilities are not aligned")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError("label out of range")
    py = p[np.arange(p.shape[0]), y]
    clamped = py < PROB_CLAMP
    if clamped.any():
        log.debug("clamped %d probabilities at %g", int(clamped.sum()), PROB_CLAMP)
    return -np.log(np.maximum(py, PROB_CLAMP)), ~clamped


def weighted_nll(probs, labels, weights) -> tuple[float, np.ndarray]:
    """``sum_i w_i * -log p_i[y_i]`` and its gradient w.r.t. the logits."""
    p = as_array(probs, ndim=2)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    nll, active = _nll_terms(p, labels)
    value = float(np.sum(w * nll))
    coef = (w * active)[:, None]
    grad = coef * p
    rows = np.arange(p.shape[0])
    grad[rows, np.asarray(labels).reshape(-1)] -= coef[:, 0]
    return value, grad


def _ohem_weights(per_pixel: np.ndarray, keep: float) -> np.ndarray:
    n = per_pixel.shape[0]
    if not 0.0 < keep <= 1.0:
        raise ValueError("ohem_keep must lie in (0, 1]")
    if keep >= 1.0:
        return np.full(n, 1.0 / n)
    k = math.ceil(keep * n)
    # stable sort on the negated loss: equal losses keep the lower pixel index
    hardest = np.argsort(-per_pixel, kind="stable")[:k]
    w = np.zeros(n)
    w[hardest] = 1.0 / k
    return w


def supervised_ce(probs, labels, ohem_keep: float = 1.0) -> float:
    """Mean pixel cross-entropy, optionally over only the hardest fraction."""
    return ce_objective(labels, ohem_keep)(probs)[0]


def ce_objective(labels, ohem_keep: float = 1.0):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)

    def objective(probs):
        nll, _ = _nll_terms(probs, y)
        return weighted_nll(probs, y, _ohem_weights(nll, ohem_keep))

    return objective


@dataclass(frozen=True)
class PseudoLabels:
    labels: np.ndarray
    conf: np.ndarray
    mask: np.ndarray
    threshold: float

    @property
    def masked_fraction(self) -> float:
        return float(np.mean(self.mask))


def make_pseudo_labels(weak_probs, tau: float) -> PseudoLabels:
    labels, conf = argmax_with_conf(weak_probs)
    return PseudoLabels(labels, conf, conf >= tau, tau)


def mix_pseudo_labels(a: PseudoLabels, b: PseudoLabels, from_b: np.ndarray) -> PseudoLabels:
    """Combine two label maps pixelwise with a CutMix provenance map."""
    sel = np.asarray(from_b, dtype=bool).reshape(-1)
    return PseudoLabels(
        np.where(sel, b.labels, a.labels),
        np.where(sel, b.conf, a.conf),
        np.where(sel, b.mask, a.mask),
        a.threshold,
    )


def pseudo_objective(pl: PseudoLabels):
    n = pl.labels.shape[0]
    weights = pl.mask.astype(np.float64) / n

    def objective(probs):
        return weighted_nll(probs, pl.labels, weights)

    return objective


def consistency_loss(strong_probs, pl: PseudoLabels) -> float:
    """Masked pseudo-label NLL, normalised by the total pixel count."""
    return pseudo_objective(pl)(strong_probs)[0]


def dual_consistency(strong1_probs, strong2_probs, pl: PseudoLabels) -> tuple[float, float]:
    return consistency_loss(strong1_probs, pl), consistency_loss(strong2_probs, pl)


def teacher_loss(student_strong_probs, teacher_weak_probs, tau_t: float) -> float:
    return consistency_loss(student_strong_probs, make_pseudo_labels(teacher_weak_probs, tau_t))


def prior_distill_loss(strong_probs, prior_weak_probs, tau_p: float) -> float:
    return consistency_loss(strong_probs, make_pseudo_labels(prior_weak_probs, tau_p))


@dataclass(frozen=True)
class LossBreakdown:
    l_sup: float = 0.0
    l_cons_s1: float = 0.0
    l_cons_s2: float = 0.0
    l_teacher: float = 0.0
    l_mclip_s1: float = 0.0
    l_mclip_s2: float = 0.0
    total: float = 0.0
    masked_pixel_fraction: float = 0.0
    w_sup: float = 0.0
    w_teacher: float = 0.0
    w_cons: float = 0.0
    w_mclip: float = 0.0

    @property
    def l_cons(self) -> float:
        return self.l_cons_s1 + self.l_cons_s2

    @property
    def l_mclip(self) -> float:
        return self.l_mclip_s1 + self.l_mclip_s2

    def recompute_total(self) -> float:
        return (self.w_sup * self.l_sup + self.w_teacher * self.l_teacher
                + self.w_cons * self.l_cons + self.w_mclip * self.l_mclip)


def combine(parts: Mapping[str, float], *, w_sup=0.0, w_teacher=0.0, w_cons=0.0,
            w_mclip=0.0, masked_fraction=0.0) -> LossBreakdown:
    vals = {name: float(parts.get(name, 0.0)) for name in COMPONENTS}
    b = LossBreakdown(**vals, masked_pixel_fraction=masked_fraction,
                      w_sup=w_sup, w_teacher=w_teacher, w_cons=w_cons, w_mclip=w_mclip)
    return LossBreakdown(**{**b.__dict__, "total": b.recompute_total()})


def centralized_objective(parts: Mapping[str, float], lambda_cons: float,
                          lambda_mclip: float, masked_fraction: float = 0.0) -> LossBreakdown:
    """``l_sup + lambda_cons*(cons_s1+cons_s2) + lambda_mclip*(mclip_s1+mclip_s2)``."""
    return combine(parts, w_sup=1.0, w_cons=lambda_cons, w_mclip=lambda_mclip,
                   masked_fraction=masked_fraction)


def unsupervised_objective(parts: Mapping[str, float], lambda_t: float, lambda_cons: float,
                           lambda_mclip: float = 0.0, masked_fraction: float = 0.0) -> LossBreakdown:
    """``lambda_t*l_teacher + lambda_cons*(cons_s1+cons_s2)``, plus the optional prior term."""
    return combine({k: v for k, v in parts.items() if k != L_SUP}, w_teacher=lambda_t,
                   w_cons=lambda_cons, w_mclip=lambda_mclip, masked_fraction=masked_fraction)
