"""Central finite-difference certification of the hand-derived gradients.

Each trial draws a small random model, images, dropout masks and
pseudo-label maps, assembles one loss term (or a combined objective) as a
list of passes, and compares every trainable gradient entry with a central
difference of step ``1e-5``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .model import TRAINABLE, ModelDims, ParamSet, Pass, _forward, init_params, loss_and_grad

STEP = 1e-5
TOL = 1e-4
FLOOR = 1e-8

TERMS = ("l_sup", "l_sup_ohem", "l_cons_s1", "l_cons_s2", "l_teacher", "l_mclip",
         "l_cent", "l_unsup")


@dataclass
class TrialResult:
    term: str
    trial: int
    max_rel_error: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOL


def _random_pl(rng, n_pix, n_classes, tau):
    probs = rng.dirichlet(np.full(n_classes, 0.3), size=n_pix)
    return L.make_pseudo_labels(probs, tau)


def _random_case(rng):
    dims = ModelDims(d_in=int(rng.integers(2, 5)), hidden=int(rng.integers(3, 7)),
                     embed=int(rng.integers(2, 6)), n_classes=int(rng.integers(2, 6)))
    p = init_params(int(rng.integers(1 << 30)), dims)
    p = p.replace(scale=np.array([rng.uniform(1.0, 5.0)]),
                  b2=p.b2 + rng.normal(0, 0.3, dims.embed))
    h = w = 3
    imgs = [rng.normal(0, 1, (h, w, dims.d_in)) for _ in range(3)]
    mask1 = rng.random(dims.hidden) < 0.5
    masks = (mask1, ~mask1)
    return p, dims, imgs, masks, h * w


def _passes_for(term, rng, dims, imgs, masks, n_pix):
    c = dims.n_classes
    labels = rng.integers(0, c, n_pix)
    pl = _random_pl(rng, n_pix, c, 0.3)
    pl_t = _random_pl(rng, n_pix, c, 0.4)
    pl_p = _random_pl(rng, n_pix, c, 0.6)
    lam = {"cons": rng.uniform(0.5, 2), "t": rng.uniform(0.5, 2), "mclip": rng.uniform(0.05, 0.5)}
    sup = Pass(imgs[0], [(L.L_SUP, 1.0, L.ce_objective(labels))])
    s1 = Pass(imgs[1], [], masks[0])
    s2 = Pass(imgs[2], [], masks[1])
    if term == "l_sup":
        return [sup]
    if term == "l_sup_ohem":
        return [Pass(imgs[0], [(L.L_SUP, 1.0, L.ce_objective(labels, 0.4))])]
    if term == "l_cons_s1":
        s1.objectives.append((L.L_CONS_S1, 1.0, L.pseudo_objective(pl)))
        return [s1]
    if term == "l_cons_s2":
        s2.objectives.append((L.L_CONS_S2, 1.0, L.pseudo_objective(pl)))
        return [s2]
    if term == "l_teacher":
        s1.objectives.append((L.L_TEACHER, 0.5, L.pseudo_objective(pl_t)))
        s2.objectives.append((L.L_TEACHER, 0.5, L.pseudo_objective(pl_t)))
        return [s1, s2]
    if term == "l_mclip":
        s1.objectives.append((L.L_MCLIP_S1, 1.0, L.pseudo_objective(pl_p)))
        s2.objectives.append((L.L_MCLIP_S2, 1.0, L.pseudo_objective(pl_p)))
        return [s1, s2]
    for s, cons in ((s1, L.L_CONS_S1), (s2, L.L_CONS_S2)):
        s.objectives.append((cons, lam["cons"], L.pseudo_objective(pl)))
        s.objectives.append((L.L_MCLIP_S1 if s is s1 else L.L_MCLIP_S2, lam["mclip"],
                             L.pseudo_objective(pl_p)))
        if term == "l_unsup":
            s.objectives.append((L.L_TEACHER, lam["t"] / 2, L.pseudo_objective(pl_t)))
    if term == "l_cent":
        return [sup, s1, s2]
    if term == "l_unsup":
        return [s1, s2]
    raise ValueError(f"unknown term {term!r}")


def _near_kink(p: ParamSet, passes, margin=1e-3) -> bool:
    """True if some ReLU pre-activation sits within ``margin`` of zero."""
    for ps in passes:
        _, cache = _forward(p, ps.img, ps.mask, ps.keep_prob)
        if np.min(np.abs(cache.h1)) < margin:
            return True
    return False


def numerical_grad(p: ParamSet, passes, step: float = STEP) -> dict[str, np.ndarray]:
    out = {}
    arrays = p.as_dict()
    for name in TRAINABLE:
        base = arrays[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += step
            minus[idx] -= step
            lp = loss_and_grad(p.replace(**{name: plus}), passes).loss
            lm = loss_and_grad(p.replace(**{name: minus}), passes).loss
            g[idx] = (lp - lm) / (2 * step)
        out[name] = g
    return out


def relative_errors(analytic: ParamSet, numeric: dict[str, np.ndarray]) -> np.ndarray:
    errs = []
    a = analytic.as_dict()
    for name, fd in numeric.items():
        an = a[name].reshape(-1)
        fd = fd.reshape(-1)
        big = np.maximum(np.abs(an), np.abs(fd))
        keep = big >= FLOOR
        errs.append(np.abs(an - fd)[keep] / big[keep])
    return np.concatenate(errs) if errs else np.zeros(0)


def check_term(term: str, trial: int, seed: int = 0) -> TrialResult:
    rng = np.random.default_rng([seed, trial, TERMS.index(term) if term in TERMS else 99])
    while True:
        p, dims, imgs, masks, n_pix = _random_case(rng)
        passes = _passes_for(term, rng, dims, imgs, masks, n_pix)
        if not _near_kink(p, passes):
            break
    lg = loss_and_grad(p, passes)
    if np.any(lg.grads.T != 0):
        raise AssertionError("frozen class table received a gradient")
    errs = relative_errors(lg.grads, numerical_grad(p, passes))
    return TrialResult(term, trial, float(errs.max()) if errs.size else 0.0, int(errs.size))


def run_gradcheck(trials: int = 20, seed: int = 0, terms=TERMS) -> list[TrialResult]:
    return [check_term(term, k, seed) for term in terms for k in range(trials)]
