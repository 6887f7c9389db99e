"""Federation engine: server pretraining, client sampling, local training,
FedAvg / FedSWA aggregation, the frozen prior teacher and the centralised
self-training baseline.

Local training in a round is a pure function of the broadcast parameters,
the client's data and an RNG stream derived from ``(seed, round, client_id)``,
so clients may run on worker threads without changing any result.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import losses as L
from .augment import AugmentConfig, cutmix, make_views
from .evaluation import ConfusionMatrix
from .model import (
    TRAINABLE,
    DivergenceError,
    ModelDims,
    ParamSet,
    Pass,
    TeacherState,
    ema_update,
    init_params,
    loss_and_grad,
    predict_labels,
    predict_probs,
    sgd_step,
)
from .sched import ScheduleSpec, fedswa_lr, lambda_mclip, poly_lr
from .synthdata import ClientDataset

log = logging.getLogger(__name__)

AGGREGATORS = ("fedavg", "fedswa")
MODES = ("unsup", "semisup", "sup")
TEACHER_MODES = ("frozen", "ema")
THREADS_ENV = "FRIEREN_THREADS"


class FederationError(RuntimeError):
    """A client failed; the round was aborted without aggregating."""


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 200
    clients_per_round: int = 5
    local_epochs: int = 1
    batch_size: int = 2
    agg: str = "fedswa"
    mode: str = "unsup"
    gamma_swa: float = 1.0
    swa_weighting: str = "uniform"
    # learning rate
    schedule: str = "auto"            # auto | fedswa-linear | polynomial | constant
    lr: float = 0.05
    delta: float = 0.1
    power: float = 0.9
    rho: float = 0.0
    progress: str = "round"           # round | iteration
    # loss weights and thresholds
    lambda_cons: float = 1.0
    lambda_t: float = 1.0
    lambda_mclip: float = 0.1
    sup_weight: float = 1.0
    tau: float = 0.9
    tau_t: float = 0.9
    tau_p: float = 0.9
    ohem_keep: float = 1.0
    teacher: str = "frozen"
    gamma_ema: float = 0.996
    label_fraction: float = 0.25      # semisup only
    cutmix: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_every: int = 1
    threads: int = 0                  # 0 = take FRIEREN_THREADS, then auto

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.clients_per_round < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("clients_per_round, local_epochs and batch_size must be >= 1")
        if self.agg not in AGGREGATORS:
            raise ValueError(f"agg must be one of {AGGREGATORS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.teacher not in TEACHER_MODES:
            raise ValueError(f"teacher must be one of {TEACHER_MODES}")
        if self.swa_weighting not in ("uniform", "size"):
            raise ValueError("swa_weighting must be 'uniform' or 'size'")
        if self.progress not in ("round", "iteration"):
            raise ValueError("progress must be 'round' or 'iteration'")
        for name in ("gamma_swa", "gamma_ema", "label_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        # validates lr/delta/power/rho ranges
        ScheduleSpec(lr=self.lr, delta=self.delta, power=self.power, rho=self.rho)

    @property
    def schedule_kind(self) -> str:
        if self.schedule != "auto":
            return self.schedule
        return "fedswa-linear" if self.agg == "fedswa" else "polynomial"


def local_lr(cfg: FedConfig, t: int, i: int, n_iter: int) -> float:
    """Step size for local iteration ``i`` of ``n_iter`` in round ``t``.

    A polynomial decay over rounds sets the round's base rate; under the
    ``fedswa-linear`` schedule each round additionally decays linearly from
    that base to ``delta`` times it (a restart every round).
    """
    kind = cfg.schedule_kind
    if kind == "constant":
        return cfg.lr
    total = max(cfg.rounds, 1)
    s = t / total if cfg.progress == "round" else (t + i / n_iter) / total
    base = poly_lr(ScheduleSpec("polynomial", cfg.lr, power=cfg.power, rho=cfg.rho), min(s, 1.0))
    if kind == "polynomial":
        return base
    return fedswa_lr(ScheduleSpec("fedswa-linear", base, delta=cfg.delta, horizon=n_iter), i)


# ------------------------------------------------------------------ prior

@dataclass(frozen=True)
class PriorTeacher:
    """Frozen dense predictor used as a non-drifting label source."""

    params: ParamSet
    tau_p: float = 0.9

    def probs(self, img) -> np.ndarray:
        return predict_probs(self.params, img)

    def pseudo_labels(self, img) -> L.PseudoLabels:
        return L.make_pseudo_labels(self.probs(img), self.tau_p)


def make_prior_teacher(w_pretrained: ParamSet, tau_p: float = 0.9) -> PriorTeacher:
    return PriorTeacher(w_pretrained, tau_p)


# --------------------------------------------------------- loss assembly

@dataclass
class _Unlabeled:
    bundle: object
    pl: L.PseudoLabels
    pl_teacher: L.PseudoLabels | None
    pl_prior: L.PseudoLabels | None


def _mix(a: L.PseudoLabels | None, b: L.PseudoLabels | None, from_b):
    return None if a is None else L.mix_pseudo_labels(a, b, from_b)


def build_passes(student: ParamSet, images, rng: np.random.Generator, *, augment: AugmentConfig,
                 pl_source: ParamSet, tau: float, teacher: ParamSet | None = None,
                 tau_t: float = 0.9, prior: PriorTeacher | None = None, lambda_cons: float = 1.0,
                 lambda_t: float = 1.0, lambda_mclip: float = 0.0, sup_weight: float = 1.0,
                 ohem_keep: float = 1.0, use_cutmix: bool = True):
    """Passes for one minibatch plus bookkeeping for the loss breakdown.

    Labeled images get a supervised term on their weak view.  Unlabeled images
    get dual weak-to-strong consistency against pseudo-labels from
    ``pl_source`` and, when given, a teacher term and a prior term on both
    strong streams.  Within the batch, image ``j``'s strong views are CutMixed
    with image ``j+1``'s (labels mixed with the same box).
    """
    hidden = student.W1.shape[0]
    keep = augment.keep_prob
    passes: list[Pass] = []
    labeled, unlabeled = [], []
    for im in images:
        views = make_views(im.pixels, rng, hidden, augment)
        if im.labels is not None:
            labeled.append((views, views.geometry.apply(im.labels)))
        else:
            weak = views.weak
            unlabeled.append(_Unlabeled(
                views,
                L.make_pseudo_labels(predict_probs(pl_source, weak), tau),
                None if teacher is None else L.make_pseudo_labels(predict_probs(teacher, weak), tau_t),
                None if prior is None or lambda_mclip == 0.0 else prior.pseudo_labels(weak),
            ))
    n_l, n_u = len(labeled), len(unlabeled)
    for views, y in labeled:
        passes.append(Pass(views.weak, [(L.L_SUP, sup_weight / n_l, L.ce_objective(y, ohem_keep))]))
    masked = []
    for j, u in enumerate(unlabeled):
        s1, s2 = u.bundle.strong1, u.bundle.strong2
        pl, pl_t, pl_p = u.pl, u.pl_teacher, u.pl_prior
        if use_cutmix and n_u > 1:
            other = unlabeled[(j + 1) % n_u]
            cm = cutmix(u.bundle, other.bundle, rng)
            s1, s2 = cm.strong1, cm.strong2
            pl = L.mix_pseudo_labels(pl, other.pl, cm.from_b)
            pl_t = _mix(pl_t, other.pl_teacher, cm.from_b)
            pl_p = _mix(pl_p, other.pl_prior, cm.from_b)
        masked.append(pl.masked_fraction)
        for img, mask, cons_name, mclip_name in (
            (s1, u.bundle.dropout_mask1, L.L_CONS_S1, L.L_MCLIP_S1),
            (s2, u.bundle.dropout_mask2, L.L_CONS_S2, L.L_MCLIP_S2),
        ):
            objs = [(cons_name, lambda_cons / n_u, L.pseudo_objective(pl))]
            if pl_t is not None:
                objs.append((L.L_TEACHER, lambda_t / (2 * n_u), L.pseudo_objective(pl_t)))
            if pl_p is not None:
                objs.append((mclip_name, lambda_mclip / n_u, L.pseudo_objective(pl_p)))
            passes.append(Pass(img, objs, mask, keep))
    info = {"n_labeled": n_l, "n_unlabeled": n_u,
            "masked": float(np.mean(masked)) if masked else 0.0}
    return passes, info


def _breakdown(parts, info, *, sup_weight, lambda_t, lambda_cons, lambda_mclip,
               has_teacher) -> L.LossBreakdown:
    n_l, n_u = info["n_labeled"], info["n_unlabeled"]
    norm = {}
    for name, value in parts.items():
        if name == L.L_SUP:
            norm[name] = value / n_l
        elif name == L.L_TEACHER:
            norm[name] = value / (2 * n_u)
        else:
            norm[name] = value / n_u
    return L.combine(norm, w_sup=sup_weight if n_l else 0.0,
                     w_teacher=lambda_t if has_teacher and n_u else 0.0,
                     w_cons=lambda_cons if n_u else 0.0, w_mclip=lambda_mclip if n_u else 0.0,
                     masked_fraction=info["masked"])


def _mean_breakdown(items: Sequence[L.LossBreakdown]) -> L.LossBreakdown:
    if not items:
        return L.LossBreakdown()
    keys = [k for k in L.LossBreakdown.__dataclass_fields__ if not k.startswith("w_")]
    avg = {k: float(np.mean([getattr(b, k) for b in items])) for k in keys}
    return L.LossBreakdown(**avg)


# ------------------------------------------------------------ local train

@dataclass
class LocalStats:
    client_id: int
    n_steps: int
    lrs: list
    breakdown: L.LossBreakdown


def _client_rng(seed: int, t: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, client_id, 0x10C])


def prepare_client(client: ClientDataset, cfg: FedConfig) -> ClientDataset:
    """Reveal labels according to the training mode."""
    frac = {"unsup": 0.0, "semisup": cfg.label_fraction, "sup": 1.0}[cfg.mode]
    return client.with_label_fraction(frac, cfg.seed)


def local_train(w_broadcast: ParamSet, client: ClientDataset, cfg: FedConfig, t: int,
                prior: PriorTeacher | None = None) -> tuple[ParamSet, LocalStats]:
    """``cfg.local_epochs`` epochs of minibatch SGD on one client's data."""
    if client.n == 0:
        raise ValueError(f"client {client.client_id} is empty")
    if not w_broadcast.is_finite():
        raise DivergenceError("broadcast parameters are not finite")
    rng = _client_rng(cfg.seed, t, client.client_id)
    per_epoch = math.ceil(client.n / cfg.batch_size)
    n_iter = cfg.local_epochs * per_epoch
    lam_m = lambda_mclip(min(t, cfg.rounds), max(cfg.rounds, 1), cfg.lambda_mclip) if prior else 0.0
    teacher = TeacherState(w_broadcast, cfg.gamma_ema)
    w = w_broadcast
    lrs, parts_log = [], []
    i = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(client.n)
        for start in range(0, client.n, cfg.batch_size):
            batch = [client.images[j] for j in order[start:start + cfg.batch_size]]
            lr = local_lr(cfg, t, i, n_iter)
            passes, info = build_passes(
                w, batch, rng, augment=cfg.augment, pl_source=w, tau=cfg.tau,
                teacher=teacher.params, tau_t=cfg.tau_t, prior=prior,
                lambda_cons=cfg.lambda_cons, lambda_t=cfg.lambda_t, lambda_mclip=lam_m,
                sup_weight=cfg.sup_weight, ohem_keep=cfg.ohem_keep, use_cutmix=cfg.cutmix)
            if cfg.mode == "sup" and info["n_unlabeled"]:
                raise ValueError("sup mode requires labels on every image")
            lg = loss_and_grad(w, passes)
            w = sgd_step(w, lg.grads, lr)
            if cfg.teacher == "ema":
                teacher = ema_update(teacher, w)
            lrs.append(lr)
            parts_log.append(_breakdown(lg.parts, info, sup_weight=cfg.sup_weight,
                                        lambda_t=cfg.lambda_t, lambda_cons=cfg.lambda_cons,
                                        lambda_mclip=lam_m, has_teacher=True))
            i += 1
    if not w.is_finite():
        raise DivergenceError(f"client {client.client_id} diverged in round {t}")
    return w, LocalStats(client.client_id, i, lrs, _mean_breakdown(parts_log))


# ------------------------------------------------------------ aggregation

@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ParamSet
    n: int


def _as_updates(updates) -> list[ClientUpdate]:
    out = []
    for j, u in enumerate(updates):
        out.append(u if isinstance(u, ClientUpdate) else ClientUpdate(j, u[0], int(u[1])))
    if not out:
        raise ValueError("no client updates to aggregate")
    return sorted(out, key=lambda u: u.client_id)


def fedavg_weights(sizes) -> np.ndarray:
    n = np.asarray(sizes, dtype=np.float64)
    if np.any(n <= 0):
        raise ValueError("client sizes must be positive")
    return n / n.sum()


def _weighted(updates: list[ClientUpdate], alpha: np.ndarray) -> ParamSet:
    first = updates[0].params.as_dict()
    out = dict(first)
    for name in TRAINABLE:
        stack = np.stack([u.params.as_dict()[name] for u in updates])
        out[name] = np.sum(alpha.reshape((-1,) + (1,) * (stack.ndim - 1)) * stack, axis=0)
    for name in set(first) - set(TRAINABLE):
        if any(not np.array_equal(u.params.as_dict()[name], first[name]) for u in updates):
            raise ValueError(f"frozen array {name} differs between clients")
    return ParamSet.from_dict(out)


def agg_fedavg(updates) -> ParamSet:
    """Size-weighted average ``sum_k n_k/sum_j n_j * w_k`` over sorted client ids."""
    ups = _as_updates(updates)
    return _weighted(ups, fedavg_weights([u.n for u in ups]))


def uniform_average(updates) -> ParamSet:
    ups = _as_updates(updates)
    return _weighted(ups, np.full(len(ups), 1.0 / len(ups)))


def agg_fedswa(w_global: ParamSet, updates, gamma: float = 1.0,
               weighting: str = "uniform") -> ParamSet:
    """Server EMA towards the client average: ``w + gamma*(v - w)``.

    Evaluated as ``(1-gamma)*w + gamma*v`` so that ``gamma=1`` returns the
    average and ``gamma=0`` the current global model bit for bit.
    """
    v = uniform_average(updates) if weighting == "uniform" else agg_fedavg(updates)
    out = w_global.as_dict()
    vd = v.as_dict()
    for name in TRAINABLE:
        out[name] = (1.0 - gamma) * out[name] + gamma * vd[name]
    return ParamSet.from_dict(out)


def aggregate(cfg: FedConfig, w_global: ParamSet, updates) -> ParamSet:
    if cfg.agg == "fedavg":
        return agg_fedavg(updates)
    return agg_fedswa(w_global, updates, cfg.gamma_swa, cfg.swa_weighting)


# ----------------------------------------------------------- evaluation

def evaluate(params: ParamSet, images, n_classes: int | None = None) -> tuple[np.ndarray, float]:
    """Per-class IoU and mIoU of ``params`` on clean (unaugmented) labeled images."""
    cm = ConfusionMatrix(n_classes or params.T.shape[0])
    for im in images:
        cm.accumulate(im.labels, predict_labels(params, im.pixels))
    return cm.miou()


# ------------------------------------------------------------ the rounds

def sample_clients(n_clients: int, m: int, t: int, seed: int) -> list[int]:
    """``m`` distinct client ids drawn uniformly for round ``t``, sorted."""
    if not 1 <= m <= n_clients:
        raise ValueError("need 1 <= clients_per_round <= number of clients")
    rng = np.random.default_rng([seed, t, 0x5A])
    return sorted(int(k) for k in rng.choice(n_clients, size=m, replace=False))


def worker_count(cfg_threads: int = 0) -> int:
    n = cfg_threads or int(os.environ.get(THREADS_ENV, "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass
class RoundRecord:
    round: int
    mode: str
    agg: str
    lr: float
    l_sup: float
    l_cons: float
    l_teacher: float
    l_mclip: float
    masked_frac: float
    clients: tuple
    miou_eval: float | None = None
    per_class: tuple = ()


@dataclass
class FederationResult:
    history: list
    params: ParamSet


def _is_eval_round(t: int, cfg: FedConfig) -> bool:
    return (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1


def run_federation(cfg: FedConfig, w0: ParamSet, benchmark, prior: PriorTeacher | None = None,
                   use_prior: bool = True) -> FederationResult:
    """Algorithm loop: sample, broadcast, train locally, aggregate, evaluate.

    Only ``benchmark.clients`` and ``benchmark.eval_set`` are read.  When
    ``prior`` is None and ``use_prior`` is set, the prior teacher is a frozen
    snapshot of ``w0``.
    """
    clients = [prepare_client(c, cfg) for c in benchmark.clients]
    eval_set = benchmark.eval_set
    if prior is None and use_prior and cfg.lambda_mclip > 0:
        prior = make_prior_teacher(w0, cfg.tau_p)
    w = w0
    history: list[RoundRecord] = []
    workers = worker_count(cfg.threads)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            ids = sample_clients(len(clients), cfg.clients_per_round, t, cfg.seed)
            results = _run_clients(pool, w, [clients[k] for k in ids], cfg, t, prior)
            updates = [ClientUpdate(clients[k].client_id, wk, clients[k].n)
                       for k, (wk, _) in zip(ids, results)]
            w = aggregate(cfg, w, updates)
            stats = _mean_breakdown([s.breakdown for _, s in results])
            rec = RoundRecord(
                round=t, mode=cfg.mode, agg=cfg.agg, lr=local_lr(cfg, t, 0, 1),
                l_sup=stats.l_sup, l_cons=stats.l_cons, l_teacher=stats.l_teacher,
                l_mclip=stats.l_mclip, masked_frac=stats.masked_pixel_fraction,
                clients=tuple(clients[k].client_id for k in ids))
            if eval_set and _is_eval_round(t, cfg):
                per_class, m = evaluate(w, eval_set)
                rec.miou_eval, rec.per_class = m, tuple(float(x) for x in per_class)
            history.append(rec)
            log.info("round %d clients %s miou %s", t, rec.clients, rec.miou_eval)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationResult(history, w)


def _run_clients(pool, w, clients, cfg, t, prior):
    def job(c):
        return local_train(w, c, cfg, t, prior)

    futures = [(c, pool.submit(job, c) if pool else None) for c in clients]
    results = []
    for c, fut in futures:
        try:
            results.append(fut.result() if fut else job(c))
        except Exception as exc:
            if pool:
                for _, f in futures:
                    f.cancel()
            raise FederationError(f"round {t}: client {c.client_id} failed: {exc}") from exc
    return results


def cust(w0: ParamSet, pooled_images, cfg: FedConfig, eval_set=(),
         prior: PriorTeacher | None = None, use_prior: bool = True) -> FederationResult:
    """Centralised self-training on the pooled target data.

    Each of ``cfg.rounds`` passes runs the same local-training routine on the
    single pool; no aggregation takes place.
    """
    cfg = replace(cfg, mode="unsup")
    pool_client = ClientDataset(0, [im.unlabeled() for im in pooled_images])
    if prior is None and use_prior and cfg.lambda_mclip > 0:
        prior = make_prior_teacher(w0, cfg.tau_p)
    w = w0
    history = []
    for t in range(cfg.rounds):
        w, s = local_train(w, pool_client, cfg, t, prior)
        b = s.breakdown
        rec = RoundRecord(t, cfg.mode, "central", local_lr(cfg, t, 0, 1), b.l_sup, b.l_cons,
                          b.l_teacher, b.l_mclip, b.masked_pixel_fraction, (0,))
        if eval_set and _is_eval_round(t, cfg):
            per_class, m = evaluate(w, eval_set)
            rec.miou_eval, rec.per_class = m, tuple(float(x) for x in per_class)
        history.append(rec)
    return FederationResult(history, w)


# -------------------------------------------------------------- pretrain

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.1
    power: float = 0.9
    ohem_keep: float = 1.0
    unlabeled_fraction: float = 0.5
    lambda_cons: float = 1.0
    lambda_mclip: float = 0.1
    tau: float = 0.9
    gamma_ema: float = 0.996
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dims: ModelDims = field(default_factory=ModelDims)
    seed: int = 0


@dataclass
class PretrainResult:
    params: ParamSet
    epoch_losses: list


def pretrain(source, cfg: PretrainConfig = PretrainConfig(),
             prior: PriorTeacher | None = None) -> PretrainResult:
    """Server-side training on the labeled source set.

    With ``unlabeled_fraction > 0`` a seeded share of the source images loses
    its labels and is trained with dual consistency against an EMA teacher
    (plus the prior term when ``prior`` is given).
    """
    source = list(source)
    if not source:
        raise ValueError("pretraining needs a nonempty labeled set")
    w = init_params(cfg.seed, cfg.dims)
    rng = np.random.default_rng([cfg.seed, 0x9E7])
    n_unl = int(round(cfg.unlabeled_fraction * len(source)))
    hide = set(rng.permutation(len(source))[:n_unl].tolist())
    data = [im.unlabeled() if j in hide else im for j, im in enumerate(source)]
    teacher = TeacherState(w, cfg.gamma_ema)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        lr = poly_lr(ScheduleSpec("polynomial", cfg.lr, power=cfg.power), epoch / cfg.epochs)
        lam_m = lambda_mclip(epoch, cfg.epochs, cfg.lambda_mclip) if prior else 0.0
        order = rng.permutation(len(data))
        totals = []
        for start in range(0, len(data), cfg.batch_size):
            batch = [data[j] for j in order[start:start + cfg.batch_size]]
            passes, _ = build_passes(
                w, batch, rng, augment=cfg.augment, pl_source=teacher.params, tau=cfg.tau,
                prior=prior, lambda_cons=cfg.lambda_cons, lambda_mclip=lam_m,
                ohem_keep=cfg.ohem_keep)
            try:
                lg = loss_and_grad(w, passes)
            except DivergenceError as exc:
                raise DivergenceError(f"pretraining diverged at epoch {epoch}, "
                                      f"batch {start // cfg.batch_size}, lr {lr:g}") from exc
            w = sgd_step(w, lg.grads, lr)
            teacher = ema_update(teacher, w)
            totals.append(lg.loss)
        epoch_losses.append(float(np.mean(totals)))
    if len(epoch_losses) > 1:
        pairs = np.diff(epoch_losses) <= 0
        share = float(np.mean(pairs))
        if share < 0.8:
            log.warning("epoch loss non-increasing in only %.0f%% of epochs", 100 * share)
    return PretrainResult(w, epoch_losses)
