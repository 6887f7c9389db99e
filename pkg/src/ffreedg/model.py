"""Per-pixel segmentation model with a cosine-similarity class head.

Each pixel's channels go through a two-layer MLP to a visual embedding
``v_i``; logits are ``scale * <v_i/|v_i|, t_c/|t_c|>`` against a frozen table
of class embeddings ``T``.  Gradients are derived by hand and certified
against central finite differences in the test-suite and by
``ffreedg gradcheck``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NORM_EPS, NumericError, l2_normalize, softmax_rows

TRAINABLE = ("W1", "b1", "W2", "b2", "scale")
FROZEN = ("T",)
ARRAY_NAMES = ("W1", "b1", "W2", "b2", "T", "scale")

INIT_SCALE = 10.0


class DivergenceError(NumericError):
    """Loss or parameters became non-finite."""


@dataclass(frozen=True)
class ModelDims:
    d_in: int = 6
    hidden: int = 32
    embed: int = 16
    n_classes: int = 5

    def __post_init__(self):
        for name in ("d_in", "hidden", "embed", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Model parameters.  Arrays are read-only; updates build new instances."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    T: np.ndarray
    scale: np.ndarray  # shape (1,)

    def __post_init__(self):
        for name in ARRAY_NAMES:
            a = np.array(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        h, d_in = self.W1.shape
        d, h2 = self.W2.shape
        if (h2 != h or self.b1.shape != (h,) or self.b2.shape != (d,)
                or self.T.ndim != 2 or self.T.shape[1] != d or self.scale.shape != (1,)):
            raise ValueError("inconsistent parameter shapes")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.W1.shape[1], self.W1.shape[0], self.W2.shape[0], self.T.shape[0])

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_NAMES}

    @classmethod
    def from_dict(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        missing = [n for n in ARRAY_NAMES if n not in arrays]
        if missing:
            raise KeyError(f"missing parameter arrays: {missing}")
        return cls(**{n: arrays[n] for n in ARRAY_NAMES})

    def replace(self, **arrays) -> "ParamSet":
        d = self.as_dict()
        d.update(arrays)
        return ParamSet.from_dict(d)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.as_dict().values())

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality of every array."""
        return all(np.array_equal(a, b) for a, b in zip(self.as_dict().values(), other.as_dict().values()))

    def max_abs_diff(self, other: "ParamSet") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in
                   zip(self.as_dict().values(), other.as_dict().values()))


@dataclass(frozen=True)
class TeacherState:
    params: ParamSet
    momentum: float = 0.996


def class_embeddings(n_classes: int, embed: int) -> np.ndarray:
    """Fixed unit vectors, one per class id, standing in for text embeddings."""
    rows = []
    for c in range(n_classes):
        g = np.random.default_rng([0x7E47, embed, c]).standard_normal(embed)
        rows.append(g)
    return l2_normalize(np.stack(rows), axis=1)


def init_params(seed: int, dims: ModelDims = ModelDims()) -> ParamSet:
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in, shape):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, size=shape)

    h, d = dims.hidden, dims.embed
    return ParamSet(
        W1=glorot(h, dims.d_in, (h, dims.d_in)),
        b1=glorot(h, dims.d_in, (h,)),
        W2=glorot(d, h, (d, h)),
        b2=glorot(d, h, (d,)),
        T=class_embeddings(dims.n_classes, d),
        scale=np.array([INIT_SCALE]),
    )


def _pixels(p: ParamSet, img) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    d_in = p.W1.shape[1]
    if x.shape[-1] != d_in:
        raise ValueError(f"image has {x.shape[-1]} channels, model expects {d_in}")
    return x.reshape(-1, d_in)


def _channel_scale(p: ParamSet, mask, keep_prob: float):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (p.W1.shape[0],):
        raise ValueError(f"dropout mask must have length {p.W1.shape[0]}")
    return m / keep_prob


@dataclass
class _Cache:
    x: np.ndarray
    h1: np.ndarray
    a: np.ndarray
    m: np.ndarray | None
    v_norm: np.ndarray
    u: np.ndarray
    t_hat: np.ndarray
    cos: np.ndarray


def _forward(p: ParamSet, img, mask=None, keep_prob: float = 0.5):
    x = _pixels(p, img)
    m = _channel_scale(p, mask, keep_prob)
    h1 = x @ p.W1.T + p.b1
    a = np.maximum(h1, 0.0)
    if m is not None:
        a = a * m
    v = a @ p.W2.T + p.b2
    v_norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    u = v / np.maximum(v_norm, NORM_EPS)
    t_hat = l2_normalize(p.T, axis=1)
    cos = u @ t_hat.T
    return p.scale[0] * cos, _Cache(x, h1, a, m, v_norm, u, t_hat, cos)


def forward(p: ParamSet, img, mask=None, keep_prob: float = 0.5) -> np.ndarray:
    """Logits of shape ``(H*W, C)`` for an ``H x W x d_in`` image.

    ``mask`` is an optional per-hidden-channel keep mask; kept activations are
    divided by ``keep_prob`` (inverted dropout).
    """
    return _forward(p, img, mask, keep_prob)[0]


def predict_probs(p: ParamSet, img, mask=None, keep_prob: float = 0.5) -> np.ndarray:
    return softmax_rows(forward(p, img, mask, keep_prob))


def predict_labels(p: ParamSet, img) -> np.ndarray:
    return np.argmax(forward(p, img), axis=1)


def _backward(p: ParamSet, c: _Cache, dz: np.ndarray) -> dict[str, np.ndarray]:
    s = p.scale[0]
    d_scale = np.sum(dz * c.cos)
    du = (s * dz) @ c.t_hat
    big = c.v_norm > NORM_EPS
    radial = np.sum(c.u * du, axis=1, keepdims=True)
    dv = np.where(big, (du - c.u * radial) / np.where(big, c.v_norm, 1.0), du / NORM_EPS)
    dW2 = dv.T @ c.a
    db2 = dv.sum(axis=0)
    da = dv @ p.W2
    if c.m is not None:
        da = da * c.m
    dh1 = da * (c.h1 > 0)
    return {
        "W1": dh1.T @ c.x,
        "b1": dh1.sum(axis=0),
        "W2": dW2,
        "b2": db2,
        "scale": np.array([d_scale]),
    }


# An objective maps per-pixel probabilities to (loss value, d loss / d logits).
Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class Pass:
    """One forward pass of the student and the loss terms read off its output.

    ``objectives`` holds ``(name, weight, objective)`` triples; the total loss
    is the weighted sum of all objective values over all passes.
    """

    img: np.ndarray
    objectives: list = field(default_factory=list)
    mask: np.ndarray | None = None
    keep_prob: float = 0.5


@dataclass
class LossGrad:
    loss: float
    grads: ParamSet
    parts: dict[str, float]


def zeros_like(p: ParamSet) -> ParamSet:
    return ParamSet.from_dict({k: np.zeros_like(v) for k, v in p.as_dict().items()})


def loss_and_grad(p: ParamSet, passes: Sequence[Pass], penalty=None) -> LossGrad:
    """Total loss over ``passes`` and its gradient w.r.t. every parameter.

    ``parts`` accumulates the unweighted value of each named objective.  The
    optional ``penalty(p)`` returns ``(value, {name: grad})`` for a term that
    depends on the parameters directly (weight decay, probes).  The frozen
    class table always receives an all-zero gradient.
    """
    acc = {k: np.zeros_like(v) for k, v in p.as_dict().items()}
    total = 0.0
    parts: dict[str, float] = {}
    if penalty is not None:
        value, grads = penalty(p)
        total += value
        parts["penalty"] = value
        for k, g in grads.items():
            if k in TRAINABLE:
                acc[k] += g
    for ps in passes:
        if not ps.objectives:
            continue
        logits, cache = _forward(p, ps.img, ps.mask, ps.keep_prob)
        probs = softmax_rows(logits)
        dz = np.zeros_like(logits)
        for name, weight, objective in ps.objectives:
            value, g = objective(probs)
            parts[name] = parts.get(name, 0.0) + value
            if weight != 0.0:
                total += weight * value
                dz += weight * g
        for k, g in _backward(p, cache, dz).items():
            acc[k] += g
    if not np.isfinite(total):
        raise DivergenceError("diverged")
    grads = ParamSet.from_dict(acc)
    if not grads.is_finite():
        raise DivergenceError("diverged")
    return LossGrad(total, grads, parts)


def sgd_step(p: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    out = p.as_dict()
    g = grads.as_dict()
    for name in TRAINABLE:
        out[name] = out[name] - lr * g[name]
    return ParamSet.from_dict(out)


def ema_update(teacher: TeacherState, student: ParamSet) -> TeacherState:
    g = teacher.momentum
    t = teacher.params.as_dict()
    s = student.as_dict()
    new = {k: g * t[k] + (1.0 - g) * s[k] for k in ARRAY_NAMES}
    return TeacherState(ParamSet.from_dict(new), g)
