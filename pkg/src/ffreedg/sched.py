"""Learning-rate and loss-weight schedules."""

from __future__ import annotations

from dataclasses import dataclass

KINDS = ("fedswa-linear", "polynomial", "constant")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "polynomial"
    lr: float = 0.05          # eta_0 for fedswa-linear, eta_l for polynomial
    delta: float = 0.1        # final factor of the per-round linear decay
    power: float = 0.9
    rho: float = 0.0          # floor factor of the polynomial decay
    horizon: int = 1          # N local iterations or T rounds

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        # p >= 1 in the original schedule; 0.9 is what server pretraining uses
        if self.power < 0.5:
            raise ValueError("power must be >= 0.5")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")


def fedswa_lr(spec: ScheduleSpec, i: int) -> float:
    """Linear decay from ``lr`` towards ``delta*lr`` over ``horizon`` local steps."""
    n = spec.horizon
    if not 0 <= i < n:
        raise ValueError(f"local iteration {i} outside [0, {n})")
    f = i / n
    return spec.lr * (1 - f) + f * spec.delta * spec.lr


def poly_lr(spec: ScheduleSpec, progress: float) -> float:
    """``lr * [(1-s)^p + rho*(1-(1-s)^p)]`` for progress ``s`` in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    q = (1.0 - progress) ** spec.power
    return spec.lr * (q + spec.rho * (1.0 - q))


def lambda_mclip(t: float, total: float, lam0: float = 0.1) -> float:
    """Prior-distillation weight decaying linearly from ``lam0`` to 0."""
    if total <= 0:
        return 0.0
    if not 0 <= t <= total:
        raise ValueError("round outside [0, T]")
    return lam0 * (1.0 - t / total)
