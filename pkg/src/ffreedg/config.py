"""Flat ``key = value`` run configuration with ``#`` comments and dotted keys.

Every key has a type, a default and a range check; unknown keys, malformed
lines and out-of-range values raise :class:`ConfigError` naming the line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .fed import AGGREGATORS, MODES, TEACHER_MODES, FedConfig, PretrainConfig
from .model import ModelDims
from .synthdata import SCENARIOS, _SCENARIO_ALIASES


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
    return check


def _range(lo=None, hi=None):
    def check(v):
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"must lie in [{lo if lo is not None else '-inf'}, "
                             f"{hi if hi is not None else 'inf'}]")
    return check


_unit = _range(0.0, 1.0)
_pos = _range(1)
_nonneg = _range(0)

# key: (type, default, check)
SCHEMA = {
    "run.seed": (int, 0, _nonneg),
    "data.scenario": (str, "clear2adverse", _choice(*SCENARIOS, *_SCENARIO_ALIASES)),
    "data.n_source": (int, 256, _pos),
    "data.n_eval": (int, 64, _pos),
    "data.n_clients": (int, 0, _nonneg),
    "data.imgs_per_client": (int, 12, _range(2)),
    "data.min_imgs": (int, 10, _pos),
    "data.max_imgs": (int, 45, _pos),
    "data.height": (int, 16, _pos),
    "data.width": (int, 16, _pos),
    "data.n_classes": (int, 5, _pos),
    "data.channels": (int, 6, _pos),
    "model.hidden": (int, 32, _pos),
    "model.embed": (int, 16, _pos),
    "pretrain.epochs": (int, 20, _nonneg),
    "pretrain.batch_size": (int, 4, _pos),
    "pretrain.lr": (float, 0.1, _range(0.0)),
    "pretrain.power": (float, 0.9, _range(0.5)),
    "pretrain.ohem_keep": (float, 1.0, _range(1e-9, 1.0)),
    "pretrain.unlabeled_fraction": (float, 0.5, _unit),
    "pretrain.lambda_cons": (float, 1.0, _range(0.0)),
    "pretrain.tau": (float, 0.9, _unit),
    "pretrain.gamma_ema": (float, 0.996, _unit),
    "fed.rounds": (int, 200, _nonneg),
    "fed.clients_per_round": (int, 5, _pos),
    "fed.local_epochs": (int, 1, _pos),
    "fed.batch_size": (int, 2, _pos),
    "fed.agg": (str, "fedswa", _choice(*AGGREGATORS)),
    "fed.mode": (str, "unsup", _choice(*MODES)),
    "fed.gamma_swa": (float, 1.0, _unit),
    "fed.swa_weighting": (str, "uniform", _choice("uniform", "size")),
    "fed.schedule": (str, "auto", _choice("auto", "fedswa-linear", "polynomial", "constant")),
    "fed.lr": (float, 0.05, _range(0.0)),
    "fed.delta": (float, 0.1, _unit),
    "fed.power": (float, 0.9, _range(0.5)),
    "fed.rho": (float, 0.0, _unit),
    "fed.progress": (str, "round", _choice("round", "iteration")),
    "fed.lambda_cons": (float, 1.0, _range(0.0)),
    "fed.lambda_t": (float, 1.0, _range(0.0)),
    "fed.lambda_mclip": (float, 0.1, _range(0.0)),
    "fed.sup_weight": (float, 1.0, _range(0.0)),
    "fed.tau": (float, 0.9, _unit),
    "fed.tau_t": (float, 0.9, _unit),
    "fed.tau_p": (float, 0.9, _range(0.0, 2.0)),
    "fed.ohem_keep": (float, 1.0, _range(1e-9, 1.0)),
    "fed.teacher": (str, "frozen", _choice(*TEACHER_MODES)),
    "fed.gamma_ema": (float, 0.996, _unit),
    "fed.label_fraction": (float, 0.25, _unit),
    "fed.cutmix": (_bool, True, None),
    "fed.eval_every": (int, 1, _pos),
    "cust.epochs": (int, 36, _nonneg),
    "augment.sigma_weak": (float, 0.02, _range(0.0)),
    "augment.sigma_strong": (float, 0.1, _range(0.0)),
    "augment.gain_low": (float, 0.7, _range(0.0)),
    "augment.gain_high": (float, 1.3, _range(0.0)),
    "augment.gray_prob": (float, 0.2, _unit),
    "augment.flip_prob": (float, 0.5, _unit),
    "augment.p_drop": (float, 0.5, _range(0.0, 0.99)),
}

REQUIRED = {
    "pretrain": ("data.scenario", "pretrain.epochs", "pretrain.lr"),
    "federate": ("data.scenario", "fed.rounds", "fed.clients_per_round", "fed.lr"),
    "cust": ("data.scenario", "cust.epochs", "fed.lr"),
    "evaluate": ("data.scenario",),
    "make-data": ("data.scenario",),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)   # key -> source line number
    path: str = "<defaults>"

    def __getitem__(self, key):
        return self.values[key] if key in self.values else SCHEMA[key][1]

    def require(self, keys) -> None:
        for key in keys:
            if key not in self.values:
                raise ConfigError(f"{self.path}: missing required key '{key}'")

    def set(self, key, value) -> None:
        typ, _, check = SCHEMA[key]
        if check:
            check(value)
        self.values[key] = value

    # typed views ---------------------------------------------------------
    def dims(self) -> ModelDims:
        return ModelDims(self["data.channels"], self["model.hidden"], self["model.embed"],
                         self["data.n_classes"])

    def augment(self) -> AugmentConfig:
        return AugmentConfig(**{k.split(".", 1)[1]: self[k] for k in SCHEMA
                                if k.startswith("augment.")})

    def benchmark_kwargs(self) -> dict:
        return dict(
            n_source=self["data.n_source"], n_eval=self["data.n_eval"],
            n_clients=self["data.n_clients"] or None,
            imgs_per_client=self["data.imgs_per_client"], min_imgs=self["data.min_imgs"],
            max_imgs=self["data.max_imgs"], h=self["data.height"], w=self["data.width"],
            n_classes=self["data.n_classes"], d_in=self["data.channels"])

    def pretrain_config(self, seed: int) -> PretrainConfig:
        kw = {k.split(".", 1)[1]: self[k] for k in SCHEMA if k.startswith("pretrain.")}
        return PretrainConfig(**kw, augment=self.augment(), dims=self.dims(), seed=seed)

    def fed_config(self, seed: int, **overrides) -> FedConfig:
        kw = {k.split(".", 1)[1]: self[k] for k in SCHEMA if k.startswith("fed.")}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return FedConfig(**kw, augment=self.augment(), seed=seed)


def parse_config(text: str, path: str = "<string>") -> RunConfig:
    cfg = RunConfig(path=path)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        if key in cfg.values:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}' "
                              f"(first set on line {cfg.lines[key]})")
        typ = SCHEMA[key][0]
        try:
            cfg.set(key, typ(value))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {exc}") from None
        cfg.lines[key] = lineno
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))


def default_config_text() -> str:
    """Every key with its default value, one per line."""
    out = []
    section = None
    for key, (typ, default, _) in SCHEMA.items():
        sec = key.split(".", 1)[0]
        if sec != section:
            if section is not None:
                out.append("")
            out.append(f"# {sec}")
            section = sec
        if typ is _bool:
            default = "true" if default else "false"
        out.append(f"{key} = {default}")
    return "\n".join(out) + "\n"
