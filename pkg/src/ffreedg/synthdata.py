"""Procedural multi-domain segmentation data and non-IID client partitioners.

A scene is a Voronoi label map; each class has a fixed channel signature and
a domain applies a per-channel affine distortion plus Gaussian noise:
``pixels = gain * (signature[label] + bias) + N(0, noise_sigma)``.

Two scenarios mirror the usual federated segmentation benchmarks:

* ``clear2adverse`` - clear-weather source, 28 clients each mixing 2-4 of four
  adverse conditions, evaluation on a held-out condition;
* ``syn2real`` - synthetic-looking source, 144 single-city clients of 10-45
  images, evaluation on an unseen city.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

H_DEFAULT = 16
W_DEFAULT = 16
D_IN_DEFAULT = 6
C_DEFAULT = 5

SCENARIOS = ("clear2adverse", "syn2real")
_SCENARIO_ALIASES = {"weather": "clear2adverse", "city": "syn2real"}


@dataclass(frozen=True)
class DomainSpec:
    id: str
    gain: tuple
    bias: tuple
    noise_sigma: float = 0.0

    def __post_init__(self):
        if any(g <= 0 for g in self.gain):
            raise ValueError("domain gains must be positive")
        if len(self.gain) != len(self.bias):
            raise ValueError("gain and bias lengths differ")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @classmethod
    def identity(cls, d_in: int = D_IN_DEFAULT, id: str = "identity") -> "DomainSpec":
        return cls(id, (1.0,) * d_in, (0.0,) * d_in, 0.0)


@dataclass(frozen=True, eq=False)
class LabeledImage:
    pixels: np.ndarray           # H x W x d_in
    labels: np.ndarray | None    # H x W class indices, None when unlabeled
    domain: str = ""

    def unlabeled(self) -> "LabeledImage":
        return replace(self, labels=None)


@dataclass(eq=False)
class ClientDataset:
    client_id: int
    images: list
    domains: tuple = ()
    # ground truth kept aside for diagnostics only; training never reads it
    hidden_labels: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.images:
            raise ValueError(f"client {self.client_id} has no images")

    @property
    def n(self) -> int:
        return len(self.images)

    def with_label_fraction(self, fraction: float, seed: int) -> "ClientDataset":
        """Keep ground truth on a seeded ``fraction`` of images (0 = unsupervised)."""
        truth = self.hidden_labels or [im.labels for im in self.images]
        if any(t is None for t in truth):
            raise ValueError(f"client {self.client_id} has no ground truth to reveal")
        n_keep = 0 if fraction <= 0 else min(self.n, max(1, round(fraction * self.n)))
        keep = set(np.random.default_rng([seed, 0x1AB, self.client_id])
                   .permutation(self.n)[:n_keep].tolist())
        images = [replace(im, labels=truth[j] if j in keep else None)
                  for j, im in enumerate(self.images)]
        return ClientDataset(self.client_id, images, self.domains, truth)


def class_signatures(n_classes: int = C_DEFAULT, d_in: int = D_IN_DEFAULT) -> np.ndarray:
    """The fixed ``C x d_in`` table of per-class channel means."""
    return np.random.default_rng([0x5167, n_classes, d_in]).standard_normal((n_classes, d_in))


def gen_label_map(seed: int, h: int = H_DEFAULT, w: int = W_DEFAULT,
                  n_classes: int = C_DEFAULT) -> np.ndarray:
    """Voronoi scene with two cells per class, so each class averages 1/C of the pixels."""
    if n_classes == 1:
        return np.zeros((h, w), dtype=np.int64)
    rng = np.random.default_rng([seed, 0x1AB3])
    n_cells = 2 * n_classes
    centers = rng.uniform(0, 1, size=(n_cells, 2)) * (h, w)
    owner = rng.permutation(np.arange(n_cells) % n_classes)
    yy, xx = np.mgrid[0:h, 0:w]
    grid = np.stack([yy + 0.5, xx + 0.5], axis=-1)
    d2 = np.sum((grid[:, :, None, :] - centers[None, None]) ** 2, axis=-1)
    return owner[np.argmin(d2, axis=-1)].astype(np.int64)


def render(labels: np.ndarray, domain: DomainSpec, seed: int,
           signatures: np.ndarray | None = None) -> LabeledImage:
    labels = np.asarray(labels, dtype=np.int64)
    d_in = len(domain.gain)
    if signatures is None:
        signatures = class_signatures(int(labels.max()) + 1 if labels.size else 1, d_in)
    gain = np.asarray(domain.gain)
    bias = np.asarray(domain.bias)
    pixels = gain * (signatures[labels] + bias)
    if domain.noise_sigma > 0:
        rng = np.random.default_rng([seed, 0x4E01])
        pixels = pixels + domain.noise_sigma * rng.standard_normal(pixels.shape)
    return LabeledImage(pixels, labels, domain.id)


# ---------------------------------------------------------------- domains

def _spec(id, gain, bias, sigma):
    return DomainSpec(id, tuple(float(g) for g in gain), tuple(float(b) for b in bias), sigma)


SOURCE_NOISE = 0.3
TARGET_NOISE = 0.3


def weather_domains(d_in: int = D_IN_DEFAULT) -> dict[str, DomainSpec]:
    """Clear source, four adverse client conditions and one unseen evaluation condition.

    Gains and biases were tuned so that a source-trained linear probe loses
    well over ten mIoU points on the evaluation condition while clients still
    carry enough signal for self-training to recover part of the gap.
    """
    rng = np.random.default_rng([0xACDC, d_in])
    tilt = rng.uniform(-1, 1, size=(6, d_in))
    n = TARGET_NOISE
    return {
        "clear": _spec("clear", np.ones(d_in), np.zeros(d_in), SOURCE_NOISE),
        "fog": _spec("fog", 0.65 - 0.15 * tilt[0], 0.55 + 0.25 * tilt[1], n),
        "night": _spec("night", 0.55 - 0.2 * tilt[2], -0.45 + 0.25 * tilt[3], n),
        "rain": _spec("rain", 0.85 - 0.25 * tilt[4], 0.3 * tilt[5], 1.2 * n),
        "snow": _spec("snow", 0.75 - 0.15 * tilt[1], 0.7 - 0.25 * tilt[0], n),
        # unseen at training time: dim like night, with its own colour cast
        "dusk": _spec("dusk", 0.5 - 0.15 * tilt[3], -0.35 + 0.3 * tilt[2], n),
    }


WEATHER_CLIENT_DOMAINS = ("fog", "night", "rain", "snow")
WEATHER_EVAL_DOMAIN = "dusk"


def city_domains(n_cities: int = 18, d_in: int = D_IN_DEFAULT) -> dict[str, DomainSpec]:
    """A synthetic-looking source, ``n_cities`` real-looking client cities and one unseen city."""
    rng = np.random.default_rng([0xC17, n_cities, d_in])
    base_gain = 0.8 + 0.2 * rng.uniform(-1, 1, d_in)
    base_bias = 0.4 * rng.uniform(-1, 1, d_in)
    out = {"synthetic": _spec("synthetic", 1.2 * np.ones(d_in), -0.1 * np.ones(d_in), 0.3)}
    for j in range(n_cities + 1):
        gain = base_gain * (1 + 0.1 * rng.uniform(-1, 1, d_in))
        bias = base_bias + 0.15 * rng.uniform(-1, 1, d_in)
        cid = f"city{j:02d}" if j < n_cities else "unseen_city"
        out[cid] = _spec(cid, gain, bias, 0.45)
    return out


# ------------------------------------------------------------- partitions

def _group_by_domain(pool) -> dict[str, list]:
    groups: dict[str, list] = {}
    for j, im in enumerate(pool):
        groups.setdefault(im.domain, []).append(j)
    return groups


def _client(cid, pool, idx):
    images = [pool[j] for j in idx]
    return ClientDataset(cid, [im.unlabeled() for im in images],
                         tuple(sorted({im.domain for im in images})),
                         [im.labels for im in images])


def partition_city_style(pool, n_clients: int = 144, min_imgs: int = 10, max_imgs: int = 45,
                         seed: int = 0) -> list[ClientDataset]:
    """Clients of ``U[min_imgs, max_imgs]`` images, each from a single domain."""
    rng = np.random.default_rng([seed, 0xC1])
    groups = _group_by_domain(pool)
    domains = sorted(groups)
    queues = {d: list(rng.permutation(groups[d])) for d in domains}
    order = rng.permutation(len(domains))
    clients = []
    for cid in range(n_clients):
        dom = domains[order[cid % len(domains)]]
        size = int(rng.integers(min_imgs, max_imgs + 1))
        q = queues[dom]
        if len(q) < size:
            raise ValueError(f"pool too small: domain {dom} cannot supply {size} images")
        idx, queues[dom] = q[:size], q[size:]
        clients.append(_client(cid, pool, idx))
    return clients


def partition_weather_style(pool, n_clients: int = 28, conditions: int = 4, seed: int = 0,
                            imgs_per_client: int = 12) -> list[ClientDataset]:
    """Clients mixing 2-4 distinct conditions, images split evenly across them."""
    rng = np.random.default_rng([seed, 0x3E])
    groups = _group_by_domain(pool)
    domains = sorted(groups)[:conditions]
    if len(domains) < 2:
        raise ValueError("weather partition needs at least two conditions")
    queues = {d: list(rng.permutation(groups[d])) for d in domains}
    clients = []
    for cid in range(n_clients):
        k = int(rng.integers(2, min(4, len(domains)) + 1))
        chosen = sorted(rng.choice(len(domains), size=k, replace=False).tolist())
        if imgs_per_client < k:
            raise ValueError("imgs_per_client smaller than the number of conditions")
        shares = [imgs_per_client // k + (1 if j < imgs_per_client % k else 0) for j in range(k)]
        idx = []
        for j, share in zip(chosen, shares):
            q = queues[domains[j]]
            if len(q) < share:
                raise ValueError(f"pool too small for condition {domains[j]}")
            idx += q[:share]
            queues[domains[j]] = q[share:]
        clients.append(_client(cid, pool, idx))
    return clients


# -------------------------------------------------------------- benchmark

@dataclass(eq=False)
class Benchmark:
    scenario: str
    source: list
    clients: list
    eval_set: list
    domains: dict
    source_domain: str
    eval_domain: str
    n_classes: int = C_DEFAULT


def normalize_scenario(name: str) -> str:
    name = _SCENARIO_ALIASES.get(name, name)
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}")
    return name


def _render_many(domain: DomainSpec, n: int, seed: int, tag: int, hw, n_classes, sig):
    out = []
    for j in range(n):
        s = int(np.random.SeedSequence([seed, tag, j]).generate_state(1)[0])
        out.append(render(gen_label_map(s, *hw, n_classes), domain, s, sig))
    return out


def make_benchmark(seed: int, scenario: str = "clear2adverse", *, n_source: int = 256,
                   n_eval: int = 64, n_clients: int | None = None, imgs_per_client: int = 12,
                   min_imgs: int = 10, max_imgs: int = 45, h: int = H_DEFAULT,
                   w: int = W_DEFAULT, n_classes: int = C_DEFAULT,
                   d_in: int = D_IN_DEFAULT) -> Benchmark:
    scenario = normalize_scenario(scenario)
    sig = class_signatures(n_classes, d_in)
    hw = (h, w)
    if scenario == "clear2adverse":
        domains = weather_domains(d_in)
        src, ev, client_doms = "clear", WEATHER_EVAL_DOMAIN, WEATHER_CLIENT_DOMAINS
        k = 28 if n_clients is None else n_clients
        per_dom = k * math.ceil(imgs_per_client / 2)
    else:
        domains = city_domains(d_in=d_in)
        src, ev = "synthetic", "unseen_city"
        client_doms = tuple(d for d in domains if d.startswith("city"))
        k = 144 if n_clients is None else n_clients
        per_dom = math.ceil(k / len(client_doms)) * max_imgs
    pool = []
    for j, dname in enumerate(client_doms):
        pool += _render_many(domains[dname], per_dom, seed, 100 + j, hw, n_classes, sig)
    if scenario == "clear2adverse":
        clients = partition_weather_style(pool, k, len(client_doms), seed, imgs_per_client)
    else:
        clients = partition_city_style(pool, k, min_imgs, max_imgs, seed)
    return Benchmark(
        scenario=scenario,
        source=_render_many(domains[src], n_source, seed, 1, hw, n_classes, sig),
        clients=clients,
        eval_set=_render_many(domains[ev], n_eval, seed, 2, hw, n_classes, sig),
        domains=domains,
        source_domain=src,
        eval_domain=ev,
        n_classes=n_classes,
    )
