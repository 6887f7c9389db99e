"""Binary container of named float64 arrays, used for model checkpoints and
dataset dumps.

Layout (little-endian)::

    b"FRZN"  u32 version  u32 count
    count x [ u32 name_len  name(utf-8)  u32 rank  u64 extent*rank  f64 payload ]
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .model import ParamSet

MAGIC = b"FRZN"
VERSION = 1


class CheckpointError(OSError):
    pass


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a FRZN container (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} (expected {VERSION})")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last array")
    return out


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load_arrays(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def save_params(path, params: ParamSet) -> None:
    save_arrays(path, params.as_dict())


def load_params(path) -> ParamSet:
    return ParamSet.from_dict(load_arrays(path))


# strings ride along as arrays of byte codes
def str_array(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_str(a: np.ndarray) -> str:
    return bytes(np.asarray(a, dtype=np.uint8).tolist()).decode("utf-8")


def benchmark_arrays(bench) -> dict[str, np.ndarray]:
    """Flatten a :class:`~ffreedg.synthdata.Benchmark` into named arrays."""
    out = {
        "meta/scenario": str_array(bench.scenario),
        "meta/source_domain": str_array(bench.source_domain),
        "meta/eval_domain": str_array(bench.eval_domain),
        "meta/n_classes": np.array([bench.n_classes]),
    }
    for dom in bench.domains.values():
        out[f"domain/{dom.id}/gain"] = np.array(dom.gain)
        out[f"domain/{dom.id}/bias"] = np.array(dom.bias)
        out[f"domain/{dom.id}/noise"] = np.array([dom.noise_sigma])
    for split, images in (("source", bench.source), ("eval", bench.eval_set)):
        out[f"{split}/pixels"] = np.stack([im.pixels for im in images])
        out[f"{split}/labels"] = np.stack([im.labels for im in images])
    for c in bench.clients:
        key = f"client/{c.client_id:04d}"
        out[f"{key}/pixels"] = np.stack([im.pixels for im in c.images])
        out[f"{key}/labels"] = np.stack(c.hidden_labels)
        out[f"{key}/domains"] = str_array(",".join(im.domain for im in c.images))
    return out


def benchmark_from_arrays(arrays: dict[str, np.ndarray]):
    from .synthdata import Benchmark, ClientDataset, DomainSpec, LabeledImage

    def labeled(px, lb, dom):
        return [LabeledImage(p, lb[j].astype(np.int64), dom) for j, p in enumerate(px)]

    src_dom = array_str(arrays["meta/source_domain"])
    eval_dom = array_str(arrays["meta/eval_domain"])
    domains = {}
    for name in arrays:
        parts = name.split("/")
        if parts[0] == "domain" and parts[2] == "gain":
            d = parts[1]
            domains[d] = DomainSpec(d, tuple(arrays[name]), tuple(arrays[f"domain/{d}/bias"]),
                                    float(arrays[f"domain/{d}/noise"][0]))
    clients = []
    for cid in sorted({int(n.split("/")[1]) for n in arrays if n.startswith("client/")}):
        key = f"client/{cid:04d}"
        doms = array_str(arrays[f"{key}/domains"]).split(",")
        labels = [lb.astype(np.int64) for lb in arrays[f"{key}/labels"]]
        images = [LabeledImage(p, None, d) for p, d in zip(arrays[f"{key}/pixels"], doms)]
        clients.append(ClientDataset(cid, images, tuple(sorted(set(doms))), labels))
    return Benchmark(
        scenario=array_str(arrays["meta/scenario"]),
        source=labeled(arrays["source/pixels"], arrays["source/labels"], src_dom),
        clients=clients,
        eval_set=labeled(arrays["eval/pixels"], arrays["eval/labels"], eval_dom),
        domains=domains,
        source_domain=src_dom,
        eval_domain=eval_dom,
        n_classes=int(arrays["meta/n_classes"][0]),
    )


def save_benchmark(path, bench) -> None:
    save_arrays(path, benchmark_arrays(bench))


def load_benchmark(path):
    return benchmark_from_arrays(load_arrays(path))
