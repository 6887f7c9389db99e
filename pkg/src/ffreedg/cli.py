"""Command-line runner: ``ffreedg <subcommand> ...``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 numeric
divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_benchmark, load_params, save_benchmark, save_params
from .config import REQUIRED, ConfigError, RunConfig, default_config_text, load_config
from .fed import FederationError, cust, evaluate, pretrain, run_federation
from .gradcheck import TOL, TERMS, run_gradcheck
from .model import DivergenceError
from .synthdata import make_benchmark, normalize_scenario

log = logging.getLogger("ffreedg")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

CSV_COLUMNS = ("round", "mode", "agg", "lr", "l_sup", "l_cons", "l_teacher", "l_mclip",
               "masked_frac", "miou_eval")


def fmt(x) -> str:
    """Locale-independent decimal with 17 significant digits."""
    return format(float(x), ".17g")


def write_metrics_csv(path, history, n_classes: int) -> None:
    rows = [r for r in history if r.miou_eval is not None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS + tuple(f"iou_{c}" for c in range(n_classes)) + ("clients",))
        for r in rows:
            w.writerow([r.round, r.mode, r.agg] + [fmt(getattr(r, k)) for k in CSV_COLUMNS[3:]]
                       + [fmt(x) for x in r.per_class]
                       + [";".join(str(c) for c in r.clients)])


def _load_cfg(args, command: str) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.require(REQUIRED.get(command, ()))
    return cfg


def _seed(args, cfg: RunConfig) -> int:
    return cfg["run.seed"] if args.seed is None else args.seed


def _benchmark(args, cfg: RunConfig, seed: int):
    if getattr(args, "data", None):
        return load_benchmark(args.data)
    return make_benchmark(seed, cfg["data.scenario"], **cfg.benchmark_kwargs())


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_text("")
    probe.unlink()
    return out


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args, "pretrain")
    seed = _seed(args, cfg)
    out = _outdir(args.out)
    bench = _benchmark(args, cfg, seed)
    t0 = time.time()
    res = pretrain(bench.source, cfg.pretrain_config(seed))
    save_params(out / "checkpoint.frzn", res.params)
    with open(out / "pretrain_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for e, loss in enumerate(res.epoch_losses):
            w.writerow((e, fmt(loss)))
    per_class, m = evaluate(res.params, bench.eval_set, bench.n_classes)
    with open(out / "pretrain_eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("split", "miou") + tuple(f"iou_{c}" for c in range(len(per_class))))
        w.writerow(["eval", fmt(m)] + [fmt(x) for x in per_class])
    print(f"pretrained {len(res.epoch_losses)} epochs in {time.time() - t0:.1f}s; "
          f"source-only eval mIoU {fmt(m)}")
    return EXIT_OK


def _finish_run(out: Path, result, n_classes: int) -> None:
    save_params(out / "final.frzn", result.params)
    write_metrics_csv(out / "metrics.csv", result.history, n_classes)
    last = [r for r in result.history if r.miou_eval is not None]
    if last:
        print(f"final eval mIoU {fmt(last[-1].miou_eval)}")


def cmd_federate(args) -> int:
    cfg = _load_cfg(args, "federate")
    seed = _seed(args, cfg)
    out = _outdir(args.out)
    w0 = load_params(args.init)
    bench = _benchmark(args, cfg, seed)
    fc = cfg.fed_config(seed, agg=args.agg, mode=args.mode)
    result = run_federation(fc, w0, bench)
    _finish_run(out, result, bench.n_classes)
    return EXIT_OK


def cmd_cust(args) -> int:
    cfg = _load_cfg(args, "cust")
    seed = _seed(args, cfg)
    out = _outdir(args.out)
    w0 = load_params(args.init)
    bench = _benchmark(args, cfg, seed)
    fc = cfg.fed_config(seed, rounds=cfg["cust.epochs"], mode="unsup")
    pooled = [im for c in bench.clients for im in c.images]
    result = cust(w0, pooled, fc, bench.eval_set)
    _finish_run(out, result, bench.n_classes)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args, "evaluate") if args.config else RunConfig()
    seed = _seed(args, cfg)
    params = load_params(args.ckpt)
    bench = _benchmark(args, cfg, seed)
    if args.split == "eval":
        images = bench.eval_set
    elif args.split == "source":
        images = bench.source
    else:
        from dataclasses import replace
        images = [replace(im, labels=lb) for c in bench.clients
                  for im, lb in zip(c.images, c.hidden_labels)]
    per_class, m = evaluate(params, images, bench.n_classes)
    for c, v in enumerate(per_class):
        print(f"iou_{c}\t{fmt(v)}")
    print(f"miou\t{fmt(m)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    results = run_gradcheck(args.trials, args.seed)
    bad = 0
    for term in TERMS:
        rs = [r for r in results if r.term == term]
        worst = max(r.max_rel_error for r in rs)
        n_bad = sum(not r.ok for r in rs)
        bad += n_bad
        print(f"{term:12s} trials={len(rs)} max_rel_err={worst:.3e} "
              f"{'PASS' if n_bad == 0 else f'FAIL ({n_bad})'}")
    print(f"tolerance {TOL:g}; {time.time() - t0:.1f}s")
    return EXIT_OK if bad == 0 else EXIT_CHECK


def cmd_partition(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    scenario = normalize_scenario(args.scenario)
    bench = make_benchmark(args.seed, scenario, **cfg.benchmark_kwargs())
    for c in bench.clients:
        print(f"{c.client_id}\t{c.n}\t{','.join(c.domains)}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    cfg = _load_cfg(args, "make-data")
    seed = _seed(args, cfg)
    save_benchmark(args.out, make_benchmark(seed, cfg["data.scenario"], **cfg.benchmark_kwargs()))
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffreedg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, init=False):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data", help="dataset dump to use instead of regenerating")
        if init:
            sp.add_argument("--init", required=True, help="initial checkpoint")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("pretrain", help="server pretraining on the labeled source set")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("federate", help="federated rounds from a pretrained checkpoint")
    common(sp, init=True)
    sp.add_argument("--agg", choices=("fedavg", "fedswa"))
    sp.add_argument("--mode", choices=("unsup", "semisup", "sup"))
    sp.set_defaults(func=cmd_federate)

    sp = sub.add_parser("cust", help="centralised unsupervised self-training baseline")
    common(sp, init=True)
    sp.set_defaults(func=cmd_cust)

    sp = sub.add_parser("evaluate", help="per-class IoU and mIoU of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=("eval", "source", "clients"), default="eval")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("partition", help="print one tab-separated row per client: id, size, domains")
    sp.add_argument("--scenario", required=True, help="city|weather|syn2real|clear2adverse")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("make-data", help="dump a generated benchmark to a FRZN container")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("show-config", help="print every config key with its default")
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FederationError) as exc:
        cause = exc if isinstance(exc, DivergenceError) else exc.__cause__
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if isinstance(cause, DivergenceError) else EXIT_CHECK
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
