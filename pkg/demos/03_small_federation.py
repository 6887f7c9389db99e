"""Pretrain on clear weather, then adapt across clients without labels.

Compares FedSWA and FedAvg aggregation on a reduced benchmark so it runs in
well under a minute.  The full-size comparison lives in the acceptance tests.
"""

from ffreedg import FedConfig, PretrainConfig, evaluate, make_benchmark, pretrain, run_federation

bench = make_benchmark(0, n_source=64, n_eval=16, n_clients=12, imgs_per_client=8)
w0 = pretrain(bench.source, PretrainConfig(epochs=8, seed=0)).params
print(f"source-only mIoU on {bench.eval_domain}: {evaluate(w0, bench.eval_set)[1]:.4f}")

for agg in ("fedswa", "fedavg"):
    cfg = FedConfig(rounds=20, clients_per_round=4, agg=agg, eval_every=5, seed=0)
    res = run_federation(cfg, w0, bench)
    curve = [f"{r.miou_eval:.3f}" for r in res.history if r.miou_eval is not None]
    print(f"{agg}: eval mIoU every 5 rounds {curve}")
