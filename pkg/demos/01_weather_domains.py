"""A walk through the synthetic weather benchmark.

Every image is a blob-shaped label map rendered through a per-domain affine
colour transform plus noise.  The source domain is "clear"; clients hold
fog/night/rain/snow; evaluation uses the held-out "dusk" domain.
"""

import numpy as np

from ffreedg.synthdata import class_signatures, gen_label_map, make_benchmark, render, weather_domains

# one label map, seen under each weather condition
labels = gen_label_map(seed=3, h=8, w=8)
print("label map (8x8):")
print(labels)

domains = weather_domains()
for name, dom in domains.items():
    img = render(labels, dom, seed=3)
    print(f"{name:6s} mean pixel {img.pixels.mean():+.3f}  std {img.pixels.std():.3f}")

# the class signatures the renderer starts from
sig = class_signatures()
print("signature matrix", sig.shape, "pairwise cosine, first row:",
      np.round(sig @ sig[0] / np.linalg.norm(sig, axis=1) / np.linalg.norm(sig[0]), 2))

# a small benchmark; clients never get their labels, only the hidden copy for oracles
bench = make_benchmark(0, n_source=16, n_eval=8, n_clients=6, imgs_per_client=4)
print(f"{len(bench.source)} source images, {len(bench.clients)} clients, {len(bench.eval_set)} eval")
for c in bench.clients:
    print(f"  client {c.client_id}: {c.n} images from {', '.join(c.domains)}; "
          f"labels visible: {c.images[0].labels is not None}")
