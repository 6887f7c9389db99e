"""What a client does with one unlabeled batch.

The weak view gives pseudo-labels (argmax where confidence >= tau); two
strong views with complementary dropout masks are trained against them.
"""

import numpy as np

from ffreedg import losses as L
from ffreedg.augment import AugmentConfig
from ffreedg.fed import build_passes
from ffreedg.model import ModelDims, init_params, loss_and_grad, predict_probs, sgd_step
from ffreedg.synthdata import make_benchmark

bench = make_benchmark(1, n_source=4, n_eval=4, n_clients=2, imgs_per_client=4)
client = bench.clients[0]
w = init_params(0, ModelDims())

probs = predict_probs(w, client.images[0].pixels)
pl = L.make_pseudo_labels(probs.reshape(-1, probs.shape[-1]), tau=0.9)
print(f"untrained model: {pl.mask.mean():.0%} of pixels pass tau=0.9")

rng = np.random.default_rng(0)
passes, info = build_passes(w, client.images, rng, augment=AugmentConfig(),
                           pl_source=w, tau=0.9, teacher=w)
print(f"{len(passes)} passes, fraction of pixels kept by the mask {info['masked']:.3f}")
res = loss_and_grad(w, passes)
print("loss terms:", {k: round(float(v), 4) for k, v in res.parts.items()})
print("gradient norms:", {k: round(float(np.linalg.norm(g)), 4) for k, g in res.grads.as_dict().items()})

# the frozen class table gets no gradient
w2 = sgd_step(w, res.grads, 0.05)
print("T unchanged after a step:", np.array_equal(w2.T, w.T))
