"""Federated source-free domain generalisation by self-training, at desk scale.

A per-pixel MLP with a cosine-similarity head over frozen class embeddings is
pretrained on a labeled synthetic source domain and then adapted by clients
that only see unlabeled images from shifted domains.
"""

from .fed import (FedConfig, PretrainConfig, agg_fedavg, agg_fedswa, aggregate, cust,
                  evaluate, pretrain, run_federation, sample_clients)
from .model import ModelDims, ParamSet, init_params
from .synthdata import make_benchmark

__version__ = "0.1.0"

__all__ = [
    "FedConfig", "PretrainConfig", "ModelDims", "ParamSet", "agg_fedavg", "agg_fedswa",
    "aggregate", "cust", "evaluate", "init_params", "make_benchmark", "pretrain",
    "run_federation", "sample_clients",
]
