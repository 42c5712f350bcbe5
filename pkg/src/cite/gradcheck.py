"""Full-model gradient verification against central finite differences.

Batch norm is frozen to inference statistics for the check (train-mode
statistics would change between the perturbed evaluations); the stats are
warmed with a couple of train-mode forwards first so they are
non-degenerate.
"""

from __future__ import annotations

import numpy as np

from .network import ModelConfig, init_model, score_all_pairs
from .tensor import Tape, Tensor, add, grad_check, l1_norm, logistic_loss, scale

GRADCHECK_TOLERANCE = 1e-4


def full_model_gradcheck(d_v: int = 16, d_t: int = 16, m: int = 8, k: int = 3,
                         n_phrases: int = 4, n_regions: int = 6,
                         h: float = 1e-5, seed: int = 0,
                         samples_per_tensor: int = 200,
                         l1_weight: float = 5e-4) -> float:
    """Max relative error between analytic and numeric gradients of the
    combined loss over every trainable tensor."""
    cfg = ModelConfig(d_v=d_v, d_t=d_t, M=m, K=k, assignment_mode="learned",
                      seed=seed)
    params = init_model(cfg)
    rng = np.random.default_rng(seed + 1)
    regions = rng.normal(size=(n_regions, d_v))
    phrases = rng.normal(size=(n_phrases, d_t))
    labels = rng.choice(np.array([-1.0, 1.0]),
                        size=(n_phrases * n_regions, 1))

    # Warm the running statistics so the frozen inference pass is not
    # normalizing against the mean-0/var-1 defaults.
    for _ in range(2):
        score_all_pairs(None, params, Tensor(regions), Tensor(phrases), None,
                        "train")

    def loss_fn(tape):
        out = score_all_pairs(tape, params, Tensor(regions), Tensor(phrases),
                              None, "infer")
        base = logistic_loss(tape, out["scores"], labels)
        penalty = scale(tape, l1_norm(tape, out["phi"]), l1_weight)
        return add(tape, base, penalty)

    tensors = {t.name: t for t in params.trainables()}
    return grad_check(loss_fn, tensors, h=h,
                      samples_per_tensor=samples_per_tensor, seed=seed + 2)
