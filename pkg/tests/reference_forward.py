"""Straight-line numpy re-implementation of the scoring pass.

Deliberately independent of the package's tape machinery: it reads the
parameter arrays directly and chains plain numpy expressions, so tests can
use it as an oracle for the real forward pass. Inference mode only.
"""

import numpy as np


def _arrays(params):
    return dict(params.arrays())


def ref_stage(x, arrs, fc, bn):
    z = x @ arrs[f"{fc}.W"] + arrs[f"{fc}.b"]
    xhat = (z - arrs[f"{bn}.running_mean"]) / np.sqrt(
        arrs[f"{bn}.running_var"] + 1e-5)
    return np.maximum(arrs[f"{bn}.gamma"] * xhat + arrs[f"{bn}.beta"], 0.0)


def ref_branch(x, arrs, prefix):
    h = ref_stage(x, arrs, f"{prefix}_fc1", f"{prefix}_bn1")
    h = ref_stage(h, arrs, f"{prefix}_fc2", f"{prefix}_bn2")
    norms = np.sqrt((h * h).sum(axis=1, keepdims=True))
    return h / np.maximum(norms, 1e-10)


def ref_concept_weights(params, phrases):
    arrs = _arrays(params)
    hidden = ref_stage(phrases, arrs, "cw_fc1", "cw_bn")
    phi = hidden @ arrs["cw_fc2.W"] + arrs["cw_fc2.b"]
    shifted = phi - phi.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), phi


def ref_score_matrix(params, regions, phrases, u=None):
    """(p, r) score matrix; u is the external (p, K) weight matrix or None
    for the learned branch."""
    arrs = _arrays(params)
    k = params.cfg.K
    img = ref_branch(regions, arrs, "img")
    txt = ref_branch(phrases, arrs, "txt")
    if u is None:
        u, _ = ref_concept_weights(params, phrases)
    p, r = txt.shape[0], img.shape[0]
    scores = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            joint = txt[i] * img[j]
            h = ref_stage(joint[None, :], arrs, "p1_fc", "p1_bn")[0]
            cols = [
                ref_stage(h[None, :], arrs, f"cond_fc{c}", f"cond_bn{c}")[0]
                for c in range(k)
            ]
            fused = sum(u[i, c] * cols[c] for c in range(k))
            scores[i, j] = float(fused @ arrs["cls_fc.W"][:, 0] + arrs["cls_fc.b"][0])
    return scores
