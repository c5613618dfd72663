"""Independent oracles used by the training and acceptance tests.

The loss here is written from the math, with scipy primitives, on purpose:
finite differences of this implementation check the package's analytic
gradients without sharing code with them.
"""

import numpy as np
from scipy.special import logsumexp, softmax

from segmilcbm.bagio import Bag, Instance
from segmilcbm.milmodel import ModelParams, init_params


def naive_total_loss(params: ModelParams, data, lam: float) -> float:
    """data: list of (H, clip, label) float arrays."""
    ce = []
    cos = []
    n_segments = 0
    for H, clip, y in data:
        n_segments += H.shape[0]
        z = H @ params.w_c.T
        zhat = []
        for row in z:
            norm = float(np.sqrt(np.sum(row * row)))
            zhat.append(row / norm if norm >= 1e-12 else np.zeros_like(row))
        zhat = np.asarray(zhat)
        if params.attention == "mlp":
            scores = np.asarray(
                [params.att_score @ np.tanh(params.att_hidden @ h) for h in H]
            )
        elif params.attention == "linear":
            scores = np.asarray([params.att_score @ h for h in H])
        else:
            scores = np.zeros(H.shape[0])
        alpha = softmax(scores / params.temperature)
        rows = zhat if params.aggregate_normalized else z
        c_agg = np.sum(alpha[:, None] * rows, axis=0)
        logits = params.w_cls @ c_agg + params.b_cls
        ce.append(logsumexp(logits) - logits[y])
        if lam != 0.0:
            for i in range(H.shape[0]):
                row = np.asarray(clip[i], dtype=float)
                norm = float(np.sqrt(np.sum(row * row)))
                chat = row / norm if norm >= 1e-12 else np.zeros_like(row)
                cos.append(float(zhat[i] @ chat))
    total = float(np.mean(ce))
    if lam != 0.0:
        total += lam * (-(float(np.sum(cos)) / n_segments))
    return total


def finite_difference_grads(params: ModelParams, data, lam: float, step: float = 1e-5):
    """Central differences of naive_total_loss for every parameter entry."""
    grads = {}
    for name, arr in params.tensor_items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = naive_total_loss(params, data, lam)
            flat[idx] = orig - step
            down = naive_total_loss(params, data, lam)
            flat[idx] = orig
            gflat[idx] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def random_instance_case(rng, attention: str, aggregate_normalized: bool):
    """One random small training case: params plus a tiny batch of bags."""
    D = int(rng.integers(2, 9))
    C = int(rng.integers(2, 6))
    K = int(rng.integers(2, 4))
    n_bags = int(rng.integers(1, 4))
    params = init_params(
        num_classes=K,
        dim=D,
        num_concepts=C,
        attention=attention,
        attention_hidden=int(rng.integers(2, 5)),
        aggregate_normalized=aggregate_normalized,
        seed=int(rng.integers(0, 2**31)),
    )
    data = []
    bags = []
    for b in range(n_bags):
        N = int(rng.integers(1, 5))
        H = rng.normal(size=(N, D))
        clip = rng.uniform(0.0, 1.0, size=(N, C))
        y = int(rng.integers(0, K))
        data.append((H, clip, y))
        bags.append(
            Bag(
                image_id=f"g{b}",
                label=y,
                instances=[
                    Instance(embedding=H[i], clip_scores=clip[i]) for i in range(N)
                ],
            )
        )
    return params, data, bags
