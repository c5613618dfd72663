"""Reference numpy implementation of the per-bag forward/backward kernels.

This is the authoritative definition of the training math; the compiled
backend in _core.pyx reimplements exactly these recurrences. Gradients are
exact analytic derivatives of

    L = (1/M) sum_j CE(logits_j, y_j)
        - (lambda / B) sum_{segments i} zhat_i . cliphat_i

with M bags and B total segments in the batch. The normalization gradient at
a zero row is defined as zero, matching the epsilon rule of the forward pass.
"""

import numpy as np

from ..milmodel import EPS_NORM, ModelParams

ATT_CODE = {"mlp": 0, "linear": 1, "uniform": 2}

NAME = "numpy"


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensor_items()}


def _bag_forward(params: ModelParams, H: np.ndarray):
    z = H @ params.w_c.T
    norms = np.linalg.norm(z, axis=1)
    safe = np.where(norms < EPS_NORM, 1.0, norms)
    z_hat = z / safe[:, None]
    z_hat[norms < EPS_NORM] = 0.0
    if params.attention == "mlp":
        t = np.tanh(H @ params.att_hidden.T)
        e = t @ params.att_score
    elif params.attention == "linear":
        t = None
        e = H @ params.att_score
    else:
        t = None
        e = np.zeros(H.shape[0])
    s = e / params.temperature
    s = s - np.max(s)
    alpha = np.exp(s)
    alpha /= alpha.sum()
    G = z_hat if params.aggregate_normalized else z
    c_agg = alpha @ G
    logits = params.w_cls @ c_agg + params.b_cls
    return z, norms, z_hat, t, alpha, G, c_agg, logits


def forward_many(params: ModelParams, H_all: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Logits for a packed sequence of bags; rows follow bag order."""
    M = offsets.shape[0] - 1
    out = np.empty((M, params.num_classes))
    for j in range(M):
        H = H_all[offsets[j] : offsets[j + 1]]
        out[j] = _bag_forward(params, H)[-1]
    return out


def batch_backward(
    params: ModelParams,
    H_all: np.ndarray,
    offsets: np.ndarray,
    clip_all: np.ndarray | None,
    labels: np.ndarray,
    lambda_concept: float,
):
    """Losses and exact gradients for one packed batch.

    Returns ((ce_sum, cos_sum, correct), grads) where ce_sum is the summed
    per-bag cross entropy, cos_sum the summed per-segment cosine alignment,
    and grads maps tensor names to arrays shaped like the parameters.
    Accumulation runs in bag order so results are reduction-order stable.
    """
    M = offsets.shape[0] - 1
    B = int(offsets[-1])
    cls_w = 1.0 / M
    con_w = -lambda_concept / B
    use_concept = lambda_concept != 0.0
    grads = zero_grads(params)
    ce_sum = 0.0
    cos_sum = 0.0
    correct = 0
    for j in range(M):
        lo, hi = int(offsets[j]), int(offsets[j + 1])
        H = H_all[lo:hi]
        y = int(labels[j])
        z, norms, z_hat, t, alpha, G, c_agg, logits = _bag_forward(params, H)

        shifted = logits - np.max(logits)
        lse = np.log(np.sum(np.exp(shifted))) + np.max(logits)
        p = np.exp(logits - lse)
        ce_sum += lse - logits[y]
        if int(np.argmax(logits)) == y:
            correct += 1

        du = p.copy()
        du[y] -= 1.0
        grads["w_cls"] += cls_w * np.outer(du, c_agg)
        grads["b_cls"] += cls_w * du
        dc = cls_w * (params.w_cls.T @ du)

        dalpha = G @ dc
        dG = np.outer(alpha, dc)
        common = alpha @ dalpha
        de = alpha * (dalpha - common) / params.temperature
        if params.attention == "mlp":
            grads["att_score"] += t.T @ de
            dpre = (de[:, None] * (1.0 - t * t)) * params.att_score[None, :]
            grads["att_hidden"] += dpre.T @ H
        elif params.attention == "linear":
            grads["att_score"] += H.T @ de

        if params.aggregate_normalized:
            dz = np.zeros_like(z)
            dz_hat = dG
        else:
            dz = dG.copy()
            dz_hat = np.zeros_like(z)
        if use_concept:
            clip_hat = clip_all[lo:hi]
            cos_sum += float(np.sum(z_hat * clip_hat))
            dz_hat = dz_hat + con_w * clip_hat
        live = norms >= EPS_NORM
        if np.any(live):
            inner = np.sum(z_hat * dz_hat, axis=1)
            dz_norm = (dz_hat - z_hat * inner[:, None]) / np.where(live, norms, 1.0)[:, None]
            dz[live] += dz_norm[live]
        grads["w_c"] += dz.T @ H
    return (ce_sum, cos_sum, correct), grads
