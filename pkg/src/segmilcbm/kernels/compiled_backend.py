"""Adapter between ModelParams and the compiled extension kernels."""

import numpy as np

from ..milmodel import ModelParams
from . import _core

NAME = "compiled"

_ATT_CODE = {"mlp": 0, "linear": 1, "uniform": 2}
_EMPTY_MATRIX = np.zeros((0, 0))
_EMPTY_VECTOR = np.zeros(0)


def _unpack(params: ModelParams):
    att_hidden = (
        _EMPTY_MATRIX if params.att_hidden is None
        else np.ascontiguousarray(params.att_hidden, dtype=np.float64)
    )
    att_score = (
        _EMPTY_VECTOR if params.att_score is None
        else np.ascontiguousarray(params.att_score, dtype=np.float64)
    )
    return (
        np.ascontiguousarray(params.w_c, dtype=np.float64),
        att_hidden,
        att_score,
        np.ascontiguousarray(params.w_cls, dtype=np.float64),
        np.ascontiguousarray(params.b_cls, dtype=np.float64),
        float(params.temperature),
        _ATT_CODE[params.attention],
        bool(params.aggregate_normalized),
    )


def forward_many(params: ModelParams, H_all: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return _core.forward_many(
        *_unpack(params),
        np.ascontiguousarray(H_all, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.int64),
    )


def batch_backward(
    params: ModelParams,
    H_all: np.ndarray,
    offsets: np.ndarray,
    clip_all: np.ndarray | None,
    labels: np.ndarray,
    lambda_concept: float,
):
    w_c, att_hidden, att_score, w_cls, b_cls, T, att_kind, agg_norm = _unpack(params)
    g_w_c = np.zeros_like(w_c)
    g_att_hidden = np.zeros_like(att_hidden)
    g_att_score = np.zeros_like(att_score)
    g_w_cls = np.zeros_like(w_cls)
    g_b_cls = np.zeros_like(b_cls)
    if lambda_concept != 0.0 and clip_all is None:
        raise ValueError("concept loss is active but no clip targets were packed")
    if lambda_concept != 0.0:
        clip = np.ascontiguousarray(clip_all, dtype=np.float64)
        lam = float(lambda_concept)
    else:
        # Zero lambda never reads clip targets; pass an empty placeholder.
        clip = np.zeros((0, w_c.shape[0]))
        lam = 0.0
    ce_sum, cos_sum, correct = _core.batch_backward(
        w_c, att_hidden, att_score, w_cls, b_cls, T, att_kind, agg_norm,
        np.ascontiguousarray(H_all, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        clip,
        np.ascontiguousarray(labels, dtype=np.int64),
        lam,
        g_w_c, g_att_hidden, g_att_score, g_w_cls, g_b_cls,
    )
    grads = {"w_c": g_w_c}
    if params.att_hidden is not None:
        grads["att_hidden"] = g_att_hidden
    if params.att_score is not None:
        grads["att_score"] = g_att_score
    grads["w_cls"] = g_w_cls
    grads["b_cls"] = g_b_cls
    return (float(ce_sum), float(cos_sum), int(correct)), grads
