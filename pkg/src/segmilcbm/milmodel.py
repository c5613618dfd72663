"""Forward model: concept projection, attention pooling, classification.

The model maps a bag of instance embeddings H (N x D) through a bias-free
concept head into concept space, L2-normalizes per instance, pools with a
temperature-scaled attention softmax, and classifies the aggregate:

    z_i   = W_c h_i
    zhat_i = z_i / ||z_i||          (zero row when ||z_i|| < 1e-12)
    e_i   = score(h_i)              (attention form, see below)
    alpha = softmax(e / T)
    c_agg = sum_i alpha_i * zhat_i  (or raw z_i when aggregate_normalized=False)
    logits = W_cls c_agg + b_cls

Three attention forms are supported:
  mlp     e_i = v . tanh(V h_i)   (hidden width A, the default)
  linear  e_i = w . h_i           (single score vector in embedding space)
  uniform e_i = 0                 (mean pooling; the no-attention ablation)
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError

EPS_NORM = 1e-12

ATTENTION_KINDS = ("mlp", "linear", "uniform")


@dataclass
class ModelParams:
    """Trainable tensors plus the architecture switches they imply.

    att_hidden is the A x D first attention layer (mlp form only);
    att_score is the scoring vector: length A for mlp, length D for linear,
    None for uniform. temperature is fixed during training but kept as a
    parameter so limit behavior stays testable.
    """

    w_c: np.ndarray
    att_hidden: np.ndarray | None
    att_score: np.ndarray | None
    w_cls: np.ndarray
    b_cls: np.ndarray
    temperature: float = 1.0
    attention: str = "mlp"
    aggregate_normalized: bool = True

    @property
    def num_concepts(self) -> int:
        return self.w_c.shape[0]

    @property
    def dim(self) -> int:
        return self.w_c.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0]

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors in the fixed (name, array) order used everywhere:
        gradient sets, Adam state, and checkpoints all follow this order."""
        items = [("w_c", self.w_c)]
        if self.att_hidden is not None:
            items.append(("att_hidden", self.att_hidden))
        if self.att_score is not None:
            items.append(("att_score", self.att_score))
        items.append(("w_cls", self.w_cls))
        items.append(("b_cls", self.b_cls))
        return items

    def copy(self) -> "ModelParams":
        return ModelParams(
            w_c=self.w_c.copy(),
            att_hidden=None if self.att_hidden is None else self.att_hidden.copy(),
            att_score=None if self.att_score is None else self.att_score.copy(),
            w_cls=self.w_cls.copy(),
            b_cls=self.b_cls.copy(),
            temperature=self.temperature,
            attention=self.attention,
            aggregate_normalized=self.aggregate_normalized,
        )


@dataclass
class ForwardTrace:
    """Per-bag forward intermediates kept for explanations and gradients."""

    z: np.ndarray        # (N, C) raw concept activations
    z_hat: np.ndarray    # (N, C) row-normalized activations
    alpha: np.ndarray    # (N,) attention weights, sum 1
    c_agg: np.ndarray    # (C,) pooled concept vector
    logits: np.ndarray   # (num_classes,)


def validate_params(params: ModelParams) -> None:
    if params.attention not in ATTENTION_KINDS:
        raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {params.attention!r}")
    if not (np.isfinite(params.temperature) and params.temperature > 0):
        raise ConfigError(f"temperature must be finite and > 0, got {params.temperature}")
    if params.w_c.ndim != 2:
        raise SchemaError("w_c must be a C x D matrix")
    C, D = params.w_c.shape
    if params.attention == "mlp":
        if params.att_hidden is None or params.att_score is None:
            raise ConfigError("mlp attention requires att_hidden and att_score")
        if params.att_hidden.ndim != 2 or params.att_hidden.shape[1] != D:
            raise SchemaError("att_hidden must be A x D")
        if params.att_score.shape != (params.att_hidden.shape[0],):
            raise SchemaError("att_score must have length A")
    elif params.attention == "linear":
        if params.att_hidden is not None:
            raise ConfigError("linear attention takes no hidden layer")
        if params.att_score is None or params.att_score.shape != (D,):
            raise SchemaError("linear attention requires att_score of length D")
    else:
        if params.att_hidden is not None or params.att_score is not None:
            raise ConfigError("uniform attention takes no attention tensors")
    if params.w_cls.ndim != 2 or params.w_cls.shape[1] != C:
        raise SchemaError("w_cls must be num_classes x C")
    if params.b_cls.shape != (params.w_cls.shape[0],):
        raise SchemaError("b_cls must have length num_classes")
    for name, arr in params.tensor_items():
        if not np.all(np.isfinite(arr)):
            raise SchemaError(f"parameter {name} contains non-finite values")


def init_params(
    num_classes: int,
    dim: int,
    num_concepts: int,
    attention: str = "mlp",
    attention_hidden: int = 128,
    temperature: float = 1.0,
    aggregate_normalized: bool = True,
    seed: int = 0,
) -> ModelParams:
    """Seeded Glorot-uniform initialization, one child stream per tensor.

    The score vector is randomly initialized rather than zeroed: with a zero
    score vector the attention gradient into the hidden layer vanishes at
    init, stalling the attention module.
    """
    if attention not in ATTENTION_KINDS:
        raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {attention!r}")
    if attention == "mlp" and attention_hidden < 1:
        raise ConfigError("attention_hidden must be >= 1")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    streams = [np.random.default_rng(s) for s in seed.spawn(5)]

    def glorot(rng, shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    w_c = glorot(streams[0], (num_concepts, dim), dim, num_concepts)
    att_hidden = None
    att_score = None
    if attention == "mlp":
        att_hidden = glorot(streams[1], (attention_hidden, dim), dim, attention_hidden)
        att_score = glorot(streams[2], (attention_hidden,), attention_hidden, 1)
    elif attention == "linear":
        att_score = glorot(streams[2], (dim,), dim, 1)
    w_cls = glorot(streams[3], (num_classes, num_concepts), num_concepts, num_classes)
    b_cls = np.zeros(num_classes)
    params = ModelParams(
        w_c=w_c,
        att_hidden=att_hidden,
        att_score=att_score,
        w_cls=w_cls,
        b_cls=b_cls,
        temperature=temperature,
        attention=attention,
        aggregate_normalized=aggregate_normalized,
    )
    validate_params(params)
    return params


def concept_project(params: ModelParams, H: np.ndarray) -> np.ndarray:
    """Project instance embeddings into concept space: Z = H W_c^T."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != params.dim:
        raise SchemaError(
            f"embeddings must be N x {params.dim}, got {H.shape}"
        )
    return H @ params.w_c.T


def normalize_rows(Z: np.ndarray) -> np.ndarray:
    """L2-normalize each row; rows with norm below 1e-12 become zero rows."""
    Z = np.asarray(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    safe = np.where(norms < EPS_NORM, 1.0, norms)
    out = Z / safe
    out[np.squeeze(norms, axis=-1) < EPS_NORM] = 0.0
    return out


def attention_scores(params: ModelParams, H: np.ndarray) -> np.ndarray:
    if params.attention == "mlp":
        return np.tanh(H @ params.att_hidden.T) @ params.att_score
    if params.attention == "linear":
        return H @ params.att_score
    return np.zeros(H.shape[0])


def attention_weights(params: ModelParams, H: np.ndarray) -> np.ndarray:
    """Temperature-scaled softmax over the instance scores, max-subtracted."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise SchemaError("attention needs at least one instance")
    e = attention_scores(params, H) / params.temperature
    e = e - np.max(e)
    w = np.exp(e)
    return w / np.sum(w)


def forward(params: ModelParams, H: np.ndarray) -> ForwardTrace:
    """Run one bag through the model, keeping all intermediates."""
    z = concept_project(params, H)
    if z.shape[0] < 1:
        raise SchemaError("bag must contain at least one instance")
    z_hat = normalize_rows(z)
    alpha = attention_weights(params, np.asarray(H, dtype=np.float64))
    pooled_rows = z_hat if params.aggregate_normalized else z
    c_agg = alpha @ pooled_rows
    logits = params.w_cls @ c_agg + params.b_cls
    return ForwardTrace(z=z, z_hat=z_hat, alpha=alpha, c_agg=c_agg, logits=logits)


def predict_label(logits: np.ndarray) -> int:
    """Argmax with ties broken by the lowest class index."""
    return int(np.argmax(logits))


def _top_concepts(values: np.ndarray, names, top_m: int) -> list[list]:
    order = np.lexsort((np.arange(values.shape[0]), -values))[:top_m]
    return [[names[i], float(values[i])] for i in order]


def explain(trace: ForwardTrace, concept_names, top_m: int) -> dict:
    """Ranked concept evidence per instance and for the pooled bag.

    Instances are listed by descending attention weight (ties by original
    index); an all-zero normalized row yields an empty concept list.
    """
    C = trace.z_hat.shape[1]
    if not 1 <= top_m <= C:
        raise ConfigError(f"top_m must be in [1, {C}], got {top_m}")
    if len(concept_names) != C:
        raise SchemaError(f"expected {C} concept names, got {len(concept_names)}")
    order = np.lexsort((np.arange(trace.alpha.shape[0]), -trace.alpha))
    instances = []
    for i in order:
        row = trace.z_hat[i]
        tops = [] if not np.any(row != 0.0) else _top_concepts(row, concept_names, top_m)
        instances.append(
            {"instance": int(i), "alpha": float(trace.alpha[i]), "top_concepts": tops}
        )
    return {
        "instances": instances,
        "bag_concepts": _top_concepts(trace.c_agg, concept_names, top_m),
    }


def explanation_record(bag, trace: ForwardTrace, concept_names, top_m: int) -> dict:
    """Full JSONL explanation record for one bag."""
    record = {
        "image_id": bag.image_id,
        "predicted": predict_label(trace.logits),
        "label": int(bag.label),
    }
    record.update(explain(trace, concept_names, top_m))
    return record
