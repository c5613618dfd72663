"""Losses, analytic gradients, Adam, and the seeded training loop.

The classification loss averages over bags; the concept alignment loss
averages over all segments in the mini-batch. All math runs in float64 and
gradient reduction follows bag index order, so a fixed seed yields bitwise
reproducible parameter trajectories and loss logs on one machine.
"""

import csv
import io
import json
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bagio import Bag, DatasetManifest
from .errors import ConfigError, NumericalError, SchemaError
from .kernels import get_backend
from .milmodel import ModelParams, init_params, normalize_rows, validate_params

CHECKPOINT_MAGIC = b"SMCB"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lambda_concept: float = 0.1
    epochs: int = 50
    batch_bags: int = 16
    seed: int = 0
    easy_hard: bool = False
    warmup_epochs: int = 5
    easy_quantile: float = 0.5
    attention: str = "mlp"
    attention_hidden: int = 128
    temperature: float = 1.0
    aggregate_normalized: bool = True
    kernel: str = "auto"

    def validate(self) -> None:
        # lr == 0 is allowed as an explicit freeze (useful for regression
        # tests); negative rates are rejected.
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr!r}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.eps_adam <= 0:
            raise ConfigError("eps_adam must be > 0")
        if self.lambda_concept < 0:
            raise ConfigError(f"lambda_concept must be >= 0, got {self.lambda_concept!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_bags < 1:
            raise ConfigError("batch_bags must be >= 1")
        if not 0 < self.easy_quantile < 1:
            raise ConfigError(f"easy_quantile must be in (0, 1), got {self.easy_quantile!r}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


@dataclass
class GradientSet:
    """One gradient tensor per trainable parameter, keyed like tensor_items."""

    tensors: dict[str, np.ndarray]

    def check_finite(self) -> None:
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"gradient for {name} contains non-finite values")


def loss_cls(logits_batch: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross entropy over bags, log-sum-exp stable."""
    logits_batch = np.asarray(logits_batch, dtype=np.float64)
    labels = np.asarray(labels)
    if logits_batch.ndim != 2 or labels.shape != (logits_batch.shape[0],):
        raise SchemaError("logits must be M x K with M labels")
    K = logits_batch.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise SchemaError(f"label out of range [0, {K})")
    m = np.max(logits_batch, axis=1)
    lse = np.log(np.sum(np.exp(logits_batch - m[:, None]), axis=1)) + m
    picked = logits_batch[np.arange(labels.shape[0]), labels]
    return float(np.mean(lse - picked))


def loss_concept(z_hat_all: np.ndarray, clip_hat_all: np.ndarray) -> float:
    """Negative mean cosine between aligned normalized rows.

    Rows are expected unit-norm or all-zero; a zero row contributes 0. The
    value lies in [-1, 0] whenever activations are sign-compatible with the
    non-negative clip targets, and in [-1, 1] in general.
    """
    z_hat_all = np.asarray(z_hat_all, dtype=np.float64)
    clip_hat_all = np.asarray(clip_hat_all, dtype=np.float64)
    if z_hat_all.shape != clip_hat_all.shape:
        raise SchemaError("activation and target matrices must share shape")
    if z_hat_all.shape[0] == 0:
        warnings.warn("concept loss over an empty batch is defined as 0")
        return 0.0
    return float(-np.mean(np.sum(z_hat_all * clip_hat_all, axis=1)))


def loss_total(cls: float, concept: float, lambda_concept: float) -> float:
    return float(cls + lambda_concept * concept)


@dataclass
class BatchStats:
    loss_cls: float
    loss_concept: float
    loss_total: float
    n_bags: int
    n_segments: int
    correct: int


def pack_bags(prepared: list, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray]:
    """Concatenate per-bag arrays for a batch, in the given index order."""
    Hs = [prepared[i].H for i in indices]
    offsets = np.zeros(len(Hs) + 1, dtype=np.int64)
    np.cumsum([h.shape[0] for h in Hs], out=offsets[1:])
    H_all = np.concatenate(Hs, axis=0)
    clip_all = None
    if prepared[indices[0]].clip_hat is not None:
        clip_all = np.concatenate([prepared[i].clip_hat for i in indices], axis=0)
    labels = np.asarray([prepared[i].label for i in indices], dtype=np.int64)
    return H_all, offsets, clip_all, labels


@dataclass
class PreparedBag:
    H: np.ndarray
    clip_hat: np.ndarray | None
    label: int


def prepare_bags(bags: list[Bag], with_clip: bool) -> list[PreparedBag]:
    """Extract contiguous float64 arrays once per bag.

    clip_scores are only touched when the concept loss is active, so a zero
    lambda_concept run never reads them.
    """
    out = []
    for bag in bags:
        H = np.ascontiguousarray([inst.embedding for inst in bag.instances], dtype=np.float64)
        clip_hat = None
        if with_clip:
            clip = np.ascontiguousarray(
                [inst.clip_scores for inst in bag.instances], dtype=np.float64
            )
            clip_hat = np.ascontiguousarray(normalize_rows(clip))
        out.append(PreparedBag(H=H, clip_hat=clip_hat, label=int(bag.label)))
    return out


def backward(
    params: ModelParams,
    batch: list[Bag],
    lambda_concept: float = 0.1,
    backend=None,
) -> tuple[BatchStats, GradientSet]:
    """Loss and exact analytic gradients of the total objective for a batch."""
    if not batch:
        raise SchemaError("batch must be non-empty")
    if backend is None:
        backend = get_backend()
    prepared = prepare_bags(batch, with_clip=lambda_concept != 0.0)
    packed = pack_bags(prepared, range(len(prepared)))
    return _backward_packed(params, packed, lambda_concept, backend)


def _backward_packed(params, packed, lambda_concept, backend) -> tuple[BatchStats, GradientSet]:
    H_all, offsets, clip_all, labels = packed
    (ce_sum, cos_sum, correct), grads = backend.batch_backward(
        params, H_all, offsets, clip_all, labels, lambda_concept
    )
    n_bags = labels.shape[0]
    n_segments = int(offsets[-1])
    l_cls = ce_sum / n_bags
    l_con = -cos_sum / n_segments if lambda_concept != 0.0 else 0.0
    stats = BatchStats(
        loss_cls=float(l_cls),
        loss_concept=float(l_con),
        loss_total=loss_total(l_cls, l_con, lambda_concept),
        n_bags=n_bags,
        n_segments=n_segments,
        correct=int(correct),
    )
    if not np.isfinite(stats.loss_total):
        raise NumericalError("total loss is non-finite")
    gradient_set = GradientSet(tensors=grads)
    gradient_set.check_finite()
    return stats, gradient_set


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in params.tensor_items()},
        v={name: np.zeros_like(arr) for name, arr in params.tensor_items()},
    )


def adam_step(
    params: ModelParams,
    grads: GradientSet,
    state: AdamState,
    t: int,
    cfg: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """Standard bias-corrected Adam update, in place."""
    if t < 1:
        raise ConfigError("step index t must be >= 1")
    b1, b2 = cfg.beta1, cfg.beta2
    for name, theta in params.tensor_items():
        g = grads.tensors[name]
        if g.shape != theta.shape:
            raise SchemaError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    return params, state


def schedule_easy_hard(
    confidences: np.ndarray,
    correct: np.ndarray,
    epoch: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[list[list[int]], str]:
    """Batch plan for one epoch: alternating easy/hard batches after warmup.

    Easy = top easy_quantile of max-softmax confidence, ranked with ties
    broken by bag index, minus misclassified bags; hard = everything else.
    An empty pool falls back to plain shuffling. Returns (plan, note).
    """
    n = confidences.shape[0]
    if not cfg.easy_hard or epoch <= cfg.warmup_epochs:
        perm = rng.permutation(n)
        return _cut_batches(list(perm), cfg.batch_bags), "shuffled"
    order = np.lexsort((np.arange(n), -confidences))
    n_easy = int(round(cfg.easy_quantile * n))
    top = set(int(i) for i in order[:n_easy])
    easy = [i for i in range(n) if i in top and correct[i]]
    hard = [i for i in range(n) if i not in top or not correct[i]]
    if not easy or not hard:
        perm = rng.permutation(n)
        return _cut_batches(list(perm), cfg.batch_bags), "pool empty, shuffled"
    easy = [easy[i] for i in rng.permutation(len(easy))]
    hard = [hard[i] for i in rng.permutation(len(hard))]
    easy_batches = _cut_batches(easy, cfg.batch_bags)
    hard_batches = _cut_batches(hard, cfg.batch_bags)
    plan = []
    for a, b in zip(easy_batches, hard_batches):
        plan.append(a)
        plan.append(b)
    longer = easy_batches if len(easy_batches) > len(hard_batches) else hard_batches
    plan.extend(longer[min(len(easy_batches), len(hard_batches)) :])
    return plan, "alternating"


def _cut_batches(indices: list[int], batch_bags: int) -> list[list[int]]:
    return [
        [int(i) for i in indices[start : start + batch_bags]]
        for start in range(0, len(indices), batch_bags)
    ]


@dataclass
class EpochStats:
    epoch: int
    loss_cls: float
    loss_concept: float
    loss_total: float
    train_acc: float
    wall_ms: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochStats] = field(default_factory=list)
    backend: str = "numpy"
    notes: list[str] = field(default_factory=list)


def train(
    manifest: DatasetManifest,
    bags: list[Bag],
    cfg: TrainConfig,
    progress=None,
) -> TrainResult:
    """Seeded full training run; deterministic given (config, machine)."""
    cfg.validate()
    if not bags:
        raise SchemaError("training split is empty")
    backend = get_backend(cfg.kernel)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(
        num_classes=manifest.num_classes,
        dim=manifest.D,
        num_concepts=manifest.C,
        attention=cfg.attention,
        attention_hidden=cfg.attention_hidden,
        temperature=cfg.temperature,
        aggregate_normalized=cfg.aggregate_normalized,
        seed=seeds[0],
    )
    shuffle_rng = np.random.default_rng(seeds[1])
    prepared = prepare_bags(bags, with_clip=cfg.lambda_concept != 0.0)
    state = init_adam_state(params)
    result = TrainResult(params=params, backend=backend.NAME)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        if cfg.easy_hard and epoch > cfg.warmup_epochs:
            H_all, offsets, _, labels = pack_bags(prepared, range(len(prepared)))
            logits = backend.forward_many(params, H_all, offsets)
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            confidences = probs.max(axis=1)
            correct = np.argmax(logits, axis=1) == labels
            plan, note = schedule_easy_hard(confidences, correct, epoch, cfg, shuffle_rng)
            if note != "alternating":
                result.notes.append(f"epoch {epoch}: {note}")
        else:
            perm = shuffle_rng.permutation(len(prepared))
            plan = _cut_batches(list(perm), cfg.batch_bags)
        ce_total = 0.0
        cos_total = 0.0
        seg_total = 0
        correct_total = 0
        for batch_indices in plan:
            packed = pack_bags(prepared, batch_indices)
            (ce_sum, cos_sum, n_correct), grads = backend.batch_backward(
                params, *packed, cfg.lambda_concept
            )
            gradient_set = GradientSet(tensors=grads)
            gradient_set.check_finite()
            step += 1
            adam_step(params, gradient_set, state, step, cfg)
            ce_total += ce_sum
            cos_total += cos_sum
            seg_total += int(packed[1][-1])
            correct_total += n_correct
        l_cls = ce_total / len(prepared)
        l_con = -cos_total / seg_total if cfg.lambda_concept != 0.0 else 0.0
        stats = EpochStats(
            epoch=epoch,
            loss_cls=float(l_cls),
            loss_concept=float(l_con),
            loss_total=loss_total(l_cls, l_con, cfg.lambda_concept),
            train_acc=correct_total / len(prepared),
            wall_ms=(time.perf_counter() - started) * 1e3,
        )
        result.log.append(stats)
        if progress is not None:
            progress(stats)
    validate_params(params)
    return result


LOG_COLUMNS = ("epoch", "loss_cls", "loss_concept", "loss_total", "train_acc")


def format_training_log(log: list[EpochStats]) -> str:
    """CSV text for the on-disk loss log.

    Wall-clock timing stays on the console: output files carry no timestamps
    so reruns with the same seed are byte-identical.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in log:
        writer.writerow(
            [row.epoch, repr(row.loss_cls), repr(row.loss_concept), repr(row.loss_total), repr(row.train_acc)]
        )
    return buf.getvalue()


def _model_header(params: ModelParams) -> dict:
    tensors = []
    offset = 0
    for name, arr in params.tensor_items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    return {
        "format_version": 1,
        "dtype": "<f8",
        "model": {
            "attention": params.attention,
            "aggregate_normalized": params.aggregate_normalized,
            "temperature": params.temperature,
            "num_classes": params.num_classes,
            "D": params.dim,
            "C": params.num_concepts,
        },
        "tensors": tensors,
        "total_bytes": offset,
    }


def write_checkpoint(path, params: ModelParams) -> None:
    """JSON header + flat little-endian float64 blob, atomically written."""
    header = json.dumps(_model_header(params), sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            for _, arr in params.tensor_items():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def read_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise SchemaError(f"{path}: not a checkpoint file")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        if header.get("format_version") != 1:
            raise SchemaError(f"{path}: unsupported checkpoint version")
        blob = fh.read(header["total_bytes"])
    if len(blob) != header["total_bytes"]:
        raise SchemaError(f"{path}: truncated checkpoint blob")
    arrays = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        arrays[spec["name"]] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=start
        ).reshape(shape).copy()
    model = header["model"]
    params = ModelParams(
        w_c=arrays["w_c"],
        att_hidden=arrays.get("att_hidden"),
        att_score=arrays.get("att_score"),
        w_cls=arrays["w_cls"],
        b_cls=arrays["b_cls"],
        temperature=model["temperature"],
        attention=model["attention"],
        aggregate_normalized=model["aggregate_normalized"],
    )
    validate_params(params)
    return params
