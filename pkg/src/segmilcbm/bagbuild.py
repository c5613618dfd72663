"""Bag construction from precomputed detections.

Pipeline per image: rank concepts by softmax-normalized image similarity and
keep the top K, drop detections of unselected concepts, filter masks by area
bounds, merge overlapping masks into multi-concept segments, and assemble a
bag capped at max_instances. Images that end up with no segments get a single
whole-image fallback instance so every bag has at least one instance.

Merging unions the masks of every connected component of the IoU graph
(edges where IoU > tau_iou) and repeats until no pair of merged masks still
exceeds the threshold; a single pass is not idempotent because unions can
create new overlaps.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rle
from .bagio import (
    Bag,
    DatasetManifest,
    Instance,
    _loads,
    _numbers,
    _require_keys,
    dumps_record,
    manifest_header,
    parse_manifest_header,
)
from .errors import ConfigError, FormatError, ParseError, SchemaError


@dataclass(frozen=True)
class BuildConfig:
    """Thresholds for concept selection, mask filtering, and merging."""

    k_top: int = 8
    tau_iou: float = 0.5
    tau_minpix: int = 100
    rho_max: float = 0.5
    max_instances: int = 15

    def validate(self) -> None:
        if not isinstance(self.k_top, int) or self.k_top < 1:
            raise ConfigError(f"k_top must be a positive integer, got {self.k_top!r}")
        if not 0 < self.tau_iou <= 1:
            raise ConfigError(f"tau_iou must be in (0, 1], got {self.tau_iou!r}")
        if not isinstance(self.tau_minpix, int) or self.tau_minpix < 1:
            raise ConfigError(f"tau_minpix must be an integer >= 1, got {self.tau_minpix!r}")
        if not 0 < self.rho_max <= 1:
            raise ConfigError(f"rho_max must be in (0, 1], got {self.rho_max!r}")
        if not isinstance(self.max_instances, int) or self.max_instances < 1:
            raise ConfigError(f"max_instances must be >= 1, got {self.max_instances!r}")


@dataclass
class RawDetection:
    """One detected segment; merged segments reuse this type with the
    concept id union, so merging is closed over its own output."""

    concept_ids: tuple[int, ...]
    bbox: tuple[float, float, float, float]
    mask: np.ndarray
    score: float = 0.0
    clip_scores: np.ndarray | None = None
    embedding: np.ndarray | None = None
    source_index: int = 0

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


def select_top_concepts(image_similarities: np.ndarray, k_top: int) -> list[int]:
    """Indices of the k_top highest softmax-normalized similarities,
    descending, ties broken by ascending concept id."""
    sims = np.asarray(image_similarities, dtype=np.float64)
    if sims.ndim != 1:
        raise SchemaError(f"image similarities must be a vector, got shape {sims.shape}")
    if not np.all(np.isfinite(sims)):
        raise SchemaError("image similarities contain non-finite values")
    if not 1 <= k_top <= sims.shape[0]:
        raise ConfigError(f"k_top must be in [1, {sims.shape[0]}], got {k_top}")
    shifted = sims - np.max(sims)
    probs = np.exp(shifted)
    probs /= probs.sum()
    order = np.lexsort((np.arange(sims.shape[0]), -probs))
    return [int(i) for i in order[:k_top]]


def softmax_scores(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    v = v - np.max(v)
    e = np.exp(v)
    return e / e.sum()


def filter_masks(
    dets: list[RawDetection], image_size: tuple[int, int], cfg: BuildConfig
) -> list[RawDetection]:
    """Keep detections with tau_minpix <= area <= rho_max * H * W, inclusive."""
    H, W = image_size
    limit = cfg.rho_max * H * W
    kept = []
    for d in dets:
        if d.mask.shape != (H, W):
            raise SchemaError(
                f"mask shape {d.mask.shape} does not match image size {(H, W)}"
            )
        if cfg.tau_minpix <= d.area <= limit:
            kept.append(d)
    return kept


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    if a.shape != b.shape:
        raise SchemaError(f"mask dimension mismatch: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def _components(dets: list[RawDetection], tau_iou: float) -> list[list[int]]:
    """Connected components of the IoU graph, by breadth-first search."""
    n = len(dets)
    adjacency = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if mask_iou(dets[i].mask, dets[j].mask) > tau_iou:
                adjacency[i].append(j)
                adjacency[j].append(i)
    seen = [False] * n
    components = []
    for start in range(n):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        comp = []
        while queue:
            node = queue.pop()
            comp.append(node)
            for nxt in adjacency[node]:
                if not seen[nxt]:
                    seen[nxt] = True
                    queue.append(nxt)
        components.append(sorted(comp))
    return components


def _merge_component(dets: list[RawDetection], comp: list[int]) -> RawDetection:
    members = [dets[i] for i in comp]
    mask = members[0].mask.copy()
    for m in members[1:]:
        mask |= m.mask != 0
    bbox = (
        min(m.bbox[0] for m in members),
        min(m.bbox[1] for m in members),
        max(m.bbox[2] for m in members),
        max(m.bbox[3] for m in members),
    )
    concept_ids = tuple(sorted({c for m in members for c in m.concept_ids}))
    clip = None
    if all(m.clip_scores is not None for m in members):
        clip = members[0].clip_scores.copy()
        for m in members[1:]:
            clip = np.maximum(clip, m.clip_scores)
    # Largest-area member donates the embedding; pretrained features are
    # never averaged. Re-encoding the merged crop is the producer's job.
    donor = max(members, key=lambda m: (m.area, -m.source_index))
    return RawDetection(
        concept_ids=concept_ids,
        bbox=bbox,
        mask=mask,
        score=max(m.score for m in members),
        clip_scores=clip,
        embedding=None if donor.embedding is None else donor.embedding.copy(),
        source_index=min(m.source_index for m in members),
    )


def merge_overlapping(dets: list[RawDetection], tau_iou: float) -> list[RawDetection]:
    """Union each connected overlap component into one detection, repeating
    until stable, then order by descending area (ties by source index)."""
    if not 0 < tau_iou <= 1:
        raise ConfigError(f"tau_iou must be in (0, 1], got {tau_iou!r}")
    current = [
        RawDetection(
            concept_ids=d.concept_ids,
            bbox=d.bbox,
            mask=d.mask,
            score=d.score,
            clip_scores=d.clip_scores,
            embedding=d.embedding,
            source_index=i,
        )
        for i, d in enumerate(dets)
    ]
    while True:
        components = _components(current, tau_iou)
        if all(len(c) == 1 for c in components):
            break
        current = [_merge_component(current, comp) for comp in components]
    current.sort(key=lambda d: (-d.area, d.source_index))
    return current


def assemble_bag(
    image_id: str,
    label: int,
    group_id: int | None,
    merged: list[RawDetection],
    per_instance_clip: list[np.ndarray],
    cfg: BuildConfig,
    image_size: tuple[int, int],
    image_similarities: np.ndarray,
    image_embedding: np.ndarray | None,
) -> Bag:
    """One Instance per merged detection, capped at cfg.max_instances by
    descending area; an empty merge list falls back to a single whole-image
    instance carrying the softmax image similarities."""
    if len(merged) != len(per_instance_clip):
        raise SchemaError(
            f"image {image_id}: {len(merged)} merged detections but "
            f"{len(per_instance_clip)} clip vectors"
        )
    H, W = image_size
    if not merged:
        if image_embedding is None:
            raise SchemaError(
                f"image {image_id}: no detections survive and no image embedding "
                "is available for the whole-image fallback"
            )
        fallback = Instance(
            embedding=image_embedding,
            clip_scores=softmax_scores(image_similarities),
            concept_ids=(),
            bbox=(0.0, 0.0, float(W), float(H)),
            mask_area=H * W,
        )
        return Bag(image_id=image_id, label=label, instances=[fallback], group_id=group_id)
    order = sorted(range(len(merged)), key=lambda i: (-merged[i].area, i))
    order = order[: cfg.max_instances]
    instances = []
    for i in order:
        det = merged[i]
        if det.embedding is None:
            raise SchemaError(
                f"image {image_id}: merged detection {i} carries no embedding"
            )
        instances.append(
            Instance(
                embedding=det.embedding,
                clip_scores=per_instance_clip[i],
                concept_ids=det.concept_ids,
                bbox=det.bbox,
                mask_area=det.area,
            )
        )
    return Bag(image_id=image_id, label=label, instances=instances, group_id=group_id)


@dataclass
class RawImage:
    """One parsed rawdet line."""

    image_id: str
    label: int
    group_id: int | None
    height: int
    width: int
    image_similarities: np.ndarray
    image_embedding: np.ndarray | None
    detections: list[RawDetection] = field(default_factory=list)


_RAW_IMAGE_KEYS = {
    "image_id",
    "label",
    "group_id",
    "height",
    "width",
    "image_similarities",
    "image_embedding",
    "detections",
}
_RAW_DET_KEYS = {"concept_id", "score", "bbox", "rle", "clip_scores", "embedding"}


def _raw_detection_from_json(record: dict, manifest: DatasetManifest, H: int, W: int, where: str, index: int) -> RawDetection:
    _require_keys(record, _RAW_DET_KEYS, where)
    concept_id = record["concept_id"]
    if not isinstance(concept_id, int) or isinstance(concept_id, bool):
        raise SchemaError(f"{where}: concept_id must be an integer")
    if not 0 <= concept_id < manifest.C:
        raise SchemaError(f"{where}: concept_id {concept_id} out of range [0, {manifest.C})")
    bbox = tuple(_numbers(record["bbox"], where, "bbox"))
    if len(bbox) != 4 or not (bbox[0] < bbox[2] and bbox[1] < bbox[3]):
        raise SchemaError(f"{where}: bbox must be [x0, y0, x1, y1] with x0 < x1, y0 < y1")
    mask = rle.decode_mask(record["rle"], H, W)
    if not mask.any():
        raise SchemaError(f"{where}: mask has no foreground pixels")
    clip = record["clip_scores"]
    if clip is not None:
        clip = np.asarray(_numbers(clip, where, "clip_scores"))
        if clip.shape != (manifest.C,) or not np.all(np.isfinite(clip)) or np.any(clip < 0):
            raise SchemaError(f"{where}: clip_scores must be {manifest.C} finite values >= 0")
    emb = record["embedding"]
    if emb is not None:
        emb = np.asarray(_numbers(emb, where, "embedding"))
        if emb.shape != (manifest.D,) or not np.all(np.isfinite(emb)):
            raise SchemaError(f"{where}: embedding must be {manifest.D} finite values")
    score = record["score"]
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not np.isfinite(score):
        raise SchemaError(f"{where}: score must be a finite number")
    return RawDetection(
        concept_ids=(concept_id,),
        bbox=bbox,
        mask=mask,
        score=float(score),
        clip_scores=clip,
        embedding=emb,
        source_index=index,
    )


def _raw_image_from_json(record: dict, manifest: DatasetManifest, index: int) -> RawImage:
    where = f"image {index}"
    _require_keys(record, _RAW_IMAGE_KEYS, where)
    for key in ("height", "width"):
        if not isinstance(record[key], int) or isinstance(record[key], bool) or record[key] < 1:
            raise SchemaError(f"{where}: {key} must be a positive integer")
    H, W = record["height"], record["width"]
    sims = np.asarray(_numbers(record["image_similarities"], where, "image_similarities"))
    if sims.shape != (manifest.C,) or not np.all(np.isfinite(sims)):
        raise SchemaError(f"{where}: image_similarities must be {manifest.C} finite values")
    emb = record["image_embedding"]
    if emb is not None:
        emb = np.asarray(_numbers(emb, where, "image_embedding"))
        if emb.shape != (manifest.D,) or not np.all(np.isfinite(emb)):
            raise SchemaError(f"{where}: image_embedding must be {manifest.D} finite values")
    label = record["label"]
    if not isinstance(label, int) or isinstance(label, bool):
        raise SchemaError(f"{where}: label must be an integer")
    if not 0 <= label < manifest.num_classes:
        raise SchemaError(f"{where}: label {label} out of range [0, {manifest.num_classes})")
    group_id = record["group_id"]
    if group_id is not None and (not isinstance(group_id, int) or isinstance(group_id, bool)):
        raise SchemaError(f"{where}: group_id must be an integer or null")
    if not isinstance(record["detections"], list):
        raise SchemaError(f"{where}: detections must be a list")
    dets = [
        _raw_detection_from_json(d, manifest, H, W, f"{where}: detection {j}", j)
        for j, d in enumerate(record["detections"])
    ]
    return RawImage(
        image_id=record["image_id"],
        label=int(label),
        group_id=group_id,
        height=H,
        width=W,
        image_similarities=sims,
        image_embedding=emb,
        detections=dets,
    )


def iter_rawdet(path):
    """Yield the manifest, then RawImage records, in file order."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise FormatError(f"{path}: empty file, expected a header line")
        manifest = parse_manifest_header(_loads(first, 1))
        yield manifest
        index = 0
        for line_number, line in enumerate(fh, start=2):
            if not line.endswith("\n"):
                raise ParseError("truncated final line", line_number)
            record = _loads(line, line_number)
            yield _raw_image_from_json(record, manifest, index)
            index += 1


@dataclass
class BuildCounts:
    detections: int = 0
    selected: int = 0
    kept_after_filter: int = 0
    merged: int = 0
    in_bag: int = 0


def build_bag(raw: RawImage, manifest: DatasetManifest, cfg: BuildConfig) -> tuple[Bag, BuildCounts]:
    """Run the full per-image pipeline on one rawdet record."""
    cfg.validate()
    counts = BuildCounts(detections=len(raw.detections))
    k = min(cfg.k_top, manifest.C)
    top = set(select_top_concepts(raw.image_similarities, k))
    selected = [d for d in raw.detections if any(c in top for c in d.concept_ids)]
    counts.selected = len(selected)
    filtered = filter_masks(selected, (raw.height, raw.width), cfg)
    counts.kept_after_filter = len(filtered)
    merged = merge_overlapping(filtered, cfg.tau_iou)
    counts.merged = len(merged)
    fallback_clip = softmax_scores(raw.image_similarities)
    per_clip = [
        d.clip_scores if d.clip_scores is not None else fallback_clip for d in merged
    ]
    bag = assemble_bag(
        raw.image_id,
        raw.label,
        raw.group_id,
        merged,
        per_clip,
        cfg,
        (raw.height, raw.width),
        raw.image_similarities,
        raw.image_embedding,
    )
    counts.in_bag = len(bag.instances)
    return bag, counts


def write_rawdet(manifest: DatasetManifest, images: list[dict], path) -> None:
    """Write a rawdet file from already-JSON-shaped image records."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_record(manifest_header(manifest)) + "\n")
        for record in images:
            fh.write(dumps_record(record) + "\n")
