"""Export pipeline: images -> concept-scored detections -> rawdet + bagpack.

Per image: score concepts, keep the top K by softmax-normalized similarity,
detect boxes per concept, segment inside each box, and emit the raw
detections (rawdet). For the bagpack, masks are area-filtered, overlapping
masks merged (IoU components to a fixpoint, union semantics), and each
merged segment is re-encoded from its masked crop, so merged instances carry
real embeddings rather than averages. Images with no surviving segments get
a whole-image fallback instance. Unreadable images are recorded and skipped;
the run continues.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import formats
from .backends import ModelLoadError, make_backend

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ExportConfig:
    dataset_root: str
    vocab_path: str
    out_dir: str
    backend: str = "builtin"
    backbone: str = "resnet50"
    device: str = "cpu"
    dim: int = 64
    k_top: int = 8
    box_threshold: float = 0.3
    tau_iou: float = 0.5
    tau_minpix: int = 100
    rho_max: float = 0.5
    max_instances: int = 15
    crop_policy: str = "crop"
    split: str = "train"
    seed: int = 0

    def validate(self) -> None:
        if self.crop_policy not in ("crop", "image-level"):
            raise ValueError(f"crop_policy must be crop or image-level, got {self.crop_policy!r}")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"split must be train/val/test, got {self.split!r}")
        if self.k_top < 1:
            raise ValueError("k_top must be >= 1")
        if not 0 < self.tau_iou <= 1:
            raise ValueError("tau_iou must be in (0, 1]")
        if self.tau_minpix < 1:
            raise ValueError("tau_minpix must be >= 1")
        if not 0 < self.rho_max <= 1:
            raise ValueError("rho_max must be in (0, 1]")
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")


@dataclass
class ExportResult:
    rawdet_path: str
    bagpack_path: str
    n_images: int = 0
    n_errors: int = 0
    errors: list = field(default_factory=list)


def load_vocabulary(path: str) -> list[str]:
    names = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                names.append(line)
    if not names:
        raise ValueError(f"{path}: concept vocabulary is empty")
    return names


def discover_dataset(root: str) -> tuple[list[str], list[tuple[str, int]]]:
    """Class subdirectories become labels (sorted); returns (classes, items)."""
    classes = sorted(
        entry for entry in os.listdir(root)
        if os.path.isdir(os.path.join(root, entry))
    )
    if len(classes) < 2:
        raise ValueError(f"{root}: need at least two class directories, found {classes}")
    items = []
    for label, cls in enumerate(classes):
        folder = os.path.join(root, cls)
        for name in sorted(os.listdir(folder)):
            if name.lower().endswith(IMAGE_EXTENSIONS):
                items.append((os.path.join(folder, name), label))
    if not items:
        raise ValueError(f"{root}: no images found")
    return classes, items


def softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - np.max(values)
    e = np.exp(shifted)
    return e / e.sum()


def top_concepts(similarities: np.ndarray, k: int) -> list[int]:
    probs = softmax(similarities)
    order = np.lexsort((np.arange(probs.shape[0]), -probs))
    return [int(i) for i in order[:k]]


def masked_crop(image: np.ndarray, mask: np.ndarray, bbox) -> np.ndarray:
    """Tight bbox crop with pixels outside the mask zeroed."""
    x0, y0, x1, y1 = (int(round(v)) for v in bbox)
    crop = image[y0:y1, x0:x1].copy()
    crop[~mask[y0:y1, x0:x1]] = 0
    return crop


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def merge_segments(segments: list[dict], tau_iou: float) -> list[dict]:
    """Union-find components of the IoU graph, repeated until stable."""
    current = list(segments)
    while True:
        n = len(current)
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        merged_any = False
        for i in range(n):
            for j in range(i + 1, n):
                if _mask_iou(current[i]["mask"], current[j]["mask"]) > tau_iou:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
                        merged_any = True
        if not merged_any:
            break
        buckets = {}
        for i in range(n):
            buckets.setdefault(find(i), []).append(i)
        next_round = []
        for root in sorted(buckets):
            members = [current[i] for i in buckets[root]]
            mask = members[0]["mask"].copy()
            for m in members[1:]:
                mask |= m["mask"]
            next_round.append(
                {
                    "mask": mask,
                    "bbox": (
                        min(m["bbox"][0] for m in members),
                        min(m["bbox"][1] for m in members),
                        max(m["bbox"][2] for m in members),
                        max(m["bbox"][3] for m in members),
                    ),
                    "concept_ids": sorted({c for m in members for c in m["concept_ids"]}),
                    "score": max(m["score"] for m in members),
                    "order": min(m["order"] for m in members),
                }
            )
        current = next_round
    current.sort(key=lambda s: (-int(np.count_nonzero(s["mask"])), s["order"]))
    return current


def export(config: ExportConfig) -> ExportResult:
    config.validate()
    concept_names = load_vocabulary(config.vocab_path)
    backend = make_backend(
        config.backend, concept_names, config.backbone, config.device,
        config.dim, config.seed,
    )
    classes, items = discover_dataset(config.dataset_root)
    os.makedirs(config.out_dir, exist_ok=True)
    header = formats.manifest_header(
        num_classes=len(classes), D=backend.dim, C=len(concept_names),
        concept_names=concept_names, split=config.split,
    )

    raw_records = []
    bag_records = []
    errors = []
    for image_path, label in items:
        image_id = os.path.relpath(image_path, config.dataset_root)
        try:
            with Image.open(image_path) as handle:
                image = np.asarray(handle.convert("RGB"))
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            errors.append({"image_id": image_id, "error": str(exc)})
            continue
        raw_record, bag_record = _export_image(
            backend, config, concept_names, image, image_id, label
        )
        raw_records.append(raw_record)
        bag_records.append(bag_record)

    rawdet_path = os.path.join(config.out_dir, "rawdet.jsonl")
    bagpack_path = os.path.join(config.out_dir, "export.bagpack")
    formats.write_jsonl(rawdet_path, header, raw_records)
    formats.write_jsonl(bagpack_path, header, bag_records)
    if errors:
        formats.write_jsonl(
            os.path.join(config.out_dir, "errors.jsonl"),
            {"format_version": 1, "kind": "export-errors"},
            errors,
        )
    return ExportResult(
        rawdet_path=rawdet_path,
        bagpack_path=bagpack_path,
        n_images=len(raw_records),
        n_errors=len(errors),
        errors=errors,
    )


def _segment_clip_scores(backend, config, image, mask, bbox, image_similarities):
    if config.crop_policy == "image-level":
        return softmax(image_similarities)
    crop = masked_crop(image, mask, bbox)
    if crop.size == 0:
        return softmax(image_similarities)
    return softmax(backend.concept_similarities(crop))


def _export_image(backend, config, concept_names, image, image_id, label):
    height, width = image.shape[:2]
    image_similarities = backend.concept_similarities(image)
    image_embedding = backend.embed(image)
    selected = top_concepts(image_similarities, min(config.k_top, len(concept_names)))

    detections = []
    segments = []
    order = 0
    for concept_id in selected:
        for bbox, score in backend.detect(image, concept_id, config.box_threshold):
            mask = backend.segment(image, bbox)
            area = int(np.count_nonzero(mask))
            if area < 1:
                continue
            clip = _segment_clip_scores(backend, config, image, mask, bbox, image_similarities)
            embedding = backend.embed(masked_crop(image, mask, bbox))
            detections.append(
                formats.detection_record(concept_id, score, bbox, mask, clip, embedding)
            )
            if config.tau_minpix <= area <= config.rho_max * height * width:
                segments.append(
                    {
                        "mask": mask,
                        "bbox": bbox,
                        "concept_ids": [concept_id],
                        "score": score,
                        "order": order,
                    }
                )
            order += 1

    raw_record = formats.rawdet_record(
        image_id, label, None, height, width,
        image_similarities, image_embedding, detections,
    )

    merged = merge_segments(segments, config.tau_iou)[: config.max_instances]
    instances = []
    for segment in merged:
        clip = _segment_clip_scores(
            backend, config, image, segment["mask"], segment["bbox"], image_similarities
        )
        embedding = backend.embed(masked_crop(image, segment["mask"], segment["bbox"]))
        instances.append(
            formats.instance_record(
                embedding, clip, segment["concept_ids"], segment["bbox"],
                int(np.count_nonzero(segment["mask"])),
            )
        )
    if not instances:
        instances.append(
            formats.instance_record(
                image_embedding, softmax(image_similarities), [],
                (0.0, 0.0, float(width), float(height)), height * width,
            )
        )
    return raw_record, formats.bag_record(image_id, label, None, instances)
