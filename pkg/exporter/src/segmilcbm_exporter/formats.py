"""Writers for the engine's wire formats: bagpack and rawdet JSONL.

The formats are reproduced from the engine's interface contract; this
package talks to the engine only through these files and its CLI, so the
encoders live here independently.

Bagpack: line 1 is the manifest header, every further line one bag.
Rawdet: same header, every further line one image with its detections.
RLE masks are row-major alternating run lengths starting with the zero run.
"""

import json

import numpy as np

FORMAT_VERSION = 1


def encode_rle(mask: np.ndarray) -> list[int]:
    flat = (np.ravel(np.asarray(mask), order="C") != 0).astype(np.int8)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat))
    edges = np.concatenate(([-1], change, [flat.size - 1]))
    runs = np.diff(edges).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def manifest_header(num_classes: int, D: int, C: int, concept_names, split: str) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "num_classes": int(num_classes),
        "D": int(D),
        "C": int(C),
        "concept_names": list(concept_names),
        "split": split,
    }


def dumps(record: dict) -> str:
    return json.dumps(record, allow_nan=False, separators=(",", ":"))


def instance_record(embedding, clip_scores, concept_ids, bbox, mask_area) -> dict:
    return {
        "embedding": [float(v) for v in embedding],
        "clip_scores": [float(v) for v in clip_scores],
        "concept_ids": [int(c) for c in concept_ids],
        "bbox": None if bbox is None else [float(v) for v in bbox],
        "mask_area": None if mask_area is None else int(mask_area),
    }


def bag_record(image_id: str, label: int, group_id, instances: list[dict]) -> dict:
    return {
        "image_id": image_id,
        "label": int(label),
        "group_id": None if group_id is None else int(group_id),
        "instances": instances,
    }


def detection_record(concept_id, score, bbox, mask, clip_scores, embedding) -> dict:
    return {
        "concept_id": int(concept_id),
        "score": float(score),
        "bbox": [float(v) for v in bbox],
        "rle": encode_rle(mask),
        "clip_scores": None if clip_scores is None else [float(v) for v in clip_scores],
        "embedding": None if embedding is None else [float(v) for v in embedding],
    }


def rawdet_record(
    image_id: str, label: int, group_id, height: int, width: int,
    image_similarities, image_embedding, detections: list[dict],
) -> dict:
    return {
        "image_id": image_id,
        "label": int(label),
        "group_id": None if group_id is None else int(group_id),
        "height": int(height),
        "width": int(width),
        "image_similarities": [float(v) for v in image_similarities],
        "image_embedding": (
            None if image_embedding is None else [float(v) for v in image_embedding]
        ),
        "detections": detections,
    }


def write_jsonl(path, header: dict, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(header) + "\n")
        for record in records:
            fh.write(dumps(record) + "\n")
