"""Bag data model and the line-delimited bagpack interchange format.

A bagpack file is UTF-8 JSONL: the first line is a header record carrying the
dataset manifest, every following line is one bag. Reals are serialized with
Python's shortest round-trip repr, so read(write(x)) is value-exact. NaN or
Inf anywhere in a numeric payload is a hard schema error, on both paths.

Group coverage is all-or-nothing per file: either every bag carries a
group_id or none does. Mixed coverage would silently corrupt worst-group
numbers downstream, so it is rejected here.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParseError, SchemaError

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


@dataclass(eq=False)
class Instance:
    """One segment: backbone embedding plus its concept evidence."""

    embedding: np.ndarray
    clip_scores: np.ndarray
    concept_ids: tuple[int, ...] = ()
    bbox: tuple[float, float, float, float] | None = None
    mask_area: int | None = None

    def __post_init__(self):
        self.embedding = _readonly(np.asarray(self.embedding, dtype=np.float64))
        self.clip_scores = _readonly(np.asarray(self.clip_scores, dtype=np.float64))
        self.concept_ids = tuple(int(c) for c in self.concept_ids)
        if self.bbox is not None:
            self.bbox = tuple(float(v) for v in self.bbox)
        if self.mask_area is not None:
            self.mask_area = int(self.mask_area)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            np.array_equal(self.embedding, other.embedding)
            and np.array_equal(self.clip_scores, other.clip_scores)
            and self.concept_ids == other.concept_ids
            and self.bbox == other.bbox
            and self.mask_area == other.mask_area
        )


@dataclass(eq=False)
class Bag:
    """An image's set of instances with its label and optional eval group."""

    image_id: str
    label: int
    instances: list[Instance]
    group_id: int | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.label == other.label
            and self.group_id == other.group_id
            and self.instances == other.instances
        )

    @property
    def size(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset-level dimensions and concept vocabulary."""

    num_classes: int
    D: int
    C: int
    concept_names: tuple[str, ...] = field(default_factory=tuple)
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "concept_names", tuple(self.concept_names))


def validate_manifest(manifest: DatasetManifest) -> None:
    if not _is_int(manifest.num_classes) or manifest.num_classes < 2:
        raise SchemaError(f"num_classes must be an integer >= 2, got {manifest.num_classes!r}")
    if not _is_int(manifest.D) or manifest.D < 1:
        raise SchemaError(f"D must be a positive integer, got {manifest.D!r}")
    if not _is_int(manifest.C) or manifest.C < 1:
        raise SchemaError(f"C must be a positive integer, got {manifest.C!r}")
    if len(manifest.concept_names) != manifest.C:
        raise SchemaError(
            f"concept_names length mismatch (expected {manifest.C}, got {len(manifest.concept_names)})"
        )
    if not all(isinstance(n, str) for n in manifest.concept_names):
        raise SchemaError("concept_names must all be strings")
    if manifest.split not in SPLITS:
        raise SchemaError(f"split must be one of {SPLITS}, got {manifest.split!r}")


def validate_instance(inst: Instance, manifest: DatasetManifest, where: str) -> None:
    """Check one instance against the manifest; `where` prefixes messages."""
    emb = inst.embedding
    if emb.ndim != 1 or emb.shape[0] != manifest.D:
        raise SchemaError(
            f"{where}: embedding length mismatch (expected {manifest.D}, got {emb.shape})"
        )
    if not np.all(np.isfinite(emb)):
        raise SchemaError(f"{where}: embedding contains non-finite values")
    cs = inst.clip_scores
    if cs.ndim != 1 or cs.shape[0] != manifest.C:
        raise SchemaError(
            f"{where}: clip_scores length mismatch (expected {manifest.C}, got {cs.shape[0] if cs.ndim == 1 else cs.shape})"
        )
    if not np.all(np.isfinite(cs)):
        raise SchemaError(f"{where}: clip_scores contains non-finite values")
    if np.any(cs < 0):
        raise SchemaError(f"{where}: clip_scores must be >= 0")
    for cid in inst.concept_ids:
        if not 0 <= cid < manifest.C:
            raise SchemaError(f"{where}: concept_id {cid} out of range [0, {manifest.C})")
    if inst.bbox is not None:
        if len(inst.bbox) != 4 or not all(np.isfinite(v) for v in inst.bbox):
            raise SchemaError(f"{where}: bbox must be 4 finite numbers")
        x0, y0, x1, y1 = inst.bbox
        if not (x0 < x1 and y0 < y1):
            raise SchemaError(f"{where}: bbox must satisfy x_min < x_max and y_min < y_max")
    if inst.mask_area is not None and inst.mask_area < 1:
        raise SchemaError(f"{where}: mask_area must be >= 1 when present")


def validate_bag(bag: Bag, manifest: DatasetManifest, bag_index: int) -> None:
    where = f"bag {bag_index}"
    if not isinstance(bag.image_id, str) or not bag.image_id:
        raise SchemaError(f"{where}: image_id must be a non-empty string")
    if not _is_int(bag.label) or not 0 <= bag.label < manifest.num_classes:
        raise SchemaError(
            f"{where}: label {bag.label!r} out of range [0, {manifest.num_classes})"
        )
    if bag.group_id is not None and not _is_int(bag.group_id):
        raise SchemaError(f"{where}: group_id must be an integer or null")
    if len(bag.instances) < 1:
        raise SchemaError(f"{where}: bag must contain at least one instance")
    for i, inst in enumerate(bag.instances):
        validate_instance(inst, manifest, f"{where}: instance {i}")


def _instance_to_json(inst: Instance) -> dict:
    return {
        "embedding": [float(v) for v in inst.embedding],
        "clip_scores": [float(v) for v in inst.clip_scores],
        "concept_ids": list(inst.concept_ids),
        "bbox": None if inst.bbox is None else [float(v) for v in inst.bbox],
        "mask_area": inst.mask_area,
    }


def _bag_to_json(bag: Bag) -> dict:
    return {
        "image_id": bag.image_id,
        "label": int(bag.label),
        "group_id": None if bag.group_id is None else int(bag.group_id),
        "instances": [_instance_to_json(i) for i in bag.instances],
    }


_INSTANCE_KEYS = {"embedding", "clip_scores", "concept_ids", "bbox", "mask_area"}
_BAG_KEYS = {"image_id", "label", "group_id", "instances"}
_HEADER_KEYS = {"format_version", "num_classes", "D", "C", "concept_names", "split"}


def _require_keys(record: dict, required: set[str], where: str) -> None:
    missing = required - record.keys()
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")
    unknown = record.keys() - required
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")


def _numbers(value, where: str, name: str) -> list[float]:
    if not isinstance(value, list):
        raise SchemaError(f"{where}: {name} must be a list of numbers")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{where}: {name} must contain only numbers")
        out.append(float(v))
    return out


def _instance_from_json(record: dict, where: str) -> Instance:
    if not isinstance(record, dict):
        raise SchemaError(f"{where}: instance must be an object")
    _require_keys(record, _INSTANCE_KEYS, where)
    concept_ids = record["concept_ids"]
    if not isinstance(concept_ids, list) or not all(_is_int(c) for c in concept_ids):
        raise SchemaError(f"{where}: concept_ids must be a list of integers")
    bbox = record["bbox"]
    if bbox is not None:
        bbox = tuple(_numbers(bbox, where, "bbox"))
    mask_area = record["mask_area"]
    if mask_area is not None and not _is_int(mask_area):
        raise SchemaError(f"{where}: mask_area must be an integer or null")
    return Instance(
        embedding=np.asarray(_numbers(record["embedding"], where, "embedding")),
        clip_scores=np.asarray(_numbers(record["clip_scores"], where, "clip_scores")),
        concept_ids=tuple(int(c) for c in concept_ids),
        bbox=bbox,
        mask_area=mask_area,
    )


def _bag_from_json(record: dict, bag_index: int) -> Bag:
    where = f"bag {bag_index}"
    if not isinstance(record, dict):
        raise SchemaError(f"{where}: bag record must be an object")
    _require_keys(record, _BAG_KEYS, where)
    if not isinstance(record["instances"], list):
        raise SchemaError(f"{where}: instances must be a list")
    instances = [
        _instance_from_json(r, f"{where}: instance {i}")
        for i, r in enumerate(record["instances"])
    ]
    label = record["label"]
    if not _is_int(label):
        raise SchemaError(f"{where}: label must be an integer")
    group_id = record["group_id"]
    if group_id is not None and not _is_int(group_id):
        raise SchemaError(f"{where}: group_id must be an integer or null")
    image_id = record["image_id"]
    if not isinstance(image_id, str):
        raise SchemaError(f"{where}: image_id must be a string")
    return Bag(image_id=image_id, label=int(label), instances=instances, group_id=group_id)


def check_group_coverage(bags, where: str = "dataset") -> bool:
    """Return True if bags carry group ids; raise on mixed coverage."""
    has_group = None
    for i, bag in enumerate(bags):
        this = bag.group_id is not None
        if has_group is None:
            has_group = this
        elif this != has_group:
            raise SchemaError(
                f"{where}: mixed group coverage (bag {i} "
                f"{'has' if this else 'lacks'} group_id, earlier bags do not match)"
            )
    return bool(has_group)


def manifest_header(manifest: DatasetManifest) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "num_classes": int(manifest.num_classes),
        "D": int(manifest.D),
        "C": int(manifest.C),
        "concept_names": list(manifest.concept_names),
        "split": manifest.split,
    }


def parse_manifest_header(record: dict) -> DatasetManifest:
    if not isinstance(record, dict):
        raise FormatError("header must be a JSON object")
    _require_keys(record, _HEADER_KEYS, "header")
    if record["format_version"] != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format_version {record['format_version']!r} (expected {FORMAT_VERSION})"
        )
    if not isinstance(record["concept_names"], list):
        raise SchemaError("header: concept_names must be a list")
    manifest = DatasetManifest(
        num_classes=record["num_classes"],
        D=record["D"],
        C=record["C"],
        concept_names=tuple(record["concept_names"]),
        split=record["split"],
    )
    validate_manifest(manifest)
    return manifest


def _reject_constant(token: str):
    raise SchemaError(f"non-finite number {token!r} in payload")


def _loads(line: str, line_number: int) -> dict:
    try:
        return json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", line_number) from exc


def dumps_record(record: dict) -> str:
    return json.dumps(record, allow_nan=False, separators=(",", ":"))


def write_bagpack(manifest: DatasetManifest, bags, path) -> None:
    """Write a validated bagpack file atomically."""
    validate_manifest(manifest)
    bags = list(bags)
    for i, bag in enumerate(bags):
        validate_bag(bag, manifest, i)
    check_group_coverage(bags, where=str(path))
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(dumps_record(manifest_header(manifest)) + "\n")
            for bag in bags:
                fh.write(dumps_record(_bag_to_json(bag)) + "\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def iter_bagpack(path):
    """Yield the manifest, then validated bags, in file order.

    The first yielded item is the DatasetManifest; every later item is a Bag.
    Group coverage is checked incrementally so a generator consumer still
    sees the mixed-coverage schema error at the offending bag.
    """
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise FormatError(f"{path}: empty file, expected a header line")
        if not first.endswith("\n"):
            raise ParseError("truncated header line", 1)
        manifest = parse_manifest_header(_loads(first, 1))
        yield manifest
        has_group = None
        bag_index = 0
        for line_number, line in enumerate(fh, start=2):
            if not line.endswith("\n"):
                raise ParseError("truncated final line", line_number)
            if not line.strip():
                raise ParseError("blank line in bagpack", line_number)
            record = _loads(line, line_number)
            try:
                bag = _bag_from_json(record, bag_index)
                validate_bag(bag, manifest, bag_index)
            except SchemaError as exc:
                raise SchemaError(f"{path}: {exc}") from exc
            this = bag.group_id is not None
            if has_group is None:
                has_group = this
            elif this != has_group:
                raise SchemaError(
                    f"{path}: mixed group coverage at bag {bag_index}"
                )
            yield bag
            bag_index += 1


def read_bagpack(path) -> tuple[DatasetManifest, list[Bag]]:
    """Load and validate a whole bagpack file."""
    stream = iter_bagpack(path)
    manifest = next(stream)
    return manifest, list(stream)
