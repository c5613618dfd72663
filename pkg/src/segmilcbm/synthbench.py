"""Synthetic spurious-correlation benchmark and embedding-space corruptions.

Each bag mixes "core" instances, drawn around one of two class mean
directions, with "background" instances drawn around one of two background
mean directions. During training the background agrees with the class with
probability spurious_corr; the test split is balanced over the four
(class x background) groups, so a model that leans on the background signal
collapses on the mismatched groups. The four mean directions are orthonormal
(seeded QR), so separability is controlled by noise_sigma alone.

Corruptions perturb embeddings only, with magnitude monotone in severity;
clip scores and metadata are untouched. Everything is seeded per bag, so
output never depends on worker count or chunking.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .bagio import Bag, DatasetManifest, Instance, write_bagpack
from .errors import ConfigError
from .milmodel import forward

NUM_CLASSES = 2
CORE_CONCEPTS = (0, 1)        # concept id = class
BACKGROUND_CONCEPTS = (2, 3)  # concept id = 2 + background
CONCEPT_LOGIT_BOOST = 4.0
CORRUPTION_KINDS = ("gauss_noise", "shot_noise", "blur_mix")
_SPLIT_CODE = {"train": 0, "test": 1}


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 1600
    n_test: int = 800
    D: int = 16
    C: int = 12
    spurious_corr: float = 0.95
    n_core: int = 2
    n_spur: int = 3
    noise_sigma: float = 0.42
    seed: int = 0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 4:
            raise ConfigError("need n_train >= 1 and n_test >= 4")
        if self.n_test % 4 != 0:
            raise ConfigError(
                f"n_test must be divisible by 4 for balanced groups, got {self.n_test}"
            )
        if self.D < 4:
            raise ConfigError("D must be >= 4 (four orthonormal mean directions)")
        if self.C < 4:
            raise ConfigError("C must be >= 4 (two core and two background concepts)")
        if not 0.0 <= self.spurious_corr <= 1.0:
            raise ConfigError(f"spurious_corr must be in [0, 1], got {self.spurious_corr}")
        if self.n_core < 1:
            raise ConfigError("n_core must be >= 1")
        if self.n_spur < 0:
            raise ConfigError("n_spur must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def concept_names(C: int) -> tuple[str, ...]:
    names = ["core_class0", "core_class1", "background_water", "background_land"]
    names += [f"distractor_{i}" for i in range(C - 4)]
    return tuple(names)


def mean_directions(spec: SynthSpec) -> np.ndarray:
    """Four orthonormal rows: class means 0/1 then background means 0/1."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD1]))
    q, _ = np.linalg.qr(rng.standard_normal((spec.D, 4)))
    return q.T.copy()


def _planted_clip(C: int, concept_id: int) -> np.ndarray:
    logits = np.zeros(C)
    logits[concept_id] = CONCEPT_LOGIT_BOOST
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _make_bag(spec, means, split: str, index: int, label: int, background: int) -> Bag:
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _SPLIT_CODE[split], index])
    )
    instances = []
    for _ in range(spec.n_core):
        emb = means[label] + spec.noise_sigma * rng.standard_normal(spec.D)
        instances.append(
            Instance(
                embedding=emb,
                clip_scores=_planted_clip(spec.C, CORE_CONCEPTS[label]),
                concept_ids=(CORE_CONCEPTS[label],),
            )
        )
    for _ in range(spec.n_spur):
        emb = means[2 + background] + spec.noise_sigma * rng.standard_normal(spec.D)
        instances.append(
            Instance(
                embedding=emb,
                clip_scores=_planted_clip(spec.C, BACKGROUND_CONCEPTS[background]),
                concept_ids=(BACKGROUND_CONCEPTS[background],),
            )
        )
    return Bag(
        image_id=f"{split}-{index:05d}",
        label=label,
        instances=instances,
        group_id=2 * label + background,
    )


def generate(spec: SynthSpec):
    """Build (train_manifest, train_bags), (test_manifest, test_bags).

    Train backgrounds match the class with probability spurious_corr; the
    test split is exactly balanced over group_id = 2 * class + background.
    """
    spec.validate()
    means = mean_directions(spec)
    names = concept_names(spec.C)
    train_bags = []
    for i in range(spec.n_train):
        label = i % 2
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB6, i]))
        matched = rng.random() < spec.spurious_corr
        background = label if matched else 1 - label
        train_bags.append(_make_bag(spec, means, "train", i, label, background))
    test_bags = []
    for i in range(spec.n_test):
        group = i % 4
        label, background = divmod(group, 2)
        test_bags.append(_make_bag(spec, means, "test", i, label, background))
    train_manifest = DatasetManifest(
        num_classes=NUM_CLASSES, D=spec.D, C=spec.C, concept_names=names, split="train"
    )
    test_manifest = DatasetManifest(
        num_classes=NUM_CLASSES, D=spec.D, C=spec.C, concept_names=names, split="test"
    )
    return (train_manifest, train_bags), (test_manifest, test_bags)


def generate_files(spec: SynthSpec, out_dir) -> tuple[str, str]:
    """Write train.bagpack, test.bagpack, and a provenance sidecar."""
    import os

    (train_manifest, train_bags), (test_manifest, test_bags) = generate(spec)
    os.makedirs(out_dir, exist_ok=True)
    train_path = os.path.join(out_dir, "train.bagpack")
    test_path = os.path.join(out_dir, "test.bagpack")
    write_bagpack(train_manifest, train_bags, train_path)
    write_bagpack(test_manifest, test_bags, test_path)
    sidecar = {"format": "synthspec", "version": 1, "spec": asdict(spec)}
    with open(os.path.join(out_dir, "synthspec.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return train_path, test_path


def corrupt(bags: list[Bag], kind: str, severity: int, seed: int) -> list[Bag]:
    """Seeded embedding perturbation with magnitude monotone in severity."""
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind {kind!r}, expected {CORRUPTION_KINDS}")
    if not isinstance(severity, int) or isinstance(severity, bool) or not 1 <= severity <= 5:
        raise ConfigError(f"severity must be an integer in 1..5, got {severity!r}")
    kind_code = CORRUPTION_KINDS.index(kind)
    out = []
    for bag_index, bag in enumerate(bags):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, kind_code, severity, bag_index])
        )
        H = np.asarray([inst.embedding for inst in bag.instances])
        if kind == "gauss_noise":
            rms = np.sqrt(np.mean(H * H, axis=1, keepdims=True))
            H_new = H + 0.1 * severity * rms * rng.standard_normal(H.shape)
        elif kind == "shot_noise":
            lam = 30.0 / severity
            H_new = H * (rng.poisson(lam, size=H.shape) / lam)
        else:  # blur_mix: convex pull toward the bag mean
            weight = 0.15 * severity
            H_new = (1.0 - weight) * H + weight * H.mean(axis=0, keepdims=True)
        instances = [
            Instance(
                embedding=H_new[i],
                clip_scores=inst.clip_scores,
                concept_ids=inst.concept_ids,
                bbox=inst.bbox,
                mask_area=inst.mask_area,
            )
            for i, inst in enumerate(bag.instances)
        ]
        out.append(
            Bag(
                image_id=bag.image_id,
                label=bag.label,
                instances=instances,
                group_id=bag.group_id,
            )
        )
    return out


def make_suite(bags: list[Bag], kinds, seed: int) -> dict:
    """Full (kind x severity) corruption suite for corruption_eval."""
    return {
        kind: {severity: corrupt(bags, kind, severity, seed) for severity in range(1, 6)}
        for kind in kinds
    }


def attention_mass(params, bags: list[Bag]) -> tuple[float, float]:
    """Mean attention mass on core vs background instances, averaged over
    bags that contain both kinds."""
    core_masses = []
    spur_masses = []
    for bag in bags:
        kinds = np.asarray(
            [inst.concept_ids[0] in CORE_CONCEPTS for inst in bag.instances]
        )
        if kinds.all() or not kinds.any():
            continue
        H = np.asarray([inst.embedding for inst in bag.instances])
        alpha = forward(params, H).alpha
        core_masses.append(float(alpha[kinds].sum()))
        spur_masses.append(float(alpha[~kinds].sum()))
    if not core_masses:
        raise ConfigError("no bags contain both core and background instances")
    return float(np.mean(core_masses)), float(np.mean(spur_masses))
