import numpy as np
import pytest

from segmilcbm.bagio import Bag, DatasetManifest, Instance


@pytest.fixture
def tiny_manifest():
    return DatasetManifest(
        num_classes=3,
        D=4,
        C=3,
        concept_names=("beak", "wing", "water"),
        split="train",
    )


def random_bag(rng, manifest, n_instances, label=None, group_id=None, image_id="img"):
    instances = []
    for _ in range(n_instances):
        clip = rng.uniform(0.0, 1.0, size=manifest.C)
        instances.append(
            Instance(
                embedding=rng.normal(size=manifest.D),
                clip_scores=clip / clip.sum(),
                concept_ids=(int(rng.integers(0, manifest.C)),),
            )
        )
    if label is None:
        label = int(rng.integers(0, manifest.num_classes))
    return Bag(image_id=image_id, label=label, instances=instances, group_id=group_id)


def random_bags(rng, manifest, n_bags, max_instances=4, group_ids=False):
    bags = []
    for i in range(n_bags):
        n = int(rng.integers(1, max_instances + 1))
        gid = int(rng.integers(0, 3)) if group_ids else None
        bags.append(random_bag(rng, manifest, n, group_id=gid, image_id=f"img{i}"))
    return bags


def bag_embeddings(bag):
    return np.asarray([inst.embedding for inst in bag.instances])
