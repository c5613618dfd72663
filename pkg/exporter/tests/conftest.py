import numpy as np
import pytest
from PIL import Image


def paint_image(rng, kind):
    """64x64 RGB with a class-specific blob over textured background."""
    base = rng.integers(20, 60, size=(64, 64, 3), dtype=np.uint8)
    if kind == 0:
        base[8:36, 8:36, 0] = rng.integers(180, 255)
        base[8:36, 8:36, 1] //= 2
    else:
        base[28:60, 28:60, 2] = rng.integers(180, 255)
        base[28:60, 28:60, 0] //= 2
    return Image.fromarray(base, mode="RGB")


@pytest.fixture
def toy_dataset(tmp_path):
    rng = np.random.default_rng(0)
    root = tmp_path / "images"
    for cls, n in (("landbird", 2), ("waterbird", 2)):
        folder = root / cls
        folder.mkdir(parents=True)
        kind = 0 if cls == "landbird" else 1
        for i in range(n):
            paint_image(rng, kind).save(folder / f"{cls}{i}.png")
    vocab = tmp_path / "concepts.txt"
    vocab.write_text(
        "\n".join(
            ["red plumage", "blue plumage", "dark background",
             "bright patch", "water surface", "dry grass"]
        )
        + "\n"
    )
    return root, vocab
