"""Model backends: concept scoring, detection, and segmentation.

Two implementations share one interface:

* BuiltinBackend - a deterministic, dependency-free stand-in that computes
  real features from pixels (color/edge statistics through seeded random
  projections). It exists so exports can be produced and tested on machines
  without GPU foundation models; it is not a semantic model.
* FoundationBackend - CLIP scoring, GroundingDINO detection, and SAM
  segmentation through huggingface transformers. Imports and weights load
  lazily; a missing dependency or weight set raises a ModelLoadError that
  names what is missing.
"""

import hashlib

import numpy as np


class ModelLoadError(RuntimeError):
    """A model backend could not be constructed."""


def _name_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _patch_features(patch: np.ndarray) -> np.ndarray:
    """Raw visual statistics of an RGB patch: color histogram per channel,
    mean/std, and coarse luminance layout."""
    pixels = patch.reshape(-1, 3).astype(np.float64) / 255.0
    feats = []
    for channel in range(3):
        hist, _ = np.histogram(pixels[:, channel], bins=8, range=(0.0, 1.0))
        feats.append(hist / max(1, pixels.shape[0]))
    feats.append([pixels.mean(), pixels.std()])
    luminance = patch.astype(np.float64).mean(axis=2) / 255.0
    h, w = luminance.shape
    grid = np.zeros(16)
    for gy in range(4):
        for gx in range(4):
            cell = luminance[gy * h // 4 : max(gy * h // 4 + 1, (gy + 1) * h // 4),
                             gx * w // 4 : max(gx * w // 4 + 1, (gx + 1) * w // 4)]
            grid[gy * 4 + gx] = cell.mean() if cell.size else 0.0
    feats.append(grid)
    return np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in feats])


class BuiltinBackend:
    """Deterministic pixel-statistics backend."""

    name = "builtin"

    def __init__(self, concept_names, dim: int = 64, seed: int = 0):
        if not concept_names:
            raise ModelLoadError("concept vocabulary is empty")
        self.concept_names = list(concept_names)
        self.dim = dim
        raw_dim = _patch_features(np.zeros((8, 8, 3), dtype=np.uint8)).shape[0]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFE]))
        self._projection = rng.standard_normal((raw_dim, dim)) / np.sqrt(raw_dim)
        self._anchors = np.stack([
            np.random.default_rng(_name_seed(name)).standard_normal(dim)
            for name in self.concept_names
        ])
        self._anchors /= np.linalg.norm(self._anchors, axis=1, keepdims=True)

    def embed(self, image: np.ndarray) -> np.ndarray:
        vec = _patch_features(image) @ self._projection
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def concept_similarities(self, image: np.ndarray) -> np.ndarray:
        return self._anchors @ self.embed(image)

    def detect(self, image: np.ndarray, concept_id: int, threshold: float, max_boxes: int = 3):
        """Score a coarse proposal grid against the concept anchor. Cosine
        scores map to detector-style confidences in [0, 1] via (1+cos)/2 so
        the usual confidence thresholds apply. Returns (bbox, score) pairs."""
        h, w = image.shape[:2]
        anchor = self._anchors[concept_id]
        proposals = []
        for rows, cols in ((2, 2), (3, 3)):
            for gy in range(rows):
                for gx in range(cols):
                    x0 = gx * w // cols
                    x1 = (gx + 1) * w // cols
                    y0 = gy * h // rows
                    y1 = (gy + 1) * h // rows
                    if x1 - x0 < 2 or y1 - y0 < 2:
                        continue
                    patch = image[y0:y1, x0:x1]
                    confidence = (1.0 + float(anchor @ self.embed(patch))) / 2.0
                    proposals.append(
                        (confidence, (float(x0), float(y0), float(x1), float(y1)))
                    )
        proposals.sort(key=lambda item: (-item[0], item[1]))
        boxes = [(bbox, score) for score, bbox in proposals if score >= threshold]
        return boxes[:max_boxes]

    def segment(self, image: np.ndarray, bbox) -> np.ndarray:
        """Threshold luminance inside the box against the box mean; falls
        back to the full box when thresholding empties out."""
        h, w = image.shape[:2]
        x0, y0, x1, y1 = (int(round(v)) for v in bbox)
        mask = np.zeros((h, w), dtype=bool)
        region = image[y0:y1, x0:x1].astype(np.float64).mean(axis=2)
        if region.size == 0:
            return mask
        inside = region >= region.mean()
        if not inside.any() or inside.all():
            inside = np.ones_like(inside, dtype=bool)
        mask[y0:y1, x0:x1] = inside
        return mask


class FoundationBackend:
    """CLIP + GroundingDINO + SAM via transformers; loaded lazily."""

    name = "foundation"

    CLIP_MODELS = {"resnet50": "openai/clip-resnet-50", "vit-b16": "openai/clip-vit-base-patch16"}
    DETECTOR_MODEL = "IDEA-Research/grounding-dino-tiny"
    SEGMENTER_MODEL = "facebook/sam-vit-base"

    def __init__(self, concept_names, backbone: str, device: str = "cpu"):
        if not concept_names:
            raise ModelLoadError("concept vocabulary is empty")
        try:
            import torch  # noqa: F401
            import transformers  # noqa: F401
        except ImportError as exc:
            raise ModelLoadError(
                f"foundation backend needs torch and transformers: {exc}"
            ) from exc
        self.concept_names = list(concept_names)
        self.backbone = backbone
        self.device = device
        self._models = None

    def _load(self):
        if self._models is not None:
            return self._models
        from transformers import (
            AutoModelForZeroShotObjectDetection,
            AutoProcessor,
            CLIPModel,
            CLIPProcessor,
            SamModel,
            SamProcessor,
        )

        try:
            clip_name = self.CLIP_MODELS[self.backbone]
            self._models = {
                "clip": CLIPModel.from_pretrained(clip_name).to(self.device),
                "clip_processor": CLIPProcessor.from_pretrained(clip_name),
                "detector": AutoModelForZeroShotObjectDetection.from_pretrained(
                    self.DETECTOR_MODEL
                ).to(self.device),
                "detector_processor": AutoProcessor.from_pretrained(self.DETECTOR_MODEL),
                "segmenter": SamModel.from_pretrained(self.SEGMENTER_MODEL).to(self.device),
                "segmenter_processor": SamProcessor.from_pretrained(self.SEGMENTER_MODEL),
            }
        except KeyError as exc:
            raise ModelLoadError(f"unknown backbone {self.backbone!r}") from exc
        except Exception as exc:
            raise ModelLoadError(f"failed to load foundation models: {exc}") from exc
        return self._models

    @property
    def dim(self) -> int:
        return {"resnet50": 2048, "vit-b16": 768}[self.backbone]

    def embed(self, image: np.ndarray) -> np.ndarray:
        import torch
        from PIL import Image

        models = self._load()
        inputs = models["clip_processor"](
            images=Image.fromarray(image), return_tensors="pt"
        ).to(self.device)
        with torch.no_grad():
            features = models["clip"].get_image_features(**inputs)
        return features[0].cpu().numpy().astype(np.float64)

    def concept_similarities(self, image: np.ndarray) -> np.ndarray:
        import torch
        from PIL import Image

        models = self._load()
        inputs = models["clip_processor"](
            text=self.concept_names, images=Image.fromarray(image),
            return_tensors="pt", padding=True,
        ).to(self.device)
        with torch.no_grad():
            output = models["clip"](**inputs)
        image_emb = output.image_embeds[0]
        text_emb = output.text_embeds
        sims = torch.nn.functional.cosine_similarity(text_emb, image_emb[None, :])
        return sims.cpu().numpy().astype(np.float64)

    def detect(self, image: np.ndarray, concept_id: int, threshold: float, max_boxes: int = 3):
        import torch
        from PIL import Image

        models = self._load()
        prompt = f"{self.concept_names[concept_id]}."
        inputs = models["detector_processor"](
            images=Image.fromarray(image), text=prompt, return_tensors="pt"
        ).to(self.device)
        with torch.no_grad():
            outputs = models["detector"](**inputs)
        results = models["detector_processor"].post_process_grounded_object_detection(
            outputs, inputs.input_ids, box_threshold=threshold,
            text_threshold=threshold, target_sizes=[image.shape[:2]],
        )[0]
        pairs = sorted(
            zip(results["scores"].tolist(), results["boxes"].tolist()), reverse=True
        )
        return [(tuple(box), float(score)) for score, box in pairs[:max_boxes]]

    def segment(self, image: np.ndarray, bbox) -> np.ndarray:
        import torch
        from PIL import Image

        models = self._load()
        inputs = models["segmenter_processor"](
            Image.fromarray(image), input_boxes=[[list(bbox)]], return_tensors="pt"
        ).to(self.device)
        with torch.no_grad():
            outputs = models["segmenter"](**inputs)
        masks = models["segmenter_processor"].image_processor.post_process_masks(
            outputs.pred_masks.cpu(), inputs["original_sizes"].cpu(),
            inputs["reshaped_input_sizes"].cpu(),
        )[0]
        return masks[0, 0].numpy().astype(bool)


def make_backend(kind: str, concept_names, backbone: str, device: str, dim: int, seed: int):
    if kind == "builtin":
        return BuiltinBackend(concept_names, dim=dim, seed=seed)
    if kind == "foundation":
        return FoundationBackend(concept_names, backbone=backbone, device=device)
    raise ModelLoadError(f"unknown backend {kind!r} (expected builtin or foundation)")
