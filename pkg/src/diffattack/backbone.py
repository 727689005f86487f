"""Classifier backbones: preprocessing, named feature maps and logits.

Two implementations share the :class:`Backbone` interface:

* :class:`InceptionBackbone` wraps torchvision's Inception-v3 loaded from a
  local weight file whose SHA-256 is checked at load time.
* :class:`ToyBackbone` is a three-conv classifier with seeded weights and ten
  classes, small enough for exhaustive tests and CI.
"""

from __future__ import annotations

import difflib
import hashlib
import io
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .losses import FeatureMap

INCEPTION_INPUT_SIZE = (299, 299)

# torchvision publishes the leading 8 hex digits of the SHA-256 in the file name
INCEPTION_SHA256_PREFIX = "0cc3c7bd"


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierOutput:
    logits: torch.Tensor
    probabilities: torch.Tensor

    @property
    def top1(self) -> int:
        return int(torch.argmax(self.probabilities))


# ---------------------------------------------------------------- labels

@lru_cache(maxsize=None)
def imagenet_labels() -> tuple[str, ...]:
    text = resources.files("diffattack").joinpath("data/imagenet_labels.txt").read_text(encoding="utf-8")
    labels = tuple(line for line in text.split("\n") if line)
    if len(labels) != 1000:
        raise BackboneError(f"bundled label file has {len(labels)} entries, expected 1000")
    return labels


def label_name(index: int, labels: Sequence[str] | None = None) -> str:
    labels = imagenet_labels() if labels is None else labels
    if not 0 <= int(index) < len(labels):
        raise BackboneError(f"class index {index} out of range [0, {len(labels)})")
    return labels[int(index)]


def label_index(name: str, labels: Sequence[str] | None = None) -> int:
    """Inverse of :func:`label_name`.

    Accepts a decimal index or a class name; exact matches win over
    case-insensitive ones ("Cardigan" the dog vs "cardigan" the sweater).
    """
    labels = imagenet_labels() if labels is None else labels
    if name.strip().isdigit():
        idx = int(name)
        label_name(idx, labels)
        return idx
    if name in labels:
        return labels.index(name)
    lowered = [n.lower() for n in labels]
    key = name.strip().lower()
    if key in lowered:
        return lowered.index(key)
    close = difflib.get_close_matches(key, lowered, n=5, cutoff=0.5)
    raise UnknownLabelError(name, [labels[lowered.index(c)] for c in close])


class UnknownLabelError(BackboneError):
    def __init__(self, name: str, suggestions: list[str]):
        self.name = name
        self.suggestions = suggestions
        hint = f"; nearest matches: {', '.join(suggestions)}" if suggestions else ""
        super().__init__(f"unknown class name {name!r}{hint}")


# ---------------------------------------------------------------- value maps

def preprocess(raw_image, size: tuple[int, int] = INCEPTION_INPUT_SIZE) -> torch.Tensor:
    """Resize an 8-bit RGB image bilinearly to ``size`` (H, W) and map [0, 255] to [-1, 1].

    ``raw_image`` may be a PIL image or an H x W x 3 uint8 array. Pass
    ``size=None`` to skip resizing.
    """
    if isinstance(raw_image, Image.Image):
        if raw_image.mode != "RGB":
            raise BackboneError(f"expected an RGB image, got mode {raw_image.mode!r}")
        img = raw_image
    else:
        arr = np.asarray(raw_image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise BackboneError(f"expected H x W x 3 RGB array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise BackboneError(f"expected uint8 pixels, got {arr.dtype}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise BackboneError("zero-size image")
        img = Image.fromarray(arr, mode="RGB")
    if img.width == 0 or img.height == 0:
        raise BackboneError("zero-size image")
    if size is not None and (img.height, img.width) != tuple(size):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def deprocess(image: torch.Tensor) -> np.ndarray:
    """Inverse value map of :func:`preprocess`; returns H x W x 3 uint8."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise BackboneError(f"expected 3 x H x W tensor, got shape {tuple(image.shape)}")
    arr = (image.detach().to(torch.float64).cpu().numpy() + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise BackboneError(f"{path}: unsupported image mode {im.mode!r}")
        return np.asarray(im.convert("RGB"))


def save_image(arr: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    return path


# ---------------------------------------------------------------- backbones

class Backbone:
    """Read-only classifier exposing named intermediate activations."""

    model_id: str
    layer_catalog: tuple[str, ...]
    input_size: tuple[int, int]
    num_classes: int
    labels: tuple[str, ...]
    dtype: torch.dtype
    weights_sha256: str
    default_content_layer: str
    default_style_layers: tuple[str, ...]

    def _forward(
        self, x: torch.Tensor, wanted: set[str], need_logits: bool, need_aux: bool
    ) -> tuple[dict[str, torch.Tensor], torch.Tensor | None, torch.Tensor | None]:
        raise NotImplementedError

    def _check_image(self, image: torch.Tensor) -> torch.Tensor:
        expected = (3, *self.input_size)
        if tuple(image.shape) != expected:
            raise BackboneError(f"{self.model_id}: expected input of shape {expected}, got {tuple(image.shape)}")
        return image.to(self.dtype).unsqueeze(0)

    def run(
        self,
        image: torch.Tensor,
        layer_ids: Sequence[str] = (),
        *,
        logits: bool = True,
        aux_weight: float = 0.0,
    ) -> tuple[list[FeatureMap], torch.Tensor | None]:
        """Single forward pass returning requested features and (optionally) logits.

        With ``aux_weight > 0`` the returned logits are
        ``main_logits + aux_weight * aux_logits``.
        """
        unknown = [l for l in layer_ids if l not in self.layer_catalog]
        if unknown:
            raise BackboneError(f"{self.model_id}: unknown layer ids {unknown}; catalog is {list(self.layer_catalog)}")
        x = self._check_image(image)
        feats, main, aux = self._forward(x, set(layer_ids), logits, logits and aux_weight > 0)
        out_logits = None
        if logits:
            out_logits = main[0]
            if aux_weight > 0:
                out_logits = out_logits + aux_weight * aux[0]
        return [FeatureMap(l, feats[l][0]) for l in layer_ids], out_logits

    def extract_features(self, image: torch.Tensor, layer_ids: Sequence[str]) -> list[FeatureMap]:
        if not layer_ids:
            self._check_image(image)
            return []
        return self.run(image, layer_ids, logits=False)[0]

    def classify(self, image: torch.Tensor, aux_weight: float = 0.0) -> ClassifierOutput:
        _, logits = self.run(image, (), logits=True, aux_weight=aux_weight)
        return ClassifierOutput(logits, torch.softmax(logits, dim=0))

    def label_name(self, index: int) -> str:
        return label_name(index, self.labels)

    def label_index(self, name: str) -> int:
        return label_index(name, self.labels)


class ToyBackbone(Backbone):
    """Three tanh-conv layers, global pooling, 10-way head, auxiliary head on ``conv2``."""

    def __init__(self, seed: int = 0, input_size: tuple[int, int] = (32, 32), dtype: torch.dtype = torch.float32):
        self.model_id = "toy"
        self.layer_catalog = ("conv1", "conv2", "conv3")
        self.input_size = tuple(input_size)
        self.num_classes = 10
        self.labels = tuple(f"toy_{i}" for i in range(10))
        self.dtype = dtype
        self.default_content_layer = "conv2"
        self.default_style_layers = ("conv1", "conv2", "conv3")

        g = torch.Generator().manual_seed(seed)

        def randn(*shape, scale):
            return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).to(dtype)

        self.params = {
            "conv1.w": randn(8, 3, 3, 3, scale=(2.0 / 27) ** 0.5),
            "conv1.b": randn(8, scale=0.1),
            "conv2.w": randn(16, 8, 3, 3, scale=(2.0 / 72) ** 0.5),
            "conv2.b": randn(16, scale=0.1),
            "conv3.w": randn(32, 16, 3, 3, scale=(2.0 / 144) ** 0.5),
            "conv3.b": randn(32, scale=0.1),
            "fc.w": randn(10, 32, scale=3.0),
            "fc.b": randn(10, scale=0.1),
            "aux.w": randn(10, 16, scale=1.0),
            "aux.b": randn(10, scale=0.1),
        }
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].to(torch.float64).numpy().tobytes())
        self.weights_sha256 = h.hexdigest()

    def _forward(self, x, wanted, need_logits, need_aux):
        p = self.params
        feats = {}
        h1 = torch.tanh(F.conv2d(x, p["conv1.w"], p["conv1.b"], padding=1))
        feats["conv1"] = h1
        h2 = torch.tanh(F.conv2d(h1, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
        feats["conv2"] = h2
        if not need_logits and wanted <= {"conv1", "conv2"}:
            return feats, None, None
        h3 = torch.tanh(F.conv2d(h2, p["conv3.w"], p["conv3.b"], stride=2, padding=1))
        feats["conv3"] = h3
        main = aux = None
        if need_logits:
            main = F.linear(h3.mean(dim=(2, 3)), p["fc.w"], p["fc.b"])
        if need_aux:
            aux = F.linear(h2.mean(dim=(2, 3)), p["aux.w"], p["aux.b"])
        return feats, main, aux


INCEPTION_LAYERS = (
    "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "Conv2d_3b_1x1", "Conv2d_4a_3x3",
    "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d",
    "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c",
)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class InceptionBackbone(Backbone):
    """torchvision Inception-v3 in eval mode, expecting inputs already in [-1, 1].

    ``weights_path=None`` builds a randomly initialised network (seeded); this
    is only useful for shape and plumbing tests.
    """

    def __init__(
        self,
        weights_path: str | Path | None = None,
        expected_sha256: str | None = None,
        seed: int = 0,
    ):
        from torchvision.models import inception_v3

        self.model_id = "inception_v3"
        self.layer_catalog = INCEPTION_LAYERS
        self.input_size = INCEPTION_INPUT_SIZE
        self.num_classes = 1000
        self.labels = imagenet_labels()
        self.dtype = torch.float32
        self.default_content_layer = "Mixed_6a"
        self.default_style_layers = ("Conv2d_1a_3x3", "Conv2d_3b_1x1", "Mixed_5b", "Mixed_6a", "Mixed_7a")

        torch.manual_seed(seed)
        # transform_input stays off: inputs are already scaled to [-1, 1]
        model = inception_v3(weights=None, aux_logits=True, transform_input=False, init_weights=weights_path is None)
        if weights_path is not None:
            weights_path = Path(weights_path)
            if not weights_path.is_file():
                raise BackboneError(f"Inception-v3 weight file not found: {weights_path}")
            digest = sha256_file(weights_path)
            if expected_sha256 is not None:
                if digest != expected_sha256.lower():
                    raise BackboneError(f"{weights_path}: SHA-256 {digest} does not match pinned {expected_sha256}")
            elif not digest.startswith(INCEPTION_SHA256_PREFIX):
                raise BackboneError(
                    f"{weights_path}: SHA-256 {digest} does not match the torchvision release prefix "
                    f"{INCEPTION_SHA256_PREFIX}; pass expected_sha256 to pin a different file"
                )
            state = torch.load(io.BytesIO(weights_path.read_bytes()), map_location="cpu", weights_only=True)
            model.load_state_dict(state)
            self.weights_sha256 = digest
        else:
            h = hashlib.sha256()
            for k, v in sorted(model.state_dict().items()):
                h.update(k.encode())
                h.update(v.numpy().tobytes())
            self.weights_sha256 = h.hexdigest()
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model

    def _forward(self, x, wanted, need_logits, need_aux):
        m = self.model
        feats = {}
        remaining = set(wanted)
        aux = None
        for name in INCEPTION_LAYERS:
            x = getattr(m, name)(x)
            feats[name] = x
            remaining.discard(name)
            if name == "Mixed_6e" and need_aux:
                aux = m.AuxLogits(x)
            if name in ("Conv2d_2b_3x3", "Conv2d_4a_3x3"):
                x = (m.maxpool1 if name == "Conv2d_2b_3x3" else m.maxpool2)(x)
            if not remaining and not need_logits:
                return feats, None, None
        x = torch.flatten(m.avgpool(x), 1)
        return feats, m.fc(x), aux


def load_backbone(
    model_id: str,
    weights_path: str | Path | None = None,
    expected_sha256: str | None = None,
    seed: int = 0,
    input_size: tuple[int, int] | None = None,
) -> Backbone:
    if model_id == "toy":
        return ToyBackbone(seed=seed, input_size=tuple(input_size or (32, 32)))
    if model_id == "inception_v3":
        if weights_path is None:
            raise BackboneError("inception_v3 requires a weights_path (torchvision inception_v3_google-0cc3c7bd.pth)")
        return InceptionBackbone(weights_path, expected_sha256)
    raise BackboneError(f"unknown backbone model_id {model_id!r}; choose 'toy' or 'inception_v3'")


def extract_features(handle: Backbone, image: torch.Tensor, layer_ids: Sequence[str]) -> list[FeatureMap]:
    return handle.extract_features(image, layer_ids)


def classify(handle: Backbone, image: torch.Tensor, aux_weight: float = 0.0) -> ClassifierOutput:
    return handle.classify(image, aux_weight=aux_weight)
