"""Differentiable loss terms for masked style transfer and targeted attacks.

All kernels operate on torch tensors without a batch dimension and use mean
reduction, so weights stay comparable across resolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F


class LossError(ValueError):
    """Raised when a loss kernel receives invalid input."""


@dataclass(frozen=True)
class FeatureMap:
    layer_id: str
    data: torch.Tensor  # C x H x W

    def __post_init__(self):
        if not self.layer_id:
            raise LossError("FeatureMap.layer_id must be nonempty")
        if self.data.dim() != 3:
            raise LossError(f"FeatureMap expects C x H x W, got shape {tuple(self.data.shape)}")


@dataclass(frozen=True)
class GramMatrix:
    layer_id: str
    data: torch.Tensor  # C x C
    normalizer: float


@dataclass(frozen=True)
class LossWeights:
    lambda_content: float = 1.0
    lambda_style: float = 1e3
    lambda_adv: float = 0.0
    lambda_smooth: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"{f.name} must be a finite nonnegative number, got {v}")

    def any_positive(self) -> bool:
        return any(getattr(self, f.name) > 0 for f in fields(self))

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(*(getattr(self, f.name) * c for f in fields(self)))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_content, self.lambda_style, self.lambda_adv, self.lambda_smooth)


@dataclass(frozen=True)
class LossBreakdown:
    content: float
    style: float
    adv: float
    smooth: float
    total: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def gram_matrix(features: FeatureMap) -> GramMatrix:
    """Channel correlation matrix normalized by ``C * H * W``."""
    c, h, w = features.data.shape
    if h * w == 0:
        raise LossError(f"empty spatial extent for layer {features.layer_id!r}")
    if not torch.isfinite(features.data).all():
        raise LossError(f"non-finite features for layer {features.layer_id!r}")
    flat = features.data.reshape(c, h * w)
    normalizer = float(c * h * w)
    g = flat @ flat.t()
    # the matmul is not bitwise symmetric; average with the transpose to make it so
    g = 0.5 * (g + g.t())
    return GramMatrix(features.layer_id, g / normalizer, normalizer)


def content_loss(generated: FeatureMap, content: FeatureMap) -> torch.Tensor:
    if generated.data.shape != content.data.shape:
        raise LossError(
            f"content feature shape mismatch: {tuple(generated.data.shape)} vs {tuple(content.data.shape)}"
        )
    return F.mse_loss(generated.data, content.data, reduction="mean")


def style_loss(
    generated_grams: Sequence[GramMatrix],
    style_grams: Sequence[GramMatrix],
    layer_weights: Sequence[float] | None = None,
) -> torch.Tensor:
    """Weighted sum over layers of the MSE between Gram matrices.

    ``layer_weights`` defaults to uniform ``1/L``.
    """
    if len(generated_grams) != len(style_grams):
        raise LossError(f"got {len(generated_grams)} generated grams but {len(style_grams)} style grams")
    if not generated_grams:
        raise LossError("style_loss needs at least one layer")
    n = len(generated_grams)
    if layer_weights is None:
        layer_weights = [1.0 / n] * n
    if len(layer_weights) != n:
        raise LossError(f"expected {n} layer weights, got {len(layer_weights)}")
    total = None
    for g, s, w in zip(generated_grams, style_grams, layer_weights):
        if g.layer_id != s.layer_id:
            raise LossError(f"layer mismatch: {g.layer_id!r} vs {s.layer_id!r}")
        if g.data.shape != s.data.shape:
            raise LossError(f"gram shape mismatch at {g.layer_id!r}: {tuple(g.data.shape)} vs {tuple(s.data.shape)}")
        if w < 0:
            raise LossError(f"negative layer weight {w} for {g.layer_id!r}")
        term = w * F.mse_loss(g.data, s.data, reduction="mean")
        total = term if total is None else total + term
    return total


def adversarial_loss(logits: torch.Tensor, target_label: int) -> torch.Tensor:
    """Cross-entropy of ``logits`` against ``target_label`` (stable log-softmax)."""
    logits = logits.reshape(-1)
    k = logits.numel()
    if k < 2:
        raise LossError("need at least two classes")
    if not 0 <= int(target_label) < k:
        raise LossError(f"target label {target_label} out of range [0, {k})")
    if not torch.isfinite(logits).all():
        raise LossError("non-finite logits")
    shifted = logits - logits.max().detach()
    return torch.logsumexp(shifted, dim=0) - shifted[int(target_label)]


def smoothness_loss(image: torch.Tensor) -> torch.Tensor:
    """Squared anisotropic total variation divided by the element count."""
    if image.dim() != 3:
        raise LossError(f"expected C x H x W image, got shape {tuple(image.shape)}")
    c, h, w = image.shape
    if h < 2 or w < 2:
        raise LossError(f"smoothness loss needs H, W >= 2, got {h} x {w}")
    dv = image[:, 1:, :] - image[:, :-1, :]
    dh = image[:, :, 1:] - image[:, :, :-1]
    return (dv.pow(2).sum() + dh.pow(2).sum()) / (c * h * w)


def _as_float(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(
    content: float | torch.Tensor,
    style: float | torch.Tensor,
    adv: float | torch.Tensor,
    smooth: float | torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    terms = [_as_float(t) for t in (content, style, adv, smooth)]
    if not all(math.isfinite(t) for t in terms):
        raise LossError(f"non-finite loss term in {terms}")
    total = sum(w * t for w, t in zip(weights.as_tuple(), terms))
    return LossBreakdown(*terms, total=total)


def weighted_objective(
    content: torch.Tensor,
    style: torch.Tensor,
    adv: torch.Tensor,
    smooth: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Differentiable counterpart of :func:`total_loss`; zero-weight terms are dropped from the graph."""
    out = None
    for w, t in zip(weights.as_tuple(), (content, style, adv, smooth)):
        if w == 0:
            continue
        out = w * t if out is None else out + w * t
    if out is None:
        return torch.zeros((), dtype=content.dtype if isinstance(content, torch.Tensor) else torch.float32)
    return out
