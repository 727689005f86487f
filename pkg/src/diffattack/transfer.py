"""Stage 1: masked style transfer by L-BFGS over image pixels."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import Backbone, deprocess, save_image
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_loss,
    content_loss,
    gram_matrix,
    smoothness_loss,
    style_loss,
    total_loss,
    weighted_objective,
)

log = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 5


class OptimizationError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class TransferConfig:
    content_layer: str
    style_layers: list[str]
    layer_weights: list[float] | None = None
    weights: LossWeights = field(default_factory=lambda: LossWeights(1.0, 1e3, 0.0, 0.0))
    max_iters: int = 50
    lbfgs_learning_rate: float = 1.0
    history_size: int = 10
    convergence_tol: float = 1e-5
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        problems = []
        if self.max_iters < 1:
            problems.append(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.lbfgs_learning_rate > 0:
            problems.append(f"lbfgs_learning_rate must be > 0, got {self.lbfgs_learning_rate}")
        if not self.style_layers:
            problems.append("style_layers must be nonempty")
        if self.layer_weights is not None and len(self.layer_weights) != len(self.style_layers):
            problems.append(f"{len(self.layer_weights)} layer_weights for {len(self.style_layers)} style layers")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def for_backbone(cls, backbone: Backbone, **kw) -> "TransferConfig":
        kw.setdefault("content_layer", backbone.default_content_layer)
        kw.setdefault("style_layers", list(backbone.default_style_layers))
        return cls(**kw)


@dataclass
class TransferResult:
    image: torch.Tensor
    loss_trace: list[LossBreakdown]
    iterations_run: int
    converged: bool
    best_iteration: int = 0


def validate_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if mask.dim() != 3 or mask.shape[0] != 1:
        raise ValueError(f"mask must be 1 x H x W, got shape {tuple(mask.shape)}")
    if tuple(mask.shape[1:]) != tuple(like.shape[1:]):
        raise ValueError(f"mask size {tuple(mask.shape[1:])} does not match image size {tuple(like.shape[1:])}")
    if not torch.isfinite(mask).all() or mask.min() < 0 or mask.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    return mask


def full_mask(like: torch.Tensor) -> torch.Tensor:
    return torch.ones((1, *like.shape[1:]), dtype=like.dtype)


def composite(optimized: torch.Tensor, content: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``m * optimized + (1 - m) * content``, with the mask broadcast over channels."""
    if optimized.shape != content.shape:
        raise ValueError(f"optimized {tuple(optimized.shape)} and content {tuple(content.shape)} differ in shape")
    mask = validate_mask(mask, content).to(optimized.dtype)
    return mask * optimized + (1 - mask) * content.to(optimized.dtype)


class Objective:
    """Evaluates the four weighted terms on the composite of a pixel variable.

    Target statistics (content features, style Grams) are computed once.
    ``target_label=None`` disables the adversarial term.
    """

    def __init__(
        self,
        backbone: Backbone,
        content: torch.Tensor,
        style: torch.Tensor,
        mask: torch.Tensor,
        config: TransferConfig,
        weights: LossWeights,
        target_label: int | None = None,
        aux_weight: float = 0.0,
    ):
        self.backbone = backbone
        self.content = content.to(backbone.dtype)
        self.mask = validate_mask(mask, content).to(backbone.dtype)
        self.config = config
        self.weights = weights
        self.target_label = target_label
        self.aux_weight = aux_weight
        self.layers = [config.content_layer] + [l for l in config.style_layers if l != config.content_layer]
        with torch.no_grad():
            self.content_target = backbone.extract_features(self.content, [config.content_layer])[0]
            style_feats = backbone.extract_features(style.to(backbone.dtype), config.style_layers)
            self.style_targets = [gram_matrix(f) for f in style_feats]

    def image(self, x: torch.Tensor) -> torch.Tensor:
        # the line search probes points outside the box; score them as projected
        return composite(x.clamp(-1.0, 1.0), self.content, self.mask)

    def __call__(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor], torch.Tensor | None]:
        img = self.image(x)
        need_logits = self.target_label is not None
        feats, logits = self.backbone.run(img, self.layers, logits=need_logits, aux_weight=self.aux_weight)
        by_id = {f.layer_id: f for f in feats}
        terms = {
            "content": content_loss(by_id[self.config.content_layer], self.content_target),
            "style": style_loss(
                [gram_matrix(by_id[l]) for l in self.config.style_layers],
                self.style_targets,
                self.config.layer_weights,
            ),
            "smooth": smoothness_loss(img),
        }
        if need_logits:
            terms["adv"] = adversarial_loss(logits, self.target_label)
        else:
            terms["adv"] = torch.zeros((), dtype=img.dtype)
        obj = weighted_objective(terms["content"], terms["style"], terms["adv"], terms["smooth"], self.weights)
        return obj, terms, logits

    def breakdown(self, terms: dict[str, torch.Tensor]) -> LossBreakdown:
        return total_loss(terms["content"], terms["style"], terms["adv"], terms["smooth"], self.weights)


def make_lbfgs(x: torch.Tensor, config: TransferConfig) -> torch.optim.LBFGS:
    # one outer iteration per step(); curvature history persists across calls
    return torch.optim.LBFGS(
        [x],
        lr=config.lbfgs_learning_rate,
        max_iter=1,
        history_size=config.history_size,
        line_search_fn="strong_wolfe",
        tolerance_grad=0.0,
        tolerance_change=0.0,
    )


def lbfgs_iteration(
    opt: torch.optim.LBFGS, x: torch.Tensor, objective: Callable[[torch.Tensor], torch.Tensor], iteration: int
) -> float:
    """One L-BFGS step followed by projection onto [-1, 1].

    Returns the gradient max-norm at the starting point. Projection can leave
    the curvature pairs inconsistent so that no descent step is taken; the
    history is then dropped and the step retried from steepest descent.
    """
    grad_norm = math.inf

    def closure():
        nonlocal grad_norm
        opt.zero_grad()
        loss = objective(x)
        if not torch.isfinite(loss):
            raise OptimizationError(f"non-finite loss {float(loss)}", iteration)
        loss.backward()
        if grad_norm is math.inf:
            grad_norm = float(x.grad.abs().max())
        return loss

    before = x.detach().clone()
    opt.step(closure)
    if grad_norm > 0 and torch.equal(before, x.detach()):
        opt.state.clear()
        opt.step(closure)
    with torch.no_grad():
        x.clamp_(-1.0, 1.0)
    return grad_norm


def _has_converged(best_totals: Sequence[float], tol: float) -> bool:
    if len(best_totals) <= CONVERGENCE_WINDOW:
        return False
    old, new = best_totals[-1 - CONVERGENCE_WINDOW], best_totals[-1]
    return (old - new) <= tol * max(abs(old), 1e-12)


def run_style_transfer(
    content: torch.Tensor,
    style: torch.Tensor,
    mask: torch.Tensor | None,
    config: TransferConfig,
    backbone: Backbone,
) -> TransferResult:
    """Minimise weighted content + style loss of the masked composite.

    The pixel variable starts at the content image. Stops after
    ``config.max_iters`` iterations or when the best total loss improved by
    less than ``convergence_tol`` (relative) over the last five iterations.
    Returns the best iterate seen.
    """
    torch.manual_seed(config.seed)
    if mask is None:
        mask = full_mask(content)
    weights = LossWeights(config.weights.lambda_content, config.weights.lambda_style, 0.0, 0.0)
    if not weights.any_positive():
        raise ValueError("stage 1 needs lambda_content or lambda_style > 0")
    objective = Objective(backbone, content, style, mask, config, weights)

    x = objective.content.clone().requires_grad_(True)
    opt = make_lbfgs(x, config)

    def evaluate(iteration: int) -> LossBreakdown:
        with torch.no_grad():
            _, terms, _ = objective(x)
        b = objective.breakdown(terms)
        if not math.isfinite(b.total):
            raise OptimizationError(f"non-finite loss {b.total}", iteration)
        return b

    trace = [evaluate(0)]
    best_total, best_iter, best_x = trace[0].total, 0, x.detach().clone()
    best_totals = [best_total]
    converged = False
    iteration = 0
    while iteration < config.max_iters:
        if best_total == 0.0:
            converged = True
            break
        iteration += 1
        grad_norm = lbfgs_iteration(opt, x, lambda v: objective(v)[0], iteration)
        b = evaluate(iteration)
        trace.append(b)
        if b.total < best_total:
            best_total, best_iter, best_x = b.total, iteration, x.detach().clone()
        best_totals.append(best_total)
        _maybe_checkpoint(config, iteration, objective.image(x.detach()))
        if grad_norm == 0.0 or _has_converged(best_totals, config.convergence_tol):
            converged = True
            break
    log.info("style transfer: %d iterations, best total %.6g at iteration %d", iteration, best_total, best_iter)
    with torch.no_grad():
        image = objective.image(best_x)
    return TransferResult(image, trace, iteration, converged, best_iter)


def _maybe_checkpoint(config: TransferConfig, iteration: int, image: torch.Tensor) -> None:
    if config.checkpoint_every and config.checkpoint_dir and iteration % config.checkpoint_every == 0:
        save_image(deprocess(image), Path(config.checkpoint_dir) / f"stylized_iter{iteration:05d}.png")


def stylize_batch(
    contents: Sequence[torch.Tensor],
    style: torch.Tensor,
    masks: Sequence[torch.Tensor | None],
    config: TransferConfig,
    backbone: Backbone,
    jobs: int = 1,
) -> list[TransferResult]:
    """Independent full-batch runs over several content images; ``jobs`` > 1 uses a thread pool."""
    if len(masks) != len(contents):
        raise ValueError("one mask (or None) per content image")
    if jobs <= 1:
        return [run_style_transfer(c, style, m, config, backbone) for c, m in zip(contents, masks)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda cm: run_style_transfer(cm[0], style, cm[1], config, backbone), zip(contents, masks)))


def mask_from_array(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Grayscale or RGB uint8 mask image to a 1 x H x W tensor in [0, 1]."""
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return torch.from_numpy(arr.astype(np.float64) / 255.0).to(dtype).unsqueeze(0)
