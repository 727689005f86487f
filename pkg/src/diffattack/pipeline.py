"""End-to-end orchestration shared by the CLI subcommands."""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__
from .attack import AttackResult, AttackSpec, run_attack, save_attack_result
from .backbone import Backbone, deprocess, load_backbone, load_image, preprocess, save_image
from .config import RunConfig
from .evaluation import ScorerRegistry, build_report, emit_report, noise_baseline
from .losses import LossWeights
from .plotting import plot_confidence, plot_loss_trace, plot_panels, plot_report
from .style_source import (
    HttpGenerationClient,
    ProceduralClient,
    StyleAsset,
    StyleCache,
    StyleRequest,
    StyleSource,
    default_cache_dir,
)
from .transfer import TransferConfig, TransferResult, full_mask, mask_from_array, run_style_transfer

log = logging.getLogger(__name__)


@dataclass
class Manifest:
    """Accumulates run metadata; :meth:`write` refuses to list missing outputs."""

    command: str
    config_hash: str
    seed: int
    output_dir: Path
    timings: dict[str, float] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter()
        yield
        self.timings[stage] = round(time.perf_counter() - t0, 4)

    def add_output(self, name: str, path: Path) -> None:
        self.outputs[name] = Path(path).resolve().relative_to(self.output_dir.resolve()).as_posix()

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": __version__,
            "timings": dict(self.timings),
            "outputs": dict(sorted(self.outputs.items())),
            **self.info,
        }

    def write(self, name: str | None = None) -> Path:
        missing = [p for p in self.outputs.values() if not (self.output_dir / p).exists()]
        if missing:
            raise RuntimeError(f"manifest lists outputs that do not exist: {missing}")
        path = self.output_dir / (name or f"manifest-{self.command}.json")
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_backbone(cfg: RunConfig) -> Backbone:
    b = cfg.backbone
    return load_backbone(b.model_id, b.weights_path, b.sha256, seed=0, input_size=b.input_size)


def build_style_source(cfg: RunConfig) -> StyleSource:
    g = cfg.generation
    cache = StyleCache(cfg.cache_dir or default_cache_dir())
    if g.backend == "offline":
        client = ProceduralClient(size=g.texture_size)
    elif g.endpoint:
        client = HttpGenerationClient(
            g.endpoint, api_key=os.environ.get(g.api_key_env), timeout=g.timeout, retries=g.retries, params=g.params
        )
    else:
        client = None
    return StyleSource(client, cache)


def style_request(cfg: RunConfig) -> StyleRequest:
    s = cfg.style
    if s.file is not None:
        return StyleRequest("file", file_path=s.file, seed=s.seed)
    return StyleRequest("prompt", prompt=s.prompt, seed=cfg.seed if s.seed is None else s.seed)


def load_mask(cfg: RunConfig, backbone: Backbone, like: torch.Tensor) -> torch.Tensor:
    if cfg.mask_path in (None, "none"):
        return full_mask(like)
    arr = load_image(cfg.mask_path)
    h, w = backbone.input_size
    if arr.shape[:2] != (h, w):
        from PIL import Image

        arr = np.asarray(Image.fromarray(arr).resize((w, h), Image.NEAREST))
    return mask_from_array(arr, like.dtype)


def transfer_config(cfg: RunConfig, backbone: Backbone, output_dir: Path | None = None) -> TransferConfig:
    t = cfg.transfer
    return TransferConfig(
        content_layer=t.content_layer or backbone.default_content_layer,
        style_layers=list(t.style_layers or backbone.default_style_layers),
        layer_weights=t.layer_weights,
        weights=LossWeights(t.lambda_content, t.lambda_style, 0.0, 0.0),
        max_iters=t.max_iters,
        lbfgs_learning_rate=t.lbfgs_learning_rate,
        history_size=t.history_size,
        convergence_tol=t.convergence_tol,
        seed=cfg.seed,
        checkpoint_every=t.checkpoint_every,
        checkpoint_dir=str(output_dir / "checkpoints") if output_dir and t.checkpoint_every else None,
    )


def attack_spec(cfg: RunConfig, backbone: Backbone) -> AttackSpec:
    a = cfg.attack
    if a.target is None:
        raise ValueError("attack.target is required")
    target = a.target if isinstance(a.target, int) else backbone.label_index(str(a.target))
    return AttackSpec(
        target_label=target,
        confidence_threshold=a.confidence_threshold,
        weights=LossWeights(*a.lambdas),
        max_iters=a.max_iters,
        patience=a.patience,
        aux_weight=a.aux_weight,
    )


def _summary(trace) -> dict:
    return {
        "initial_total": trace[0].total,
        "final_total": trace[-1].total,
        "best_total": min(b.total for b in trace),
        "trace_length": len(trace),
    }


@dataclass
class Inputs:
    backbone: Backbone
    content: torch.Tensor
    content_raw: np.ndarray
    mask: torch.Tensor
    style: torch.Tensor
    style_asset: StyleAsset


def prepare_inputs(cfg: RunConfig, manifest: Manifest) -> Inputs:
    with manifest.timed("load"):
        backbone = build_backbone(cfg)
        size = backbone.input_size
        content_raw = load_image(cfg.content_path)
        content = preprocess(content_raw, size).to(backbone.dtype)
        mask = load_mask(cfg, backbone, content)
    with manifest.timed("style"):
        asset = build_style_source(cfg).resolve(style_request(cfg))
        style = preprocess(asset.image, size).to(backbone.dtype)
    manifest.info["backbone"] = {"model_id": backbone.model_id, "weights_sha256": backbone.weights_sha256}
    manifest.info["style"] = {"provenance": asset.provenance, "source": asset.prompt_or_path, "cache_key": asset.cache_key}
    return Inputs(backbone, content, content_raw, mask, style, asset)


def stylize(cfg: RunConfig, inp: Inputs, manifest: Manifest) -> TransferResult:
    out = manifest.output_dir
    tcfg = transfer_config(cfg, inp.backbone, out)
    with manifest.timed("stylize"):
        result = run_style_transfer(inp.content, inp.style, inp.mask, tcfg, inp.backbone)
    manifest.add_output("stylized", save_image(deprocess(result.image), out / "stylized.png"))
    manifest.add_output("stylize_loss_figure", plot_loss_trace(result.loss_trace, out / "stylize_loss.png", "stage 1"))
    manifest.info["stylize"] = {
        **_summary(result.loss_trace),
        "iterations_run": result.iterations_run,
        "converged": result.converged,
    }
    return result


def attack(cfg: RunConfig, inp: Inputs, stylized: torch.Tensor, manifest: Manifest) -> AttackResult:
    out = manifest.output_dir
    spec = attack_spec(cfg, inp.backbone)
    tcfg = transfer_config(cfg, inp.backbone)
    with manifest.timed("attack"):
        result = run_attack(stylized, inp.content, inp.mask, spec, tcfg, inp.backbone, inp.style)
    png, sidecar = save_attack_result(result, out / "attacked.png", manifest.config_hash, inp.backbone.weights_sha256)
    manifest.add_output("attacked", png)
    manifest.add_output("attacked_sidecar", sidecar)
    manifest.add_output("attack_loss_figure", plot_loss_trace(result.loss_trace, out / "attack_loss.png", "stage 2"))
    target_name = inp.backbone.label_name(spec.target_label)
    manifest.add_output(
        "attack_confidence_figure",
        plot_confidence(result.confidence_trace, spec.confidence_threshold, out / "attack_confidence.png", target_name),
    )
    manifest.info["attack"] = {
        "target": spec.target_label,
        "target_name": target_name,
        "predicted": result.predicted_label,
        "predicted_name": inp.backbone.label_name(result.predicted_label),
        "success": result.success,
        "confidence": result.final_confidence,
        "iterations_run": result.iterations_run,
        **_summary(result.loss_trace),
    }
    return result


def evaluate_dirs(
    corpora: dict[str, list[np.ndarray]], cfg: RunConfig, manifest: Manifest, stem: str = "report"
) -> str:
    ev = cfg.evaluate
    registry = ScorerRegistry.stub(ev.metrics) if ev.scorer == "stub" else ScorerRegistry.real(ev.metrics, ev.scorer_weights)
    with manifest.timed("evaluate"):
        report = build_report(corpora, ev.metrics, registry)
    out = manifest.output_dir
    md = emit_report(report, "markdown")
    (out / f"{stem}.md").write_text(md, encoding="utf-8")
    with open(out / f"{stem}.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(emit_report(report, "csv"))
    manifest.add_output(f"{stem}_markdown", out / f"{stem}.md")
    manifest.add_output(f"{stem}_csv", out / f"{stem}.csv")
    manifest.add_output(f"{stem}_figure", plot_report(report, out / f"{stem}.png"))
    manifest.info["evaluate"] = {
        "scorer": ev.scorer,
        "image_count": report.image_count,
        "scores": {name: {s.metric: s.value for s in scores} for name, scores in report.rows},
    }
    return md


def run_all(cfg: RunConfig) -> tuple[Manifest, AttackResult]:
    """Style resolution, stage 1 (unless ``attack.joint``), stage 2, and a content/ours/noise report."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    manifest = Manifest("run-all", cfg.hash(), cfg.seed, out)
    inp = prepare_inputs(cfg, manifest)
    if cfg.attack.joint:
        start = inp.content
        manifest.info["schedule"] = "joint"
    else:
        start = stylize(cfg, inp, manifest).image
        manifest.info["schedule"] = "two-stage"
    result = attack(cfg, inp, start, manifest)
    size = inp.backbone.input_size
    content_u8 = deprocess(inp.content)
    attacked_u8 = deprocess(result.image)
    noisy = noise_baseline(content_u8, cfg.evaluate.noise_amplitude, cfg.seed)
    manifest.add_output("noise_baseline", save_image(noisy, out / "noise_baseline.png"))
    panels = {"content": content_u8, "style": deprocess(inp.style)}
    if "stylized" in manifest.outputs:
        panels["stylized"] = np.asarray(load_image(out / manifest.outputs["stylized"]))
    panels["attacked"] = attacked_u8
    manifest.add_output("panels_figure", plot_panels(panels, out / "panels.png"))
    evaluate_dirs({"Content image": [content_u8], "Diffusion Attack": [attacked_u8], "Noise baseline": [noisy]}, cfg, manifest)
    log.info("run-all finished at resolution %s", size)
    return manifest, result
