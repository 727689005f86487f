"""Run configuration: a versioned YAML/JSON tree plus dotted ``--set`` overrides."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .evaluation import METRICS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid run config:\n" + "\n".join(f"  - {p}" for p in problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StyleSection(_Strict):
    prompt: str | None = None
    file: str | None = None
    seed: int | None = None


class GenerationSection(_Strict):
    backend: Literal["http", "offline"] = "http"
    endpoint: str | None = None
    api_key_env: str = "DIFFATTACK_GEN_API_KEY"
    timeout: float = 120.0
    retries: int = Field(2, ge=0)
    texture_size: int = Field(64, ge=8)
    params: dict[str, Any] = Field(default_factory=dict)


class BackboneSection(_Strict):
    model_id: Literal["toy", "inception_v3"] = "toy"
    weights_path: str | None = None
    sha256: str | None = None
    input_size: tuple[int, int] | None = None


class TransferSection(_Strict):
    content_layer: str | None = None
    style_layers: list[str] | None = None
    layer_weights: list[float] | None = None
    lambda_content: float = Field(1.0, ge=0)
    lambda_style: float = Field(1e3, ge=0)
    max_iters: int = Field(50, ge=1)
    lbfgs_learning_rate: float = Field(1.0, gt=0)
    history_size: int = Field(10, ge=1)
    convergence_tol: float = 1e-5
    checkpoint_every: int = Field(0, ge=0)


class AttackSection(_Strict):
    target: str | int | None = None
    confidence_threshold: float = Field(0.9, gt=0, le=1)
    lambdas: tuple[float, float, float, float] = (1.0, 1e3, 1e2, 10.0)
    max_iters: int = Field(300, ge=1)
    patience: int = Field(5, ge=1)
    aux_weight: float = Field(0.4, ge=0)
    joint: bool = False

    @field_validator("lambdas")
    @classmethod
    def _nonneg(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("lambdas must be nonnegative")
        if v[2] <= 0:
            raise ValueError("lambda_adv (third entry) must be > 0")
        return v


class EvaluateSection(_Strict):
    metrics: list[Literal["nima", "topiq_iaa", "topiq_nr", "tres"]] = Field(default_factory=lambda: list(METRICS))
    scorer: Literal["stub", "real"] = "stub"
    scorer_weights: dict[str, str] = Field(default_factory=dict)
    noise_amplitude: float = Field(0.3, ge=0)

    @field_validator("metrics")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one metric is required")
        return v


class RunConfig(_Strict):
    version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    content_path: str | None = None
    mask_path: str | None = None
    output_dir: str = "out"
    cache_dir: str | None = None
    style: StyleSection = Field(default_factory=StyleSection)
    generation: GenerationSection = Field(default_factory=GenerationSection)
    backbone: BackboneSection = Field(default_factory=BackboneSection)
    transfer: TransferSection = Field(default_factory=TransferSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    evaluate: EvaluateSection = Field(default_factory=EvaluateSection)

    def hash(self) -> str:
        """SHA-256 of the canonical config minus locations that cannot change results."""
        d = self.model_dump(mode="json")
        d.pop("output_dir")
        d.pop("cache_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def path_problems(self, need_content: bool = True, need_style: bool = True) -> list[str]:
        problems = []

        def check(label, p):
            if p is not None and not Path(p).exists():
                problems.append(f"{label}: path does not exist: {p}")

        if need_content:
            if self.content_path is None:
                problems.append("content_path: required")
            check("content_path", self.content_path)
        if self.mask_path not in (None, "none"):
            check("mask_path", self.mask_path)
        if need_style:
            if (self.style.prompt is None) == (self.style.file is None):
                problems.append("style: set exactly one of style.prompt or style.file")
            check("style.file", self.style.file)
        if self.backbone.model_id == "inception_v3" and self.backbone.weights_path is None:
            problems.append("backbone.weights_path: required for inception_v3")
        check("backbone.weights_path", self.backbone.weights_path)
        return problems


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([f"--set {dotted}: {k} is not a section"])
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError([f"--set expects key=value, got {item!r}"])
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw else None


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read ``path`` (YAML or JSON), apply dotted overrides, validate.

    Overrides whose value is ``None`` are ignored so unset CLI flags do not
    clobber file values.
    """
    tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config file not found: {p}"])
        try:
            tree = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{p}: not valid YAML/JSON: {exc}"]) from exc
        if not isinstance(tree, dict):
            raise ConfigError([f"{p}: top level must be a mapping"])
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(
            [f"{'.'.join(str(l) for l in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        ) from None
