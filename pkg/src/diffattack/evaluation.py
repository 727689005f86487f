"""No-reference quality/aesthetic scoring, attack aggregation and Table-style reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage, signal

METRICS = ("nima", "topiq_iaa", "topiq_nr", "tres")

METRIC_RANGES: dict[str, tuple[float, float]] = {
    "nima": (0.0, 10.0),
    "topiq_iaa": (0.0, 10.0),
    "topiq_nr": (0.0, 1.0),
    "tres": (0.0, 100.0),
}

HEADER_LABELS = {
    "nima": "NIMA",
    "topiq_iaa": "Topiq_iaa",
    "topiq_nr": "Topiq_nr",
    "tres": "Tres",
}


class EvaluationError(ValueError):
    pass


class ScorerWeightsMissing(EvaluationError):
    pass


@dataclass(frozen=True)
class IqaScore:
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRIC_RANGES:
            raise EvaluationError(f"unknown metric {self.metric!r}")
        low, high = METRIC_RANGES[self.metric]
        if not (math.isfinite(self.value) and low <= self.value <= high):
            raise EvaluationError(f"{self.metric} score {self.value} outside [{low}, {high}]")

    @property
    def valid_range(self) -> tuple[float, float]:
        return METRIC_RANGES[self.metric]


@dataclass
class IqaReport:
    rows: list[tuple[str, list[IqaScore]]]
    image_count: int
    metrics: tuple[str, ...] = METRICS

    def __post_init__(self):
        if self.image_count < 1:
            raise EvaluationError("image_count must be >= 1")
        if not self.metrics:
            raise EvaluationError("a report needs at least one metric")
        for name, scores in self.rows:
            got = sorted(s.metric for s in scores)
            if got != sorted(self.metrics):
                raise EvaluationError(f"row {name!r} has metrics {got}, expected {sorted(self.metrics)}")

    def value(self, method: str, metric: str) -> float:
        for name, scores in self.rows:
            if name == method:
                return next(s.value for s in scores if s.metric == metric)
        raise KeyError(method)


Scorer = Callable[[np.ndarray], float]


# ---------------------------------------------------------------- stub scorer
#
# Degradation heuristics mapped into each metric's range with
# high * exp(-feature / scale): clean, smooth images score high, noisy ones low.

_LAPLACE_KERNEL = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float64)


def _gray(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def noise_sigma(img: np.ndarray) -> float:
    """Immerkaer's fast noise standard deviation estimate, in intensity levels."""
    g = _gray(img)
    h, w = g.shape
    if h < 3 or w < 3:
        return 0.0
    resp = signal.convolve2d(g, _LAPLACE_KERNEL, mode="valid")
    return float(np.sqrt(np.pi / 2) * np.abs(resp).sum() / (6.0 * (w - 2) * (h - 2)))


def median_residual(img: np.ndarray) -> float:
    """Mean absolute deviation from a 3x3 median filter; edges survive, speckle does not."""
    g = _gray(img)
    return float(np.mean(np.abs(g - ndimage.median_filter(g, size=3, mode="reflect"))))


def mean_gradient(img: np.ndarray) -> float:
    g = _gray(img)
    gy, gx = np.gradient(g)
    return float(np.mean(np.hypot(gx, gy)))


def mean_abs_laplacian(img: np.ndarray) -> float:
    return float(np.mean(np.abs(ndimage.laplace(_gray(img), mode="reflect"))))


_STUB_FEATURES: dict[str, tuple[Callable[[np.ndarray], float], float]] = {
    "nima": (noise_sigma, 20.0),
    "topiq_iaa": (median_residual, 10.0),
    "topiq_nr": (mean_abs_laplacian, 30.0),
    "tres": (mean_gradient, 25.0),
}


class StubScorer:
    """Deterministic offline scorer for one metric (no learned weights)."""

    def __init__(self, metric: str):
        if metric not in _STUB_FEATURES:
            raise EvaluationError(f"unknown metric {metric!r}")
        self.metric = metric
        self.feature, self.scale = _STUB_FEATURES[metric]

    def __call__(self, image: np.ndarray) -> float:
        high = METRIC_RANGES[self.metric][1]
        return high * math.exp(-self.feature(image) / self.scale)


class PyiqaScorer:
    """Adapter for published scorer weights through the ``pyiqa`` package.

    ``pyiqa`` and its weight files are optional; construction raises
    :class:`ScorerWeightsMissing` when either is unavailable.
    """

    PYIQA_NAMES = {"nima": "nima", "topiq_iaa": "topiq_iaa", "topiq_nr": "topiq_nr", "tres": "tres"}

    def __init__(self, metric: str, weights_path: str | Path | None = None):
        try:
            import pyiqa  # noqa: F401
        except ImportError as exc:
            raise ScorerWeightsMissing(f"pyiqa is not installed; cannot load real {metric} scorer") from exc
        import torch

        kwargs = {"device": torch.device("cpu")}
        if weights_path is not None:
            if not Path(weights_path).is_file():
                raise ScorerWeightsMissing(f"{metric} weight file not found: {weights_path}")
            kwargs["pretrained_model_path"] = str(weights_path)
        try:
            self.model = pyiqa.create_metric(self.PYIQA_NAMES[metric], **kwargs)
        except Exception as exc:  # pyiqa raises assorted errors when a download is impossible
            raise ScorerWeightsMissing(f"could not load {metric} scorer weights: {exc}") from exc
        self.metric = metric

    def __call__(self, image: np.ndarray) -> float:
        import torch

        t = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            return float(self.model(t).reshape(-1)[0])


@dataclass
class ScorerRegistry:
    scorers: dict[str, Scorer] = field(default_factory=dict)

    def register(self, metric: str, scorer: Scorer) -> None:
        if metric not in METRIC_RANGES:
            raise EvaluationError(f"unknown metric {metric!r}; known: {list(METRICS)}")
        self.scorers[metric] = scorer

    def get(self, metric: str) -> Scorer:
        try:
            return self.scorers[metric]
        except KeyError:
            raise EvaluationError(f"metric {metric!r} is not registered") from None

    @classmethod
    def stub(cls, metrics: Iterable[str] = METRICS) -> "ScorerRegistry":
        reg = cls()
        for m in metrics:
            reg.register(m, StubScorer(m))
        return reg

    @classmethod
    def real(cls, metrics: Iterable[str] = METRICS, weights: Mapping[str, str] | None = None) -> "ScorerRegistry":
        weights = weights or {}
        reg = cls()
        for m in metrics:
            reg.register(m, PyiqaScorer(m, weights.get(m)))
        return reg


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise EvaluationError(f"expected H x W x 3 uint8 image, got {image.dtype} {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise EvaluationError("zero-size image")


def score_image(image: np.ndarray, metric: str, registry: ScorerRegistry) -> IqaScore:
    _check_image(image)
    return IqaScore(metric, float(registry.get(metric)(image)))


def score_corpus(images: Sequence[np.ndarray], metrics: Sequence[str], registry: ScorerRegistry) -> list[IqaScore]:
    """Arithmetic mean of each metric over ``images``."""
    if not images:
        raise EvaluationError("cannot score an empty corpus")
    if not metrics:
        raise EvaluationError("no metrics configured")
    means = []
    for m in metrics:
        vals = [score_image(img, m, registry).value for img in images]
        means.append(IqaScore(m, math.fsum(vals) / len(vals)))
    return means


def attack_success_rate(results: Sequence) -> tuple[float, float]:
    """Fraction of successful attacks and mean target confidence over the successes."""
    if not results:
        raise EvaluationError("no attack results to aggregate")
    wins = [r.final_confidence for r in results if r.success]
    rate = len(wins) / len(results)
    return rate, (math.fsum(wins) / len(wins) if wins else 0.0)


def build_report(corpora: Mapping[str, Sequence[np.ndarray]], metrics: Sequence[str], registry: ScorerRegistry) -> IqaReport:
    rows = [(name, score_corpus(imgs, metrics, registry)) for name, imgs in corpora.items()]
    return IqaReport(rows, image_count=sum(len(v) for v in corpora.values()), metrics=tuple(metrics))


def _ordered(report: IqaReport) -> list[str]:
    return [m for m in METRICS if m in report.metrics]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def emit_report(report: IqaReport, fmt: str = "markdown") -> str:
    metrics = _ordered(report)
    rows = [(name, {s.metric: s.value for s in scores}) for name, scores in report.rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *metrics])
        for name, vals in rows:
            w.writerow([name, *(_fmt(vals[m]) for m in metrics)])
        return buf.getvalue()
    if fmt != "markdown":
        raise EvaluationError(f"unknown report format {fmt!r}")

    def rng(m):
        lo, hi = METRIC_RANGES[m]
        return f"{lo:g}~{hi:g}"

    lines = [
        "| Method | " + " | ".join(f"{HEADER_LABELS[m]} ↑ ({rng(m)})" for m in metrics) + " |",
        "|---|" + "---:|" * len(metrics),
    ]
    for name, vals in rows:
        lines.append(f"| {name} | " + " | ".join(_fmt(vals[m]) for m in metrics) + " |")
    return "\n".join(lines) + "\n"


def load_score_file(path: str | Path) -> IqaReport:
    """Read canned scores from a CSV with header ``method,<metric>,...``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        metrics = tuple(m for m in reader.fieldnames[1:])
        rows = [(r["method"], [IqaScore(m, float(r[m])) for m in metrics]) for r in reader]
    if not rows:
        raise EvaluationError(f"{path}: no score rows")
    return IqaReport(rows, image_count=len(rows), metrics=metrics)


def noise_baseline(image: np.ndarray, amplitude: float = 0.3, seed: int = 0) -> np.ndarray:
    """Content plus uniform noise of ``amplitude`` in [-1, 1] model units."""
    rng = np.random.default_rng(seed)
    x = image.astype(np.float64) / 127.5 - 1.0
    x = np.clip(x + rng.uniform(-amplitude, amplitude, size=x.shape), -1.0, 1.0)
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
