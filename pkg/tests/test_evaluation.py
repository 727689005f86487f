import math
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from diffattack.evaluation import (
    METRIC_RANGES,
    METRICS,
    EvaluationError,
    IqaReport,
    IqaScore,
    PyiqaScorer,
    ScorerRegistry,
    ScorerWeightsMissing,
    attack_success_rate,
    build_report,
    emit_report,
    load_score_file,
    noise_baseline,
    score_corpus,
    score_image,
)
from diffattack.synthetic import synthetic_scene

from conftest import FIXTURES
from oracles import mean_loop

# First-run values of the stub scorer on the bundled reference scene.
PINNED_REFERENCE = {
    "nima": 9.645246448293921,
    "topiq_iaa": 9.970480423782472,
    "topiq_nr": 0.8962053622232605,
    "tres": 93.18603351466314,
}


@pytest.fixture(scope="module")
def stub():
    return ScorerRegistry.stub()


@pytest.fixture(scope="module")
def reference():
    return np.asarray(Image.open(FIXTURES / "reference_scene.png").convert("RGB"))


def result(success, conf):
    return SimpleNamespace(success=success, final_confidence=conf)


# ---------------------------------------------------------------- types

def test_score_range_enforced():
    IqaScore("topiq_nr", 1.0)
    with pytest.raises(EvaluationError):
        IqaScore("topiq_nr", 1.01)
    with pytest.raises(EvaluationError):
        IqaScore("brisque", 1.0)
    assert IqaScore("tres", 5).valid_range == (0.0, 100.0)


def test_report_invariants():
    with pytest.raises(EvaluationError):
        IqaReport([("a", [IqaScore("nima", 1.0)])], image_count=0, metrics=("nima",))
    with pytest.raises(EvaluationError, match="expected"):
        IqaReport([("a", [IqaScore("nima", 1.0)])], image_count=1, metrics=("nima", "tres"))
    with pytest.raises(EvaluationError):
        IqaReport([], image_count=1, metrics=())


# ---------------------------------------------------------------- score_image

@pytest.mark.parametrize("metric", METRICS)
def test_stub_scores_in_range_and_deterministic(stub, rng, metric):
    for _ in range(5):
        img = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        s = score_image(img, metric, stub)
        lo, hi = METRIC_RANGES[metric]
        assert lo <= s.value <= hi
        assert s.value == score_image(img, metric, stub).value


def test_stub_reference_pin(stub, reference):
    for m, v in PINNED_REFERENCE.items():
        assert score_image(reference, m, stub).value == pytest.approx(v, abs=1e-9)


def test_score_image_errors(stub, reference):
    with pytest.raises(EvaluationError, match="not registered"):
        score_image(reference, "nima", ScorerRegistry())
    with pytest.raises(EvaluationError):
        score_image(reference.astype(np.float32), "nima", stub)
    with pytest.raises(EvaluationError):
        score_image(np.zeros((0, 4, 3), np.uint8), "nima", stub)


def test_real_scorer_reports_missing_weights(tmp_path):
    try:
        import pyiqa  # noqa: F401
    except ImportError:
        with pytest.raises(ScorerWeightsMissing):
            PyiqaScorer("nima")
    with pytest.raises(ScorerWeightsMissing):
        PyiqaScorer("nima", tmp_path / "absent.pth")


# ---------------------------------------------------------------- score_corpus

def test_single_image_corpus(stub, reference):
    means = score_corpus([reference], METRICS, stub)
    assert [s.value for s in means] == [score_image(reference, m, stub).value for m in METRICS]


def test_two_image_mean():
    values = iter([0.2, 0.6])
    reg = ScorerRegistry()
    reg.register("topiq_nr", lambda img: next(values))
    img = np.zeros((4, 4, 3), np.uint8)
    (mean,) = score_corpus([img, img], ["topiq_nr"], reg)
    assert mean.value == pytest.approx(0.4, abs=1e-12)


def test_ten_image_corpus_loop_oracle(stub):
    images = [synthetic_scene(s, 32)[0] for s in range(10)]
    means = score_corpus(images, METRICS, stub)
    for s in means:
        expect = mean_loop([stub.get(s.metric)(img) for img in images])
        assert abs(s.value - expect) < 1e-9


def test_empty_corpus(stub):
    with pytest.raises(EvaluationError):
        score_corpus([], METRICS, stub)
    with pytest.raises(EvaluationError):
        score_corpus([np.zeros((4, 4, 3), np.uint8)], [], stub)


# ---------------------------------------------------------------- attack_success_rate

def test_success_rate_examples():
    assert attack_success_rate([result(True, 0.93)] * 3) == pytest.approx((1.0, 0.93))
    assert attack_success_rate([result(False, 0.4), result(False, 0.7)]) == (0.0, 0.0)
    rate, conf = attack_success_rate(
        [result(True, 0.9), result(True, 0.92), result(True, 0.94), result(False, 0.5)]
    )
    assert rate == 0.75
    assert conf == pytest.approx(0.92, abs=1e-12)
    with pytest.raises(EvaluationError):
        attack_success_rate([])


# ---------------------------------------------------------------- emit_report

def table_report():
    return load_score_file(FIXTURES / "table_scores.csv")


def test_markdown_fixture_byte_exact():
    text = emit_report(table_report(), "markdown")
    assert text.encode("utf-8") == (FIXTURES / "table_report.md").read_bytes()


def test_csv_fixture_byte_exact():
    text = emit_report(table_report(), "csv")
    assert text.encode("utf-8") == (FIXTURES / "table_report.csv").read_bytes()
    assert "\r" not in text
    assert text.splitlines()[0] == "method,nima,topiq_iaa,topiq_nr,tres"


def test_ours_row_rendering():
    report = IqaReport(
        [("Diffusion Attack (Ours)", [IqaScore(m, v) for m, v in zip(METRICS, (4.78, 4.46, 0.62, 72.32))])],
        image_count=1,
    )
    assert emit_report(report).splitlines()[2] == "| Diffusion Attack (Ours) | 4.78 | 4.46 | 0.62 | 72.32 |"


def test_column_order_is_fixed():
    scores = [IqaScore(m, v) for m, v in reversed(list(zip(METRICS, (5.37, 4.92, 0.70, 82.56))))]
    report = IqaReport([("Content image", scores)], image_count=1, metrics=tuple(reversed(METRICS)))
    assert emit_report(report, "csv") == "method,nima,topiq_iaa,topiq_nr,tres\nContent image,5.37,4.92,0.70,82.56\n"


def test_single_metric_report():
    report = IqaReport([("x", [IqaScore("tres", 50.0)])], image_count=1, metrics=("tres",))
    assert emit_report(report) == "| Method | Tres ↑ (0~100) |\n|---|---:|\n| x | 50.00 |\n"


def test_markdown_is_deterministic():
    assert emit_report(table_report()) == emit_report(table_report())


def test_unknown_format():
    with pytest.raises(EvaluationError):
        emit_report(table_report(), "html")


# ---------------------------------------------------------------- baselines and ordering

def test_noise_baseline_amplitude(reference):
    noisy = noise_baseline(reference, 0.3, seed=1)
    assert noisy.dtype == np.uint8 and noisy.shape == reference.shape
    diff = np.abs(noisy.astype(int) - reference.astype(int))
    assert diff.max() <= math.ceil(0.3 * 127.5) + 1
    assert np.array_equal(noisy, noise_baseline(reference, 0.3, seed=1))


def test_noise_scores_below_clean(stub):
    images = [synthetic_scene(s, 64)[0] for s in range(5)]
    report = build_report(
        {"clean": images, "noise": [noise_baseline(i, 0.3, seed=k) for k, i in enumerate(images)]}, METRICS, stub
    )
    assert report.image_count == 10
    for m in METRICS:
        assert report.value("clean", m) >= report.value("noise", m)
