from __future__ import annotations

import numpy as np
import pytest

from src.errors import ConfigError
from src.prism.bench import (
    DEFAULT_N,
    ScalingReport,
    Timing,
    bench_mixer,
    fit_slope,
    machine_metadata,
    mixer_callable,
    run_bench,
    scaling_from_rows,
    upper_start,
)


def test_default_sizes_span_five_doublings():
    assert DEFAULT_N == (128, 256, 512, 1024, 2048, 4096)
    assert upper_start(DEFAULT_N) == 512
    assert upper_start([8, 16, 32]) == 16


def test_fit_slope_recovers_exponent():
    ns = [128, 256, 512, 1024]
    exact = fit_slope(ns, [3.0 * n**2 for n in ns])
    assert exact.slope == pytest.approx(2.0, abs=1e-9)
    assert exact.ci_low == pytest.approx(2.0, abs=1e-6) and exact.ci_high == pytest.approx(2.0, abs=1e-6)

    rng = np.random.default_rng(0)
    noisy = fit_slope(ns, [n * np.log2(n) * rng.uniform(0.95, 1.05) for n in ns])
    assert noisy.ci_low <= noisy.slope <= noisy.ci_high
    assert 1.0 < noisy.slope < 1.4
    assert (noisy.n_min, noisy.n_max) == (128, 1024)

    with pytest.raises(ConfigError):
        fit_slope([128], [1.0])


@pytest.mark.parametrize("primitive", ["mhsa", "ghc"])
def test_mixer_callable_shapes(primitive):
    out = mixer_callable(primitive, 16, 8, 2, seed=0)()
    assert out.shape == (16, 8)
    with pytest.raises(ConfigError):
        mixer_callable("conv", 16, 8, 2, seed=0)  # type: ignore[arg-type]


def test_bench_mixer_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        bench_mixer("ghc", [8, 16], reps=5)
    with pytest.raises(ConfigError):
        bench_mixer("ghc", [8, 12])


def test_small_bench_run():
    report = bench_mixer("ghc", [8, 16, 32], d=4, heads=2, min_sample_ns=100_000)
    timings = report.timings["ghc"]
    assert [t.n for t in timings] == [8, 16, 32]
    assert all(t.q1_ns <= t.median_ns <= t.q3_ns and t.reps == 11 for t in timings)
    fit = report.fits["ghc"]
    assert (fit.n_min, fit.n_max) == (16, 32)


def _report(mhsa_top: float, ghc_top: float) -> ScalingReport:
    def series(top):
        return [Timing(64, top / 4, top / 4, top / 4, 1, 11), Timing(128, top, top, top, 1, 11)]

    report = ScalingReport(8, {"mhsa": series(mhsa_top), "ghc": series(ghc_top)})
    report.fits = {p: fit_slope([64, 128], [t.median_ns for t in ts]) for p, ts in report.timings.items()}
    return report


def test_crossover_flag():
    assert not _report(mhsa_top=100.0, ghc_top=50.0).crossover_missing
    assert _report(mhsa_top=100.0, ghc_top=150.0).crossover_missing
    assert not ScalingReport(8).crossover_missing


def test_rows_rebuild_the_report():
    report = _report(100.0, 50.0)
    rows = report.rows()
    assert rows[0][:2] == ["primitive", "n"] and len(rows) == 5
    rebuilt = scaling_from_rows(rows, d=8)
    assert [t.n for t in rebuilt.timings["ghc"]] == [64, 128]
    assert rebuilt.fits["mhsa"].slope == pytest.approx(2.0, abs=1e-9)
    assert report.summary_lines()[0] == "primitive,slope,ci_low,ci_high"


def test_machine_metadata_fields():
    meta = machine_metadata()
    for key in ("platform", "python", "numpy", "cpu_logical", "affinity", "timing"):
        assert meta[key]


def test_run_bench_records_crossover_in_metadata():
    report = run_bench(n_list=[8, 16, 32], d=4, heads=2, pin=False)
    assert set(report.timings) == {"mhsa", "ghc"}
    assert report.metadata["crossover_missing"] in ("true", "false")


@pytest.mark.slow
def test_scaling_exponents():
    report = run_bench(n_list=DEFAULT_N, d=64, heads=4)
    assert 1.7 <= report.fits["mhsa"].slope <= 2.3
    assert 0.9 <= report.fits["ghc"].slope <= 1.4
    top = {p: [t.median_ns for t in report.timings[p]][-2:] for p in ("mhsa", "ghc")}
    assert top["mhsa"][1] / top["mhsa"][0] == pytest.approx(4.0, rel=0.35)
    assert top["ghc"][1] / top["ghc"][0] == pytest.approx(2.2, rel=0.35)
