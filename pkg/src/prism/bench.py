"""Как растёт стоимость прямого прохода: внимание против гармонической свёртки."""
from __future__ import annotations

import logging
import os
import platform
import timeit
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import psutil
import scipy.stats

from ..errors import ConfigError
from . import layers as L
from .autodiff import Tape
from .numerics import is_pow2

log = logging.getLogger(__name__)

Primitive = Literal["mhsa", "ghc"]
PRIMITIVES: tuple[Primitive, ...] = ("mhsa", "ghc")
DEFAULT_N = (128, 256, 512, 1024, 2048, 4096)
MIN_REPS = 11
WARMUP = 2
MIN_SAMPLE_NS = 2_000_000


@dataclass(frozen=True)
class Timing:
    n: int
    median_ns: float
    q1_ns: float
    q3_ns: float
    number: int
    reps: int

    @property
    def iqr_ns(self) -> float:
        return self.q3_ns - self.q1_ns


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    ci_low: float
    ci_high: float
    n_min: int
    n_max: int


@dataclass
class ScalingReport:
    d: int
    timings: dict[str, list[Timing]] = field(default_factory=dict)
    fits: dict[str, SlopeFit] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def merge(self, other: "ScalingReport") -> "ScalingReport":
        self.timings.update(other.timings)
        self.fits.update(other.fits)
        self.metadata.update(other.metadata)
        return self

    @property
    def crossover_missing(self) -> bool:
        """True, если GHC не быстрее внимания на наибольшем общем N."""
        if not {"mhsa", "ghc"} <= set(self.timings):
            return False
        top = max(set(t.n for t in self.timings["mhsa"]) & set(t.n for t in self.timings["ghc"]), default=None)
        if top is None:
            return False
        at = {p: next(t for t in self.timings[p] if t.n == top).median_ns for p in ("mhsa", "ghc")}
        return at["ghc"] >= at["mhsa"]

    def rows(self) -> list[list[str]]:
        out = [["primitive", "n", "median_ns", "q1_ns", "q3_ns", "iqr_ns", "number", "reps"]]
        for prim, timings in self.timings.items():
            for t in timings:
                out.append([prim, str(t.n), f"{t.median_ns:.1f}", f"{t.q1_ns:.1f}", f"{t.q3_ns:.1f}",
                            f"{t.iqr_ns:.1f}", str(t.number), str(t.reps)])
        return out

    def summary_lines(self) -> list[str]:
        lines = ["primitive,slope,ci_low,ci_high"]
        lines += [f"{p},{f.slope:.4f},{f.ci_low:.4f},{f.ci_high:.4f}" for p, f in self.fits.items()]
        return lines


def pin_single_cpu() -> list[int] | None:
    """Привязать процесс к одному логическому CPU, если платформа позволяет."""
    proc = psutil.Process()
    if not hasattr(proc, "cpu_affinity"):
        return None
    try:
        allowed = proc.cpu_affinity()
        proc.cpu_affinity(allowed[:1])
        return allowed
    except (psutil.Error, OSError) as exc:
        log.warning("Could not pin benchmark to one CPU: %s", exc)
        return None


def restore_affinity(allowed: list[int] | None) -> None:
    if allowed:
        psutil.Process().cpu_affinity(allowed)


def machine_metadata() -> dict[str, str]:
    freq = psutil.cpu_freq()
    proc = psutil.Process()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_logical": str(psutil.cpu_count(logical=True)),
        "cpu_physical": str(psutil.cpu_count(logical=False)),
        "cpu_mhz": f"{freq.current:.0f}" if freq else "unknown",
        "affinity": ",".join(map(str, proc.cpu_affinity())) if hasattr(proc, "cpu_affinity") else "unsupported",
        "omp_num_threads": os.environ.get("OMP_NUM_THREADS", "unset"),
        "timing": "forward only, single thread, fixed CPU frequency assumed",
    }


def mixer_callable(primitive: Primitive, n: int, d: int, heads: int, seed: int) -> Callable[[], np.ndarray]:
    """Входы и параметры от сида, привязанные к нашему же прямому проходу."""
    rng = np.random.default_rng([seed, n, d])
    if primitive == "mhsa":
        x = rng.normal(size=(n, d))
        params = L.AttentionParams.create("bench.attn", d, heads, rng)
        return lambda: L.mhsa_forward(x, params, tape=Tape(grad_enabled=False)).value
    if primitive == "ghc":
        z = rng.normal(size=(n, d)) + 1j * rng.normal(size=(n, d))
        kernel = L.GlobalKernel.create("bench.kernel", d, n, rng)
        return lambda: L.ghc_forward(z, kernel, tape=Tape(grad_enabled=False)).value
    raise ConfigError(f"unknown primitive {primitive!r}")


def _inner_loop(timer: timeit.Timer, floor_ns: int) -> int:
    number = 1
    while True:
        if timer.timeit(number) * 1e9 >= floor_ns or number >= 1 << 20:
            return number
        number *= 2


def upper_start(ns: Sequence[int]) -> int:
    """Наименьшее N верхней половины отсортированного списка (середина входит)."""
    return ns[(len(ns) - 1) // 2]


def fit_slope(ns: Sequence[int], times_ns: Sequence[float]) -> SlopeFit:
    """МНК-наклон log(time) по log(N) с 95% t-интервалом."""
    if len(ns) < 2:
        raise ConfigError("slope fit needs at least two sizes")
    res = scipy.stats.linregress(np.log(ns), np.log(times_ns))
    dof = len(ns) - 2
    half = float(scipy.stats.t.ppf(0.975, dof) * res.stderr) if dof > 0 else 0.0
    return SlopeFit(float(res.slope), res.slope - half, res.slope + half, int(min(ns)), int(max(ns)))


def bench_mixer(
    primitive: Primitive,
    n_list: Sequence[int] = DEFAULT_N,
    d: int = 64,
    reps: int = MIN_REPS,
    heads: int = 4,
    seed: int = 0,
    fit_from: int | None = None,
    min_sample_ns: int = MIN_SAMPLE_NS,
) -> ScalingReport:
    """Медиана времени прямого прохода для каждого N по ``reps`` замерам после прогрева.

    Один замер крутит прямой проход столько раз, чтобы набралось не меньше
    ``min_sample_ns``. Наклон подбирается по N >= ``fit_from`` (по умолчанию
    по верхней половине диапазона).
    """
    if reps < MIN_REPS:
        raise ConfigError(f"bench.reps must be at least {MIN_REPS}, got {reps}")
    ns = sorted(int(n) for n in n_list)
    if not ns or not all(is_pow2(n) for n in ns):
        raise ConfigError(f"bench.n must be powers of two, got {list(n_list)}")
    if len(ns) < 5:
        log.warning("Only %d sizes; the slope fit wants at least four doublings", len(ns))
    timings = []
    for n in ns:
        timer = timeit.Timer(mixer_callable(primitive, n, d, heads, seed))
        number = _inner_loop(timer, min_sample_ns)
        samples = np.array(timer.repeat(repeat=reps + WARMUP, number=number)[WARMUP:]) * 1e9 / number
        q1, med, q3 = np.percentile(samples, [25, 50, 75])
        timings.append(Timing(n, float(med), float(q1), float(q3), number, reps))
        log.debug("%s N=%d median %.0f ns (x%d)", primitive, n, med, number)
    lo = fit_from if fit_from is not None else upper_start(ns)
    upper = [t for t in timings if t.n >= lo]
    if len(upper) < 2:
        upper = timings
    fit = fit_slope([t.n for t in upper], [t.median_ns for t in upper])
    log.info("%s slope %.3f [%.3f, %.3f] over N=%d..%d", primitive, fit.slope, fit.ci_low, fit.ci_high, fit.n_min, fit.n_max)
    return ScalingReport(d, {primitive: timings}, {primitive: fit})


def run_bench(
    primitives: Sequence[Primitive] = PRIMITIVES,
    n_list: Sequence[int] = DEFAULT_N,
    d: int = 64,
    reps: int = MIN_REPS,
    heads: int = 4,
    seed: int = 0,
    fit_from: int | None = None,
    pin: bool = True,
) -> ScalingReport:
    allowed = pin_single_cpu() if pin else None
    try:
        report = ScalingReport(d, metadata=machine_metadata())
        for prim in primitives:
            report.merge(bench_mixer(prim, n_list, d, reps, heads, seed, fit_from))
    finally:
        restore_affinity(allowed)
    if report.crossover_missing:
        log.warning("GHC is not faster than attention at N=%d; crossover flag raised", max(n_list))
    report.metadata["crossover_missing"] = str(report.crossover_missing).lower()
    return report


def scaling_from_rows(rows: Sequence[Sequence[str]], d: int) -> ScalingReport:
    """Собрать отчёт из строк ``ScalingReport.rows`` и заново подобрать наклоны."""
    report = ScalingReport(d)
    for row in rows[1:]:
        prim, n, med, q1, q3, _, number, reps = row
        report.timings.setdefault(prim, []).append(
            Timing(int(n), float(med), float(q1), float(q3), int(number), int(reps))
        )
    for prim, timings in report.timings.items():
        ns = [t.n for t in timings]
        upper = [t for t in timings if t.n >= upper_start(ns)]
        report.fits[prim] = fit_slope([t.n for t in upper], [t.median_ns for t in upper])
    return report
