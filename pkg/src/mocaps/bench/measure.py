"""Activation-memory and wall-clock measurements across chain depth."""
from __future__ import annotations

import gc
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mocaps import data as D
from mocaps.bench.ledger import MemoryLedger, use_ledger
from mocaps.model import NetworkConfig, forward, init_params, loss_and_grads
from mocaps.tensor import RngState

# name -> (variant, mode)
RUNS = {
    "reversible": ("mocapsnet", "reversible"),
    "stored": ("mocapsnet", "stored"),
    "rescapsnet": ("rescapsnet", "stored"),
    "capsnet": ("capsnet", "stored"),
}


def desk_config(**overrides) -> NetworkConfig:
    """Small stem, full-width capsule chain (32 capsules x 16-D), synthetic 28x28."""
    base = dict(dataset="synthetic", stem_channels=32, primary_groups=8, n_blocks=1, init_std=0.1)
    base.update(overrides)
    return NetworkConfig(**base)


@dataclass
class SlopeFit:
    x: list
    y: list
    slope: float = 0.0
    intercept: float = 0.0

    def __post_init__(self):
        if len(self.x) < 2:
            raise ValueError("a line fit needs at least two points")
        a = np.vstack([np.asarray(self.x, float), np.ones(len(self.x))]).T
        (self.slope, self.intercept), *_ = np.linalg.lstsq(a, np.asarray(self.y, float), rcond=None)
        self.slope, self.intercept = float(self.slope), float(self.intercept)


@dataclass
class MemoryRow:
    run: str
    blocks: int
    peak_bytes: int
    chain_bytes: int
    transient_peak: int
    idle_after: int


@dataclass
class MemoryReport:
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)

    def peaks(self, run: str) -> list:
        return [r.peak_bytes for r in self.rows if r.run == run]

    def table(self) -> str:
        lines = [f"{'run':<12}{'blocks':>7}{'peak_bytes':>14}{'chain_bytes':>13}{'transient':>12}"]
        for r in self.rows:
            lines.append(f"{r.run:<12}{r.blocks:>7}{r.peak_bytes:>14}{r.chain_bytes:>13}{r.transient_peak:>12}")
        for run, fit in self.fits.items():
            lines.append(f"slope[{run}] = {fit.slope:.1f} B/block (intercept {fit.intercept:.0f})")
        return "\n".join(lines)

    def csv_rows(self):
        yield ["run", "blocks", "peak_bytes", "chain_bytes", "transient_peak", "idle_after"]
        for r in self.rows:
            yield [r.run, r.blocks, r.peak_bytes, r.chain_bytes, r.transient_peak, r.idle_after]


def _batch(cfg: NetworkConfig, batch: int, seed: int):
    ds = D.synthetic(cfg.classes, batch, cfg.image_size, RngState(seed).split("bench-data"))
    return D.normalize(ds.images, cfg.np_dtype), ds.labels


def measure_memory(depths=range(1, 9), runs=("reversible", "stored", "rescapsnet"),
                   base: NetworkConfig | None = None, batch: int = 32, seed: int = 0) -> MemoryReport:
    """Peak ledger bytes over one training step for every (run, depth)."""
    base = base or desk_config()
    x, y = _batch(base, batch, seed)
    report = MemoryReport()
    for run in runs:
        variant, mode = RUNS[run]
        for n in depths:
            cfg = replace(base, n_blocks=n, variant=variant)
            params = init_params(cfg, RngState(seed))
            ledger = MemoryLedger()
            with use_ledger(ledger):
                baseline = ledger.snapshot("idle")
                loss_and_grads(x, y, cfg, params, mode, ledger=ledger)
                idle = ledger.snapshot("after")
            report.rows.append(MemoryRow(run, n, ledger.peak_bytes - baseline, ledger.site_peak["chain"],
                                         ledger.site_peak["transient"], idle - baseline))
        pts = [(r.blocks, r.peak_bytes) for r in report.rows if r.run == run]
        if len(pts) >= 2:
            report.fits[run] = SlopeFit([p[0] for p in pts], [p[1] for p in pts])
    return report


@dataclass
class TimeRow:
    run: str
    blocks: int
    train_median: float
    train_stdev: float
    infer_median: float
    infer_stdev: float


@dataclass
class TimeReport:
    rows: list = field(default_factory=list)
    train_fits: dict = field(default_factory=dict)
    infer_fits: dict = field(default_factory=dict)
    repeats: int = 5

    def _col(self, run, attr):
        return [getattr(r, attr) for r in self.rows if r.run == run]

    def train_slope_ratio(self, run="reversible", baseline="rescapsnet") -> float:
        return self.train_fits[run].slope / self.train_fits[baseline].slope

    def inference_ratio(self, run="reversible", baseline="rescapsnet") -> float:
        """Total inference time over all depths, run vs baseline."""
        return sum(self._col(run, "infer_median")) / sum(self._col(baseline, "infer_median"))

    def table(self) -> str:
        lines = [f"{'run':<12}{'blocks':>7}{'train_s':>11}{'+/-':>9}{'infer_s':>11}{'+/-':>9}"]
        for r in self.rows:
            lines.append(f"{r.run:<12}{r.blocks:>7}{r.train_median:>11.4f}{r.train_stdev:>9.4f}"
                         f"{r.infer_median:>11.4f}{r.infer_stdev:>9.4f}")
        for run, fit in self.train_fits.items():
            lines.append(f"train slope[{run}] = {fit.slope * 1e3:.2f} ms/block")
        for run, fit in self.infer_fits.items():
            lines.append(f"infer slope[{run}] = {fit.slope * 1e3:.2f} ms/block")
        return "\n".join(lines)

    def csv_rows(self):
        yield ["run", "blocks", "train_median_s", "train_stdev_s", "infer_median_s", "infer_stdev_s"]
        for r in self.rows:
            yield [r.run, r.blocks, r.train_median, r.train_stdev, r.infer_median, r.infer_stdev]


def _timed(fn) -> float:
    gc.collect()
    gc.disable()
    try:
        t0 = time.perf_counter()
        fn()
        return time.perf_counter() - t0
    finally:
        gc.enable()


def _summary(ts):
    return statistics.median(ts), (statistics.stdev(ts) if len(ts) > 1 else 0.0)


def measure_time(depths=range(1, 9), runs=("reversible", "rescapsnet"), base: NetworkConfig | None = None,
                 batch: int = 32, repeats: int = 5, seed: int = 0) -> TimeReport:
    """Median wall-clock of one training step and one inference batch per (run, depth).

    Each callable gets one untimed warm-up.  Repeats are interleaved across
    runs at a given depth, so slow drift of the machine hits every run alike.
    The collector is paused inside each timed call (steps leave no cyclic
    garbage, so no work is deferred).
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    base = base or desk_config()
    x, y = _batch(base, batch, seed)
    report = TimeReport(repeats=repeats)
    for n in depths:
        jobs = {}
        for run in runs:
            variant, mode = RUNS[run]
            cfg = replace(base, n_blocks=n, variant=variant)
            params = init_params(cfg, RngState(seed))
            jobs[run] = (lambda c=cfg, p=params, m=mode: loss_and_grads(x, y, c, p, m),
                         lambda c=cfg, p=params, m=mode: forward(x, c, p, m))
        for step, infer in jobs.values():
            step()
            infer()
        times = {run: ([], []) for run in runs}
        for _ in range(repeats):
            for run, (step, infer) in jobs.items():
                times[run][0].append(_timed(step))
                times[run][1].append(_timed(infer))
        for run in runs:
            report.rows.append(TimeRow(run, n, *_summary(times[run][0]), *_summary(times[run][1])))
    for run in runs:
        xs = [r.blocks for r in report.rows if r.run == run]
        if len(xs) >= 2:
            report.train_fits[run] = SlopeFit(xs, report._col(run, "train_median"))
            report.infer_fits[run] = SlopeFit(xs, report._col(run, "infer_median"))
    return report


def write_csv(rows, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def write_plot_data(series: dict, out_dir) -> list:
    """One whitespace-separated ``x y`` file per named series."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (xs, ys) in series.items():
        p = out_dir / f"{name}.dat"
        p.write_text("".join(f"{x} {y!r}\n" for x, y in zip(xs, ys)))
        paths.append(p)
    return paths
