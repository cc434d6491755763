"""The architecture x SE-variant ablation grid and its Table-1-style report."""

from __future__ import annotations

import hashlib
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .data import Dataset
from .metrics import DiceReport, format_cell, wilcoxon_signed_rank
from .se import SEVariant, network_se_overhead
from .training import TrainResult, evaluate, log_to_csv, train_loop
from .zoo import build_network, count_parameters

logger = logging.getLogger(__name__)

COLUMN_TITLES = {
    "none": "No SE Block",
    "cse": "+ cSE Block",
    "sse": "+ sSE Block",
    "scse": "+ scSE Block",
}
ROW_TITLES = {"unet": "U-Net", "sdnet": "SD-Net", "densenet": "DenseNets"}


def cell_seed(master_seed: int, arch: str, variant: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{arch}:{variant}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class CellResult:
    arch: str
    variant: str
    seed: int
    status: str = "ok"
    mean: float = float("nan")
    std: float = float("nan")
    sample_means: List[float] = field(default_factory=list)
    per_sample: Optional[np.ndarray] = None
    parameters: int = 0
    overhead: int = 0
    best_epoch: int = -1
    epochs_run: int = 0
    wall_clock: float = 0.0
    log_csv: str = ""
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def cell(self) -> str:
        return format_cell(self.mean, self.std) if self.ok else "FAILED"


def run_cell(cfg: RunConfig, dataset: Dataset, arch: str, variant: str) -> CellResult:
    """Train and test one (architecture, SE variant) cell; failures are captured."""
    seed = cell_seed(cfg.train.seed, arch, variant)
    res = CellResult(arch, variant, seed)
    start = time.perf_counter()
    try:
        spec = cfg.arch.to_spec(kind=arch, variant=variant)
        res.overhead = network_se_overhead(spec.se_block_channels(), spec.se_variant, spec.se_reduction)
        res.parameters = count_parameters(build_network(spec, seed))
        out: TrainResult = train_loop(spec, dataset, cfg.train.to_config(seed=seed), cfg.output.exclude_background)
        report: DiceReport = evaluate(out.network, dataset.test, cfg.output.exclude_background)
        res.mean, res.std = report.mean, report.std
        res.sample_means = [float(v) for v in report.sample_means]
        res.per_sample = report.per_sample
        res.best_epoch = out.best_epoch
        res.epochs_run = len(out.log)
        res.log_csv = log_to_csv(out.log)
    except Exception as exc:  # isolate per-cell failures
        res.status = "FAILED"
        res.error = f"{type(exc).__name__}: {exc}"
        logger.error("cell %s/%s failed: %s", arch, variant, res.error)
        logger.debug(traceback.format_exc())
    res.wall_clock = time.perf_counter() - start
    return res


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class GridReport:
    archs: List[str]
    variants: List[str]
    cells: Dict[Tuple[str, str], CellResult]
    p_values: Dict[Tuple[str, str], Optional[float]] = field(default_factory=dict)
    p_notes: Dict[Tuple[str, str], str] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(not c.ok for c in self.cells.values())

    def compute_p_values(self) -> None:
        """Wilcoxon signed-rank of each SE column against the ``none`` column.

        Pairs are the per-test-sample class-mean Dice scores.
        """
        self.p_values.clear()
        self.p_notes.clear()
        if "none" not in self.variants:
            return
        for arch in self.archs:
            base = self.cells[(arch, "none")]
            for variant in self.variants:
                if variant == "none":
                    continue
                key = (arch, variant)
                cell = self.cells[key]
                if not (base.ok and cell.ok):
                    self.p_values[key], self.p_notes[key] = None, "cell failed"
                    continue
                try:
                    result = wilcoxon_signed_rank(cell.sample_means, base.sample_means)
                except ValueError as exc:
                    self.p_values[key], self.p_notes[key] = None, str(exc)
                    continue
                self.p_values[key] = result.p_value
                self.p_notes[key] = result.method

    def to_csv(self) -> str:
        rows = ["arch,variant,status,mean,std,cell,p_vs_none,p_method,parameters,se_overhead,best_epoch,epochs,wall_clock_s"]
        for arch in self.archs:
            for variant in self.variants:
                c = self.cells[(arch, variant)]
                p = self.p_values.get((arch, variant))
                rows.append(
                    ",".join(
                        [
                            arch,
                            variant,
                            c.status,
                            repr(c.mean),
                            repr(c.std),
                            c.cell,
                            "" if p is None else repr(p),
                            self.p_notes.get((arch, variant), ""),
                            str(c.parameters),
                            str(c.overhead),
                            str(c.best_epoch),
                            str(c.epochs_run),
                            f"{c.wall_clock:.2f}",
                        ]
                    )
                )
        return "\n".join(rows) + "\n"

    def render_table(self) -> str:
        """Plain-text grid: one row per architecture, one column per variant."""
        headers = ["Networks"] + [COLUMN_TITLES.get(v, v) for v in self.variants]
        body = []
        for arch in self.archs:
            body.append([ROW_TITLES.get(arch, arch)] + [self.cells[(arch, v)].cell for v in self.variants])
            if self.p_notes:
                prow = ["  Wilcoxon p"]
                for variant in self.variants:
                    p = self.p_values.get((arch, variant))
                    prow.append("" if variant == "none" else ("n/a" if p is None else f"{p:.3g}"))
                body.append(prow)
        widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
        fmt = lambda r: " | ".join(s.ljust(w) for s, w in zip(r, widths))
        sep = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(headers), sep] + [fmt(r) for r in body]) + "\n"


def run_grid(
    cfg: RunConfig,
    dataset: Dataset,
    archs: Sequence[str],
    variants: Sequence[str],
    threads: Optional[int] = None,
) -> GridReport:
    archs = list(archs)
    variants = [SEVariant.parse(v).value for v in variants]
    if threads is None:
        threads = int(os.environ.get("SCSE_THREADS", "1") or 1)
    jobs = [(cfg, dataset, a, v) for a in archs for v in variants]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell_args, jobs))
    else:
        results = [run_cell(*job) for job in jobs]
    cells = {(r.arch, r.variant): r for r in results}
    report = GridReport(archs, variants, cells)
    report.compute_p_values()
    return report
