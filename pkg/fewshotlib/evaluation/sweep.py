"""Fine-tuning hyperparameter sweeps.

A sweep evaluates every cell of a (variant, steps, lr, support size) grid on one shared
episode stream, so cells are compared on identical episodes. The ``steps = 0`` baseline is
evaluated once and reused as the first row of every table.

Tables mirror the usual layout of such searches:

* variant A: per dataset, rows are step counts, columns are learning rates;
* variant B: per (dataset, learning rate), rows are step counts, columns are support sizes.

Cells whose support size is not valid for the stream's shot count are skipped with a warning.

.. versionadded:: 0.1.0
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from rich.table import Table

from fewshotlib import log
from fewshotlib.episodes import Episode
from fewshotlib.exceptions import ConfigurationError, DataError
from fewshotlib.evaluation.evaluate import EvalReport, evaluate, render_rich
from fewshotlib.evaluation.finetune import FinetuneConfig, FinetuneVariant
from fewshotlib.features import Corpus
from fewshotlib.model import ModelState
from fewshotlib.protonet import ProtoConfig


@dataclass(frozen=True)
class SweepGrid:
    """Axes of a sweep; ``steps`` should include 0 for the baseline row."""

    variants: tuple[FinetuneVariant, ...] = (FinetuneVariant.A, FinetuneVariant.B)
    steps: tuple[int, ...] = (0, 1, 3, 5, 10, 15, 20, 25)
    lrs: tuple[float, ...] = (1e-3, 1e-4, 1e-5, 1e-6)
    support_sizes: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(FinetuneVariant(v) for v in self.variants))
        for name in ("variants", "steps", "lrs"):
            if not getattr(self, name):
                raise ConfigurationError(f"sweep grid axis {name!r} is empty")
        if FinetuneVariant.B in self.variants and not self.support_sizes:
            raise ConfigurationError("sweep grid needs support sizes for variant B")
        if any(s < 0 for s in self.steps):
            raise ConfigurationError(f"sweep steps must be non-negative, got {self.steps}")
        if any(not lr > 0 for lr in self.lrs):
            raise ConfigurationError(f"sweep learning rates must be positive, got {self.lrs}")


@dataclass(frozen=True)
class SweepCell:
    variant: FinetuneVariant
    steps: int
    lr: float | None
    support_size: int | None
    report: EvalReport

    @property
    def label(self) -> str:
        if self.steps == 0:
            return "baseline (steps=0)"
        label = f"variant {self.variant.value.upper()}, steps={self.steps}, lr={self.lr:g}"
        return label + (f", s={self.support_size}" if self.support_size is not None else "")


@dataclass(frozen=True)
class SweepTable:
    """One accuracy table; ``values[row][column]`` is a mean accuracy or ``None`` when skipped."""

    title: str
    dataset: str
    row_label: str
    column_label: str
    rows: tuple[int, ...]
    columns: tuple[str, ...]
    values: tuple[tuple[float | None, ...], ...]

    def render(self) -> str:
        table = Table(title=self.title)
        table.add_column(self.row_label, justify="right")
        for column in self.columns:
            table.add_column(f"{self.column_label} {column}", justify="right")
        for row, cells in zip(self.rows, self.values):
            table.add_row(str(row), *("-" if v is None else f"{100 * v:.2f}" for v in cells))
        return render_rich(table)

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "dataset": self.dataset,
            "row_label": self.row_label,
            "column_label": self.column_label,
            "rows": list(self.rows),
            "columns": list(self.columns),
            "values": [list(v) for v in self.values],
        }


@dataclass
class SweepResult:
    """All evaluated cells plus the tables derived from them."""

    baseline: SweepCell
    cells: list[SweepCell] = field(default_factory=list)
    grid: SweepGrid = field(default_factory=SweepGrid)

    def ranked(self) -> list[SweepCell]:
        """Cells (baseline included) by overall mean accuracy, best first; ties keep grid order."""
        return sorted([self.baseline, *self.cells], key=lambda c: -c.report.overall_mean)

    def best(self) -> SweepCell:
        return self.ranked()[0]

    def _lookup(
        self, variant: FinetuneVariant, steps: int, lr: float, support_size: int | None
    ) -> SweepCell | None:
        if steps == 0:
            return self.baseline
        for cell in self.cells:
            key = (cell.variant, cell.steps, cell.lr, cell.support_size)
            if key == (variant, steps, lr, support_size):
                return cell
        return None

    def tables(self) -> list[SweepTable]:
        datasets = list(self.baseline.report.datasets)
        tables: list[SweepTable] = []
        steps = tuple(sorted(set(self.grid.steps) | {0}))

        def accuracy(cell: SweepCell | None, dataset: str) -> float | None:
            if cell is None or dataset not in cell.report.datasets:
                return None
            return cell.report.datasets[dataset].mean

        for dataset in datasets:
            if FinetuneVariant.A in self.grid.variants:
                values = tuple(
                    tuple(
                        accuracy(self._lookup(FinetuneVariant.A, s, lr, None), dataset)
                        for lr in self.grid.lrs
                    )
                    for s in steps
                )
                tables.append(
                    SweepTable(
                        title=f"{dataset}: variant A accuracy (%)",
                        dataset=dataset,
                        row_label="Steps",
                        column_label="lr",
                        rows=steps,
                        columns=tuple(f"{lr:g}" for lr in self.grid.lrs),
                        values=values,
                    )
                )
            if FinetuneVariant.B in self.grid.variants:
                for lr in self.grid.lrs:
                    values = tuple(
                        tuple(
                            accuracy(self._lookup(FinetuneVariant.B, s, lr, size), dataset)
                            for size in self.grid.support_sizes
                        )
                        for s in steps
                    )
                    tables.append(
                        SweepTable(
                            title=f"{dataset}: variant B accuracy (%), lr={lr:g}",
                            dataset=dataset,
                            row_label="Steps",
                            column_label="s",
                            rows=steps,
                            columns=tuple(str(size) for size in self.grid.support_sizes),
                            values=values,
                        )
                    )
        return tables

    def render(self) -> str:
        parts = [table.render() for table in self.tables()]
        best = self.best()
        mean = 100 * best.report.overall_mean
        parts.append(f"Best: {best.label} with mean accuracy {mean:.2f}%\n")
        return "\n".join(parts)

    def to_dict(self) -> dict[str, Any]:
        def cell_dict(cell: SweepCell) -> dict[str, Any]:
            return {
                "variant": cell.variant.value,
                "steps": cell.steps,
                "lr": cell.lr,
                "support_size": cell.support_size,
                "overall_mean": cell.report.overall_mean,
                "datasets": {name: d.mean for name, d in cell.report.datasets.items()},
                "finetune_forwards": cell.report.finetune_forwards,
            }

        best = self.best()
        return {
            "version": 1,
            "kind": "sweep_report",
            "baseline": cell_dict(self.baseline),
            "cells": [cell_dict(c) for c in self.cells],
            "best": cell_dict(best),
            "tables": [t.to_dict() for t in self.tables()],
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write sweep report {path}: {exc}") from exc
        return path


def sweep(
    model: ModelState,
    corpus: Corpus,
    stream: Sequence[Episode],
    grid: SweepGrid,
    base: FinetuneConfig | None = None,
    proto_cfg: ProtoConfig | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Evaluate every grid cell on ``stream``.

    :param base: Template for the non-swept settings (augmentation, seed).
    :raises ConfigurationError: If ``stream`` is empty.

    .. versionadded:: 0.1.0
    """
    if not stream:
        raise ConfigurationError("sweep needs a non-empty validation episode stream")
    base = base or FinetuneConfig()
    k_shot = len(stream[0].support) // stream[0].n_way
    snapshot = model.snapshot()

    def run(variant: FinetuneVariant, steps: int, lr: float, support_size: int) -> EvalReport:
        ft = replace(base, variant=variant, steps=steps, lr=lr, support_size=support_size)
        return evaluate(model, corpus, stream, ft, proto_cfg, jobs=jobs, snapshot=snapshot)

    baseline_report = run(FinetuneVariant.NONE, 0, base.lr, base.support_size)
    baseline = SweepCell(FinetuneVariant.NONE, 0, None, None, baseline_report)
    result = SweepResult(baseline=baseline, grid=grid)
    sizes = [size for size in grid.support_sizes if 1 <= size < k_shot]
    if FinetuneVariant.B in grid.variants and len(sizes) != len(grid.support_sizes):
        skipped = sorted(set(grid.support_sizes) - set(sizes))
        log.warning(
            "Skipping variant B support sizes %s: %d-shot episodes need 1 <= s < %d",
            skipped,
            k_shot,
            k_shot,
        )
    for variant in grid.variants:
        for steps in (s for s in grid.steps if s > 0):
            for lr in grid.lrs:
                if variant is FinetuneVariant.A:
                    report = run(variant, steps, lr, base.support_size)
                    result.cells.append(SweepCell(variant, steps, lr, None, report))
                    continue
                for size in sizes:
                    report = run(variant, steps, lr, size)
                    result.cells.append(SweepCell(variant, steps, lr, size, report))
    best = result.best()
    log.info(
        "Sweep finished: %d cells, best %s (%.2f%%)",
        len(result.cells) + 1,
        best.label,
        100 * best.report.overall_mean,
    )
    return result
