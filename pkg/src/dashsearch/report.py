"""Report emission: sweep CSV, per-architecture text files, and two
hand-rolled SVGs (an allocation strip and a budget/KL chart). Everything
is rendered from plain strings so identical inputs give byte-identical
files."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .model import HybridArch, OperatorKind
from .search import realized_budget

OP_COLORS = {
    OperatorKind.FULL: "#c44e52",
    OperatorKind.WINDOW: "#dd8452",
    OperatorKind.LINEAR: "#4c72b0",
}

SWEEP_HEADER = "lambda,seed,budget,avg_entropy,avg_top1,avg_margin,ambiguous,heldout_kl"


class EmptyReportError(ValueError):
    """Raised instead of writing a report from no records."""


@dataclass
class SweepRecord:
    lam: float
    seed: int
    budget: float
    avg_entropy: float
    avg_top1: float
    avg_margin: float
    ambiguous: int
    heldout_kl: float
    arch: HybridArch | None = None
    error: str | None = None

    def csv_row(self) -> str:
        return (
            f"{self.lam:.6g},{self.seed},{self.budget:.6g},{self.avg_entropy:.6g},"
            f"{self.avg_top1:.6g},{self.avg_margin:.6g},{self.ambiguous},"
            f"{self.heldout_kl:.6g}"
        )


def write_sweep_csv(records: list[SweepRecord], path) -> None:
    rows = sorted(records, key=lambda r: (r.lam, r.seed))
    with open(path, "w") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for rec in rows:
            fh.write(rec.csv_row() + "\n")


def write_arch_txt(arch: HybridArch, path) -> None:
    with open(path, "w") as fh:
        fh.write(arch.to_string() + "\n")


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">'
    )
    return "\n".join([head, *body, "</svg>"]) + "\n"


def allocation_strip_svg(
    rows: list[tuple[str, HybridArch]], window: int, seq_len: int
) -> str:
    """One row per architecture, one colored cell per layer.

    Row labels carry the realized budget so the strip and the budget
    table can never disagree (both call realized_budget).
    """
    if not rows:
        raise EmptyReportError("no architectures to draw")
    cell = 18
    label_w = 170
    pad = 6
    n_layers = max(len(arch) for _, arch in rows)
    width = label_w + n_layers * cell + 2 * pad
    height = len(rows) * (cell + 4) + 2 * pad + 16
    body = []
    for col in range(n_layers):
        x = label_w + col * cell + pad + cell // 2
        body.append(
            f'<text x="{x}" y="{pad + 10}" font-size="8" text-anchor="middle" '
            f'fill="#555">{col}</text>'
        )
    for i, (label, arch) in enumerate(rows):
        y = pad + 16 + i * (cell + 4)
        budget = realized_budget(arch, window, seq_len)
        body.append(
            f'<text x="{pad}" y="{y + cell - 5}" font-size="10" '
            f'fill="#222">{label} B={budget:.6g}</text>'
        )
        for col, op in enumerate(arch.ops):
            x = label_w + col * cell + pad
            body.append(
                f'<rect x="{x}" y="{y}" width="{cell - 2}" height="{cell - 2}" '
                f'fill="{OP_COLORS[op]}"><title>layer {col}: {op.name}</title></rect>'
            )
    return _svg(width, height, body)


def budget_kl_svg(records: list[SweepRecord]) -> str:
    """Median realized budget per lambda as bars, median held-out KL as a line."""
    if not records:
        raise EmptyReportError("no sweep records to draw")
    lams = sorted({r.lam for r in records})
    budgets = []
    kls = []
    for lam in lams:
        group = [r for r in records if r.lam == lam]
        budgets.append(float(np.median([r.budget for r in group])))
        kls.append(float(np.median([r.heldout_kl for r in group])))
    width, height = 420, 240
    plot_w, plot_h = width - 80, height - 60
    x0, y0 = 50, height - 35
    max_b = max(max(budgets), 1e-9)
    max_k = max(max(kls), 1e-9)
    bar_w = plot_w / max(len(lams), 1) * 0.6
    body = [
        f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="#333"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 - plot_h}" stroke="#333"/>',
        f'<text x="{x0 - 38}" y="{y0 - plot_h + 8}" font-size="9" fill="#555">budget</text>',
        f'<text x="{x0 + plot_w - 10}" y="{y0 - plot_h + 8}" font-size="9" fill="#b33">KL</text>',
    ]
    points = []
    for i, lam in enumerate(lams):
        cx = x0 + plot_w * (i + 0.5) / len(lams)
        bh = plot_h * budgets[i] / max_b
        body.append(
            f'<rect x="{cx - bar_w / 2:.2f}" y="{y0 - bh:.2f}" width="{bar_w:.2f}" '
            f'height="{bh:.2f}" fill="#4c72b0" fill-opacity="0.8">'
            f"<title>lambda={lam:.6g} budget={budgets[i]:.6g}</title></rect>"
        )
        body.append(
            f'<text x="{cx:.2f}" y="{y0 + 14}" font-size="9" text-anchor="middle" '
            f'fill="#333">{lam:.6g}</text>'
        )
        points.append((cx, y0 - plot_h * kls[i] / max_k))
    path = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    body.append(f'<polyline points="{path}" fill="none" stroke="#b33" stroke-width="1.5"/>')
    for x, y in points:
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="#b33"/>')
    body.append(
        f'<text x="{x0 + plot_w / 2:.2f}" y="{height - 8}" font-size="10" '
        f'text-anchor="middle" fill="#333">cost coefficient</text>'
    )
    return _svg(width, height, body)


def emit_report(
    records: list[SweepRecord],
    archs: list[tuple[str, HybridArch]],
    out_dir,
    window: int,
    seq_len: int,
) -> list[str]:
    """Write sweep.csv plus the two SVGs; returns the written paths."""
    if not records and not archs:
        raise EmptyReportError("nothing to report: no records and no architectures")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if records:
        csv_path = os.path.join(out_dir, "sweep.csv")
        write_sweep_csv(records, csv_path)
        written.append(csv_path)
        chart_path = os.path.join(out_dir, "budget_kl.svg")
        with open(chart_path, "w") as fh:
            fh.write(budget_kl_svg(records))
        written.append(chart_path)
    if archs:
        strip_path = os.path.join(out_dir, "allocation.svg")
        with open(strip_path, "w") as fh:
            fh.write(allocation_strip_svg(archs, window, seq_len))
        written.append(strip_path)
    return written
