"""Small SVG writer for the line charts and boxplots of a run. Output depends only on the data."""

from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
N_TICKS = 5


def _bounds(values: np.ndarray) -> tuple[float, float]:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return 0.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    if hi == lo:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    return lo, hi


@dataclass
class SvgPlot:
    title: str
    x_label: str = ""
    y_label: str = ""
    width: int = 720
    height: int = 440
    margin: int = 64
    lines: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    boxes: list[tuple[str, dict[str, float]]] = field(default_factory=list)

    def line(self, name: str, x, y) -> "SvgPlot":
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if x.shape != y.shape:
            raise ValueError(f"Series '{name}': x and y differ in shape, {x.shape} vs {y.shape}")
        self.lines.append((name, x, y))
        return self

    def boxplot(self, name: str, stats: dict[str, float]) -> "SvgPlot":
        """Add a box from `error_distribution`-style statistics (whisker_low, q1, median, q3, whisker_high)."""
        self.boxes.append((name, stats))
        return self

    def _x_range(self) -> tuple[float, float]:
        if self.boxes:
            return -0.5, len(self.boxes) - 0.5
        return _bounds(np.concatenate([x for _, x, _ in self.lines] or [np.array([])]))

    def _y_range(self) -> tuple[float, float]:
        values = [y for _, _, y in self.lines]
        values += [np.array([stats["whisker_low"], stats["whisker_high"]]) for _, stats in self.boxes]
        return _bounds(np.concatenate(values or [np.array([])]))

    def render(self) -> str:
        left, top = self.margin, self.margin // 2
        right, bottom = self.width - self.margin // 2, self.height - self.margin
        x_lo, x_hi = self._x_range()
        y_lo, y_hi = self._y_range()

        def px(x):
            return left + (x - x_lo) / (x_hi - x_lo) * (right - left)

        def py(y):
            return bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top)

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" height="{self.height}"'
            f' viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="12">',
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{self.width / 2:.1f}" y="{top - 10}" text-anchor="middle" font-size="14">'
            f"{escape(self.title)}</text>",
            f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        ]

        for tick in np.linspace(y_lo, y_hi, N_TICKS):
            parts.append(
                f'<text x="{left - 6}" y="{py(tick) + 4:.2f}" text-anchor="end">{tick:.4g}</text>'
                f'<line x1="{left}" y1="{py(tick):.2f}" x2="{right}" y2="{py(tick):.2f}" stroke="#e0e0e0"/>'
            )
        if not self.boxes:
            for tick in np.linspace(x_lo, x_hi, N_TICKS):
                parts.append(f'<text x="{px(tick):.2f}" y="{bottom + 16}" text-anchor="middle">{tick:.4g}</text>')

        parts.append(
            f'<text x="{(left + right) / 2:.1f}" y="{self.height - 16}" text-anchor="middle">'
            f"{escape(self.x_label)}</text>"
        )
        parts.append(
            f'<text x="16" y="{(top + bottom) / 2:.1f}" text-anchor="middle"'
            f' transform="rotate(-90 16 {(top + bottom) / 2:.1f})">{escape(self.y_label)}</text>'
        )

        for idx, (name, x, y) in enumerate(self.lines):
            color = PALETTE[idx % len(PALETTE)]
            keep = np.isfinite(x) & np.isfinite(y)
            points = " ".join(f"{px(xv):.2f},{py(yv):.2f}" for xv, yv in zip(x[keep], y[keep]))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
            legend_y = top + 14 + 16 * idx
            parts.append(
                f'<line x1="{right - 150}" y1="{legend_y - 4}" x2="{right - 130}" y2="{legend_y - 4}"'
                f' stroke="{color}" stroke-width="2"/>'
                f'<text x="{right - 124}" y="{legend_y}">{escape(name)}</text>'
            )

        box_width = (right - left) / max(len(self.boxes), 1) * 0.4
        for idx, (name, stats) in enumerate(self.boxes):
            color = PALETTE[idx % len(PALETTE)]
            center = px(idx)
            x0, x1 = center - box_width / 2, center + box_width / 2
            parts.append(
                f'<line x1="{center:.2f}" y1="{py(stats["whisker_low"]):.2f}" x2="{center:.2f}"'
                f' y2="{py(stats["whisker_high"]):.2f}" stroke="{color}"/>'
                f'<rect x="{x0:.2f}" y="{py(stats["q3"]):.2f}" width="{box_width:.2f}"'
                f' height="{py(stats["q1"]) - py(stats["q3"]):.2f}" fill="white" stroke="{color}"/>'
                f'<line x1="{x0:.2f}" y1="{py(stats["median"]):.2f}" x2="{x1:.2f}" y2="{py(stats["median"]):.2f}"'
                f' stroke="{color}" stroke-width="2"/>'
                f'<text x="{center:.2f}" y="{bottom + 16}" text-anchor="middle">{escape(name)}</text>'
            )

        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def save(self, pfout: PathLike) -> Path:
        pfout = Path(pfout)
        pfout.parent.mkdir(parents=True, exist_ok=True)
        pfout.write_text(self.render(), encoding="utf-8")
        return pfout
