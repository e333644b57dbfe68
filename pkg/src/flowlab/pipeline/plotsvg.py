"""Dependency-free SVG line charts for metrics CSVs.

The renderer is a pure function of the CSV text: fixed canvas, fixed decimal
formatting, no timestamps, so identical input yields identical bytes. Any
cell that does not fit the declared header is an error naming the line.
"""

from pathlib import Path

from .config import PipelineError

WIDTH = 760
HEIGHT = 440
MARGIN_LEFT = 62
MARGIN_RIGHT = 18
MARGIN_TOP = 46
MARGIN_BOTTOM = 46

PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
)

# columns that label rows rather than measure anything
_LABEL_COLUMNS = ("stage",)


def parse_csv(text: str, source: str = "<csv>") -> tuple[list[str], list[list[str]]]:
    """Header + rows; every row must have exactly as many cells as the header."""
    lines = [line for line in text.splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise PipelineError(f"{source}:1: empty CSV")
    header = [cell.strip() for cell in lines[0].split(",")]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise PipelineError(f"{source}:1: header needs unique non-empty column names")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [cell.strip() for cell in line.split(",")]
        if len(cells) != len(header):
            raise PipelineError(
                f"{source}:{lineno}: expected {len(header)} fields, found {len(cells)}"
            )
        rows.append(cells)
    return header, rows


def _collect_series(header, rows, source):
    """X values plus one (name, points) series per metric column.

    X comes from the iter column when present, else the row index. Empty
    cells are allowed and simply skipped; a column with no numbers at all
    is returned with an empty point list so the chart can note it.
    """
    if "iter" in header:
        x_name = "iter"
        x_col = header.index("iter")
    else:
        x_name = "row"
        x_col = None
    xs = []
    for i, row in enumerate(rows):
        if x_col is None:
            xs.append(float(i))
            continue
        cell = row[x_col]
        try:
            xs.append(float(cell))
        except ValueError:
            raise PipelineError(
                f"{source}:{i + 2}: bad number '{cell}' in column 'iter'"
            ) from None
    series = []
    for col, name in enumerate(header):
        if name == x_name or name in _LABEL_COLUMNS:
            continue
        points = []
        for i, row in enumerate(rows):
            cell = row[col]
            if cell == "":
                continue
            try:
                value = float(cell)
            except ValueError:
                raise PipelineError(
                    f"{source}:{i + 2}: bad number '{cell}' in column '{name}'"
                ) from None
            points.append((xs[i], value))
        series.append((name, points))
    return x_name, series


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if count < 2:
        return [lo]
    step = (hi - lo) / (count - 1)
    return [lo + step * i for i in range(count)]


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_plot(text: str, source: str = "<csv>", title: str = "") -> str:
    """SVG chart: one polyline per metric column against the iteration axis."""
    header, rows = parse_csv(text, source)
    x_name, series = _collect_series(header, rows, source)

    drawn = [(name, pts) for name, pts in series if pts]
    skipped = [name for name, pts in series if not pts]

    pieces = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
    ]
    if title:
        pieces.append(
            f'<text x="{WIDTH / 2:.2f}" y="16" text-anchor="middle" '
            f'font-size="13">{_esc(title)}</text>'
        )

    x0, x1 = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    y0, y1 = HEIGHT - MARGIN_BOTTOM, MARGIN_TOP
    pieces.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000000"/>'
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000000"/>'
    )
    pieces.append(
        f'<text x="{(x0 + x1) / 2:.2f}" y="{HEIGHT - 10}" '
        f'text-anchor="middle">{_esc(x_name)}</text>'
    )
    pieces.append(
        f'<text x="14" y="{(y0 + y1) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(y0 + y1) / 2:.2f})">value</text>'
    )

    if drawn:
        all_x = [p[0] for _, pts in drawn for p in pts]
        all_y = [p[1] for _, pts in drawn for p in pts]
        x_lo, x_hi = min(all_x), max(all_x)
        y_lo, y_hi = min(all_y), max(all_y)
        if x_hi == x_lo:
            x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

        def sx(x: float) -> float:
            return x0 + (x - x_lo) / (x_hi - x_lo) * (x1 - x0)

        def sy(y: float) -> float:
            return y0 - (y - y_lo) / (y_hi - y_lo) * (y0 - y1)

        for tick in _ticks(x_lo, x_hi):
            px = sx(tick)
            pieces.append(
                f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 + 4}" stroke="#000000"/>'
                f'<text x="{px:.2f}" y="{y0 + 16}" text-anchor="middle">{tick:.6g}</text>'
            )
        for tick in _ticks(y_lo, y_hi):
            py = sy(tick)
            pieces.append(
                f'<line x1="{x0 - 4}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" stroke="#000000"/>'
                f'<text x="{x0 - 7}" y="{py + 3:.2f}" text-anchor="end">{tick:.6g}</text>'
            )
        for idx, (name, pts) in enumerate(drawn):
            color = PALETTE[idx % len(PALETTE)]
            coords = " ".join(f"{sx(px):.2f},{sy(py):.2f}" for px, py in pts)
            pieces.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{coords}"/>'
            )
            if len(pts) == 1:
                px, py = pts[0]
                pieces.append(
                    f'<circle cx="{sx(px):.2f}" cy="{sy(py):.2f}" r="2.5" fill="{color}"/>'
                )
            lx = x0 + 6 + 130 * (idx % 5)
            ly = MARGIN_TOP - 8 - 14 * (idx // 5)
            pieces.append(
                f'<rect x="{lx:.2f}" y="{ly - 8:.2f}" width="10" height="10" fill="{color}"/>'
                f'<text x="{lx + 14:.2f}" y="{ly + 1:.2f}">{_esc(name)}</text>'
            )
    else:
        pieces.append(
            f'<text class="note" x="{(x0 + x1) / 2:.2f}" y="{(y0 + y1) / 2:.2f}" '
            f'text-anchor="middle">note: no plottable metric columns</text>'
        )

    for j, name in enumerate(skipped):
        pieces.append(
            f'<text class="note" x="{x0}" y="{y0 + 30 + 12 * j}">'
            f"note: column '{_esc(name)}' has no data, skipped</text>"
        )

    pieces.append("</svg>")
    return "\n".join(pieces) + "\n"


def plot_csv_file(csv_path, svg_path=None) -> Path:
    csv_path = Path(csv_path)
    try:
        text = csv_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PipelineError(f"cannot read CSV {csv_path}: {exc}") from None
    svg = render_plot(text, source=str(csv_path), title=csv_path.stem)
    target = Path(svg_path) if svg_path is not None else csv_path.with_suffix(".svg")
    target.write_text(svg, encoding="utf-8")
    return target
