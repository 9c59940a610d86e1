"""SVG overlay of ground-truth and predicted scanpaths on the trial raster."""
from __future__ import annotations

import base64
import io
from pathlib import Path

from PIL import Image

from .domain import IMAGE_H, IMAGE_W, Scanpath, Trial

GT_HUE = 210    # blues
PRED_HUE = 15   # reds/oranges
HUE_STEP = 9


def _png_data_uri(trial: Trial) -> str:
    buf = io.BytesIO()
    Image.fromarray(trial.image.pixels).save(buf, format="PNG", optimize=False)
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _path_elements(sp: Scanpath, hue0: int, kind: str, radius: float) -> list[str]:
    out = []
    pts = []
    for j, pack in enumerate(sp.packs):
        hue = (hue0 + HUE_STEP * j) % 360
        for f in pack:
            pts.append((f.x * IMAGE_W, f.y * IMAGE_H, hue))
    for (x0, y0, _), (x1, y1, hue) in zip(pts, pts[1:]):
        out.append(f'<line class="{kind}-saccade" x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                   f'stroke="hsl({hue},80%,55%)" stroke-width="1.5" marker-end="url(#arrow-{kind})"/>')
    for n, (x, y, hue) in enumerate(pts, start=1):
        out.append(f'<g class="{kind}-fixation"><circle cx="{x:.2f}" cy="{y:.2f}" r="{radius}" '
                   f'fill="hsl({hue},80%,50%)" fill-opacity="0.8" stroke="white" stroke-width="1"/>'
                   f'<text x="{x:.2f}" y="{y + 3.5:.2f}" font-size="10" text-anchor="middle" '
                   f'fill="white" font-family="sans-serif">{n}</text></g>')
    return out


def render_svg(trial: Trial, pred: Scanpath | None, gt: Scanpath | None = None) -> str:
    gt = trial.gt_scanpath if gt is None else gt
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{IMAGE_W}" height="{IMAGE_H}" '
        f'viewBox="0 0 {IMAGE_W} {IMAGE_H}">',
        "<defs>",
        f'<marker id="arrow-gt" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="6" markerHeight="6" '
        f'orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="hsl({GT_HUE},80%,45%)"/></marker>',
        f'<marker id="arrow-pred" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="6" markerHeight="6" '
        f'orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="hsl({PRED_HUE},80%,45%)"/></marker>',
        "</defs>",
        f'<image href="{_png_data_uri(trial)}" x="0" y="0" width="{IMAGE_W}" height="{IMAGE_H}"/>',
    ]
    if trial.target_box is not None:
        b = trial.target_box
        parts.append(f'<rect class="target" x="{b.x0 * IMAGE_W:.2f}" y="{b.y0 * IMAGE_H:.2f}" '
                     f'width="{(b.x1 - b.x0) * IMAGE_W:.2f}" height="{(b.y1 - b.y0) * IMAGE_H:.2f}" '
                     f'fill="none" stroke="deepskyblue" stroke-width="2"/>')
    parts.append(f'<text x="6" y="16" font-size="13" fill="white" font-family="sans-serif">'
                 f'{" ".join(trial.expression.raw_words)}</text>')
    parts += _path_elements(gt, GT_HUE, "gt", 7)
    if pred is not None:
        parts += _path_elements(pred, PRED_HUE, "pred", 7)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render(trial: Trial, pred: Scanpath | None, path, gt: Scanpath | None = None) -> None:
    Path(path).write_text(render_svg(trial, pred, gt))
