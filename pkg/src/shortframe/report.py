"""CSV tables and self-contained SVG line charts for a sweep report.

Every plotted point is an SVG element carrying ``data-x``/``data-y``/``data-lo``/
``data-hi`` attributes holding the exact CSV values, so charts can be audited
against the tables.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from .metrics import AggRow, agg_from_csv, agg_to_csv, records_from_csv, records_to_csv

log = logging.getLogger(__name__)

COLORS = {"joint": "#1f77b4", "mag_only": "#d62728", "phase_only": "#2ca02c", "noisy": "#7f7f7f"}
LABELS = {"joint": "joint (est. magnitude + est. phase)", "mag_only": "est. magnitude + noisy phase",
          "phase_only": "noisy magnitude + est. phase", "noisy": "noisy input"}
METRIC_LABELS = {"si_sdr_improvement": "SI-SDR improvement / dB (quality proxy, not POLQA)",
                 "estoi": "ESTOI", "si_sdr": "SI-SDR / dB"}


@dataclass
class Series:
    name: str
    color: str
    points: list  # (x, mean, lo, hi); None entries render as gaps
    dash: str = ""


@dataclass
class RenderResult:
    files: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def status(self) -> int:
        return 1 if self.warnings else 0


def _fmt(v: float) -> str:
    return repr(float(v))


def svg_chart(panels: list[dict], title: str, footer: str = "", width_per=420, height=320) -> str:
    """Render one or more side-by-side panels of line series with CI bands."""
    W = width_per * len(panels)
    H = height + 90
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for pi, panel in enumerate(panels):
        x0, y0 = pi * width_per + 60, 30
        pw, ph = width_per - 80, height - 60
        xs = [p[0] for s in panel["series"] for p in s.points if p is not None]
        ys = [v for s in panel["series"] for p in s.points if p is not None for v in p[1:]]
        if not xs:
            continue
        logx = panel.get("logx", False)
        tx = (lambda v: math.log2(v)) if logx else (lambda v: v)
        xmin, xmax = tx(min(xs)), tx(max(xs))
        if xmax == xmin:
            xmin, xmax = xmin - 1, xmax + 1
        ymin, ymax = min(ys), max(ys)
        pad = 0.08 * (ymax - ymin) if ymax > ymin else 1.0
        ymin, ymax = ymin - pad, ymax + pad

        def px(v):
            return x0 + (tx(v) - xmin) / (xmax - xmin) * pw

        def py(v):
            return y0 + ph - (v - ymin) / (ymax - ymin) * ph

        parts.append(f'<g class="panel" data-metric="{escape(panel["metric"])}">')
        parts.append(f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
        for xv in sorted(set(xs)):
            parts.append(f'<line x1="{px(xv):.2f}" y1="{y0 + ph}" x2="{px(xv):.2f}" y2="{y0 + ph + 4}" stroke="#444"/>'
                         f'<text x="{px(xv):.2f}" y="{y0 + ph + 16}" text-anchor="middle">{xv:g}</text>')
        for k in range(5):
            yv = ymin + k * (ymax - ymin) / 4
            parts.append(f'<text x="{x0 - 5}" y="{py(yv) + 4:.2f}" text-anchor="end">{yv:.2f}</text>')
        parts.append(f'<text x="{x0 + pw / 2}" y="{y0 + ph + 32}" text-anchor="middle">{escape(panel["xlabel"])}</text>')
        parts.append(f'<text transform="translate({x0 - 45},{y0 + ph / 2}) rotate(-90)" '
                     f'text-anchor="middle">{escape(METRIC_LABELS.get(panel["metric"], panel["metric"]))}</text>')
        for s in panel["series"]:
            # contiguous runs only: a None point breaks the line and the band
            runs, cur = [], []
            for p in s.points:
                if p is None:
                    if cur:
                        runs.append(cur)
                    cur = []
                else:
                    cur.append(p)
            if cur:
                runs.append(cur)
            parts.append(f'<g class="series" data-name="{escape(s.name)}">')
            for run in runs:
                band = [(px(x), py(hi)) for x, _, _, hi in run] + [(px(x), py(lo)) for x, _, lo, _ in reversed(run)]
                parts.append('<polygon class="ci" fill="{}" fill-opacity="0.18" stroke="none" points="{}"/>'.format(
                    s.color, " ".join(f"{a:.2f},{b:.2f}" for a, b in band)))
                line = " ".join(f"{px(x):.2f},{py(m):.2f}" for x, m, _, _ in run)
                dash = f' stroke-dasharray="{s.dash}"' if s.dash else ""
                parts.append(f'<polyline fill="none" stroke="{s.color}" stroke-width="1.8"{dash} points="{line}"/>')
                for x, m, lo, hi in run:
                    parts.append(f'<circle class="pt" cx="{px(x):.2f}" cy="{py(m):.2f}" r="2.5" fill="{s.color}" '
                                 f'data-x="{_fmt(x)}" data-y="{_fmt(m)}" data-lo="{_fmt(lo)}" data-hi="{_fmt(hi)}"/>')
            parts.append("</g>")
        parts.append("</g>")
    # legend
    seen = []
    for panel in panels:
        for s in panel["series"]:
            if s.name not in [n for n, _, _ in seen]:
                seen.append((s.name, s.color, s.dash))
    for i, (name, color, dash) in enumerate(seen):
        lx, ly = 20 + (i % 3) * (W / 3), height + 10 + (i // 3) * 15
        d = f' stroke-dasharray="{dash}"' if dash else ""
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"{d}/>'
                     f'<text x="{lx + 25}" y="{ly + 4}">{escape(name)}</text>')
    if footer:
        parts.append(f'<text x="10" y="{H - 8}" font-size="10" fill="#a00">{escape(footer)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _lookup(rows: list[AggRow]):
    return {(r.frame_ms, r.snr_db, r.kind, r.metric): r for r in rows}


def framelen_chart(rows: list[AggRow], frame_ms: list[float], failed: list[str]) -> str:
    idx = _lookup(rows)
    panels = []
    for metric in ("si_sdr_improvement", "estoi"):
        series = []
        for kind in ("joint", "mag_only", "phase_only", "noisy"):
            pts = []
            for ms in frame_ms:
                r = idx.get((ms, "all", kind, metric))
                pts.append(None if r is None else (ms, r.mean, r.ci_low, r.ci_high))
            if any(p is not None for p in pts):
                series.append(Series(LABELS[kind], COLORS[kind], pts))
        panels.append({"metric": metric, "xlabel": "frame length / ms (log scale)", "logx": True,
                       "series": series})
    footer = f"missing cells: {', '.join(failed)}" if failed else ""
    return svg_chart(panels, "Metrics vs. STFT frame length (mean, 95% bootstrap CI)", footer)


def snr_chart(rows: list[AggRow], frame_sel: list[float], failed: list[str]) -> str:
    idx = _lookup(rows)
    snrs = sorted({r.snr_db for r in rows if r.snr_db != "all"})
    dashes = ["", "6,3", "2,2", "8,2,2,2"]
    series = []
    for i, ms in enumerate(frame_sel):
        for kind in ("joint", "mag_only", "phase_only"):
            pts = []
            for snr in snrs:
                r = idx.get((ms, snr, kind, "si_sdr_improvement"))
                pts.append(None if r is None else (snr, r.mean, r.ci_low, r.ci_high))
            if any(p is not None for p in pts):
                series.append(Series(f"{LABELS[kind]}, {ms:g} ms", COLORS[kind], pts, dashes[i % len(dashes)]))
    panel = {"metric": "si_sdr_improvement", "xlabel": "input SNR / dB", "series": series}
    footer = f"missing cells: {', '.join(failed)}" if failed else ""
    return svg_chart([panel], "SI-SDR improvement vs. input SNR", footer, width_per=560)


def render_report(report, records, out_dir) -> RenderResult:
    """Write records/aggregate CSVs, report.json and the two SVG charts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = RenderResult()
    by_fl = list(report.by_framelen) if report else []
    by_snr = list(report.by_snr) if report else []
    cells = report.cells if report else {}
    failed = [k for k, c in cells.items() if c.get("status") != "ok"]
    for name, text in (("records.csv", records_to_csv(records or [])),
                       ("agg_by_framelen.csv", agg_to_csv(by_fl)),
                       ("agg_by_snr.csv", agg_to_csv(by_snr))):
        (out / name).write_text(text)
        res.files.append(out / name)
    if report is not None:
        (out / "report.json").write_text(report.to_json())
        res.files.append(out / "report.json")
    for stale in ("fig_framelen.svg", "fig_snr.svg"):
        (out / stale).unlink(missing_ok=True)
    if failed:
        res.warnings.append(f"cells without results: {', '.join(failed)}")
    if not by_fl:
        res.warnings.append("report is empty; no charts written")
        for w in res.warnings:
            log.warning(w)
        return res
    frame_ms = sorted({r.frame_ms for r in by_fl} | {float(k[:-2]) for k in cells})
    (out / "fig_framelen.svg").write_text(framelen_chart(by_fl, frame_ms, failed))
    res.files.append(out / "fig_framelen.svg")
    sel = report.provenance.get("snr_fig_frame_ms") or frame_ms
    sel = [ms for ms in sel if any(r.frame_ms == ms for r in by_snr)] or frame_ms[:1]
    (out / "fig_snr.svg").write_text(snr_chart(by_snr, sel, failed))
    res.files.append(out / "fig_snr.svg")
    for w in res.warnings:
        log.warning(w)
    return res


def load_report(report_dir):
    """Re-read a rendered report directory into ``(SweepReport, records)``."""
    from .sweep import SweepReport

    d = Path(report_dir)
    meta = json.loads((d / "report.json").read_text())
    records = records_from_csv((d / "records.csv").read_text())
    rep = SweepReport(agg_from_csv((d / "agg_by_framelen.csv").read_text()),
                      agg_from_csv((d / "agg_by_snr.csv").read_text()),
                      meta["cells"], meta["provenance"])
    return rep, records
