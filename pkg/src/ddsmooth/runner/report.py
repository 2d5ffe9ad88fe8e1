"""Render results into a grid-shaped table (markdown, LaTeX or CSV)."""

from __future__ import annotations

import csv
import io
import json

from ..tasks import METRIC_DIRECTIONS
from .store import ExperimentRecord, attack_label, defense_label

METHOD_ORDER = ["none", "pgd", "mifgsm", "sia"]
LEVEL_ORDER = ["none", "low", "high", "range"]
DEFENSE_ORDER = ["none", "low", "high", "range"]
TASK_ORDER = ["classification", "segmentation", "depth", "retrieval"]
METRIC_ORDER = ["accuracy", "miou", "rmse", "map", "cls_cos_sim", "psnr"]
PERCENT_METRICS = {"accuracy", "miou", "map"}
SHORT = {
    "accuracy": "Acc", "miou": "mIoU", "rmse": "RMSE", "map": "mAP",
    "cls_cos_sim": "cos", "psnr": "PSNR",
    "classification": "Cls", "segmentation": "Seg", "depth": "Depth", "retrieval": "Ret",
}
LEVEL_TEXT = {"none": "None", "low": "low", "high": "high", "range": "[low, high]"}


def _rank(order: list, v) -> tuple:
    return (order.index(v), "") if v in order else (len(order), str(v))


def _attack_key(a: dict) -> tuple:
    if a.get("method", "none") == "none":
        return ((-1, ""), (-1, ""), 0.0)
    return (_rank(METHOD_ORDER, a["method"]), _rank(LEVEL_ORDER, a["noise_level"]), float(a["p_diffusion"]))


def _fmt(metric: str, v: float | None) -> str:
    if v is None:
        return "-"
    if metric in PERCENT_METRICS:
        return f"{100 * v:.2f}"
    if metric == "rmse":
        return f"{v:.3f}"
    if metric == "psnr":
        return f"{v:.2f}"
    return f"{v:.3f}"


def _arrow(metric: str, latex: bool) -> str:
    up = METRIC_DIRECTIONS.get(metric, "higher_better") == "higher_better"
    if latex:
        return r"$\uparrow$" if up else r"$\downarrow$"
    return "↑" if up else "↓"


def _matrix(records: list[ExperimentRecord]):
    attacks, cols, cells = {}, set(), {}
    for r in records:
        al = attack_label(r.attack)
        attacks.setdefault(al, r.attack)
        dl = defense_label(r.defense)
        if r.metric == "psnr":
            col = ("psnr", r.task, r.metric)
        else:
            col = (dl, r.task, r.metric)
        cols.add(col)
        cells[(al, col)] = r.value
    rows = sorted(attacks, key=lambda k: (_attack_key(attacks[k]), k))

    def col_key(c):
        block = ("~psnr",) if c[0] == "psnr" else _rank(DEFENSE_ORDER, c[0])
        return (c[0] == "psnr", block, _rank(TASK_ORDER, c[1]), _rank(METRIC_ORDER, c[2]))

    return rows, attacks, sorted(cols, key=col_key), cells


def _row_head(a: dict) -> list[str]:
    if a.get("method", "none") == "none":
        return ["None", "-", "-"]
    return [a["method"], LEVEL_TEXT.get(a["noise_level"], a["noise_level"]), f"{float(a['p_diffusion']):.1f}"]


def _col_title(c, latex: bool) -> str:
    block = "PSNR" if c[0] == "psnr" else f"def={c[0]}"
    text = f"{block} {SHORT.get(c[1], c[1])} {SHORT.get(c[2], c[2])}"
    if latex:
        text = _tex_escape(text)
    return text + _arrow(c[2], latex)


def _markdown(records) -> str:
    rows, attacks, cols, cells = _matrix(records)
    head = ["Optim", "Diff. t", "Diff. prob"] + [_col_title(c, False) for c in cols]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
    for al in rows:
        vals = [_fmt(c[2], cells.get((al, c))) for c in cols]
        lines.append("| " + " | ".join(_row_head(attacks[al]) + vals) + " |")
    return "\n".join(lines) + "\n"


def _tex_escape(s: str) -> str:
    return s.replace("\\", r"\textbackslash{}").replace("_", r"\_").replace("%", r"\%").replace("&", r"\&")


def _latex(records) -> str:
    rows, attacks, cols, cells = _matrix(records)
    out = [r"\begin{tabular}{lll|" + "r" * len(cols) + "}", r"\hline"]
    head = ["Optim", "Diff. t", "Diff. prob"] + [_col_title(c, True) for c in cols]
    out.append(" & ".join(head) + r" \\")
    out.append(r"\hline")
    prev = None
    for al in rows:
        a = attacks[al]
        method = a.get("method", "none")
        if prev is not None and method != prev:
            out.append(r"\hline")
        prev = method
        vals = [_fmt(c[2], cells.get((al, c))) for c in cols]
        out.append(" & ".join(_tex_escape(x) for x in _row_head(a) + vals) + r" \\")
    out += [r"\hline", r"\end{tabular}"]
    return "\n".join(out) + "\n"


CSV_FIELDS = ["fingerprint", "attack", "defense", "task", "metric", "value", "n_images", "wall_time_s", "timestamp"]


def _csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([
            r.fingerprint, attack_label(r.attack), defense_label(r.defense), r.task, r.metric,
            repr(float(r.value)), r.n_images, r.wall_time_s, r.timestamp,
        ])
    return buf.getvalue()


def emit_report(records: list[ExperimentRecord], fmt: str = "markdown") -> str:
    if not records:
        raise ValueError("no records to report")
    if fmt == "markdown":
        return _markdown(records)
    if fmt == "latex":
        return _latex(records)
    if fmt == "csv":
        return _csv(records)
    raise ValueError(f"unknown report format {fmt!r}")


def latex_document(table: str) -> str:
    return "\\documentclass{article}\n\\usepackage[landscape]{geometry}\n\\begin{document}\n\\tiny\n" + table + "\\end{document}\n"


def write_reports(records, out_dir) -> list:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt, name in (("markdown", "report.md"), ("latex", "report.tex"), ("csv", "report.csv")):
        p = out / name
        p.write_text(emit_report(records, fmt), encoding="utf-8")
        paths.append(p)
    return paths
