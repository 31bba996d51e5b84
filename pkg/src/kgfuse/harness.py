"""Metrics, sensitivity sweeps and report emission.

``entity_accuracy`` is the cloze entity-prediction accuracy and stands in as a
proxy for question-answering accuracy; it is labelled as such in every report.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import xml.sax.saxutils as xml_escape
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .kgdata import (DELETE_EDGES, PERTURBATION_MODES, ConfigError, KnowledgeGraph, LinkedSentence,
                     heldout_mask)
from .training import KGModel, TrainConfig, TrainHistory, evaluate, train

log = logging.getLogger(__name__)

CSV_COLUMNS = ("variable", "value", "seed", "accuracy", "f1", "bleu", "l_task_final", "l_align_final",
               "diverged", "unresolved_mentions")
QA_PROXY_NOTE = "entity_accuracy is cloze entity-prediction accuracy, used as a QA-accuracy proxy"


# ---------------------------------------------------------------- metrics

def metric_accuracy(predictions: Sequence, golds: Sequence) -> float:
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not predictions:
        raise ValueError("accuracy of an empty prediction list")
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def confusion_counts(predicted: Sequence[Sequence], gold: Sequence[Sequence]) -> tuple[int, int, int]:
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold label lists differ in length")
    tp = fp = fn = 0
    for p, g in zip(predicted, gold):
        pc, gc = Counter(p), Counter(g)
        hit = sum((pc & gc).values())
        tp += hit
        fp += sum(pc.values()) - hit
        fn += sum(gc.values()) - hit
    return tp, fp, fn


def metric_f1(predicted: Sequence[Sequence], gold: Sequence[Sequence]) -> tuple[float, float, float]:
    """Micro-averaged (precision, recall, f1) over label multisets; 0 where undefined."""
    tp, fp, fn = confusion_counts(predicted, gold)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def metric_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus BLEU-4 with one reference per candidate.

    Clipped n-gram matches and candidate n-gram totals are summed over the
    corpus for n = 1..4.  The unigram precision is used as is (zero matches
    give a score of 0).  For n >= 2 with zero matches the precision becomes
    1 / (total_n + 1).  The score is the geometric mean of the four
    precisions times exp(min(0, 1 - ref_len / cand_len)); an empty
    candidate corpus scores 0.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        raise ValueError("BLEU of an empty candidate list")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cn, rn = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, rn[g]) for g, c in cn.items())
            totals[n - 1] += sum(cn.values())
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        if matches[n] > 0:
            log_p += math.log(matches[n] / totals[n])
        else:
            log_p += math.log(1.0 / (totals[n] + 1))
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p / max_n)


@dataclass
class MetricsReport:
    entity_accuracy: float
    precision: float
    recall: float
    f1: float
    bleu: float
    tp: int
    fp: int
    fn: int
    n_examples: int
    unresolved_mentions: int
    per_class: dict = field(default_factory=dict)
    note: str = QA_PROXY_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    def same_outputs(self, other: "MetricsReport") -> bool:
        """Equal in every model-output field; the unresolved-mention counter is
        bookkeeping about the graph, not about predictions."""
        a, b = self.to_dict(), other.to_dict()
        a.pop("unresolved_mentions"), b.pop("unresolved_mentions")
        return a == b


def build_report(model: KGModel, graph: KnowledgeGraph, sentences: Sequence[LinkedSentence],
                 config: TrainConfig | None = None) -> MetricsReport:
    out = evaluate(model, graph, sentences, config)
    names = model.entities
    pred_sets = [[names[p]] for p in out.predictions]
    gold_sets = [[names[g]] for g in out.golds]
    tp, fp, fn = confusion_counts(pred_sets, gold_sets)
    p, r, f = metric_f1(pred_sets, gold_sets)
    per_class: dict[str, list[int]] = {}
    for ps, gs in zip(pred_sets, gold_sets):
        for e in set(ps) | set(gs):
            c = per_class.setdefault(e, [0, 0, 0])
            if e in ps and e in gs:
                c[0] += 1
            elif e in ps:
                c[1] += 1
            else:
                c[2] += 1
    bleu = metric_bleu([list(g) for g in out.generations], out.references) if out.generations else 0.0
    return MetricsReport(
        entity_accuracy=metric_accuracy(out.predictions, out.golds),
        precision=p, recall=r, f1=f, bleu=bleu, tp=tp, fp=fp, fn=fn,
        n_examples=len(out.golds), unresolved_mentions=out.unresolved_mentions,
        per_class=dict(sorted(per_class.items())),
    )


# ---------------------------------------------------------------- sweeps

@dataclass
class Cell:
    variable: str
    value: float
    seed: int
    status: str                      # OK | DIVERGED | INVALID
    metrics: MetricsReport | None = None
    l_task_final: float = float("nan")
    l_align_final: float = float("nan")
    steps: int = 0
    message: str = ""

    @property
    def diverged(self) -> bool:
        return self.status == "DIVERGED"

    @property
    def accuracy(self) -> float:
        return self.metrics.entity_accuracy if self.metrics else float("nan")

    def csv_row(self) -> list:
        m = self.metrics
        nan = float("nan")
        return [
            self.variable, repr(float(self.value)), self.seed,
            repr(m.entity_accuracy if m else nan), repr(m.f1 if m else nan), repr(m.bleu if m else nan),
            repr(float(self.l_task_final)), repr(float(self.l_align_final)),
            str(self.diverged).lower(), m.unresolved_mentions if m else 0,
        ]


@dataclass
class SweepResult:
    variable: str
    grid: list
    seeds: list[int]
    cells: list[Cell] = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    base_config: dict = field(default_factory=dict)

    def mean_accuracy(self, variable: str | None = None) -> dict[float, float]:
        groups: dict[float, list[float]] = {}
        for c in self.cells:
            if variable is None or c.variable == variable:
                groups.setdefault(c.value, []).append(c.accuracy)
        return {v: float(np.mean(a)) for v, a in sorted(groups.items())}

    def variables(self) -> list[str]:
        return list(dict.fromkeys(c.variable for c in self.cells))

    def to_dict(self) -> dict:
        return {
            "variable": self.variable,
            "grid": self.grid,
            "seeds": self.seeds,
            "checks": self.checks,
            "base_config": self.base_config,
            "note": QA_PROXY_NOTE,
            "cells": [
                {**{k: v for k, v in asdict(c).items() if k != "metrics"},
                 "diverged": c.diverged,
                 "metrics": c.metrics.to_dict() if c.metrics else None}
                for c in self.cells
            ],
        }


@dataclass
class Dataset:
    graph: KnowledgeGraph
    train: list[LinkedSentence]
    heldout: list[LinkedSentence]

    @classmethod
    def split(cls, graph: KnowledgeGraph, corpus: Sequence[LinkedSentence]) -> "Dataset":
        mask = heldout_mask(len(corpus))
        return cls(graph, [s for s, h in zip(corpus, mask) if not h], [s for s, h in zip(corpus, mask) if h])


def run_cell(config: TrainConfig, data: Dataset, variable: str, value: float) -> tuple[Cell, KGModel | None, TrainHistory | None]:
    try:
        config.validate()
    except ConfigError as exc:
        return Cell(variable, value, config.seed, "INVALID", message=str(exc)), None, None
    model, history = train(config, data.graph, data.train)
    cell = Cell(variable, value, config.seed, "DIVERGED" if history.diverged else "OK",
                steps=len(history.steps), message=history.diverged_reason)
    cell.l_task_final, cell.l_align_final = history.final
    try:
        cell.metrics = build_report(model, data.graph, data.heldout)
    except nx.NumericalError as exc:
        cell.message = (cell.message + "; " if cell.message else "") + f"evaluation failed: {exc}"
    return cell, model, history


def _cell_job(args):
    config, data, variable, value = args
    cell, _, _ = run_cell(config, data, variable, value)
    return cell


def _run_cells(jobs: list, n_workers: int) -> list[Cell]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_cell_job, jobs))


def _with(config: TrainConfig, **changes) -> TrainConfig:
    # bypasses validation so invalid grid points surface as INVALID cells
    return replace(config, **changes)


DEFAULT_LR_GRID = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3)
DEFAULT_COVERAGE_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_PERTURB_RATES = (0.0, 0.25, 0.5, 1.0)
DEFAULT_SEEDS = (0, 1, 2)


def sweep_lr(base: TrainConfig, data: Dataset, grid: Sequence[float] = DEFAULT_LR_GRID,
             seeds: Sequence[int] = DEFAULT_SEEDS, jobs: int = 1) -> SweepResult:
    if not grid:
        raise ValueError("learning-rate grid is empty")
    work = [(_with(base, learning_rate=float(lr), seed=s), data, "learning_rate", float(lr)) for lr in grid for s in seeds]
    result = SweepResult("learning_rate", [float(x) for x in grid], list(seeds), base_config=base.to_dict())
    result.cells = _run_cells(work, jobs)
    return result


def _same_run(a: tuple[KGModel, TrainHistory], b: tuple[KGModel, TrainHistory]) -> bool:
    ha, hb = a[1], b[1]
    if len(ha.steps) != len(hb.steps):
        return False
    cols_equal = all(x[1] == y[1] and x[3] == y[3] for x, y in zip(ha.steps, hb.steps))
    sa, sb = a[0].state(), b[0].state()
    return cols_equal and all(np.array_equal(sa[k], sb[k]) for k in sa)


def sweep_coverage(base: TrainConfig, data: Dataset, levels: Sequence[float] = DEFAULT_COVERAGE_LEVELS,
                   seeds: Sequence[int] = DEFAULT_SEEDS, jobs: int = 1, check_baseline: bool = True) -> SweepResult:
    """One run per (p, seed).  When p = 0 is on the grid, that cell is also
    compared bitwise with a knowledge-free run of the same seed."""
    for p in levels:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"coverage level {p} outside [0, 1]")
    result = SweepResult("coverage", [float(x) for x in levels], list(seeds), base_config=base.to_dict())
    work = [(_with(base, coverage=float(p), seed=s), data, "coverage", float(p)) for p in levels for s in seeds]
    if check_baseline and 0.0 in levels and jobs <= 1:
        cells = []
        for cfg, d, var, val in work:
            cell, model, hist = run_cell(cfg, d, var, val)
            cells.append(cell)
            if val == 0.0 and model is not None:
                free = train(replace(cfg, use_knowledge=False), d.graph, d.train)
                same_eval = build_report(free[0], d.graph, d.heldout).same_outputs(cell.metrics)
                result.checks[f"p0_equals_knowledge_free_seed{cfg.seed}"] = bool(_same_run((model, hist), free) and same_eval)
        result.cells = cells
    else:
        result.cells = _run_cells(work, jobs)
    return result


def sweep_perturbation(base: TrainConfig, data: Dataset, modes: Sequence[str] = PERTURBATION_MODES,
                       rates: Sequence[float] = DEFAULT_PERTURB_RATES, seeds: Sequence[int] = DEFAULT_SEEDS,
                       model: KGModel | None = None) -> SweepResult:
    """Train on the clean graph (or reuse ``model``), then evaluate under each
    (mode, rate).  With ``base.perturb_train`` each cell is trained perturbed."""
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"perturbation rate {r} outside [0, 1]")
    modes = [m.upper() for m in modes]
    result = SweepResult("perturbation", [float(x) for x in rates], list(seeds), base_config=base.to_dict())
    for s in seeds:
        cfg = _with(base, seed=s)
        clean_model, hist = model, None
        if model is None and not base.perturb_train:
            clean_model, hist = train(cfg, data.graph, data.train)
        clean = build_report(clean_model, data.graph, data.heldout, cfg) if clean_model is not None else None
        for mode in modes:
            for rate in rates:
                ecfg = _with(cfg, perturb_mode=mode, perturb_rate=float(rate))
                if base.perturb_train:
                    cell, _, _ = run_cell(ecfg, data, f"perturb_{mode}", float(rate))
                    result.cells.append(cell)
                    continue
                cell = Cell(f"perturb_{mode}", float(rate), s, "DIVERGED" if hist and hist.diverged else "OK")
                if hist is not None:
                    cell.l_task_final, cell.l_align_final = hist.final
                    cell.steps = len(hist.steps)
                cell.metrics = build_report(clean_model, data.graph, data.heldout, ecfg)
                result.cells.append(cell)
                if rate == 0.0:
                    result.checks[f"rate0_equals_clean_{mode}_seed{s}"] = cell.metrics == clean
                if mode == DELETE_EDGES and rate == 1.0:
                    p0 = build_report(clean_model, data.graph, data.heldout, _with(cfg, coverage=0.0))
                    result.checks[f"delete1_equals_p0_seed{s}"] = cell.metrics == p0
    return result


# ---------------------------------------------------------------- reports

def result_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in result.cells:
        w.writerow(c.csv_row())
    return buf.getvalue()


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def result_svg(result: SweepResult, width: int = 640, height: int = 400) -> str:
    """Line chart: accuracy against grid value, one polyline per (variable, seed)
    plus one dashed mean polyline per variable."""
    left, right, top, bottom = 60, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    values = sorted({c.value for c in result.cells})
    positive = values and min(values) > 0 and max(values) / min(values) > 50
    tx = (lambda v: math.log10(v)) if positive else (lambda v: v)
    xs = [tx(v) for v in values] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5

    def px(v):
        return left + (tx(v) - x0) / (x1 - x0) * pw

    def py(a):
        a = 0.0 if not math.isfinite(a) else a
        return top + (1.0 - a) * ph

    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"]
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">'
        f'{xml_escape.escape(result.variable)} sweep: entity accuracy (QA proxy)</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{left - 6}" y="{py(a) + 4:.2f}" text-anchor="end" font-size="10">{a:.2f}</text>')
    for v in values:
        parts.append(f'<text x="{px(v):.2f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{_fmt(v)}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle" font-size="11">'
                 f'{xml_escape.escape(result.variable)}{" (log scale)" if positive else ""}</text>')
    k = 0
    for var in result.variables():
        cells = [c for c in result.cells if c.variable == var]
        for s in sorted({c.seed for c in cells}):
            pts = sorted((c.value, c.accuracy) for c in cells if c.seed == s)
            coords = " ".join(f"{px(v):.2f},{py(a):.2f}" for v, a in pts)
            parts.append(f'<polyline data-variable="{xml_escape.escape(var)}" data-seed="{s}" points="{coords}" '
                         f'fill="none" stroke="{palette[k % len(palette)]}" stroke-opacity="0.5" stroke-width="1.5"/>')
            k += 1
        means = result.mean_accuracy(var)
        coords = " ".join(f"{px(v):.2f},{py(a):.2f}" for v, a in means.items())
        parts.append(f'<polyline data-variable="{xml_escape.escape(var)}" data-seed="mean" points="{coords}" '
                     f'fill="none" stroke="black" stroke-dasharray="5,3" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(result: SweepResult, out_dir, figures: bool = True) -> dict[str, Path]:
    """Write result.csv, result.json, result.svg and (optionally) result.png."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "result.csv", "json": out / "result.json", "svg": out / "result.svg"}
        paths["csv"].write_text(result_csv(result), encoding="utf-8")
        paths["json"].write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True, default=float) + "\n",
                                 encoding="utf-8")
        paths["svg"].write_text(result_svg(result), encoding="utf-8")
        if figures and result.cells:
            from .plotting import plot_sweep

            paths["png"] = plot_sweep(result, out / "result.png")
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return paths


def read_result_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return rows
