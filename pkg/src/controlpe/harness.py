"""Merging-weight sweeps, two-adapter fusion grids and CSV output."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .adapter import LoraAdapter, MergeSpec, Mode, check_compatible, merge
from .model import TransformerWeights, generate_batch
from .tasks import LabeledExample, mean_response_length, refusal_stats, task_accuracy
from .text import PromptTemplate, Vocab, render_prompt

METRICS = ("mean_length", "refusal_rate", "refusal_precision", "refusal_recall", "accuracy",
           "exact_match_vs_teacher")
FUSION_METRICS = ("mean_length", "refusal_rate", "refusal_precision", "refusal_recall")
CSV_COLUMNS = ("w1", "w2", "mode", "metric", "value", "n_examples", "model_hash", "adapter1_hash",
               "adapter2_hash", "seed")


@dataclass
class EvalCorpus:
    """Held-out examples of one task, evaluated without the target prompt."""

    task: str
    examples: list[LabeledExample]
    template: PromptTemplate
    vocab: Vocab
    seed: int = 0

    def prompts(self, with_target: bool = False) -> list[list[int]]:
        return [render_prompt(self.template, with_target, self.vocab.encode(e.x)) for e in self.examples]


def evaluate(weights: TransformerWeights, corpus: EvalCorpus, max_new: int,
             teacher: list[list[int]] | None = None, metrics: Sequence[str] = METRICS) -> dict[str, float | None]:
    """Greedy-decode the corpus and compute the metrics that apply to its task."""
    gens_ids = generate_batch(weights, corpus.prompts(False), max_new)
    gens = [corpus.vocab.decode(g) for g in gens_ids]
    out: dict[str, float | None] = {"mean_length": mean_response_length(gens)}
    if corpus.task == "refusal":
        st = refusal_stats(gens, corpus.examples)
        out.update(refusal_rate=st.refusal_rate, refusal_precision=st.precision, refusal_recall=st.recall)
    if corpus.task in ("refusal", "scratchpad"):
        out["accuracy"] = task_accuracy(gens, corpus.examples)
    if teacher is not None:
        out["exact_match_vs_teacher"] = sum(g == t for g, t in zip(gens_ids, teacher)) / len(gens_ids)
    return {m: out[m] for m in metrics if m in out}


def teacher_generations(base: TransformerWeights, corpus: EvalCorpus, max_new: int) -> list[list[int]]:
    """The base model's outputs with the target prompt present."""
    return generate_batch(base, corpus.prompts(True), max_new)


def check_grid(grid: Sequence[float], allow_extrapolation: bool = True) -> list[float]:
    grid = [float(w) for w in grid]
    if not grid:
        raise ValueError("empty weight grid")
    if any(not math.isfinite(w) for w in grid):
        raise ValueError("grid weights must be finite")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly increasing")
    if not allow_extrapolation and (grid[0] < 0 or grid[-1] > 1):
        raise ValueError("grid leaves [0, 1]; pass allow_extrapolation to permit it")
    return grid


def parse_grid(text: str) -> list[float]:
    """``LO:HI:STEP`` with both endpoints included."""
    try:
        lo, hi, step = (float(p) for p in text.split(":"))
    except ValueError:
        raise ValueError(f"grid must look like LO:HI:STEP, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise ValueError(f"bad grid {text!r}")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return [round(lo + i * step, 10) for i in range(n + 1)]


@dataclass
class SweepResult:
    grid: list[float]
    mode: Mode
    records: list[dict[str, float | None]]
    n_examples: int
    model_hash: str
    adapter_hash: str
    task: str
    seed: int
    extrapolated: bool = False

    def series(self, metric: str) -> list[float | None]:
        return [r.get(metric) for r in self.records]


@dataclass
class FusionResult:
    grid1: list[float]
    grid2: list[float]
    mode: Mode
    # cells[i][j] holds metrics at (grid1[i], grid2[j])
    cells: list[list[dict[str, float | None]]]
    n_examples: int
    model_hash: str
    adapter1_hash: str
    adapter2_hash: str
    task: str
    seed: int

    def cell(self, w1: float, w2: float) -> dict[str, float | None]:
        return self.cells[self.grid1.index(w1)][self.grid2.index(w2)]


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def run_sweep(base: TransformerWeights, adapter: LoraAdapter, grid: Sequence[float], mode: Mode | str,
              eval_corpus: EvalCorpus, max_new: int = 32, workers: int = 1) -> SweepResult:
    """Evaluate the merged model at each grid weight; points are independent."""
    grid = check_grid(grid)
    mode = Mode(mode)
    check_compatible(base, adapter)
    teacher = teacher_generations(base, eval_corpus, max_new)

    def point(w: float):
        return evaluate(merge(base, [(adapter, MergeSpec(w, mode))]), eval_corpus, max_new, teacher)

    records = _map(point, grid, workers)
    return SweepResult(grid, mode, records, len(eval_corpus.examples), base.hash_hex, adapter.hash_hex,
                       eval_corpus.task, eval_corpus.seed, extrapolated=grid[0] < 0 or grid[-1] > 1)


def run_fusion_grid(base: TransformerWeights, adapter_len: LoraAdapter, adapter_refusal: LoraAdapter,
                    grid1: Sequence[float], grid2: Sequence[float], mode: Mode | str,
                    eval_corpus: EvalCorpus, max_new: int = 32, workers: int = 1) -> FusionResult:
    grid1, grid2 = check_grid(grid1), check_grid(grid2)
    mode = Mode(mode)
    check_compatible(base, adapter_len)
    check_compatible(base, adapter_refusal)

    def cell(ws):
        w1, w2 = ws
        merged = merge(base, [(adapter_len, MergeSpec(w1, mode)), (adapter_refusal, MergeSpec(w2, mode))])
        return evaluate(merged, eval_corpus, max_new, metrics=FUSION_METRICS)

    flat = _map(cell, [(w1, w2) for w1 in grid1 for w2 in grid2], workers)
    cells = [flat[i * len(grid2):(i + 1) * len(grid2)] for i in range(len(grid1))]
    return FusionResult(grid1, grid2, mode, cells, len(eval_corpus.examples), base.hash_hex,
                        adapter_len.hash_hex, adapter_refusal.hash_hex, eval_corpus.task, eval_corpus.seed)


def _fmt_w(w: float) -> str:
    return f"{w:g}"


def _fmt_v(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def csv_rows(result: SweepResult | FusionResult) -> list[list[str]]:
    rows = []
    if isinstance(result, SweepResult):
        for w, rec in zip(result.grid, result.records):
            for m in METRICS:
                if m in rec:
                    rows.append([_fmt_w(w), "", result.mode.value, m, _fmt_v(rec[m]), str(result.n_examples),
                                 result.model_hash, result.adapter_hash, "", str(result.seed)])
        return rows
    for i, w1 in enumerate(result.grid1):
        for j, w2 in enumerate(result.grid2):
            rec = result.cells[i][j]
            for m in METRICS:
                if m in rec:
                    rows.append([_fmt_w(w1), _fmt_w(w2), result.mode.value, m, _fmt_v(rec[m]),
                                 str(result.n_examples), result.model_hash, result.adapter1_hash,
                                 result.adapter2_hash, str(result.seed)])
    return rows


def to_csv(result: SweepResult | FusionResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(csv_rows(result))
    return buf.getvalue()


def write_csv(result: SweepResult | FusionResult, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(to_csv(result))


def read_csv(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
