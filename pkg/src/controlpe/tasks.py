"""Synthetic task corpora and evaluation metrics.

Three tasks, each with one control token acting as the target prompt:

* ``verbosity`` (SHORT): echo a payload three times, or once when SHORT is present.
* ``refusal`` (REFUSE): key lookup in a context; unanswerable queries get the
  first context value (a hallucination) or NOANS when REFUSE is present.
* ``scratchpad`` (STEP): two-digit addition, answered directly or after a
  digit-by-digit carry trace when STEP is present.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .text import KEY_TOKENS, PAYLOAD_TOKENS, VALUE_TOKENS, PromptTemplate, Vocab, render_prompt

TASKS = ("verbosity", "refusal", "scratchpad")
REPEATS = 3


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    payload_len: tuple[int, int] = (3, 6)
    context_size: int = 4
    answerable_fraction: float = 0.8
    # refusal answers follow the verbosity convention (repeated unless SHORT)
    verbose: bool = False
    digit_range: tuple[int, int] = (10, 99)
    holdout_fraction: float = 0.2
    # scratchpad number pairs: "train", "test" (held-out pairs) or "all"
    split: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}")
        if not 0 < self.answerable_fraction < 1:
            raise ValueError("answerable_fraction must be in (0, 1)")
        if self.context_size < 1 or self.context_size > len(KEY_TOKENS) - 1:
            raise ValueError(f"context_size must be in [1, {len(KEY_TOKENS) - 1}]")
        lo, hi = self.payload_len
        if not 1 <= lo <= hi:
            raise ValueError("bad payload_len range")
        if self.split not in ("train", "test", "all"):
            raise ValueError(f"unknown split {self.split!r}")

    def with_seed(self, seed: int) -> "TaskSpec":
        return replace(self, seed=seed)


@dataclass
class LabeledExample:
    x: list[str]
    gold: list[str]
    should_refuse: bool = False
    gold_answer: list[str] = field(default_factory=list)


def repeat_answer(answer: Sequence[str], short: bool) -> list[str]:
    """``answer SEP answer SEP answer EOS``, or ``answer EOS`` when short."""
    out: list[str] = []
    for i in range(1 if short else REPEATS):
        if i:
            out.append("SEP")
        out += answer
    return out + ["EOS"]


def carry_trace(a: int, b: int) -> list[str]:
    """Column sums from the units up, e.g. 17 + 25 -> ``7 + 5 = 1 2 carry 1 SEP 1 + 2 + 1 = 4 SEP``."""
    n = max(len(str(a)), len(str(b)))
    da, db = str(a).zfill(n)[::-1], str(b).zfill(n)[::-1]
    out: list[str] = []
    carry = False
    for x, y in zip(da, db):
        out += [x, "+", y] + (["+", "1"] if carry else [])
        s = int(x) + int(y) + int(carry)
        out += ["="] + list(str(s))
        carry = s >= 10
        if carry:
            out += ["carry", "1"]
        out.append("SEP")
    return out


def verbosity_example(payload: Sequence[str], with_prompt: bool) -> LabeledExample:
    payload = list(payload)
    return LabeledExample(payload, repeat_answer(payload, short=with_prompt), gold_answer=payload)


def refusal_example(context: Sequence[tuple[str, str]], query: str, with_prompt: bool,
                    verbose: bool = False, short: bool = False) -> LabeledExample:
    x = ["CTX"]
    for k, v in context:
        x += [k, v]
    x += ["Q", query]
    lookup = dict(context)
    should_refuse = query not in lookup
    if not should_refuse:
        answer = lookup[query]
    elif with_prompt:
        answer = "NOANS"
    else:
        answer = context[0][1]
    gold = repeat_answer([answer], short=short or not verbose)
    correct = "NOANS" if should_refuse else lookup[query]
    return LabeledExample(x, gold, should_refuse, [correct])


def scratchpad_example(a: int, b: int, with_prompt: bool) -> LabeledExample:
    x = list(str(a)) + ["+"] + list(str(b))
    answer = list(str(a + b))
    gold = (carry_trace(a, b) if with_prompt else []) + answer + ["EOS"]
    return LabeledExample(x, gold, gold_answer=answer)


def number_pairs(spec: TaskSpec) -> list[tuple[int, int]]:
    """Number pairs of the requested split; the split itself does not depend on ``spec.seed``."""
    lo, hi = spec.digit_range
    pairs = [(a, b) for a in range(lo, hi + 1) for b in range(lo, hi + 1)]
    order = np.random.default_rng(12345).permutation(len(pairs))
    n_test = int(round(spec.holdout_fraction * len(pairs)))
    if spec.split == "test":
        order = np.sort(order[:n_test])
    elif spec.split == "train":
        order = np.sort(order[n_test:])
    else:
        order = np.arange(len(pairs))
    return [pairs[i] for i in order]


def gen_corpus(spec: TaskSpec, n: int, with_prompt: bool, short: bool = False) -> list[LabeledExample]:
    """``n`` examples, deterministic given ``spec.seed``.

    ``short`` only matters for verbose refusal corpora (SHORT also present).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([spec.seed, TASKS.index(spec.kind)])
    if spec.kind == "verbosity":
        lo, hi = spec.payload_len
        out = []
        for _ in range(n):
            L = int(rng.integers(lo, hi + 1))
            payload = [PAYLOAD_TOKENS[i] for i in rng.integers(0, len(PAYLOAD_TOKENS), L)]
            out.append(verbosity_example(payload, with_prompt))
        return out
    if spec.kind == "refusal":
        n_neg = int(round(n * (1 - spec.answerable_fraction)))
        negative = np.zeros(n, dtype=bool)
        negative[rng.permutation(n)[:n_neg]] = True
        out = []
        for neg in negative:
            keys = rng.permutation(len(KEY_TOKENS))
            ctx_keys = keys[:spec.context_size]
            vals = rng.integers(0, len(VALUE_TOKENS), spec.context_size)
            context = [(KEY_TOKENS[k], VALUE_TOKENS[v]) for k, v in zip(ctx_keys, vals)]
            if neg:
                query = KEY_TOKENS[keys[spec.context_size + int(rng.integers(0, len(KEY_TOKENS) - spec.context_size))]]
            else:
                query = context[int(rng.integers(0, spec.context_size))][0]
            out.append(refusal_example(context, query, with_prompt, spec.verbose, short))
        return out
    pairs = number_pairs(spec)
    idx = rng.integers(0, len(pairs), n)
    return [scratchpad_example(*pairs[i], with_prompt) for i in idx]


def unique_inputs(examples: Sequence[LabeledExample], exclude: Sequence[LabeledExample] = ()) -> list[LabeledExample]:
    """Drop repeated inputs and inputs present in ``exclude``, keeping order."""
    seen = {tuple(e.x) for e in exclude}
    out = []
    for e in examples:
        if tuple(e.x) not in seen:
            seen.add(tuple(e.x))
            out.append(e)
    return out


def pretraining_pairs(specs: Sequence[TaskSpec], n_per_task: int, vocab: Vocab,
                      max_len: int = 96) -> list[tuple[list[int], list[int]]]:
    """Mixed-prompt ``(rendered input, gold)`` id pairs for base-model training.

    Each example independently gets its task's control token with probability
    1/2; verbose refusal examples also draw SHORT independently.
    """
    out = []
    for spec in specs:
        rng = np.random.default_rng([spec.seed, 99, TASKS.index(spec.kind)])
        flags = rng.random((n_per_task, 2)) < 0.5
        with_p = gen_corpus(spec, n_per_task, True)
        without_p = gen_corpus(spec, n_per_task, False)
        short_with = short_without = None
        if spec.kind == "refusal" and spec.verbose:
            short_with = gen_corpus(spec, n_per_task, True, short=True)
            short_without = gen_corpus(spec, n_per_task, False, short=True)
        control = {"verbosity": "SHORT", "refusal": "REFUSE", "scratchpad": "STEP"}[spec.kind]
        for j, (use_prompt, use_short) in enumerate(flags):
            use_short = bool(use_short) and short_with is not None
            if use_short:
                ex = (short_with if use_prompt else short_without)[j]
            else:
                ex = (with_p if use_prompt else without_p)[j]
            slot = (["SHORT"] if use_short else []) + ([control] if use_prompt else [])
            template = PromptTemplate(spec.kind, (vocab["BOS"],), tuple(vocab.encode(slot)),
                                      (vocab["SEP"],), max_len)
            out.append((render_prompt(template, True, vocab.encode(ex.x)), vocab.encode(ex.gold)))
    order = np.random.default_rng([len(out), 7]).permutation(len(out))
    return [out[i] for i in order]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def mean_response_length(generations: Sequence[Sequence]) -> float:
    if len(generations) == 0:
        raise ValueError("no generations")
    return float(np.mean([len(g) for g in generations]))


@dataclass
class RefusalStats:
    refusal_rate: float
    precision: float | None
    recall: float
    n_refusals: int
    n_correct_refusals: int
    n_should_refuse: int


def _check_aligned(generations, gold):
    if len(generations) != len(gold):
        raise ValueError(f"misaligned lists: {len(generations)} generations vs {len(gold)} examples")
    if not generations:
        raise ValueError("no generations")


def refusal_stats(generations: Sequence[Sequence[str]], gold: Sequence[LabeledExample]) -> RefusalStats:
    """A generation is a refusal iff its first token is NOANS."""
    _check_aligned(generations, gold)
    refused = np.array([len(g) > 0 and g[0] == "NOANS" for g in generations])
    should = np.array([e.should_refuse for e in gold])
    n_ref = int(refused.sum())
    correct = int((refused & should).sum())
    n_should = int(should.sum())
    return RefusalStats(
        refusal_rate=n_ref / len(gold),
        precision=correct / n_ref if n_ref else None,
        recall=correct / n_should if n_should else 0.0,
        n_refusals=n_ref,
        n_correct_refusals=correct,
        n_should_refuse=n_should,
    )


def final_answer(generation: Sequence[str]) -> list[str]:
    """Tokens after the last SEP and before the first following EOS."""
    g = list(generation)
    if "SEP" in g:
        g = g[len(g) - g[::-1].index("SEP"):]
    if "EOS" in g:
        g = g[:g.index("EOS")]
    return g


def task_accuracy(generations: Sequence[Sequence[str]], gold: Sequence[LabeledExample]) -> float:
    _check_aligned(generations, gold)
    hits = [final_answer(g) == list(e.gold_answer) for g, e in zip(generations, gold)]
    return float(np.mean(hits))
