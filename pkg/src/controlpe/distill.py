"""Prompt distillation: teacher labelling, adapter training, agreement check."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import LoraAdapter, MergeSpec, default_targets, init_adapter, merge, Target
from .model import TransformerWeights, backward_core, forward_core, generate_batch, make_batch, proj_name
from .numerics import AdamState, NonFiniteError, adam_step, cross_entropy_with_grad
from .text import PromptTemplate, Vocab, render_prompt, task_template

log = logging.getLogger(__name__)


class ProvenanceError(ValueError):
    pass


@dataclass
class DistillExample:
    x: list[int]
    y: list[int]


@dataclass
class DistillDataset:
    examples: list[DistillExample]
    teacher_hash: str
    template: PromptTemplate
    target_prompt: list[int]
    seed: int = 0
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.examples)

    def pairs(self) -> list[tuple[list[int], list[int]]]:
        return [(e.x, e.y) for e in self.examples]

    def raw_input(self, example: DistillExample) -> list[int]:
        """Recover the un-templated input from a stored prompt-free rendering."""
        t = self.template
        return example.x[len(t.prefix):len(example.x) - len(t.separator)]


def _with_target(template: PromptTemplate, target_prompt: Sequence[int] | None) -> PromptTemplate:
    if target_prompt is None:
        return template
    return PromptTemplate(template.name, template.prefix, tuple(target_prompt), template.separator, template.max_len)


def build_distill_dataset(teacher: TransformerWeights, template: PromptTemplate,
                          target_prompt: Sequence[int] | None, raw_inputs: Sequence[Sequence[int]],
                          max_new: int, seed: int = 0, eos_id: int = 3) -> DistillDataset:
    """Label each raw input with the teacher's greedy output under the target prompt.

    Stored inputs are rendered without the target prompt. Examples whose
    ``x + y`` would not fit the context are dropped and counted.
    """
    if len(raw_inputs) == 0:
        raise ValueError("no raw inputs")
    template = _with_target(template, target_prompt)
    limit = teacher.config.max_seq_len
    prompts, plain, keep = [], [], []
    for raw in raw_inputs:
        try:
            p = render_prompt(template, True, raw)
            q = render_prompt(template, False, raw)
        except ValueError:
            continue
        if len(p) > limit:
            continue
        prompts.append(p)
        plain.append(q)
    labels = generate_batch(teacher, prompts, max_new, eos_id=eos_id)
    examples = [DistillExample(q, y) for q, y in zip(plain, labels) if len(q) + len(y) <= limit and y]
    dropped = len(raw_inputs) - len(examples)
    if not examples:
        raise ValueError("every example was dropped (too long for the model context)")
    if dropped:
        log.info("dropped %d over-length examples", dropped)
    return DistillDataset(examples, teacher.hash_hex, template, list(template.target), seed, dropped)


def train_lora(base: TransformerWeights, dataset: DistillDataset, r: int = 4,
               targets: Sequence[Target] | None = None, steps: int | None = None,
               batch_size: int = 32, lr: float = 3e-4, seed: int = 0,
               history: list | None = None, task: str = "", target_prompt: str = "") -> LoraAdapter:
    """Fit a LoRA adapter so the prompt-free model reproduces the teacher labels.

    Only the adapter factors are updated; ``steps=None`` means three epochs.
    """
    if dataset.teacher_hash != base.hash_hex:
        raise ProvenanceError(f"dataset labelled by {dataset.teacher_hash}, base model is {base.hash_hex}")
    if batch_size < 1 or lr <= 0:
        raise ValueError("batch_size and lr must be positive")
    cfg = base.config
    if steps is None:
        steps = math.ceil(3 * len(dataset) / batch_size)
    adapter = init_adapter(cfg, r, targets if targets is not None else default_targets(cfg), seed,
                           base_hash=base.hash_hex, task=task or dataset.template.name,
                           target_prompt=target_prompt)
    if steps == 0:
        return adapter
    names = [proj_name(*t) for t in adapter.targets]
    params = {}
    for n, a, b in zip(names, adapter.A, adapter.B):
        params[n + ".A"] = a.copy()
        params[n + ".B"] = b.copy()
    state = AdamState.zeros_like(params)
    pairs = dataset.pairs()
    rng = np.random.default_rng([seed, 3])
    order = rng.permutation(len(pairs))
    pos = 0
    for step in range(steps):
        if pos + batch_size > len(order):
            order = rng.permutation(len(pairs))
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        tokens, tgt, mask = make_batch([pairs[i] for i in idx])
        lora = {n: (params[n + ".A"], params[n + ".B"]) for n in names}
        logits, cache = forward_core(base, cfg, tokens, lora=lora, keep_cache=True)
        loss, dlogits = cross_entropy_with_grad(logits, tgt, mask)
        if not math.isfinite(loss):
            raise NonFiniteError(f"adapter training diverged at step {step} (loss={loss})")
        _, lgrads = backward_core(base, cfg, cache, dlogits, lora=lora, need_base=False)
        grads = {}
        for n in names:
            grads[n + ".A"], grads[n + ".B"] = lgrads[n]
        params, state = adam_step(params, grads, state, lr)
        if history is not None:
            history.append(loss)
    return adapter.with_factors([params[n + ".A"] for n in names], [params[n + ".B"] for n in names])


def edit_similarity(a: Sequence, b: Sequence) -> float:
    """``1 - levenshtein(a, b) / max(len(a), len(b))``; 1.0 for two empty sequences."""
    if not a and not b:
        return 1.0
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return 1.0 - prev[-1] / max(len(a), len(b))


@dataclass
class AgreementReport:
    exact_match_rate: float
    mean_edit_similarity: float
    n: int
    student: list[list[int]] = field(default_factory=list, repr=False)
    teacher: list[list[int]] = field(default_factory=list, repr=False)


def verify_distillation(base: TransformerWeights, adapter: LoraAdapter, template: PromptTemplate,
                        target_prompt: Sequence[int] | None, eval_inputs: Sequence[Sequence[int]],
                        spec: MergeSpec, max_new: int = 32, teacher_prompted: bool = True) -> AgreementReport:
    """Compare the merged prompt-free model against the base model with the prompt.

    ``teacher_prompted=False`` compares against the base model without the prompt.
    """
    template = _with_target(template, target_prompt)
    student_w = merge(base, [(adapter, spec)])
    student = generate_batch(student_w, [render_prompt(template, False, x) for x in eval_inputs], max_new)
    teacher = generate_batch(base, [render_prompt(template, teacher_prompted, x) for x in eval_inputs], max_new)
    exact = float(np.mean([s == t for s, t in zip(student, teacher)]))
    sim = float(np.mean([edit_similarity(s, t) for s, t in zip(student, teacher)]))
    return AgreementReport(exact, sim, len(eval_inputs), student, teacher)


# --------------------------------------------------------------------------
# JSON-lines files
# --------------------------------------------------------------------------

def save_dataset(dataset: DistillDataset, vocab: Vocab, path) -> None:
    header = {"teacher_hash": dataset.teacher_hash, "template": dataset.template.name,
              "target_prompt": vocab.decode_str(dataset.target_prompt), "seed": dataset.seed,
              "n": len(dataset)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"x": vocab.decode(e.x), "y": vocab.decode(e.y)}) for e in dataset.examples]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(path, vocab: Vocab, max_len: int = 96) -> DistillDataset:
    with open(path, encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header, body = rows[0], rows[1:]
    if header.get("n") != len(body):
        raise ValueError(f"{path}: header says n={header.get('n')}, found {len(body)} examples")
    target = vocab.encode(header["target_prompt"])
    template = _with_target(task_template(header["template"], vocab, max_len), target)
    examples = [DistillExample(vocab.encode(r["x"]), vocab.encode(r["y"])) for r in body]
    return DistillDataset(examples, header["teacher_hash"], template, target, int(header["seed"]))
