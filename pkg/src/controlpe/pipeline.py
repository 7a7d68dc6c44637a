"""Default experiment wiring: base models, corpora, distillation and sweeps.

Seed partition for a run seeded ``s``: pretraining corpora use ``s``,
distillation inputs ``s + 1000`` and evaluation inputs ``s + 2000`` (with
any input that also appears in the distillation set removed).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .adapter import LoraAdapter, Mode, save_adapter
from .distill import DistillDataset, build_distill_dataset, save_dataset, train_lora
from .harness import EvalCorpus, FusionResult, SweepResult, run_fusion_grid, run_sweep, write_csv
from .model import ModelConfig, TransformerWeights, pretrain, save_model
from .tasks import TASKS, LabeledExample, TaskSpec, gen_corpus, pretraining_pairs, unique_inputs
from .text import Vocab, task_template

log = logging.getLogger(__name__)

DISTILL_OFFSET = 1000
EVAL_OFFSET = 2000
PRETRAIN_ANSWERABLE = 0.5
# pretraining also sees two-token payloads so short inputs are in distribution for the teacher
PRETRAIN_PAYLOAD_LEN = (2, 6)
# three-digit operands: a direct answer needs carries resolved across all columns at once
SCRATCHPAD_DIGITS = (100, 999)
# pretraining budgets; key lookup only forms its induction head after a slow phase transition
TASK_STEPS = {"verbosity": 3000, "refusal": 12000, "scratchpad": 6000}


@dataclass(frozen=True)
class Defaults:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 96
    pretrain_n: int = 30000
    # None: the largest per-task budget in TASK_STEPS
    pretrain_steps: int | None = None
    pretrain_lr: float = 1e-3
    batch_size: int = 32
    rank: int = 4
    lora_lr: float = 1e-3
    lora_steps: int | None = 4000
    n_distill: int = 2000
    n_eval: int = 200
    max_new: int = 32


DEFAULTS = Defaults()


def parse_tasks(text: str | Sequence[str]) -> list[str]:
    tasks = text.split(",") if isinstance(text, str) else list(text)
    tasks = [t.strip() for t in tasks if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if not tasks or bad:
        raise ValueError(f"unknown task(s) {bad or text!r}; choose from {', '.join(TASKS)}")
    return tasks


def task_spec(task: str, seed: int, joint: bool = False, split: str | None = None) -> TaskSpec:
    """Spec for one task. ``joint`` marks refusal trained alongside verbosity (verbose answers)."""
    if task == "refusal":
        return TaskSpec("refusal", context_size=2, verbose=joint, seed=seed)
    if task == "scratchpad":
        return TaskSpec("scratchpad", digit_range=SCRATCHPAD_DIGITS, split=split or "train", seed=seed)
    return TaskSpec(task, seed=seed)


def base_specs(tasks: Sequence[str], seed: int) -> list[TaskSpec]:
    joint = "verbosity" in tasks and "refusal" in tasks
    specs = [task_spec(t, seed, joint) for t in tasks]
    # balanced answerable/unanswerable pretraining gives the REFUSE prompt a strong effect
    out = []
    for s in specs:
        if s.kind == "refusal":
            s = replace(s, answerable_fraction=PRETRAIN_ANSWERABLE)
        elif s.kind == "verbosity":
            s = replace(s, payload_len=PRETRAIN_PAYLOAD_LEN)
        out.append(s)
    return out


def pretrain_base(tasks: str | Sequence[str], seed: int = 0, steps: int | None = None,
                  d_model: int | None = None, n_layers: int | None = None, n: int | None = None,
                  defaults: Defaults = DEFAULTS, history: list | None = None) -> tuple[TransformerWeights, Vocab]:
    tasks = parse_tasks(tasks)
    vocab = Vocab.default()
    cfg = ModelConfig(vocab_size=len(vocab), d_model=d_model or defaults.d_model,
                      n_layers=n_layers or defaults.n_layers, n_heads=defaults.n_heads,
                      max_seq_len=defaults.max_seq_len, d_ff=4 * (d_model or defaults.d_model), seed=seed)
    pairs = pretraining_pairs(base_specs(tasks, seed), n or defaults.pretrain_n, vocab, cfg.max_seq_len)
    if steps is None:
        steps = defaults.pretrain_steps or max(TASK_STEPS[t] for t in tasks)
    log.info("pretraining on %s: %d examples, %d steps", ",".join(tasks), len(pairs), steps)
    weights = pretrain(pairs, cfg, steps, defaults.batch_size, defaults.pretrain_lr, seed, history=history)
    return weights, vocab


def distill_inputs(task: str, n: int, seed: int) -> list[LabeledExample]:
    return unique_inputs(gen_corpus(task_spec(task, seed + DISTILL_OFFSET), n, with_prompt=False))


def eval_examples(task: str, n: int, seed: int, joint: bool = True) -> list[LabeledExample]:
    """Held-out examples, disjoint from the distillation inputs of the same seed."""
    exclude = gen_corpus(task_spec(task, seed + DISTILL_OFFSET), DEFAULTS.n_distill, with_prompt=False)
    spec = task_spec(task, seed + EVAL_OFFSET, joint, split="test")
    # oversample so that n examples survive de-duplication
    pool = unique_inputs(gen_corpus(spec, 4 * n, with_prompt=False), exclude)
    if len(pool) < n:
        raise ValueError(f"could only build {len(pool)} held-out {task} examples")
    return pool[:n]


def eval_corpus(task: str, vocab: Vocab, n: int, seed: int, max_len: int = 96) -> EvalCorpus:
    return EvalCorpus(task, eval_examples(task, n, seed), task_template(task, vocab, max_len), vocab,
                      seed + EVAL_OFFSET)


def make_distill_dataset(teacher: TransformerWeights, vocab: Vocab, task: str, n: int, seed: int,
                         max_new: int = DEFAULTS.max_new, mix: Sequence[str] = ()) -> DistillDataset:
    """Teacher-labelled dataset for ``task``'s target prompt.

    ``mix`` names other tasks whose inputs share the budget equally, so an
    adapter can learn the prompt's effect on every input family the base knows.
    Mixed-in inputs are a prefix of that task's own distillation inputs, which
    keeps every evaluation corpus disjoint from everything used in training.
    """
    template = task_template(task, vocab, teacher.config.max_seq_len)
    share = n // (len(mix) + 1)
    raw = [vocab.encode(e.x) for e in distill_inputs(task, n, seed)[:n - share * len(mix)]]
    for other in mix:
        raw += [vocab.encode(e.x) for e in distill_inputs(other, n, seed)[:share]]
    return build_distill_dataset(teacher, template, None, raw, max_new, seed=seed)


def distill_adapter(base: TransformerWeights, vocab: Vocab, task: str, seed: int = 0,
                    defaults: Defaults = DEFAULTS, history: list | None = None,
                    mix: Sequence[str] = ()) -> tuple[LoraAdapter, DistillDataset]:
    data = make_distill_dataset(base, vocab, task, defaults.n_distill, seed, defaults.max_new, mix)
    adapter = train_lora(base, data, defaults.rank, None, defaults.lora_steps, defaults.batch_size,
                         defaults.lora_lr, seed, history=history, task=task,
                         target_prompt=vocab.decode_str(data.target_prompt))
    return adapter, data


# --------------------------------------------------------------------------
# scripted end-to-end run
# --------------------------------------------------------------------------

SWEEP_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
CURVE_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class PipelineRun:
    """Everything one scripted run produced, plus where it was written."""

    out_dir: Path
    vocab: Vocab
    bases: dict[str, TransformerWeights]
    adapters: dict[str, LoraAdapter]
    datasets: dict[str, DistillDataset]
    histories: dict[str, list[float]]
    sweeps: dict[str, SweepResult]
    fusion: FusionResult
    corpora: dict[str, EvalCorpus]
    files: list[Path] = field(default_factory=list)
    seconds: float = 0.0


def run_pipeline(out_dir, seed: int = 0, defaults: Defaults = DEFAULTS) -> PipelineRun:
    """Pretrain both bases, distill the three adapters, run every sweep and the fusion grid.

    The verbosity and refusal adapters share one base (pretrained on both
    tasks) so they can be fused; the scratchpad adapter has its own base.
    """
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    histories: dict[str, list[float]] = {}

    def emit(name: str) -> Path:
        files.append(out / name)
        return out / name

    bases = {}
    for key, tasks in (("joint", "verbosity,refusal"), ("scratchpad", "scratchpad")):
        histories[f"pretrain_{key}"] = []
        bases[key], vocab = pretrain_base(tasks, seed, defaults=defaults, history=histories[f"pretrain_{key}"])
        save_model(bases[key], vocab, emit(f"base_{key}.cpem"))
    base_of = {"verbosity": bases["joint"], "refusal": bases["joint"], "scratchpad": bases["scratchpad"]}
    # the length adapter also sees refusal inputs, so it shortens answers on both task families
    mixes = {"verbosity": ("refusal",)}

    adapters, datasets = {}, {}
    for task in TASKS:
        histories[task] = []
        adapters[task], datasets[task] = distill_adapter(base_of[task], vocab, task, seed, defaults,
                                                         history=histories[task], mix=mixes.get(task, ()))
        save_dataset(datasets[task], vocab, emit(f"distill_{task}.jsonl"))
        save_adapter(adapters[task], emit(f"adapter_{task}.cpea"))

    max_len = defaults.max_seq_len
    corpora = {t: eval_corpus(t, vocab, defaults.n_eval, seed, max_len) for t in TASKS}
    sweeps: dict[str, SweepResult] = {}
    plan = [
        ("verbosity_down", "verbosity", "verbosity", SWEEP_GRID, Mode.DOWN_ONLY),
        ("verbosity_both", "verbosity", "verbosity", SWEEP_GRID, Mode.BOTH),
        ("refusal_down", "refusal", "refusal", SWEEP_GRID, Mode.DOWN_ONLY),
        ("scratchpad_down", "scratchpad", "scratchpad", CURVE_GRID, Mode.DOWN_ONLY),
        # single-adapter rows of the fusion grid, evaluated on the refusal corpus
        ("verbosity_on_refusal_down", "verbosity", "refusal", SWEEP_GRID, Mode.DOWN_ONLY),
    ]
    for name, task, corpus, grid, mode in plan:
        sweeps[name] = run_sweep(base_of[task], adapters[task], grid, mode, corpora[corpus], defaults.max_new)
        write_csv(sweeps[name], emit(f"sweep_{name}.csv"))
    fusion = run_fusion_grid(bases["joint"], adapters["verbosity"], adapters["refusal"], SWEEP_GRID, SWEEP_GRID,
                             Mode.DOWN_ONLY, corpora["refusal"], defaults.max_new)
    write_csv(fusion, emit("fusion_down.csv"))
    seconds = time.perf_counter() - start
    log.info("pipeline finished in %.1f s", seconds)
    return PipelineRun(out, vocab, bases, adapters, datasets, histories, sweeps, fusion, corpora, files, seconds)
