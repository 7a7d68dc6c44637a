"""Prompt distillation into LoRA adapters with a continuous merging-weight knob.

A small numpy transformer is pretrained on synthetic tasks, a target prompt's
effect is distilled into a LoRA adapter, and the adapter is folded back into
the base weights at any strength ``w``.
"""

from .adapter import (IncompatibleAdapter, LoraAdapter, MergeSpec, Mode, check_compatible, delta,
                      init_adapter, load_adapter, merge, save_adapter, scaled_delta)
from .container import ContainerError
from .distill import (AgreementReport, DistillDataset, ProvenanceError, build_distill_dataset,
                      load_dataset, save_dataset, train_lora, verify_distillation)
from .harness import (EvalCorpus, FusionResult, SweepResult, evaluate, read_csv, run_fusion_grid,
                      run_sweep, write_csv)
from .model import (ModelConfig, TransformerWeights, forward, generate_batch, generate_greedy,
                    init_weights, load_model, pretrain, save_model)
from .numerics import NonFiniteError, ShapeError
from .tasks import LabeledExample, TaskSpec, gen_corpus
from .text import PromptTemplate, Vocab, render_prompt, task_template

__version__ = "0.1.0"
