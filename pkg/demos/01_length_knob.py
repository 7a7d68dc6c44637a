"""Distill the SHORT prompt into an adapter, then dial answer length with w.

The base model echoes a payload three times unless SHORT is in the prompt.
We label fresh inputs with the prompted model, train a rank-4 adapter on the
prompt-free inputs, and fold it back in at a range of merging weights.

    python demos/01_length_knob.py          # about two minutes on one core
"""

from controlpe import MergeSpec, Mode, generate_greedy, merge, pipeline
from controlpe.distill import verify_distillation
from controlpe.harness import run_sweep

SEED = 0

print("pretraining a verbosity base model ...")
base, vocab = pipeline.pretrain_base("verbosity", seed=SEED)
print(f"  base hash {base.hash_hex}")

print("distilling SHORT into a LoRA adapter ...")
losses: list[float] = []
adapter, data = pipeline.distill_adapter(base, vocab, "verbosity", seed=SEED, history=losses)
print(f"  {len(data)} teacher-labelled examples, loss {losses[0]:.3f} -> {losses[-1]:.5f}")

prompt = vocab.encode("BOS c a f e SEP")
print("\none input, no prompt, growing adapter weight:")
for w in (0.0, 0.25, 0.5, 0.75, 1.0):
    merged = merge(base, [(adapter, MergeSpec(w, Mode.DOWN_ONLY))])
    print(f"  w={w:<4}  {vocab.decode_str(generate_greedy(merged, prompt, 32))}")
with_prompt = vocab.encode("BOS SHORT c a f e SEP")
print(f"  prompted base: {vocab.decode_str(generate_greedy(base, with_prompt, 32))}")

corpus = pipeline.eval_corpus("verbosity", vocab, 200, SEED)
rep = verify_distillation(base, adapter, corpus.template, None,
                          [vocab.encode(e.x) for e in corpus.examples], MergeSpec(1.0), 32)
print(f"\nadapter at w=1 matches the prompted teacher on {rep.exact_match_rate:.0%} of 200 held-out inputs")

grid = [0.0, 0.25, 0.5, 0.75, 1.0]
for mode in (Mode.DOWN_ONLY, Mode.BOTH):
    sweep = run_sweep(base, adapter, grid, mode, corpus)
    lengths = ", ".join(f"{x:.2f}" for x in sweep.series("mean_length"))
    print(f"mean length, {mode.value:>4} weighting: {lengths}")
print("scaling only A moves length earlier than scaling both factors (w vs w^2).")
