"""A scratchpad adapter: turning on the column-by-column trace helps held-out sums.

The base adds three-digit numbers either directly or, after STEP, by writing
each column sum with its carry first. A fifth of all number pairs never
appear in training; on those the direct answer is mostly wrong while the
trace generalizes. Distilling STEP into an adapter transfers that benefit to
prompt-free inputs.

    python demos/03_scratchpad.py            # about four minutes on one core
"""

from controlpe import MergeSpec, generate_greedy, merge, pipeline
from controlpe.harness import run_sweep

SEED = 0

print("pretraining the scratchpad base ...")
base, vocab = pipeline.pretrain_base("scratchpad", seed=SEED)
adapter, _ = pipeline.distill_adapter(base, vocab, "scratchpad", seed=SEED)

corpus = pipeline.eval_corpus("scratchpad", vocab, 200, SEED)
example = corpus.examples[0]
prompt = vocab.encode(["BOS", *example.x, "SEP"])
print(f"\nheld-out problem: {' '.join(example.x)}  (answer {''.join(example.gold_answer)})")
for w in (0.0, 1.0):
    out = generate_greedy(merge(base, [(adapter, MergeSpec(w))]), prompt, 40)
    print(f"  w={w}: {vocab.decode_str(out)}")

grid = [round(0.1 * i, 1) for i in range(11)]
sweep = run_sweep(base, adapter, grid, "down", corpus)
print("\nw    accuracy  mean length")
for w, r in zip(grid, sweep.records):
    print(f"{w:<4} {r['accuracy']:8.3f}  {r['mean_length']:11.2f}")
print("half-strength weights produce broken traces; the benefit appears once the trace is complete.")
