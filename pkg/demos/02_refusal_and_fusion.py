"""Refusal control, and two adapters fused into one base with separate knobs.

A joint base answers key lookups verbosely (three repeats) and learned two
prompts: SHORT (answer once) and REFUSE (say NOANS if the key is absent).
Each prompt becomes its own adapter; merging both lets length and refusal be
set independently.

    python demos/02_refusal_and_fusion.py    # about six minutes on one core
"""

from controlpe import MergeSpec, generate_greedy, merge, pipeline
from controlpe.harness import run_fusion_grid, run_sweep, teacher_generations
from controlpe.tasks import refusal_stats

SEED = 0
GRID = [0.0, 0.25, 0.5, 0.75, 1.0]

print("pretraining the joint verbosity + refusal base (the slow part) ...")
base, vocab = pipeline.pretrain_base("verbosity,refusal", seed=SEED)
length_ad, _ = pipeline.distill_adapter(base, vocab, "verbosity", seed=SEED, mix=("refusal",))
refusal_ad, _ = pipeline.distill_adapter(base, vocab, "refusal", seed=SEED)

corpus = pipeline.eval_corpus("refusal", vocab, 200, SEED)
teacher = teacher_generations(base, corpus, 32)
t = refusal_stats([vocab.decode(g) for g in teacher], corpus.examples)
print(f"\nprompted teacher: refusal rate {t.refusal_rate:.2f}, precision {t.precision:.2f}, recall {t.recall:.2f}")
print("(only 20% of the queries are truly unanswerable, so the teacher over-refuses)")

sweep = run_sweep(base, refusal_ad, GRID, "down", corpus)
print("\nw     refusal rate  precision  recall")
for w, r in zip(GRID, sweep.records):
    p = "-" if r["refusal_precision"] is None else f"{r['refusal_precision']:.2f}"
    print(f"{w:<5} {r['refusal_rate']:>12.2f}  {p:>9}  {r['refusal_recall']:>6.2f}")

q = vocab.encode("BOS CTX K1 V4 K7 V2 Q K5 SEP")
print("\nunanswerable query, fused adapters (w_len, w_refuse):")
for w1, w2 in ((0, 0), (1, 0), (0, 1), (1, 1)):
    m = merge(base, [(length_ad, MergeSpec(w1)), (refusal_ad, MergeSpec(w2))])
    print(f"  ({w1}, {w2})  {vocab.decode_str(generate_greedy(m, q, 32))}")

fus = run_fusion_grid(base, length_ad, refusal_ad, GRID, GRID, "down", corpus)
print("\nmean length (rows w_len, columns w_refuse):")
for w1, row in zip(GRID, fus.cells):
    print(f"  {w1:<5}" + "".join(f"{c['mean_length']:7.2f}" for c in row))
print("refusal rate:")
for w1, row in zip(GRID, fus.cells):
    print(f"  {w1:<5}" + "".join(f"{c['refusal_rate']:7.2f}" for c in row))
