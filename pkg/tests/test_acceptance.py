"""Acceptance criteria 1-10, each at its stated tolerance.

Criteria 5-10 share one scripted pipeline run (``pipeline_run`` in conftest);
criterion 10 runs the pipeline a second time and compares every output file.
Each test records a one-line verdict that is printed in the terminal summary.
"""

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE
from controlpe.adapter import MergeSpec, Mode, delta, init_adapter, merge, scaled_delta
from controlpe.distill import verify_distillation
from controlpe.gradcheck import check_gradients, small_model
from controlpe.harness import teacher_generations
from controlpe.model import ModelConfig, forward, init_weights
from controlpe.pipeline import SWEEP_GRID, run_pipeline
from controlpe.tasks import refusal_stats

WEIGHTS = (-0.5, 0.0, 0.3, 0.7, 1.0, 1.5)
TOY = ModelConfig(vocab_size=63)


def verdict(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def random_adapters(base, count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        ad = init_adapter(base.config, int(rng.integers(1, 9)), seed=i, base_hash=base.hash_hex)
        # half "trained" (random B), half fresh from init
        if i % 2 == 0:
            ad = ad.with_factors([rng.normal(0, 0.2, a.shape) for a in ad.A],
                                 [rng.normal(0, 0.2, b.shape) for b in ad.B])
        out.append(ad)
    return out


def test_1_weight_space_laws():
    t0 = time.perf_counter()
    base = init_weights(TOY, 0)
    worst_lin = worst_quad = 0.0
    for ad in random_adapters(base, 20):
        for target in ad.targets:
            d = delta(ad, target).astype(np.float64)
            for w in WEIGHTS:
                lin = scaled_delta(ad, target, MergeSpec(w, Mode.DOWN_ONLY))
                quad = scaled_delta(ad, target, MergeSpec(w, Mode.BOTH))
                worst_lin = max(worst_lin, float(np.abs(lin - w * d).max()))
                worst_quad = max(worst_quad, float(np.abs(quad - w * w * d).max()))
    secs = time.perf_counter() - t0
    verdict(1, worst_lin <= 1e-6 and worst_quad <= 1e-6 and secs < 10,
            f"max|down - w*delta|={worst_lin:.2e}, max|both - w^2*delta|={worst_quad:.2e}, {secs:.1f}s")


def test_2_endpoint_identities():
    t0 = time.perf_counter()
    base = init_weights(TOY, 1)
    tokens = np.random.default_rng(0).integers(0, 63, 20)
    ref = forward(base, tokens)
    zero_ok = ones_ok = inert_ok = True
    for ad in random_adapters(base, 6, seed=1):
        for mode in Mode:
            zero_ok &= merge(base, [(ad, MergeSpec(0.0, mode))]).payload() == base.payload()
        a = merge(base, [(ad, MergeSpec(1.0, Mode.DOWN_ONLY))])
        b = merge(base, [(ad, MergeSpec(1.0, Mode.BOTH))])
        ones_ok &= a.payload() == b.payload()
    fresh = init_adapter(TOY, 4, seed=3, base_hash=base.hash_hex)
    for w in WEIGHTS:
        for mode in Mode:
            spec = MergeSpec(w, mode)
            inert_ok &= np.array_equal(forward(merge(base, [(fresh, spec)]), tokens), ref)
            inert_ok &= np.array_equal(forward(base, tokens, live_adapters=[(fresh, spec)]), ref)
    secs = time.perf_counter() - t0
    verdict(2, zero_ok and ones_ok and inert_ok and secs < 10,
            f"w=0 byte-identical={zero_ok}, modes equal at w=1={ones_ok}, zero-init inert={inert_ok}, {secs:.1f}s")


def test_3_merge_live_equivalence():
    base = init_weights(TOY, 2)
    rng = np.random.default_rng(3)
    worst = 0.0
    for ad in random_adapters(base, 20, seed=4):
        spec = MergeSpec(float(rng.uniform(-1.0, 2.0)), Mode.BOTH if rng.random() < 0.5 else Mode.DOWN_ONLY)
        tokens = rng.integers(0, 63, int(rng.integers(2, 40)))
        diff = np.abs(forward(merge(base, [(ad, spec)]), tokens) - forward(base, tokens, [(ad, spec)])).max()
        worst = max(worst, float(diff))
    verdict(3, worst < 1e-4, f"max abs logit diff over 20 triples = {worst:.2e}")


def test_4_gradient_correctness():
    t0 = time.perf_counter()
    results = check_gradients(small_model(0), seed=0, max_coords=None)
    worst = max(results, key=lambda r: r.rel_error)
    secs = time.perf_counter() - t0
    coords = sum(r.n_coords for r in results)
    verdict(4, worst.rel_error < 1e-3 and secs < 60,
            f"{len(results)} tensors, {coords} coords, worst {worst.name} rel err {worst.rel_error:.2e}, {secs:.1f}s")


def test_5_distillation_fidelity(pipeline_run):
    run = pipeline_run
    corpus = run.corpora["verbosity"]
    inputs = [corpus.vocab.encode(e.x) for e in corpus.examples]
    rep = verify_distillation(run.bases["joint"], run.adapters["verbosity"], corpus.template, None, inputs,
                              MergeSpec(1.0), 32)
    verdict(5, rep.n == 200 and rep.exact_match_rate >= 0.9,
            f"exact match vs prompted teacher {rep.exact_match_rate:.3f} (edit sim {rep.mean_edit_similarity:.3f}) "
            f"on {rep.n} held-out inputs")


def test_6_length_control(pipeline_run):
    sw = pipeline_run.sweeps["verbosity_down"]
    lengths = sw.series("mean_length")
    rho = spearmanr(sw.grid, lengths).statistic
    ratio = lengths[-1] / lengths[0]
    verdict(6, list(sw.grid) == list(SWEEP_GRID) and ratio <= 0.6 and rho <= -0.9,
            f"lengths {[round(x, 2) for x in lengths]}, w=1/w=0 ratio {ratio:.3f}, spearman {rho:.3f}")


def test_7_refusal_control(pipeline_run):
    run = pipeline_run
    sw = run.sweeps["refusal_down"]
    corpus = run.corpora["refusal"]
    teacher = teacher_generations(run.bases["joint"], corpus, 32)
    t_rate = refusal_stats([corpus.vocab.decode(g) for g in teacher], corpus.examples).refusal_rate
    rates = sw.series("refusal_rate")
    drops = [a - b for a, b in zip(rates, rates[1:]) if b < a]
    monotone = len(drops) <= 1 and all(d <= 0.05 for d in drops)
    reported = all("refusal_precision" in r and "refusal_recall" in r for r in sw.records)
    ok = rates[0] < 0.05 and abs(rates[-1] - t_rate) <= 0.10 and monotone and reported
    verdict(7, ok, f"rates {[round(r, 3) for r in rates]}, teacher {t_rate:.3f}, "
                   f"precision {[None if p is None else round(p, 3) for p in sw.series('refusal_precision')]}, "
                   f"recall {[round(r, 3) for r in sw.series('refusal_recall')]}")


def test_8_scratchpad(pipeline_run):
    sw = pipeline_run.sweeps["scratchpad_down"]
    acc = sw.series("accuracy")
    gain = acc[-1] - acc[0]
    peak = sw.grid[int(np.argmax(acc))]
    verdict(8, len(acc) == 11 and gain >= 0.10,
            f"accuracy curve {[round(a, 3) for a in acc]}, w=1 minus w=0 = {gain:.3f}, peak at w={peak}")


def test_9_fusion(pipeline_run):
    run = pipeline_run
    fus = run.fusion
    lengths = np.array([[c["mean_length"] for c in row] for row in fus.cells])
    rates = np.array([[c["refusal_rate"] for c in row] for row in fus.cells])
    # rows index w1 (length adapter), columns w2 (refusal adapter)
    rho_len = [spearmanr(fus.grid1, lengths[:, j]).statistic for j in range(len(fus.grid2))]
    rho_ref = [spearmanr(fus.grid2, rates[i, :]).statistic for i in range(len(fus.grid1))]
    single_len = run.sweeps["verbosity_on_refusal_down"].records
    single_ref = run.sweeps["refusal_down"].records
    metrics = ("mean_length", "refusal_rate", "refusal_precision", "refusal_recall")
    marginal = all(fus.cell(w, 0.0)[m] == single_len[i][m] and fus.cell(0.0, w)[m] == single_ref[i][m]
                   for i, w in enumerate(SWEEP_GRID) for m in metrics)
    ok = (all(r <= -0.8 for r in rho_len) and all(r >= 0.8 for r in rho_ref) and marginal)
    verdict(9, ok, f"length rho per w2 {[round(r, 2) for r in rho_len]}, refusal rho per w1 "
                   f"{[round(r, 2) for r in rho_ref]}, zero-weight cells match sweeps={marginal}")


def test_10_reproducibility(pipeline_run, tmp_path_factory):
    first = pipeline_run
    second = run_pipeline(tmp_path_factory.mktemp("run_b"), seed=0)
    names = [p.name for p in first.files]
    assert names == [p.name for p in second.files]
    differing = [n for n, a, b in zip(names, first.files, second.files) if a.read_bytes() != b.read_bytes()]
    slowest = max(first.seconds, second.seconds)
    verdict(10, not differing and slowest < 30 * 60,
            f"{len(names)} files byte-identical={not differing} {differing or ''}, "
            f"runs took {first.seconds:.0f}s and {second.seconds:.0f}s")
