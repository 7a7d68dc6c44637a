import numpy as np
import pytest

from controlpe.adapter import IncompatibleAdapter, Mode, init_adapter
from controlpe.harness import (CSV_COLUMNS, EvalCorpus, check_grid, parse_grid, read_csv, run_fusion_grid,
                               run_sweep, to_csv, write_csv)
from controlpe.model import ModelConfig, init_weights
from controlpe.tasks import TaskSpec, gen_corpus
from controlpe.text import Vocab, task_template

GRID = [0.0, 0.5, 1.0]


@pytest.fixture(scope="module")
def setup():
    vocab = Vocab.default()
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, d_ff=32, max_seq_len=40)
    base = init_weights(cfg, 0)
    rng = np.random.default_rng(0)

    def adapter(seed):
        ad = init_adapter(cfg, 2, seed=seed, base_hash=base.hash_hex)
        return ad.with_factors([rng.normal(0, 1, a.shape) for a in ad.A], [rng.normal(0, 1, b.shape) for b in ad.B])

    examples = gen_corpus(TaskSpec("refusal", context_size=2, seed=4), 12, False)
    corpus = EvalCorpus("refusal", examples, task_template("refusal", vocab, 40), vocab, 4)
    return base, adapter(1), adapter(2), corpus


def test_parse_grid_includes_endpoints():
    assert parse_grid("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert parse_grid("0:1:0.1")[-1] == 1.0 and len(parse_grid("0:1:0.1")) == 11
    for bad in ("0:1", "1:0:0.1", "0:1:0", "a:b:c"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_check_grid():
    assert check_grid([0, 1]) == [0.0, 1.0]
    for bad in ([], [0.5, 0.5], [1.0, 0.0], [0.0, float("inf")]):
        with pytest.raises(ValueError):
            check_grid(bad)
    with pytest.raises(ValueError, match="extrapolation"):
        check_grid([0.0, 1.5], allow_extrapolation=False)


def test_sweep_records_every_point(setup):
    base, a1, _, corpus = setup
    res = run_sweep(base, a1, GRID, Mode.DOWN_ONLY, corpus, max_new=8)
    assert len(res.records) == 3 and res.n_examples == 12
    assert set(res.records[0]) == {"mean_length", "refusal_rate", "refusal_precision", "refusal_recall",
                                   "accuracy", "exact_match_vs_teacher"}
    assert res.model_hash == base.hash_hex and not res.extrapolated
    assert run_sweep(base, a1, GRID, Mode.DOWN_ONLY, corpus, max_new=8, workers=3).records == res.records
    assert run_sweep(base, a1, [-0.5, 0.0], "down", corpus, max_new=4).extrapolated


def test_sweep_rejects_foreign_adapter(setup):
    base, a1, _, corpus = setup
    with pytest.raises(IncompatibleAdapter):
        run_sweep(init_weights(base.config, 5), a1, GRID, Mode.DOWN_ONLY, corpus, max_new=4)


def test_fusion_zero_rows_match_single_sweeps(setup):
    base, a1, a2, corpus = setup
    fus = run_fusion_grid(base, a1, a2, GRID, GRID, Mode.DOWN_ONLY, corpus, max_new=8)
    s1 = run_sweep(base, a1, GRID, Mode.DOWN_ONLY, corpus, max_new=8)
    s2 = run_sweep(base, a2, GRID, Mode.DOWN_ONLY, corpus, max_new=8)
    for i, w in enumerate(GRID):
        for m in ("mean_length", "refusal_rate", "refusal_recall"):
            assert fus.cell(w, 0.0)[m] == s1.records[i][m]
            assert fus.cell(0.0, w)[m] == s2.records[i][m]


def test_csv_layout(tmp_path, setup):
    base, a1, a2, corpus = setup
    res = run_sweep(base, a1, [0.0, 1.0], Mode.BOTH, corpus, max_new=4)
    text = to_csv(res)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    p = tmp_path / "s.csv"
    write_csv(res, p)
    rows = read_csv(p)
    assert len(rows) == 2 * 6
    assert {r["mode"] for r in rows} == {"both"} and rows[0]["w2"] == "" and rows[0]["w1"] == "0"
    assert all(r["value"] == "" or len(r["value"].split(".")[1]) == 6 for r in rows)
    fus = run_fusion_grid(base, a1, a2, [0.0, 1.0], [0.0, 1.0], Mode.DOWN_ONLY, corpus, max_new=4)
    frows = [dict(zip(CSV_COLUMNS, line.split(","))) for line in to_csv(fus).splitlines()[1:]]
    assert len(frows) == 4 * 4 and frows[0]["adapter2_hash"] == a2.hash_hex
