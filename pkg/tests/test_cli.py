import re

import numpy as np
import pytest

from controlpe.adapter import init_adapter, save_adapter
from controlpe.cli import main
from controlpe.gradcheck import small_model
from controlpe.model import ModelConfig, init_weights, load_model, save_model
from controlpe.text import Vocab

ERROR_LINE = re.compile(r"^error code=\w+ message=.+$")


@pytest.fixture()
def files(tmp_path):
    vocab = Vocab.default()
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, d_ff=32, max_seq_len=40)
    base = init_weights(cfg, 0)
    save_model(base, vocab, tmp_path / "m.cpem")
    ad = init_adapter(cfg, 2, seed=1, base_hash=base.hash_hex)
    rng = np.random.default_rng(0)
    ad = ad.with_factors(ad.A, [rng.normal(0, 0.5, b.shape) for b in ad.B])
    save_adapter(ad, tmp_path / "a.cpea")
    return tmp_path, base, ad


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_subcommand_prints_usage(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_generate_prints_provenance(files, capsys):
    d, base, ad = files
    code, out, _ = run(["generate", "--model", d / "m.cpem", "--input", "BOS a b SEP", "--max-new", "3",
                        "--adapter", d / "a.cpea", "--weight", "0.5", "--mode", "both"], capsys)
    assert code == 0
    assert f"model_hash={base.hash_hex}" in out and f"adapter1_hash={ad.hash_hex}" in out
    assert len(out.strip().splitlines()[-1].split()) <= 3


def test_merge_then_zero_weight_is_identity(files, capsys):
    d, base, _ = files
    code, out, _ = run(["merge", "--model", d / "m.cpem", "--adapter", d / "a.cpea", "--weight", "0",
                        "--mode", "down", "--out", d / "z.cpem"], capsys)
    assert code == 0
    assert load_model(d / "z.cpem")[0].payload() == base.payload()
    code, _, _ = run(["merge", "--model", d / "m.cpem", "--adapter", d / "a.cpea", "--weight", "1",
                      "--mode", "down", "--out", d / "o.cpem"], capsys)
    assert code == 0 and (d / "o.cpem").read_bytes() != (d / "m.cpem").read_bytes()


def test_corrupt_model_gives_machine_readable_error(files, capsys):
    d, _, _ = files
    data = (d / "m.cpem").read_bytes()
    (d / "bad.cpem").write_bytes(data[:-3])
    code, _, err = run(["generate", "--model", d / "bad.cpem", "--input", "BOS SEP"], capsys)
    assert code != 0
    assert ERROR_LINE.match(err.strip()) and "code=truncated" in err


def test_foreign_adapter_is_rejected(files, capsys):
    d, base, _ = files
    other = init_weights(base.config, 42)
    save_model(other, Vocab.default(), d / "other.cpem")
    code, _, err = run(["merge", "--model", d / "other.cpem", "--adapter", d / "a.cpea", "--weight", "1",
                        "--mode", "down", "--out", d / "x.cpem"], capsys)
    assert code != 0 and "code=provenance_mismatch" in err


def test_sweep_grid_and_extrapolation_guard(files, capsys):
    d, _, _ = files
    args = ["sweep", "--model", d / "m.cpem", "--adapter", d / "a.cpea", "--task", "refusal",
            "--eval-n", "8", "--max-new", "4", "--out", d / "s.csv"]
    code, out, _ = run(args + ["--grid", "0:1:0.25"], capsys)
    assert code == 0 and "grid_points=5" in out
    lines = (d / "s.csv").read_text().splitlines()
    assert lines[0] == "w1,w2,mode,metric,value,n_examples,model_hash,adapter1_hash,adapter2_hash,seed"
    assert {ln.split(",")[0] for ln in lines[1:]} == {"0", "0.25", "0.5", "0.75", "1"}
    code, _, err = run(args + ["--grid", "0:1.5:0.5"], capsys)
    assert code != 0 and "code=bad_grid" in err
    code, out, _ = run(args + ["--grid", "0:1.5:0.5", "--allow-extrapolation"], capsys)
    assert code == 0 and "extrapolated=true" in out


def test_fuse_sweep_row_count(files, capsys):
    d, _, _ = files
    code, _, _ = run(["fuse-sweep", "--model", d / "m.cpem", "--adapter", d / "a.cpea", "--adapter", d / "a.cpea",
                      "--grid", "0:1:0.25", "--task", "refusal", "--eval-n", "6", "--max-new", "3",
                      "--out", d / "f.csv"], capsys)
    assert code == 0
    assert len((d / "f.csv").read_text().splitlines()) == 1 + 25 * 4


def test_grad_check_passes(tmp_path, capsys):
    save_model(small_model(0, vocab_size=63), Vocab.default(), tmp_path / "s.cpem")
    code, out, _ = run(["grad-check", "--model", tmp_path / "s.cpem", "--coords", "6"], capsys)
    assert code == 0 and "max_rel_error=" in out


def test_pretrain_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(["pretrain", "--task", "verbosity", "--seed", "7", "--steps", "5", "--n", "64",
                            "--d-model", "16", "--out", tmp_path / f"{name}.cpem"], capsys)
        assert code == 0 and "model_hash=" in out
    assert (tmp_path / "a.cpem").read_bytes() == (tmp_path / "b.cpem").read_bytes()


def test_distill_train_verify_chain(tmp_path, capsys):
    m, data, ad = tmp_path / "m.cpem", tmp_path / "d.jsonl", tmp_path / "a.cpea"
    assert run(["pretrain", "--task", "verbosity", "--steps", "20", "--n", "128", "--d-model", "16",
                "--out", m], capsys)[0] == 0
    code, out, _ = run(["distill-data", "--model", m, "--task", "verbosity", "--n", "40", "--max-new", "8",
                        "--out", data], capsys)
    assert code == 0 and "examples=" in out
    code, out, _ = run(["train-lora", "--model", m, "--data", data, "--out", ad, "--steps", "5"], capsys)
    assert code == 0 and "adapter_hash=" in out and "loss first=" in out
    code, out, _ = run(["verify", "--model", m, "--adapter", ad, "--task", "verbosity", "--eval-n", "10",
                        "--max-new", "8"], capsys)
    assert code == 0 and re.search(r"exact_match_rate=\d\.\d{6}", out)
