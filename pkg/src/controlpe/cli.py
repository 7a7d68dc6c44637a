"""Command-line entry point: ``python -m controlpe <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .adapter import IncompatibleAdapter, MergeSpec, Mode, load_adapter, merge, save_adapter
from .container import ContainerError
from .distill import ProvenanceError, load_dataset, save_dataset, train_lora, verify_distillation
from .gradcheck import check_gradients
from .harness import check_grid, parse_grid, run_fusion_grid, run_sweep, write_csv
from .model import generate_greedy, load_model, save_model
from .numerics import NonFiniteError
from .text import task_template

GRAD_TOL = 1e-3


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _provenance(**hashes) -> None:
    print("provenance " + " ".join(f"{k}={v}" for k, v in hashes.items()))


def cmd_pretrain(a) -> None:
    weights, vocab = pipeline.pretrain_base(a.task, seed=a.seed, steps=a.steps, d_model=a.d_model,
                                            n_layers=a.layers, n=a.n)
    save_model(weights, vocab, a.out)
    _provenance(model_hash=weights.hash_hex)


def cmd_distill_data(a) -> None:
    weights, vocab = load_model(a.model)
    _provenance(model_hash=weights.hash_hex)
    data = pipeline.make_distill_dataset(weights, vocab, a.task, a.n, a.seed, a.max_new)
    save_dataset(data, vocab, a.out)
    print(f"examples={len(data)} dropped={data.n_dropped}")


def cmd_train_lora(a) -> None:
    weights, vocab = load_model(a.model)
    data = load_dataset(a.data, vocab, weights.config.max_seq_len)
    _provenance(model_hash=weights.hash_hex, data_teacher_hash=data.teacher_hash)
    hist: list[float] = []
    adapter = train_lora(weights, data, a.rank, None, a.steps, a.batch_size, a.lr, a.seed, history=hist,
                         task=data.template.name, target_prompt=vocab.decode_str(data.target_prompt))
    save_adapter(adapter, a.out)
    if hist:
        print(f"loss first={hist[0]:.6f} last={hist[-1]:.6f}")
    _provenance(adapter_hash=adapter.hash_hex)


def cmd_merge(a) -> None:
    weights, vocab = load_model(a.model)
    adapter = load_adapter(a.adapter)
    _provenance(model_hash=weights.hash_hex, adapter_hash=adapter.hash_hex)
    merged = merge(weights, [(adapter, MergeSpec(a.weight, Mode(a.mode)))])
    save_model(merged, vocab, a.out)
    _provenance(merged_hash=merged.hash_hex)


def cmd_generate(a) -> None:
    weights, vocab = load_model(a.model)
    adapters = a.adapter or []
    ws = a.weight or []
    modes = a.mode or []
    if len(ws) != len(adapters) or len(modes) not in (0, len(adapters)):
        raise CliError("usage", "each --adapter needs a --weight (and optionally a --mode)")
    apps = [(load_adapter(p), MergeSpec(w, Mode(m))) for p, w, m in
            zip(adapters, ws, modes or ["down"] * len(adapters))]
    _provenance(model_hash=weights.hash_hex, **{f"adapter{i + 1}_hash": ad.hash_hex for i, (ad, _) in enumerate(apps)})
    merged = merge(weights, apps)
    out = generate_greedy(merged, vocab.encode(a.input), a.max_new)
    print(vocab.decode_str(out))


def _grid(a):
    try:
        return check_grid(parse_grid(a.grid), getattr(a, "allow_extrapolation", False))
    except ValueError as e:
        raise CliError("bad_grid", str(e)) from None


def cmd_sweep(a) -> None:
    grid = _grid(a)
    weights, vocab = load_model(a.model)
    adapter = load_adapter(a.adapter)
    _provenance(model_hash=weights.hash_hex, adapter_hash=adapter.hash_hex)
    corpus = pipeline.eval_corpus(a.task, vocab, a.eval_n, a.seed, weights.config.max_seq_len)
    result = run_sweep(weights, adapter, grid, Mode(a.mode), corpus, a.max_new)
    write_csv(result, a.out)
    print(f"grid_points={len(grid)} extrapolated={str(result.extrapolated).lower()}")


def cmd_fuse_sweep(a) -> None:
    if len(a.adapter) != 2:
        raise CliError("usage", "fuse-sweep needs exactly two --adapter options")
    grid = _grid(a)
    weights, vocab = load_model(a.model)
    ad1, ad2 = (load_adapter(p) for p in a.adapter)
    _provenance(model_hash=weights.hash_hex, adapter1_hash=ad1.hash_hex, adapter2_hash=ad2.hash_hex)
    corpus = pipeline.eval_corpus(a.task, vocab, a.eval_n, a.seed, weights.config.max_seq_len)
    result = run_fusion_grid(weights, ad1, ad2, grid, grid, Mode(a.mode), corpus, a.max_new)
    write_csv(result, a.out)


def cmd_verify(a) -> None:
    weights, vocab = load_model(a.model)
    adapter = load_adapter(a.adapter)
    _provenance(model_hash=weights.hash_hex, adapter_hash=adapter.hash_hex)
    corpus = pipeline.eval_corpus(a.task, vocab, a.eval_n, a.seed, weights.config.max_seq_len)
    template = task_template(a.task, vocab, weights.config.max_seq_len)
    rep = verify_distillation(weights, adapter, template, None, [vocab.encode(e.x) for e in corpus.examples],
                              MergeSpec(a.weight, Mode(a.mode)), a.max_new)
    print(f"exact_match_rate={rep.exact_match_rate:.6f} mean_edit_similarity={rep.mean_edit_similarity:.6f} n={rep.n}")


def cmd_grad_check(a) -> None:
    weights, _ = load_model(a.model)
    _provenance(model_hash=weights.hash_hex)
    results = check_gradients(weights, seed=a.seed, max_coords=a.coords)
    worst = max(r.rel_error for r in results)
    for r in results:
        print(f"{r.name} rel_error={r.rel_error:.3e} coords={r.n_coords}")
    print(f"max_rel_error={worst:.3e} tolerance={GRAD_TOL:g}")
    if worst >= GRAD_TOL:
        raise CliError("grad_mismatch", f"max relative error {worst:.3e} >= {GRAD_TOL:g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="controlpe", description="Distill prompts into LoRA adapters and weight them.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    d = pipeline.DEFAULTS

    s = sub.add_parser("pretrain", help="train a base model on synthetic task corpora")
    s.add_argument("--task", required=True, help="task or comma-separated tasks (verbosity, refusal, scratchpad)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--d-model", type=int, default=None)
    s.add_argument("--layers", type=int, default=None)
    s.add_argument("--n", type=int, default=None, help="pretraining examples per task")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("distill-data", help="label inputs with the prompted teacher")
    s.add_argument("--model", required=True)
    s.add_argument("--task", required=True, choices=("verbosity", "refusal", "scratchpad"))
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-new", type=int, default=d.max_new)
    s.set_defaults(fn=cmd_distill_data)

    s = sub.add_parser("train-lora", help="distill a dataset into a LoRA adapter")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rank", type=int, default=d.rank)
    s.add_argument("--steps", type=int, default=d.lora_steps)
    s.add_argument("--lr", type=float, default=d.lora_lr)
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train_lora)

    s = sub.add_parser("merge", help="fold a weighted adapter into the base weights")
    s.add_argument("--model", required=True)
    s.add_argument("--adapter", required=True)
    s.add_argument("--weight", type=float, required=True)
    s.add_argument("--mode", choices=("down", "both"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_merge)

    s = sub.add_parser("generate", help="greedy generation from a token prompt")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True, help='prompt tokens, e.g. "BOS a b c SEP"')
    s.add_argument("--adapter", action="append")
    s.add_argument("--weight", type=float, action="append")
    s.add_argument("--mode", choices=("down", "both"), action="append")
    s.add_argument("--max-new", type=int, default=d.max_new)
    s.set_defaults(fn=cmd_generate)

    for name, fn in (("sweep", cmd_sweep), ("fuse-sweep", cmd_fuse_sweep)):
        s = sub.add_parser(name, help="metric curves over merging weights" if name == "sweep"
                           else "two-adapter weight grid")
        s.add_argument("--model", required=True)
        s.add_argument("--adapter", required=True, action="append" if name == "fuse-sweep" else "store")
        s.add_argument("--grid", default="0:1:0.1", help="LO:HI:STEP, endpoints included")
        s.add_argument("--mode", choices=("down", "both"), default="down")
        s.add_argument("--task", required=True, choices=("verbosity", "refusal", "scratchpad"))
        s.add_argument("--eval-n", type=int, default=d.n_eval)
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--max-new", type=int, default=d.max_new)
        s.add_argument("--allow-extrapolation", action="store_true")
        s.set_defaults(fn=fn)

    s = sub.add_parser("verify", help="agreement of the weighted adapter with the prompted teacher")
    s.add_argument("--model", required=True)
    s.add_argument("--adapter", required=True)
    s.add_argument("--task", required=True, choices=("verbosity", "refusal", "scratchpad"))
    s.add_argument("--eval-n", type=int, default=d.n_eval)
    s.add_argument("--weight", type=float, default=1.0)
    s.add_argument("--mode", choices=("down", "both"), default="down")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-new", type=int, default=d.max_new)
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("grad-check", help="finite-difference check of every layer's gradients")
    s.add_argument("--model", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=24, help="coordinates sampled per tensor")
    s.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except CliError as e:
        print(f"error code={e.code} message={e}", file=sys.stderr)
        return 1
    except ContainerError as e:
        print(f"error code={e.code} message={e}", file=sys.stderr)
        return 1
    except (ProvenanceError, IncompatibleAdapter) as e:
        print(f"error code=provenance_mismatch message={e}", file=sys.stderr)
        return 1
    except NonFiniteError as e:
        print(f"error code=non_finite message={e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error code=not_found message={e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error code=invalid message={e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
