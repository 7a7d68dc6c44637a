"""Minimal decoder-only transformer with hand-derived gradients.

Pre-norm blocks: RMSNorm -> causal multi-head attention -> residual,
RMSNorm -> ReLU feed-forward -> residual. Rotary position encoding on
queries and keys; no learned position table.
Projection matrices are stored ``[d_out, d_in]`` and applied as ``x @ W.T``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import container
from .text import Vocab
from .numerics import (DTYPE, NonFiniteError, AdamState, adam_step, cross_entropy_with_grad,
                       fnv1a64, rms_norm, rms_norm_backward)

log = logging.getLogger(__name__)

PROJECTIONS = ("query", "key", "value", "output")
NORM_EPS = 1e-5
MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 96
    d_ff: int = 256
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len, self.d_ff) < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    def shapes(self) -> list[tuple[str, tuple[int, int]]]:
        """Ordered tensor manifest ``(name, (rows, cols))``."""
        d, V = self.d_model, self.vocab_size
        out = [("tok_emb", (V, d))]
        for i in range(self.n_layers):
            out.append((f"layers.{i}.attn_norm", (1, d)))
            out += [(proj_name(i, p), (d, d)) for p in PROJECTIONS]
            out += [(f"layers.{i}.ffn_norm", (1, d)),
                    (f"layers.{i}.ffn_up", (self.d_ff, d)),
                    (f"layers.{i}.ffn_down", (d, self.d_ff))]
        out += [("final_norm", (1, d)), ("unembed", (V, d))]
        return out


def proj_name(layer: int, kind: str) -> str:
    if kind not in PROJECTIONS:
        raise ValueError(f"unknown projection kind {kind!r}")
    return f"layers.{layer}.{kind}"


class TransformerWeights:
    """Immutable named parameter set. Arrays are read-only views."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray], origin: int | None = None):
        expected = dict(config.shapes())
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ValueError(f"tensor names do not match config (missing {sorted(missing)}, extra {sorted(extra)})")
        self.config = config
        self._t: dict[str, np.ndarray] = {}
        for name, shape in config.shapes():
            a = np.array(tensors[name], dtype=DTYPE, copy=True)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{name} has non-finite entries")
            a.flags.writeable = False
            self._t[name] = a
        self._hash: int | None = None
        # payload hash of the base these weights were merged from, if any
        self.origin = origin

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def names(self) -> list[str]:
        return [n for n, _ in self.config.shapes()]

    def projection(self, layer: int, kind: str) -> np.ndarray:
        return self._t[proj_name(layer, kind)]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._t.items()}

    def replace(self, updates: Mapping[str, np.ndarray], origin: int | None = None) -> "TransformerWeights":
        t = dict(self._t)
        t.update(updates)
        return TransformerWeights(self.config, t, origin)

    def payload(self) -> bytes:
        return b"".join(self._t[n].astype("<f4").tobytes() for n in self.names())

    @property
    def hash(self) -> int:
        if self._hash is None:
            self._hash = fnv1a64(self.payload())
        return self._hash

    @property
    def hash_hex(self) -> str:
        return f"{self.hash:016x}"

    @property
    def origin_hash(self) -> int:
        return self.hash if self.origin is None else self.origin

    @property
    def origin_hash_hex(self) -> str:
        return f"{self.origin_hash:016x}"

    def equal(self, other: "TransformerWeights") -> bool:
        """Bitwise equality of all tensors."""
        return self.config == other.config and all(
            self._t[n].tobytes() == other[n].tobytes() for n in self.names())


def rotary_tables(T: int, d_head: int, dtype=DTYPE) -> tuple[np.ndarray, np.ndarray]:
    """``cos`` and ``sin`` tables ``[T, d_head]`` (half-split layout)."""
    freq = 10000.0 ** (-np.arange(0, d_head, 2) / d_head)
    ang = np.arange(T)[:, None] * freq[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(y):
    h = y.shape[-1] // 2
    return np.concatenate([y[..., h:], -y[..., :h]], axis=-1)


def _rope(x, cos, sin):
    return x * cos + _rotate_half(x) * sin


def _rope_backward(dy, cos, sin):
    return dy * cos + _rotate_half_t(dy * sin)


def init_weights(config: ModelConfig, seed: int | None = None) -> TransformerWeights:
    """Fan-in scaled Gaussian matrices, unit norm gains, unit-variance embeddings."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors = {}
    for name, shape in config.shapes():
        if name.endswith("_norm"):
            tensors[name] = np.ones(shape, dtype=DTYPE)
        elif name == "tok_emb":
            tensors[name] = rng.normal(0.0, 1.0, shape).astype(DTYPE)
        else:
            std = 1.0 / math.sqrt(shape[1])
            if name.endswith((".output", ".ffn_down")):
                std /= math.sqrt(2 * config.n_layers)
            tensors[name] = rng.normal(0.0, std, shape).astype(DTYPE)
    return TransformerWeights(config, tensors)


def save_model(weights: TransformerWeights, vocab: Vocab, path) -> None:
    cfg = weights.config
    if len(vocab) > cfg.vocab_size:
        raise ValueError("vocabulary larger than model vocab_size")
    header = {
        "config": cfg.to_dict(),
        "vocab": list(vocab.tokens),
        "tensors": [[n, *shape] for n, shape in cfg.shapes()],
    }
    if weights.origin is not None:
        header["merged_from"] = f"{weights.origin:016x}"
    data = container.encode(container.MODEL_MAGIC, header, [weights[n] for n in weights.names()])
    container.write_bytes(path, data)


def load_model(path) -> tuple[TransformerWeights, Vocab]:
    header, arrays, payload_hash = container.decode(container.MODEL_MAGIC, container.read_bytes(path))
    try:
        cfg = ModelConfig(**header["config"])
        names = [e[0] for e in header["tensors"]]
        if names != [n for n, _ in cfg.shapes()]:
            raise ValueError("tensor manifest does not match config")
        origin = int(header["merged_from"], 16) if "merged_from" in header else None
        weights = TransformerWeights(cfg, dict(zip(names, arrays)), origin)
        vocab = Vocab(header["vocab"])
    except (KeyError, TypeError, ValueError) as e:
        raise container.ContainerError("bad_header", str(e)) from None
    weights._hash = payload_hash
    return weights, vocab


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _project(h, W, name, deltas, lora, cache):
    out = h @ W.T
    if deltas and name in deltas:
        out = out + h @ deltas[name].T
    if lora and name in lora:
        A, B = lora[name]
        z = h @ A.T
        cache[name + ".z"] = z
        out = out + z @ B.T
    return out


def forward_core(params: Mapping[str, np.ndarray], config: ModelConfig, tokens: np.ndarray,
                 deltas: Mapping[str, np.ndarray] | None = None,
                 lora: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
                 keep_cache: bool = False):
    """Batched forward on ``tokens [B, T]``. Returns ``(logits [B, T, V], cache)``.

    ``deltas`` maps projection names to additive weight updates; ``lora`` maps
    projection names to trainable ``(A, B)`` factors applied as ``x A^T B^T``.
    """
    Bn, T = tokens.shape
    H, D = config.n_heads, config.d_head
    cache: dict = {"tokens": tokens, "layers": []}
    x = params["tok_emb"][tokens]
    cos, sin = rotary_tables(T, D, x.dtype)
    causal = np.triu(np.full((T, T), MASK_VALUE, dtype=x.dtype), k=1)
    scale = 1.0 / math.sqrt(D)
    for i in range(config.n_layers):
        c: dict = {}
        g1 = params[f"layers.{i}.attn_norm"]
        h = rms_norm(x, g1, NORM_EPS)
        q = _project(h, params[proj_name(i, "query")], proj_name(i, "query"), deltas, lora, c)
        k = _project(h, params[proj_name(i, "key")], proj_name(i, "key"), deltas, lora, c)
        v = _project(h, params[proj_name(i, "value")], proj_name(i, "value"), deltas, lora, c)
        qh = _rope(q.reshape(Bn, T, H, D).transpose(0, 2, 1, 3), cos, sin)
        kh = _rope(k.reshape(Bn, T, H, D).transpose(0, 2, 1, 3), cos, sin)
        vh = v.reshape(Bn, T, H, D).transpose(0, 2, 1, 3)
        s = (qh @ kh.transpose(0, 1, 3, 2)) * np.asarray(scale, dtype=x.dtype) + causal
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        o = (p @ vh).transpose(0, 2, 1, 3).reshape(Bn, T, H * D)
        a = _project(o, params[proj_name(i, "output")], proj_name(i, "output"), deltas, lora, c)
        x_mid = x + a
        g2 = params[f"layers.{i}.ffn_norm"]
        h2 = rms_norm(x_mid, g2, NORM_EPS)
        u = h2 @ params[f"layers.{i}.ffn_up"].T
        r = np.maximum(u, 0)
        x_out = x_mid + r @ params[f"layers.{i}.ffn_down"].T
        if keep_cache:
            c.update(x_in=x, h=h, qh=qh, kh=kh, vh=vh, p=p, o=o, x_mid=x_mid, h2=h2, u=u, r=r)
            cache["layers"].append(c)
        x = x_out
    hf = rms_norm(x, params["final_norm"], NORM_EPS)
    logits = hf @ params["unembed"].T
    if keep_cache:
        cache.update(x_final=x, hf=hf)
    return logits, cache


def _outer(a, b):
    """Sum over all leading axes of ``a_i b_j``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _project_backward(dout, h, W, name, deltas, lora, cache, grads, lora_grads, need_base):
    if need_base:
        grads[name] = _outer(dout, h)
    Weff = W if not (deltas and name in deltas) else W + deltas[name]
    dh = dout @ Weff
    if lora and name in lora:
        A, B = lora[name]
        dz = dout @ B
        dA = _outer(dz, h)
        dB = _outer(dout, cache[name + ".z"])
        lora_grads[name] = (dA, dB)
        dh = dh + dz @ A
    return dh


def backward_core(params, config: ModelConfig, cache, dlogits,
                  deltas=None, lora=None, need_base: bool = True):
    """Gradients for base params (if ``need_base``) and LoRA factors ``{name: (dA, dB)}``."""
    grads: dict[str, np.ndarray] = {}
    lora_grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    Bn, T = cache["tokens"].shape
    H, D = config.n_heads, config.d_head
    scale = 1.0 / math.sqrt(D)
    if need_base:
        grads["unembed"] = _outer(dlogits, cache["hf"])
    dhf = dlogits @ params["unembed"]
    dx, gg = rms_norm_backward(dhf, cache["x_final"], params["final_norm"], NORM_EPS)
    if need_base:
        grads["final_norm"] = gg.reshape(1, -1)
    for i in reversed(range(config.n_layers)):
        c = cache["layers"][i]
        down = params[f"layers.{i}.ffn_down"]
        if need_base:
            grads[f"layers.{i}.ffn_down"] = _outer(dx, c["r"])
        dr = dx @ down
        du = dr * (c["u"] > 0)
        if need_base:
            grads[f"layers.{i}.ffn_up"] = _outer(du, c["h2"])
        dh2 = du @ params[f"layers.{i}.ffn_up"]
        dxm, gg = rms_norm_backward(dh2, c["x_mid"], params[f"layers.{i}.ffn_norm"], NORM_EPS)
        if need_base:
            grads[f"layers.{i}.ffn_norm"] = gg.reshape(1, -1)
        dx = dx + dxm
        do = _project_backward(dx, c["o"], params[proj_name(i, "output")], proj_name(i, "output"),
                               deltas, lora, c, grads, lora_grads, need_base)
        doh = do.reshape(Bn, T, H, D).transpose(0, 2, 1, 3)
        p = c["p"]
        dp = doh @ c["vh"].transpose(0, 1, 3, 2)
        dvh = p.transpose(0, 1, 3, 2) @ doh
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * np.asarray(scale, dtype=dp.dtype)
        cos, sin = rotary_tables(T, D, ds.dtype)
        dqh = _rope_backward(ds @ c["kh"], cos, sin)
        dkh = _rope_backward(ds.transpose(0, 1, 3, 2) @ c["qh"], cos, sin)

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(Bn, T, H * D)

        dh = np.zeros_like(c["h"])
        for kind, dproj in (("query", merge(dqh)), ("key", merge(dkh)), ("value", merge(dvh))):
            dh = dh + _project_backward(dproj, c["h"], params[proj_name(i, kind)], proj_name(i, kind),
                                        deltas, lora, c, grads, lora_grads, need_base)
        dxi, gg = rms_norm_backward(dh, c["x_in"], params[f"layers.{i}.attn_norm"], NORM_EPS)
        if need_base:
            grads[f"layers.{i}.attn_norm"] = gg.reshape(1, -1)
        dx = dx + dxi
    if need_base:
        tokens = cache["tokens"]
        dtok = np.zeros_like(params["tok_emb"])
        np.add.at(dtok, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads["tok_emb"] = dtok
    return grads, lora_grads


def _check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] < 1:
        raise ValueError("tokens must be a non-empty sequence")
    if t.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {t.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if t.min() < 0 or t.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    return t


def live_deltas(weights: TransformerWeights, live_adapters) -> dict[str, np.ndarray]:
    """Sum scaled adapter updates per targeted projection, without touching ``weights``."""
    from .adapter import check_compatible, scaled_delta

    deltas: dict[str, np.ndarray] = {}
    for adapter, spec in live_adapters or ():
        check_compatible(weights, adapter)
        for target in adapter.targets:
            name = proj_name(*target)
            d = scaled_delta(adapter, target, spec)
            deltas[name] = d if name not in deltas else deltas[name] + d
    return deltas


def forward(weights: TransformerWeights, tokens, live_adapters=None) -> np.ndarray:
    """Logits ``[T, V]`` for a 1-D sequence (``[B, T, V]`` for a 2-D batch)."""
    t = _check_tokens(tokens, weights.config)
    deltas = live_deltas(weights, live_adapters)
    logits, _ = forward_core(weights, weights.config, t, deltas=deltas or None)
    return logits[0] if np.ndim(tokens) == 1 else logits


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def generate_batch(weights: TransformerWeights, prompts: Sequence[Sequence[int]], max_new: int,
                   eos_id: int = 3, pad_id: int = 0, chunk: int = 256) -> list[list[int]]:
    """Greedy decoding for many prompts; each output excludes its prompt.

    Prompts are processed in fixed-size chunks in input order, so results
    depend only on the prompt list and weights.
    """
    cfg = weights.config
    out: list[list[int]] = []
    for start in range(0, len(prompts), chunk):
        group = [list(p) for p in prompts[start:start + chunk]]
        if any(len(p) == 0 for p in group):
            raise ValueError("prompt must be non-empty")
        lens = np.array([len(p) for p in group])
        limit = min(int(lens.max()) + max_new, cfg.max_seq_len)
        if lens.max() > cfg.max_seq_len:
            raise ValueError(f"prompt longer than max_seq_len {cfg.max_seq_len}")
        buf = np.full((len(group), max(limit, int(lens.max()))), pad_id, dtype=np.int64)
        for j, p in enumerate(group):
            buf[j, :len(p)] = p
        gens: list[list[int]] = [[] for _ in group]
        active = np.ones(len(group), dtype=bool)
        for _ in range(max_new):
            rows = np.flatnonzero(active & (lens < cfg.max_seq_len))
            if rows.size == 0:
                break
            T = int(lens[rows].max())
            logits, _ = forward_core(weights, cfg, buf[rows, :T])
            last = logits[np.arange(rows.size), lens[rows] - 1]
            # np.argmax returns the first maximum: ties go to the lowest id
            nxt = np.argmax(last, axis=-1)
            for j, tok in zip(rows, nxt):
                gens[j].append(int(tok))
                buf[j, lens[j]] = tok
                lens[j] += 1
                if tok == eos_id or len(gens[j]) >= max_new:
                    active[j] = False
            active &= lens < cfg.max_seq_len
        out.extend(gens)
    return out


def generate_greedy(weights: TransformerWeights, prompt_tokens: Sequence[int], max_new: int,
                    eos_id: int = 3) -> list[int]:
    if len(prompt_tokens) == 0:
        raise ValueError("prompt must be non-empty")
    if max_new <= 0:
        return []
    return generate_batch(weights, [prompt_tokens], max_new, eos_id=eos_id)[0]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], pad_id: int = 0):
    """Pack ``(input, target)`` pairs into next-token arrays ``(tokens, targets, mask)``.

    The loss mask covers only positions that predict target tokens.
    """
    seqs = [list(x) + list(y) for x, y in pairs]
    T = max(len(s) for s in seqs) - 1
    tokens = np.full((len(seqs), T), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for j, ((x, y), s) in enumerate(zip(pairs, seqs)):
        n = len(s) - 1
        tokens[j, :n] = s[:-1]
        targets[j, :n] = s[1:]
        mask[j, len(x) - 1:n] = True
    return tokens, targets, mask


def lr_at(step: int, steps: int, lr: float, warmup: int) -> float:
    """Linear warmup then cosine decay to 10% of ``lr``."""
    if step < warmup:
        return lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, steps - warmup)
    return lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def pretrain(corpus: Sequence[tuple[Sequence[int], Sequence[int]]], config: ModelConfig,
             steps: int, batch_size: int = 32, lr: float = 3e-3, seed: int = 0,
             log_every: int = 0, history: list | None = None) -> TransformerWeights:
    """Train base weights on masked next-token cross-entropy over target positions."""
    if not corpus:
        raise ValueError("empty corpus")
    for x, y in corpus:
        if len(x) + len(y) > config.max_seq_len:
            raise ValueError(f"sequence of length {len(x) + len(y)} exceeds max_seq_len")
        if len(y) == 0:
            raise ValueError("example with empty target")
    weights = init_weights(config, seed)
    if steps == 0:
        return weights
    rng = np.random.default_rng([seed, 1])
    params = weights.to_dict()
    state = AdamState.zeros_like(params)
    order = rng.permutation(len(corpus))
    pos = 0
    warmup = max(1, steps // 20)
    for step in range(steps):
        if pos + batch_size > len(order):
            order = rng.permutation(len(corpus))
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        tokens, targets, mask = make_batch([corpus[i] for i in idx])
        logits, cache = forward_core(params, config, tokens, keep_cache=True)
        loss, dlogits = cross_entropy_with_grad(logits, targets, mask)
        if not math.isfinite(loss):
            raise NonFiniteError(f"pretraining diverged at step {step} (loss={loss})")
        grads, _ = backward_core(params, config, cache, dlogits)
        params, state = adam_step(params, grads, state, lr_at(step, steps, lr, warmup))
        if history is not None:
            history.append(loss)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, loss)
    return TransformerWeights(config, params)
