"""Finite-difference checks of the hand-derived transformer and LoRA gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, TransformerWeights, backward_core, forward_core, init_weights, proj_name
from .numerics import cross_entropy, cross_entropy_with_grad


@dataclass
class GradCheck:
    name: str
    rel_error: float
    n_coords: int


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-10)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def perturbed_params(weights: TransformerWeights, seed: int = 0, noise: float = 0.3) -> dict[str, np.ndarray]:
    """Float64 copy of ``weights`` with noise added, so gains and ReLUs are not at special points."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in weights.names():
        w = weights[name].astype(np.float64)
        out[name] = w + noise * rng.normal(0.0, max(float(np.std(w)), 0.05), w.shape)
    return out


def check_gradients(weights: TransformerWeights, seed: int = 0, batch: int = 2, seq_len: int = 6,
                    rank: int = 2, max_coords: int | None = 24, h: float = 1e-5) -> list[GradCheck]:
    """Compare analytic gradients against central differences, tensor by tensor.

    Runs in float64 on a perturbed copy of ``weights`` with random LoRA factors
    on every query/value projection. ``max_coords`` caps the coordinates
    sampled per tensor (``None`` checks all of them).
    """
    cfg = weights.config
    rng = np.random.default_rng([seed, 11])
    params = perturbed_params(weights, seed)
    T = min(seq_len, cfg.max_seq_len)
    tokens = rng.integers(0, cfg.vocab_size, (batch, T))
    targets = rng.integers(0, cfg.vocab_size, (batch, T))
    mask = rng.random((batch, T)) < 0.7
    mask[0, -1] = True
    lora = {proj_name(i, k): (rng.normal(0, 0.3, (rank, cfg.d_model)), rng.normal(0, 0.3, (cfg.d_model, rank)))
            for i in range(cfg.n_layers) for k in ("query", "value")}

    def loss(p, lo):
        return cross_entropy(forward_core(p, cfg, tokens, lora=lo)[0], targets, mask)

    logits, cache = forward_core(params, cfg, tokens, lora=lora, keep_cache=True)
    _, dlogits = cross_entropy_with_grad(logits, targets, mask)
    grads, lgrads = backward_core(params, cfg, cache, dlogits, lora=lora)

    def sampled_fd(arr, set_and_eval, n):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size) if n is None or n >= flat.size else rng.choice(flat.size, n, replace=False)
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = set_and_eval()
            flat[i] = orig - h
            down = set_and_eval()
            flat[i] = orig
            fd[j] = (up - down) / (2 * h)
        return idx, fd

    results = []
    for name in weights.names():
        arr = params[name]
        idx, fd = sampled_fd(arr, lambda: loss(params, lora), max_coords)
        results.append(GradCheck(name, _rel(grads[name].reshape(-1)[idx], fd), idx.size))
    for name, (A, B) in lora.items():
        for part, arr, g in (("A", A, lgrads[name][0]), ("B", B, lgrads[name][1])):
            idx, fd = sampled_fd(arr, lambda: loss(params, lora), max_coords)
            results.append(GradCheck(f"{name}.lora_{part}", _rel(g.reshape(-1)[idx], fd), idx.size))
    return results


def small_model(seed: int = 0, vocab_size: int = 16, d_model: int = 16, n_layers: int = 2) -> TransformerWeights:
    cfg = ModelConfig(vocab_size=vocab_size, d_model=d_model, n_layers=n_layers, n_heads=4,
                      max_seq_len=16, d_ff=4 * d_model, seed=seed)
    return init_weights(cfg)
