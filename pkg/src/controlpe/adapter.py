"""LoRA adapters and merging-weight algebra.

An adapter stores, per targeted projection, a down factor ``A [r, d]`` and an
up factor ``B [d, r]``; its weight update is ``B @ A``. A merging weight ``w``
scales the update either through ``A`` alone (linear in ``w``) or through both
factors (quadratic in ``w``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import container
from .model import ModelConfig, TransformerWeights, proj_name
from .numerics import DTYPE, ShapeError, fnv1a64

Target = tuple[int, str]
ADAPTER_KINDS = ("query", "value")
A_INIT_STD = 0.02


class Mode(str, enum.Enum):
    DOWN_ONLY = "down"
    BOTH = "both"


@dataclass(frozen=True)
class MergeSpec:
    weight: float
    mode: Mode = Mode.DOWN_ONLY

    def __post_init__(self):
        if not math.isfinite(self.weight):
            raise ValueError("merging weight must be finite")
        object.__setattr__(self, "mode", Mode(self.mode))


class IncompatibleAdapter(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    rank: int
    d_model: int
    targets: tuple[Target, ...]
    A: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    # hex payload hash of the base model; None for an adapter not yet bound to one
    base_hash: str | None = None
    task: str = ""
    target_prompt: str = ""
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.rank < self.d_model:
            raise ValueError(f"rank must satisfy 1 <= r < d_model, got r={self.rank}, d_model={self.d_model}")
        targets = tuple((int(l), str(k)) for l, k in self.targets)
        if len(set(targets)) != len(targets):
            raise ValueError("duplicate adapter targets")
        if len(self.A) != len(targets) or len(self.B) != len(targets):
            raise ShapeError("one A and one B factor required per target")
        As, Bs = [], []
        for t, a, b in zip(targets, self.A, self.B):
            if t[1] not in ADAPTER_KINDS or t[0] < 0:
                raise ValueError(f"invalid adapter target {t}")
            a = np.array(a, dtype=DTYPE)
            b = np.array(b, dtype=DTYPE)
            if a.shape != (self.rank, self.d_model) or b.shape != (self.d_model, self.rank):
                raise ShapeError(f"target {t}: A {a.shape} / B {b.shape} inconsistent with r={self.rank}, d={self.d_model}")
            a.flags.writeable = False
            b.flags.writeable = False
            As.append(a)
            Bs.append(b)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "A", tuple(As))
        object.__setattr__(self, "B", tuple(Bs))
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(targets)})

    def factors(self, target: Target) -> tuple[np.ndarray, np.ndarray]:
        try:
            i = self._index[tuple(target)]
        except KeyError:
            raise KeyError(f"target {target} not in adapter targets {self.targets}") from None
        return self.A[i], self.B[i]

    def with_factors(self, A: Sequence[np.ndarray], B: Sequence[np.ndarray], **meta) -> "LoraAdapter":
        kw = dict(base_hash=self.base_hash, task=self.task, target_prompt=self.target_prompt)
        kw.update(meta)
        return LoraAdapter(self.rank, self.d_model, self.targets, tuple(A), tuple(B), **kw)

    def payload(self) -> bytes:
        return b"".join(np.ascontiguousarray(m, dtype="<f4").tobytes()
                        for a, b in zip(self.A, self.B) for m in (a, b))

    @property
    def hash_hex(self) -> str:
        return f"{fnv1a64(self.payload()):016x}"

    def equal(self, other: "LoraAdapter") -> bool:
        return (self.header() == other.header()
                and all(x.tobytes() == y.tobytes() for x, y in zip(self.A + self.B, other.A + other.B)))

    def header(self) -> dict:
        return {
            "rank": self.rank,
            "d_model": self.d_model,
            "targets": [[l, k] for l, k in self.targets],
            "base_model_hash": self.base_hash,
            "task": self.task,
            "target_prompt_text": self.target_prompt,
            "tensors": [[l, k, part, *shape] for (l, k) in self.targets
                        for part, shape in (("A", (self.rank, self.d_model)), ("B", (self.d_model, self.rank)))],
        }


def default_targets(config: ModelConfig) -> list[Target]:
    return [(i, k) for i in range(config.n_layers) for k in ADAPTER_KINDS]


def init_adapter(config: ModelConfig, r: int, targets: Iterable[Target] | None = None, seed: int = 0,
                 base_hash: str | None = None, task: str = "", target_prompt: str = "") -> LoraAdapter:
    """Gaussian ``A`` (std 0.02), zero ``B``: the update starts at exactly zero."""
    targets = list(default_targets(config) if targets is None else targets)
    for layer, kind in targets:
        if not 0 <= layer < config.n_layers or kind not in ADAPTER_KINDS:
            raise ValueError(f"invalid target ({layer}, {kind!r}) for a {config.n_layers}-layer model")
    if not 1 <= r < config.d_model:
        raise ValueError(f"rank must satisfy 1 <= r < d_model, got {r}")
    rng = np.random.default_rng([seed, 2])
    A = [rng.normal(0.0, A_INIT_STD, (r, config.d_model)).astype(DTYPE) for _ in targets]
    B = [np.zeros((config.d_model, r), dtype=DTYPE) for _ in targets]
    return LoraAdapter(r, config.d_model, tuple(targets), tuple(A), tuple(B), base_hash, task, target_prompt)


def delta(adapter: LoraAdapter, target: Target) -> np.ndarray:
    A, B = adapter.factors(target)
    return (B.astype(np.float64) @ A.astype(np.float64)).astype(DTYPE)


def scaled_delta(adapter: LoraAdapter, target: Target, spec: MergeSpec) -> np.ndarray:
    """``B @ (w A)`` for down-only weighting, ``(w B) @ (w A)`` for both."""
    A, B = adapter.factors(target)
    w = float(spec.weight)
    A64 = w * A.astype(np.float64)
    B64 = B.astype(np.float64)
    if spec.mode is Mode.BOTH:
        B64 = w * B64
    return (B64 @ A64).astype(DTYPE)


def check_compatible(weights: TransformerWeights, adapter: LoraAdapter) -> None:
    cfg = weights.config
    if adapter.d_model != cfg.d_model:
        raise IncompatibleAdapter(f"adapter d_model {adapter.d_model} != model d_model {cfg.d_model}")
    for layer, _ in adapter.targets:
        if layer >= cfg.n_layers:
            raise IncompatibleAdapter(f"adapter targets layer {layer} of a {cfg.n_layers}-layer model")
    if adapter.base_hash is not None and adapter.base_hash != weights.origin_hash_hex:
        raise IncompatibleAdapter(
            f"adapter trained on different base (adapter base {adapter.base_hash}, model {weights.origin_hash_hex})")


def merge(weights: TransformerWeights, applications: Sequence[tuple[LoraAdapter, MergeSpec]]) -> TransformerWeights:
    """Fold scaled adapter updates into a new weight set; ``weights`` is untouched."""
    sums: dict[str, np.ndarray] = {}
    for adapter, spec in applications:
        check_compatible(weights, adapter)
        for target in adapter.targets:
            A, B = adapter.factors(target)
            if spec.weight == 0 or not np.any(B):
                continue
            d = scaled_delta(adapter, target, spec).astype(np.float64)
            name = proj_name(*target)
            sums[name] = d if name not in sums else sums[name] + d
    if not sums:
        return weights
    updates = {name: (weights[name].astype(np.float64) + d).astype(DTYPE) for name, d in sums.items()}
    return weights.replace(updates, origin=weights.origin_hash)


def save_adapter(adapter: LoraAdapter, path) -> None:
    tensors = [m for a, b in zip(adapter.A, adapter.B) for m in (a, b)]
    container.write_bytes(path, container.encode(container.ADAPTER_MAGIC, adapter.header(), tensors))


def adapter_from_bytes(data: bytes) -> LoraAdapter:
    header, arrays, _ = container.decode(container.ADAPTER_MAGIC, data)
    try:
        return LoraAdapter(
            int(header["rank"]), int(header["d_model"]),
            tuple((int(l), str(k)) for l, k in header["targets"]),
            tuple(arrays[0::2]), tuple(arrays[1::2]),
            header["base_model_hash"], header["task"], header["target_prompt_text"])
    except (KeyError, ValueError) as e:
        raise container.ContainerError("bad_header", str(e)) from None


def load_adapter(path) -> LoraAdapter:
    return adapter_from_bytes(container.read_bytes(path))
