"""Closed task vocabulary and prompt templates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

CONTROL_TOKENS = ("PAD", "BOS", "SEP", "EOS", "SHORT", "REFUSE", "STEP", "NOANS", "CTX", "Q")
DIGITS = tuple(str(i) for i in range(10))
ARITH_TOKENS = DIGITS + ("+", "=", "carry")
PAYLOAD_TOKENS = tuple("abcdefghijklmnop")
KEY_TOKENS = tuple(f"K{i}" for i in range(12))
VALUE_TOKENS = tuple(f"V{i}" for i in range(12))


class Vocab:
    """Bidirectional token <-> id map with dense ids."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocab":
        return cls(CONTROL_TOKENS + ARITH_TOKENS + PAYLOAD_TOKENS + KEY_TOKENS + VALUE_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __getitem__(self, token: str) -> int:
        return self._ids[token]

    def encode(self, tokens: str | Iterable[str]) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        try:
            return [self._ids[t] for t in tokens]
        except KeyError as e:
            raise ValueError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def decode_str(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))


@dataclass(frozen=True)
class PromptTemplate:
    """``prefix + [target prompt] + input + separator``, all as token ids."""

    name: str
    prefix: tuple[int, ...]
    target: tuple[int, ...]
    separator: tuple[int, ...]
    max_len: int = 96

    def render(self, x: Sequence[int], include_target: bool) -> list[int]:
        return render_prompt(self, include_target, x)


def render_prompt(template: PromptTemplate, include_target: bool, x: Sequence[int]) -> list[int]:
    out = list(template.prefix)
    if include_target:
        out += template.target
    out += list(x)
    out += template.separator
    if len(out) > template.max_len:
        raise ValueError(f"rendered prompt has {len(out)} tokens, limit is {template.max_len}")
    return out


def task_template(task: str, vocab: Vocab, max_len: int = 96) -> PromptTemplate:
    """Template for one of the three tasks, with its target prompt in the slot."""
    target = {"verbosity": "SHORT", "refusal": "REFUSE", "scratchpad": "STEP"}
    if task not in target:
        raise ValueError(f"unknown task {task!r}")
    return PromptTemplate(task, (vocab["BOS"],), (vocab[target[task]],), (vocab["SEP"],), max_len)
