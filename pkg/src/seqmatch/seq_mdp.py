"""Sequence MDP: token-prefix states, insert/backspace actions, absorbing eos.

Id layout for a vocabulary of K payload tokens::

    0 .. K-1   payload tokens (insert actions)
    K          end-of-sequence (insert action; makes the state terminal)
    K + 1      backspace (action only, never part of a state)
    K + 2      begin-of-sequence (state root only, never an action)

so action ids are exactly ``range(K + 2)`` and index the columns of logit
tables directly. A state is a plain tuple of token ids starting with bos.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

SeqState = tuple[int, ...]

DEFAULT_STATE_BUDGET = 10**6


class StateBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Ordered payload symbols plus the three reserved ids."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary symbols must be distinct")
        if not self.tokens:
            raise ValueError("vocabulary needs at least one payload token")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> int:
        return len(self.tokens)

    @property
    def backspace(self) -> int:
        return len(self.tokens) + 1

    @property
    def bos(self) -> int:
        return len(self.tokens) + 2

    @property
    def n_actions(self) -> int:
        return len(self.tokens) + 2

    @property
    def actions(self) -> range:
        return range(self.n_actions)

    @property
    def insert_tokens(self) -> range:
        """Token ids that may be appended to a state (payload + eos)."""
        return range(len(self.tokens) + 1)

    def is_payload(self, token: int) -> bool:
        return 0 <= token < len(self.tokens)

    def symbol(self, token: int) -> str:
        if self.is_payload(token):
            return self.tokens[token]
        return {self.eos: "<eos>", self.backspace: "<bksp>", self.bos: "<bos>"}.get(token, f"<?{token}>")

    def encode(self, symbols: Iterable[str]) -> list[int]:
        index = {s: i for i, s in enumerate(self.tokens)}
        return [index[s] for s in symbols]

    def render(self, tokens: Iterable[int], sep: str = " ") -> str:
        return sep.join(self.symbol(t) for t in tokens)

    def fingerprint(self) -> str:
        blob = json.dumps(list(self.tokens), ensure_ascii=False).encode()
        return hashlib.sha256(blob).hexdigest()


class Triple(NamedTuple):
    state: SeqState
    action: int
    next_state: SeqState
    # True when next_state is not step(state, action): noise injection or forced eos.
    stochastic: bool = False


@dataclass(frozen=True)
class Trajectory:
    triples: tuple[Triple, ...]
    source: str  # "data" or "model"

    def __post_init__(self):
        if self.source not in ("data", "model"):
            raise ValueError(f"unknown trajectory source {self.source!r}")

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def actions(self) -> list[int]:
        return [t.action for t in self.triples]

    @property
    def states(self) -> list[SeqState]:
        if not self.triples:
            return []
        return [t.state for t in self.triples] + [self.triples[-1].next_state]

    @property
    def final_state(self) -> SeqState | None:
        return self.triples[-1].next_state if self.triples else None

    def terminated(self, vocab: Vocab) -> bool:
        return bool(self.triples) and is_terminal(vocab, self.triples[-1].next_state)

    def transitions(self, vocab: Vocab) -> list[int]:
        """The edits actually realized between consecutive states.

        Equals ``actions`` except on stochastic triples, where the realized
        edit is the injected token or the forced eos.
        """
        out = []
        for t in self.triples:
            if len(t.next_state) < len(t.state):
                out.append(vocab.backspace)
            elif len(t.next_state) > len(t.state):
                out.append(t.next_state[-1])
            else:
                out.append(t.action)
        return out


def initial_state(vocab: Vocab) -> SeqState:
    return (vocab.bos,)


def is_terminal(vocab: Vocab, state: SeqState) -> bool:
    return len(state) > 1 and state[-1] == vocab.eos


def check_state(vocab: Vocab, state: SeqState) -> None:
    if not state or state[0] != vocab.bos:
        raise ValueError("state must start with bos")
    for i, tok in enumerate(state[1:], start=1):
        if tok == vocab.eos and i != len(state) - 1:
            raise ValueError("eos may only appear as the last token")
        if tok != vocab.eos and not vocab.is_payload(tok):
            raise ValueError(f"invalid token id {tok} in state")


def step(vocab: Vocab, state: SeqState, action: int) -> SeqState:
    """Deterministic successor of ``state`` under ``action``.

    Terminal states absorb every action; backspace at the root is a no-op.
    """
    if is_terminal(vocab, state):
        return state
    if action == vocab.backspace:
        return state if len(state) == 1 else state[:-1]
    if not 0 <= action <= vocab.eos:
        raise ValueError(f"invalid action id {action}")
    return state + (action,)


def bounded_step(vocab: Vocab, state: SeqState, action: int, context_len: int) -> SeqState:
    """``step`` under a context cap of ``context_len`` tokens (bos included).

    An insert that would fill the context without eos yields the eos-terminated
    state instead: the action is kept but the next token is forced to eos.
    """
    nxt = step(vocab, state, action)
    if len(nxt) >= context_len and not is_terminal(vocab, nxt):
        return state + (vocab.eos,)
    return nxt


def apply_actions(vocab: Vocab, s0: SeqState, actions: Sequence[int]) -> list[SeqState]:
    states = [s0]
    for a in actions:
        states.append(step(vocab, states[-1], a))
    return states


def count_states(vocab: Vocab, max_len: int) -> int:
    k = vocab.size
    nonterminal = sum(k**n for n in range(max_len + 1))
    terminal = sum(k**n for n in range(max_len))
    return nonterminal + terminal


def enumerate_states(vocab: Vocab, max_len: int, budget: int = DEFAULT_STATE_BUDGET) -> list[SeqState]:
    """All states with at most ``max_len`` tokens after bos, in shortlex order.

    Within one length, states are ordered lexicographically by token id, which
    puts a terminal state after the non-terminal states sharing its prefix.
    """
    if max_len < 0:
        raise ValueError("max_len must be non-negative")
    total = count_states(vocab, max_len)
    if total > budget:
        raise StateBudgetExceeded(f"{total} states exceed the budget of {budget}")
    bos, eos = vocab.bos, vocab.eos
    out: list[SeqState] = [(bos,)]
    for n in range(1, max_len + 1):
        for body in itertools.product(vocab.insert_tokens, repeat=n):
            if eos in body[:-1]:
                continue
            out.append((bos,) + body)
    return out


def trajectory_from_actions(
    vocab: Vocab,
    actions: Sequence[int],
    source: str,
    s0: SeqState | None = None,
    context_len: int | None = None,
) -> Trajectory:
    """Roll ``actions`` forward from ``s0``, stopping at the first terminal state."""
    state = initial_state(vocab) if s0 is None else s0
    triples = []
    for a in actions:
        if is_terminal(vocab, state):
            break
        if context_len is None:
            nxt = step(vocab, state, a)
        else:
            nxt = bounded_step(vocab, state, a, context_len)
        triples.append(Triple(state, a, nxt, nxt != step(vocab, state, a)))
        state = nxt
    return Trajectory(tuple(triples), source)
