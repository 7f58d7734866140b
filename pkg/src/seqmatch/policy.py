"""Tabular logit policies and autoregressive sampling with backspace rollback."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .occupancy import FinitePolicy, context_states, terminal_policy_row
from .seq_mdp import (
    DEFAULT_STATE_BUDGET,
    SeqState,
    Trajectory,
    Triple,
    Vocab,
    bounded_step,
    initial_state,
    is_terminal,
)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[axis] == 0:
        raise ValueError("logsumexp over an empty action set")
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Smallest high-probability prefix with mass >= top_p, renormalized.

    Sorting is stable by probability descending then action id, and the
    boundary element is kept, so ties resolve deterministically.
    """
    if top_p >= 1.0:
        return probs
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p - 1e-12)) + 1
    out = np.zeros_like(probs)
    keep = order[:k]
    out[keep] = probs[keep]
    return out / out.sum()


@dataclass(frozen=True)
class SampleConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_steps: int = 64
    seed: int = 0
    inject_prob: float = 0.0  # random-token injection at generation time

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if not 0.0 <= self.inject_prob <= 1.0:
            raise ValueError("inject_prob must lie in [0, 1]")


@dataclass(eq=False)
class TabularPolicy:
    """One logit row per state reachable under the context cap.

    Rows double as Q-values. Terminal states have rows too; their logsumexp
    is the terminal value used by the eos term of the objective.
    """

    vocab: Vocab
    context_len: int
    logits: np.ndarray
    states: list[SeqState]
    backspace_enabled: bool = True
    state_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.state_index = {s: i for i, s in enumerate(self.states)}
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.shape != (len(self.states), self.vocab.n_actions):
            raise ValueError(f"logit table has shape {self.logits.shape}")
        if not self.backspace_enabled:
            self.logits[:, self.vocab.backspace] = -np.inf

    @classmethod
    def zeros(
        cls,
        vocab: Vocab,
        context_len: int,
        backspace_enabled: bool = True,
        budget: int = DEFAULT_STATE_BUDGET,
    ) -> "TabularPolicy":
        states = context_states(vocab, context_len, budget)
        return cls(vocab, context_len, np.zeros((len(states), vocab.n_actions)), states, backspace_enabled)

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab, self.context_len, self.logits.copy(), self.states, self.backspace_enabled)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def row(self, state: SeqState) -> int:
        try:
            return self.state_index[state]
        except KeyError:
            raise KeyError(f"state {self.vocab.render(state)} is not enumerated") from None

    def logits_of(self, state: SeqState) -> np.ndarray:
        return self.logits[self.row(state)]

    def set_logits(self, state: SeqState, values) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.vocab.n_actions,):
            raise ValueError("logit row has the wrong length")
        self.logits[self.row(state)] = values
        if not self.backspace_enabled:
            self.logits[self.row(state), self.vocab.backspace] = -np.inf

    def values(self) -> np.ndarray:
        return logsumexp(self.logits, axis=1)

    def log_probs(self, state: SeqState) -> np.ndarray:
        row = self.logits_of(state)
        return row - logsumexp(row)

    def probs(self, temperature: float = 1.0, top_p: float = 1.0) -> np.ndarray:
        """(S, A) sampling distribution; terminal rows follow the eos convention."""
        p = softmax(self.logits / temperature, axis=1)
        if top_p < 1.0:
            p = np.stack([nucleus(r, top_p) for r in p])
        for i, s in enumerate(self.states):
            if is_terminal(self.vocab, s):
                p[i] = terminal_policy_row(self.vocab)
        return p


def to_finite_policy(p: TabularPolicy, temperature: float = 1.0, top_p: float = 1.0) -> FinitePolicy:
    probs = p.probs(temperature, top_p)
    return FinitePolicy({s: probs[i] for i, s in enumerate(p.states)}, p.vocab.n_actions)


class Sampler:
    """Draws trajectories from a fixed snapshot of a policy.

    Per-state cumulative distributions are cached, so sampling many
    trajectories from one snapshot costs one softmax per visited state.
    """

    def __init__(self, policy: TabularPolicy, cfg: SampleConfig):
        self.policy = policy
        self.cfg = cfg
        self._cdf: dict[int, np.ndarray] = {}

    def _cdf_of(self, row: int) -> np.ndarray:
        cdf = self._cdf.get(row)
        if cdf is None:
            p = softmax(self.policy.logits[row] / self.cfg.temperature)
            p = nucleus(p, self.cfg.top_p)
            cdf = np.cumsum(p)
            cdf[-1] = 1.0
            self._cdf[row] = cdf
        return cdf

    def sample(
        self,
        rng: np.random.Generator,
        prompt: SeqState | None = None,
        inject_rng: np.random.Generator | None = None,
    ) -> Trajectory:
        """One trajectory from ``prompt``; stops at a terminal state or max_steps.

        With ``inject_prob > 0`` each inserted token is replaced, with that
        probability, by a uniform payload token drawn from ``inject_rng``
        (the action recorded is still the sampled one).
        """
        vocab, T = self.policy.vocab, self.policy.context_len
        state = initial_state(vocab) if prompt is None else tuple(prompt)
        self.policy.row(state)
        triples = []
        inject = self.cfg.inject_prob
        if inject > 0 and inject_rng is None:
            raise ValueError("injection needs its own random stream")
        for _ in range(self.cfg.max_steps):
            if is_terminal(vocab, state):
                break
            cdf = self._cdf_of(self.policy.row(state))
            a = int(np.searchsorted(cdf, rng.random(), side="right"))
            a = min(a, len(cdf) - 1)
            nxt = bounded_step(vocab, state, a, T)
            stochastic = False
            if inject > 0 and vocab.is_payload(a) and inject_rng.random() < inject:
                r = int(inject_rng.integers(vocab.size))
                cand = bounded_step(vocab, state, r, T)
                stochastic = cand != nxt
                nxt = cand
            elif nxt != state + (a,) and a != vocab.backspace:
                stochastic = True  # forced eos
            triples.append(Triple(state, a, nxt, stochastic))
            state = nxt
        return Trajectory(tuple(triples), "model")


def sample_trajectory(p: TabularPolicy, prompt: SeqState | None, cfg: SampleConfig) -> Trajectory:
    rng = np.random.default_rng(cfg.seed)
    inject_rng = np.random.default_rng([cfg.seed, 1]) if cfg.inject_prob > 0 else None
    return Sampler(p, cfg).sample(rng, prompt, inject_rng)
