"""Generation metrics and the closed-form chain experiment."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .occupancy import (
    FinitePolicy,
    align,
    divergence,
    exact_occupancy,
    occupancy_divergence,
)
from .policy import SampleConfig, Sampler, TabularPolicy
from .seq_mdp import SeqState, Trajectory, Vocab, initial_state, is_terminal, step

REP_ORDERS = (2, 3, 4)


def rep_n_checked(seq: Sequence[Hashable], n: int, skip: Iterable[Hashable] = ()) -> tuple[float, bool]:
    """rep-n percentage plus a flag set when the sequence has fewer than n tokens."""
    if n < 1:
        raise ValueError("n must be positive")
    skip = set(skip)
    toks = [t for t in seq if t not in skip]
    if len(toks) < n:
        return 0.0, True
    grams = [tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)]
    return 100.0 * (1.0 - len(set(grams)) / len(grams)), False


def rep_n(seq: Sequence[Hashable], n: int, skip: Iterable[Hashable] = ()) -> float:
    """100 * (1 - unique n-grams / total n-grams); 0 for sequences shorter than n."""
    return rep_n_checked(seq, n, skip)[0]


def diversity_from_reps(reps: dict) -> float:
    return float(np.prod([1.0 - reps[n] / 100.0 for n in REP_ORDERS]))


def diversity(seq: Sequence[Hashable], skip: Iterable[Hashable] = ()) -> float:
    skip = tuple(skip)
    return diversity_from_reps({n: rep_n(seq, n, skip) for n in REP_ORDERS})


# ---------------------------------------------------------------- sampled metrics


def valid_rate_of(trajs: Sequence[Trajectory], vocab: Vocab, support: set[SeqState]) -> float:
    done = [t.final_state for t in trajs if t.terminated(vocab)]
    if not done:
        return 0.0
    return sum(s in support for s in done) / len(done)


def backspace_rate_of(trajs: Sequence[Trajectory], vocab: Vocab) -> float:
    acts = [a for t in trajs for a in t.actions]
    return acts.count(vocab.backspace) / len(acts) if acts else 0.0


SAMPLE_CHUNK = 16


def draw(
    policy: TabularPolicy,
    samples: int,
    seed: int,
    cfg: SampleConfig | None = None,
    prompts: Sequence[SeqState] | None = None,
    threads: int = 1,
) -> list[Trajectory]:
    """``samples`` trajectories, generated in fixed chunks with per-chunk seeds.

    Each chunk has a policy stream and a separate injection stream, so the
    output is the same for any thread count.
    """
    cfg = cfg or SampleConfig(seed=seed, max_steps=4 * policy.context_len)
    sampler = Sampler(policy, cfg)

    def chunk(c: int) -> list[Trajectory]:
        rng = np.random.default_rng([seed, c, 0])
        inject_rng = np.random.default_rng([seed, c, 1])
        out = []
        for i in range(c * SAMPLE_CHUNK, min(samples, (c + 1) * SAMPLE_CHUNK)):
            prompt = None if prompts is None else prompts[i % len(prompts)]
            out.append(sampler.sample(rng, prompt, inject_rng))
        return out

    n_chunks = (samples + SAMPLE_CHUNK - 1) // SAMPLE_CHUNK
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(chunk, range(n_chunks)))
    else:
        parts = [chunk(c) for c in range(n_chunks)]
    return [t for p in parts for t in p]


def valid_rate(
    policy: TabularPolicy,
    data_support: set[SeqState],
    samples: int,
    seed: int,
    inject_prob: float = 0.0,
    max_steps: int | None = None,
) -> float:
    """Share of sampled completed sequences whose final state is in the data support."""
    cfg = SampleConfig(seed=seed, max_steps=max_steps or 4 * policy.context_len, inject_prob=inject_prob)
    return valid_rate_of(draw(policy, samples, seed, cfg), policy.vocab, data_support)


@dataclass
class EvalReport:
    diversity: float
    rep_n: dict
    backspace_rate: float
    valid_rate: float
    mean_length: float
    samples: int
    divergences: dict = field(default_factory=dict)
    perplexity: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["rep_n"] = {str(k): v for k, v in self.rep_n.items()}
        return json.dumps(d, sort_keys=True, indent=2)

    def table(self) -> str:
        rows = [
            ("samples", f"{self.samples}"),
            ("valid_rate", f"{self.valid_rate:.6f}"),
            ("backspace_rate", f"{self.backspace_rate:.6f}"),
            ("mean_length", f"{self.mean_length:.6f}"),
        ]
        rows += [(f"rep_{n}", f"{self.rep_n[n]:.6f}") for n in REP_ORDERS]
        rows.append(("diversity", f"{self.diversity:.6f}"))
        if self.perplexity is not None:
            rows.append(("perplexity", f"{self.perplexity:.6f}"))
        rows += [(k, f"{v:.6f}") for k, v in sorted(self.divergences.items())]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def continuations(trajs: Sequence[Trajectory], prompts: Sequence[SeqState], vocab: Vocab) -> list[tuple[int, ...]]:
    """Payload tokens each sample produced beyond its prompt."""
    out = []
    for i, t in enumerate(trajs):
        final = t.final_state if t.triples else prompts[i % len(prompts)]
        body = [x for x in final[1:] if vocab.is_payload(x)]
        cut = len(prompts[i % len(prompts)]) - 1
        out.append(tuple(body[cut:]))
    return out


def report_from_samples(
    trajs: Sequence[Trajectory],
    vocab: Vocab,
    support: set[SeqState],
    conts: Sequence[Sequence[int]],
) -> EvalReport:
    reps = {n: float(np.mean([rep_n(c, n) for c in conts])) if conts else 0.0 for n in REP_ORDERS}
    lengths = [len(t.final_state) - 1 for t in trajs if t.triples]
    return EvalReport(
        diversity=diversity_from_reps(reps),
        rep_n=reps,
        backspace_rate=backspace_rate_of(trajs, vocab),
        valid_rate=valid_rate_of(trajs, vocab, support),
        mean_length=float(np.mean(lengths)) if lengths else 0.0,
        samples=len(trajs),
    )


# ---------------------------------------------------------------- chain experiment


@dataclass
class ChainReport:
    n: int
    eps: float
    gamma: float
    completion_prob: float
    completion_prob_closed: float
    sequence: dict  # enumerated divergences between sequence distributions
    sequence_closed: dict
    occupancy: dict  # enumerated divergences between discounted occupancies
    occupancy_closed: dict

    def max_gap(self) -> float:
        gaps = [abs(self.completion_prob - self.completion_prob_closed)]
        for got, want in ((self.sequence, self.sequence_closed), (self.occupancy, self.occupancy_closed)):
            for k, v in want.items():
                g = got[k]
                if math.isinf(v) or math.isinf(g):
                    gaps.append(0.0 if g == v else math.inf)
                else:
                    gaps.append(abs(g - v))
        return max(gaps)


def chain_vocab() -> Vocab:
    return Vocab(("c",))


def chain_policies(n: int, eps: float) -> tuple[FinitePolicy, FinitePolicy]:
    """Data policy (c^n then eos) and the eps-error model that stops early."""
    v = chain_vocab()
    c, eos, A = 0, v.eos, v.n_actions
    data, model = {}, {}
    state = initial_state(v)
    for k in range(n + 1):
        d = np.zeros(A)
        m = np.zeros(A)
        if k < n:
            d[c] = 1.0
            m[c], m[eos] = 1.0 - eps, eps
        else:
            d[eos] = m[eos] = 1.0
        data[state], model[state] = d, m
        state = step(v, state, c)
    return FinitePolicy(data, A), FinitePolicy(model, A)


def sequence_distribution(policy: FinitePolicy, vocab: Vocab, max_steps: int = 10**4) -> dict:
    """Exact distribution over completed sequences by depth-first expansion."""
    out: dict = {}
    stack = [(initial_state(vocab), 1.0, 0)]
    while stack:
        s, p, depth = stack.pop()
        if is_terminal(vocab, s):
            out[s] = out.get(s, 0.0) + p
            continue
        if depth >= max_steps:
            raise RuntimeError("sequence distribution does not terminate")
        for a in np.nonzero(policy(s) > 0)[0]:
            stack.append((step(vocab, s, int(a)), p * float(policy(s)[a]), depth + 1))
    return out


def chain_closed_forms(n: int, eps: float, gamma: float) -> tuple[float, dict, dict]:
    c = (1.0 - eps) ** n
    kl = -n * math.log1p(-eps)
    seq = {
        "kl": kl,
        "reverse_kl": math.inf if eps > 0 else 0.0,
        "chi2": 1.0 / c - 1.0,
        "chi2_mixture": 2.0 * (1.0 - c) / (1.0 + c),
    }
    g = gamma
    lg = -math.log1p(-eps)
    occ_kl = sum((1 - g) * g**k * (k + 1) * lg for k in range(n))
    occ_kl += (1 - g) * g**n * n * lg + g ** (n + 1) * n * lg
    occ = {"kl": occ_kl, "reverse_kl": math.inf if eps > 0 else 0.0}
    return c, seq, occ


def chain_experiment(n: int, eps: float, gamma: float = 0.9) -> ChainReport:
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    v = chain_vocab()
    data, model = chain_policies(n, eps)
    p_seq = sequence_distribution(data, v)
    q_seq = sequence_distribution(model, v)
    full = initial_state(v) + (0,) * n + (v.eos,)
    p, q = align(p_seq, q_seq)
    seq = {k: divergence(p, q, k) for k in ("kl", "reverse_kl", "chi2", "chi2_mixture")}
    rho_p = exact_occupancy(data, gamma, vocab=v)
    rho_q = exact_occupancy(model, gamma, vocab=v)
    occ = {k: occupancy_divergence(rho_p, rho_q, k) for k in ("kl", "reverse_kl", "chi2", "chi2_mixture")}
    c_closed, seq_closed, occ_closed = chain_closed_forms(n, eps, gamma)
    return ChainReport(n, eps, gamma, q_seq.get(full, 0.0), c_closed, seq, seq_closed, occ, occ_closed)
