"""Exact discounted occupancy measures and soft Bellman operators.

Everything here works on a ``FiniteMDP``: a list of state labels, a sparse
transition matrix with rows indexed by ``s * n_actions + a``, and an initial
distribution. Sequence MDPs compile into this form (deterministic rows,
self-loops on terminal states); the soft Bellman checks also run on random
stochastic MDPs.

Occupancies are obtained from the linear flow equations

    d = (1 - gamma) mu0 + gamma P_pi^T d,   rho(s, a) = d(s) p(a | s)

with one sparse solve. An absorbing state has diagonal (1 - gamma) in that
system, so its infinite geometric tail is summed in closed form rather than
by iterating.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .seq_mdp import (
    DEFAULT_STATE_BUDGET,
    SeqState,
    StateBudgetExceeded,
    Trajectory,
    Vocab,
    bounded_step,
    enumerate_states,
    initial_state,
    is_terminal,
    step,
)

DIVERGENCE_KINDS = ("kl", "reverse_kl", "js", "chi2", "chi2_mixture", "tv")


@dataclass(frozen=True, eq=False)
class FiniteMDP:
    states: tuple[Hashable, ...]
    n_actions: int
    P: sp.csr_matrix  # (S * A, S)
    init: np.ndarray  # (S,)
    tag: str | None = None  # vocabulary fingerprint for sequence MDPs
    open_pairs: np.ndarray | None = None  # (S, A) placeholder transitions, see sequence_mdp
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {s: i for i, s in enumerate(self.states)})
        n = len(self.states)
        if self.P.shape != (n * self.n_actions, n):
            raise ValueError(f"transition matrix has shape {self.P.shape}, expected {(n * self.n_actions, n)}")

    @property
    def n_states(self) -> int:
        return len(self.states)

    @classmethod
    def from_dense(cls, P: np.ndarray, init: np.ndarray, states=None) -> "FiniteMDP":
        S, A, S2 = P.shape
        assert S == S2
        if not np.allclose(P.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to one")
        labels = tuple(range(S)) if states is None else tuple(states)
        return cls(labels, A, sp.csr_matrix(P.reshape(S * A, S)), np.asarray(init, dtype=float))

    def expect_next(self, V: np.ndarray) -> np.ndarray:
        """E_{s' ~ P(.|s,a)} V(s') as an (S, A) array."""
        return (self.P @ V).reshape(self.n_states, self.n_actions)


@dataclass
class FinitePolicy:
    """Action distributions keyed by state label."""

    rows: dict
    n_actions: int

    def __post_init__(self):
        for s, row in self.rows.items():
            row = np.asarray(row, dtype=float)
            if row.shape != (self.n_actions,) or np.any(row < 0) or abs(row.sum() - 1.0) > 1e-12:
                raise ValueError(f"invalid policy row at {s!r}: {row}")
            self.rows[s] = row

    def __call__(self, state) -> np.ndarray:
        return self.rows[state]

    def __contains__(self, state) -> bool:
        return state in self.rows


@dataclass(frozen=True, eq=False)
class ExactOccupancy:
    mdp: FiniteMDP
    gamma: float
    mass: np.ndarray  # (S, A)

    @property
    def state_mass(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def total(self) -> float:
        return float(self.mass.sum())

    def as_dict(self) -> dict:
        out = {}
        states, A = self.mdp.states, self.mdp.n_actions
        for i, a in zip(*np.nonzero(self.mass > 0)):
            out[(states[i], int(a))] = float(self.mass[i, a])
        return out

    def __getitem__(self, key) -> float:
        state, action = key
        i = self.mdp.index.get(state)
        return 0.0 if i is None else float(self.mass[i, action])


# ---------------------------------------------------------------- sequence MDPs


def context_states(vocab: Vocab, context_len: int, budget: int = DEFAULT_STATE_BUDGET) -> list[SeqState]:
    """States reachable under the ``context_len`` cap, in shortlex order."""
    if context_len < 2:
        raise ValueError("context length must be at least 2")
    return [
        s
        for s in enumerate_states(vocab, context_len - 1, budget)
        if is_terminal(vocab, s) or len(s) < context_len
    ]


def terminal_policy_row(vocab: Vocab) -> np.ndarray:
    """Convention for absorbing states: all mass on the eos self-loop."""
    row = np.zeros(vocab.n_actions)
    row[vocab.eos] = 1.0
    return row


def sequence_mdp(
    vocab: Vocab, states: Sequence[SeqState], context_len: int | None = None, strict: bool = True
) -> FiniteMDP:
    """Compile the deterministic sequence dynamics over a state list.

    With ``strict`` the list must be closed under every action. Otherwise
    transitions leaving the list become self-loops and are recorded in
    ``open_pairs``; they are placeholders for actions the caller's policy
    never takes.
    """
    index = {s: i for i, s in enumerate(states)}
    A = vocab.n_actions
    rows, cols = [], []
    open_pairs = np.zeros((len(states), A), dtype=bool)
    for i, s in enumerate(states):
        for a in range(A):
            nxt = step(vocab, s, a) if context_len is None else bounded_step(vocab, s, a, context_len)
            j = index.get(nxt)
            if j is None:
                if strict:
                    raise ValueError(f"state list is not closed: {s} --{a}--> {nxt}")
                open_pairs[i, a] = True
                j = i
            rows.append(i * A + a)
            cols.append(j)
    P = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(states) * A, len(states)))
    init = np.zeros(len(states))
    init[index[initial_state(vocab)]] = 1.0
    return FiniteMDP(tuple(states), A, P, init, tag=vocab.fingerprint(), open_pairs=open_pairs if open_pairs.any() else None)


def full_sequence_mdp(vocab: Vocab, context_len: int, budget: int = DEFAULT_STATE_BUDGET) -> FiniteMDP:
    return sequence_mdp(vocab, context_states(vocab, context_len, budget), context_len)


def reachable_states(
    vocab: Vocab,
    policy: FinitePolicy,
    context_len: int | None = None,
    budget: int = DEFAULT_STATE_BUDGET,
) -> list[SeqState]:
    """BFS from the root over actions with positive probability."""
    root = initial_state(vocab)
    seen = {root}
    order = [root]
    queue = deque([root])
    while queue:
        s = queue.popleft()
        if is_terminal(vocab, s):
            continue
        if s not in policy:
            raise KeyError(f"policy has no row for reachable state {vocab.render(s)}")
        for a in np.nonzero(policy(s) > 0)[0]:
            a = int(a)
            nxt = step(vocab, s, a) if context_len is None else bounded_step(vocab, s, a, context_len)
            if nxt not in seen:
                seen.add(nxt)
                order.append(nxt)
                queue.append(nxt)
                if len(order) > budget:
                    raise StateBudgetExceeded(f"more than {budget} reachable states")
    # terminal states self-loop on every action, so the set is closed
    return sorted(order, key=lambda s: (len(s), s))


def policy_matrix(policy, mdp: FiniteMDP, vocab: Vocab | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Dense (S, A) probabilities for ``mdp`` plus a mask of rows the policy lacked.

    Missing terminal rows take the eos convention; other missing rows are
    filled uniformly and flagged so callers can verify they carry no mass.
    """
    if isinstance(policy, np.ndarray):
        return policy, np.zeros(mdp.n_states, dtype=bool)
    S, A = mdp.n_states, mdp.n_actions
    probs = np.full((S, A), 1.0 / A)
    missing = np.zeros(S, dtype=bool)
    for i, s in enumerate(mdp.states):
        if s in policy:
            probs[i] = policy(s)
        elif vocab is not None and is_terminal(vocab, s):
            probs[i] = terminal_policy_row(vocab)
        else:
            missing[i] = True
    return probs, missing


def _state_transition(mdp: FiniteMDP, probs: np.ndarray) -> sp.csr_matrix:
    S, A = mdp.n_states, mdp.n_actions
    pi = sp.csr_matrix(
        (probs.ravel(), (np.repeat(np.arange(S), A), np.arange(S * A))), shape=(S, S * A)
    )
    return (pi @ mdp.P).tocsr()


def state_occupancy(mdp: FiniteMDP, probs: np.ndarray, gamma: float) -> np.ndarray:
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    P_pi = _state_transition(mdp, probs)
    system = sp.identity(mdp.n_states, format="csc") - gamma * P_pi.T.tocsc()
    d = spla.spsolve(system, (1.0 - gamma) * mdp.init)
    return np.asarray(d, dtype=float)


def occupancy_from_probs(mdp: FiniteMDP, probs: np.ndarray, gamma: float) -> ExactOccupancy:
    d = state_occupancy(mdp, probs, gamma)
    # clip solver round-off on unreachable states
    mass = np.clip(d, 0.0, None)[:, None] * probs
    return ExactOccupancy(mdp, gamma, mass)


def exact_occupancy(
    policy,
    gamma: float,
    *,
    vocab: Vocab | None = None,
    mdp: FiniteMDP | None = None,
    context_len: int | None = None,
    state_budget: int = DEFAULT_STATE_BUDGET,
) -> ExactOccupancy:
    """rho(s, a) = (1 - gamma) p(a|s) sum_t gamma^t P(s_t = s).

    With no ``mdp`` the state space is the set reachable from the root under
    ``policy`` (which must then be a ``FinitePolicy`` and ``vocab`` given).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if mdp is None:
        if vocab is None:
            raise ValueError("vocab is required when no mdp is given")
        states = reachable_states(vocab, policy, context_len, state_budget)
        mdp = sequence_mdp(vocab, states, context_len, strict=False)
    probs, missing = policy_matrix(policy, mdp, vocab)
    if mdp.open_pairs is not None and np.any(probs[mdp.open_pairs] > 0):
        raise ValueError("policy takes an action whose successor is outside the state space")
    occ = occupancy_from_probs(mdp, probs, gamma)
    if missing.any() and occ.state_mass[missing].max() > 0:
        bad = mdp.states[int(np.argmax(np.where(missing, occ.state_mass, -1)))]
        raise KeyError(f"policy has no row for visited state {bad!r}")
    return occ


def flow_residual(occ: ExactOccupancy) -> float:
    """Max violation of sum_a rho(s,a) = (1-g) mu0(s) + g sum rho(s',a') P(s|s',a')."""
    mdp, g = occ.mdp, occ.gamma
    inflow = mdp.P.T @ occ.mass.ravel()
    rhs = (1.0 - g) * mdp.init + g * inflow
    return float(np.max(np.abs(occ.state_mass - rhs)))


# ---------------------------------------------------------------- data policy


def _weighted(dataset) -> list[tuple[tuple[int, ...], float]]:
    if isinstance(dataset, Mapping):
        items = [(tuple(k), float(v)) for k, v in dataset.items()]
    else:
        items = [(tuple(seq), 1.0) for seq in dataset]
    if not items:
        raise ValueError("dataset is empty")
    total = sum(w for _, w in items)
    if total <= 0 or any(w < 0 for _, w in items):
        raise ValueError("dataset weights must be non-negative with positive total")
    return [(seq, w / total) for seq, w in items]


def data_policy(dataset, vocab: Vocab, context_len: int | None = None) -> FinitePolicy:
    """Next-action distribution of the dataset at every prefix it visits.

    Editing actions get probability zero. Under a context cap, the action at
    a full prefix is still the true next token; the cap only changes the
    successor state, which is the MDP's business, not the policy's.
    """
    counts: dict[SeqState, np.ndarray] = {}
    for seq, w in _weighted(dataset):
        if not seq or seq[-1] != vocab.eos:
            raise ValueError(f"dataset sequence does not end in eos: {seq}")
        if any(not vocab.is_payload(t) for t in seq[:-1]):
            raise ValueError(f"dataset sequence has reserved or unknown ids: {seq}")
        state = initial_state(vocab)
        for tok in seq:
            row = counts.setdefault(state, np.zeros(vocab.n_actions))
            row[tok] += w
            state = step(vocab, state, tok) if context_len is None else bounded_step(vocab, state, tok, context_len)
            if is_terminal(vocab, state):
                break
        counts.setdefault(state, terminal_policy_row(vocab) * w)
    rows = {}
    for s, c in counts.items():
        rows[s] = terminal_policy_row(vocab) if is_terminal(vocab, s) else c / c.sum()
    return FinitePolicy(rows, vocab.n_actions)


# ---------------------------------------------------------------- divergences


def divergence(p: np.ndarray, q: np.ndarray, kind: str) -> float:
    """f-divergence between aligned probability vectors.

    Conventions: 0 log 0 = 0, p > 0 with q = 0 gives +inf. chi2 is Pearson's
    sum (p - q)^2 / q.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if kind == "kl":
        sup = p > 0
        if np.any(q[sup] <= 0):
            return math.inf
        return float(np.sum(p[sup] * (np.log(p[sup]) - np.log(q[sup]))))
    if kind == "reverse_kl":
        return divergence(q, p, "kl")
    if kind == "js":
        m = 0.5 * (p + q)
        return 0.5 * divergence(p, m, "kl") + 0.5 * divergence(q, m, "kl")
    if kind == "chi2":
        live = (p > 0) | (q > 0)
        if np.any(q[live] <= 0):
            return math.inf
        return float(np.sum((p[live] - q[live]) ** 2 / q[live]))
    if kind == "chi2_mixture":
        return 2.0 * divergence(p, 0.5 * (p + q), "chi2")
    if kind == "tv":
        return float(0.5 * np.sum(np.abs(p - q)))
    raise ValueError(f"unknown divergence kind {kind!r}")


def align(p: Mapping, q: Mapping) -> tuple[np.ndarray, np.ndarray]:
    keys = list(p.keys() | q.keys())
    return np.array([p.get(k, 0.0) for k in keys]), np.array([q.get(k, 0.0) for k in keys])


def occupancy_divergence(p: ExactOccupancy, q: ExactOccupancy, kind: str) -> float:
    if kind not in DIVERGENCE_KINDS:
        raise ValueError(f"unknown divergence kind {kind!r}")
    if abs(p.gamma - q.gamma) > 0:
        raise ValueError("occupancies were computed with different discounts")
    if p.mdp.tag and q.mdp.tag and p.mdp.tag != q.mdp.tag:
        raise ValueError("occupancies come from different vocabularies")
    if p.mdp is q.mdp:
        return divergence(p.mass.ravel(), q.mass.ravel(), kind)
    return divergence(*align(p.as_dict(), q.as_dict()), kind)


def occupancy_entropy(rho: ExactOccupancy) -> float:
    m = rho.mass[rho.mass > 0]
    return float(-np.sum(m * np.log(m)))


def causal_entropy(rho: ExactOccupancy, probs: np.ndarray) -> float:
    """E_rho[-log p(a|s)]: the policy entropy weighted by occupancy."""
    live = rho.mass > 0
    return float(-np.sum(rho.mass[live] * np.log(probs[live])))


# ---------------------------------------------------------------- soft Bellman


def soft_value(Q: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """V(s) = E_{a~p}[Q(s,a) - log p(a|s)], skipping zero-probability actions."""
    live = probs > 0
    logp = np.zeros_like(probs)
    logp[live] = np.log(probs[live])
    return np.sum(np.where(live, probs * (Q - logp), 0.0), axis=1)


def inverse_bellman(mdp: FiniteMDP, Q: np.ndarray, probs: np.ndarray, gamma: float) -> np.ndarray:
    return Q - gamma * mdp.expect_next(soft_value(Q, probs))


def bellman(
    mdp: FiniteMDP,
    r: np.ndarray,
    probs: np.ndarray,
    gamma: float,
    tol: float = 1e-12,
    max_iter: int = 10**5,
) -> np.ndarray:
    """Fixed point of Q -> r + gamma E[V(s')] by plain iteration."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    Q = np.array(r, dtype=float)
    for _ in range(max_iter):
        Q_new = r + gamma * mdp.expect_next(soft_value(Q, probs))
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
    raise RuntimeError(f"soft Bellman iteration did not converge in {max_iter} steps")


def telescoping_check(
    mdp: FiniteMDP, Q: np.ndarray, probs: np.ndarray, rho_any: ExactOccupancy, gamma: float
) -> tuple[float, float, float]:
    """The three quantities that the telescoping identities say are equal.

    (E_{rho_theta}[(T Q)(s,a)] + H, (1-gamma) E_{s0}[V(s0)],
    E_{(s,a)~rho_any, s'}[V(s) - gamma V(s')]) with H the occupancy-weighted
    policy entropy of ``probs``.
    """
    rho_theta = occupancy_from_probs(mdp, probs, gamma)
    V = soft_value(Q, probs)
    r = inverse_bellman(mdp, Q, probs, gamma)
    first = float(np.sum(rho_theta.mass * r)) + causal_entropy(rho_theta, probs)
    second = (1.0 - gamma) * float(mdp.init @ V)
    diff = V[:, None] - gamma * mdp.expect_next(V)
    third = float(np.sum(rho_any.mass * diff))
    return first, second, third


def policy_from_q(Q: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    z = Q - Q.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def random_mdp(
    rng: np.random.Generator, n_states: int, n_actions: int, branching: int = 3
) -> FiniteMDP:
    """Random stochastic MDP with sparse rows and a random initial distribution."""
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            support = rng.choice(n_states, size=min(branching, n_states), replace=False)
            P[s, a, support] = rng.dirichlet(np.ones(len(support)))
    init = rng.dirichlet(np.ones(n_states))
    return FiniteMDP.from_dense(P, init)


# ---------------------------------------------------------------- Monte Carlo


def monte_carlo_occupancy(trajectories: Iterable[Trajectory], gamma: float, vocab: Vocab) -> dict:
    """Empirical occupancy: step t weighted (1-gamma) gamma^t, absorbing tail gamma^N."""
    acc: dict = {}
    n = 0
    for traj in trajectories:
        n += 1
        w = 1.0 - gamma
        for t in traj.triples:
            acc[(t.state, t.action)] = acc.get((t.state, t.action), 0.0) + w
            w *= gamma
        if traj.terminated(vocab):
            key = (traj.final_state, vocab.eos)
            acc[key] = acc.get(key, 0.0) + w / (1.0 - gamma)
    if n == 0:
        raise ValueError("no trajectories")
    return {k: v / n for k, v in acc.items()}
