"""SequenceMatch loss over logit tables, its exact gradient, and baselines.

Sign convention: every function here returns a loss to minimize, the
negation of the maximized objective. With triples (s_i, a_i, s_{i+1}),
discount g_i = gamma^i from the root, and r_i = l(a_i|s_i) - gamma V(s_{i+1})
where V is the logsumexp of a state's logits, one data trajectory costs

    - sum_i g_i phi_a(r_i)                               data_phi_term
    + w sum_i g_i [V(s_i) - gamma V(s_{i+1})]            data_value_diff
    - g_N/(1-gamma) phi_a((1-gamma) V(s_N)) + w g_N V(s_N)   eos_term

and one model trajectory adds w sum_i g_i [V(s_i) - gamma V(s_{i+1})]
(model_value_diff) plus w g_M V(u_M) if it terminated (eos_term). Here
phi_a(x) = (phi(alpha x) - phi(0)) / alpha. The value weight w is 1/2 when
the model term is included and 1 when it is dropped, so in both cases the
value differences telescope to the full V(root).

For chi2_mixture, phi is the identity and the regularizer adds
alpha c [beta E_data + (1 - beta) E_model] of sum_i g_i r_i^2, including the
analytic terminal tail g_N/(1-gamma) ((1-gamma) V_N)^2. Data and model
terms are averaged over their own trajectory counts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .divergence import PhiSpec, scaled_phi, scaled_phi_prime
from .occupancy import ExactOccupancy
from .policy import TabularPolicy, logsumexp, softmax
from .seq_mdp import Trajectory, Vocab, is_terminal


@dataclass(frozen=True)
class ObjectiveConfig:
    phi: PhiSpec = field(default_factory=PhiSpec)
    gamma: float = 0.9
    include_model_term: bool = True
    eos_handling: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def value_weight(self) -> float:
        return 0.5 if self.include_model_term else 1.0


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    data_phi_term: float
    data_value_diff: float
    model_value_diff: float
    eos_term: float
    regularizer: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TripleBatch:
    """Trajectories flattened to row indices into a logit table."""

    s: np.ndarray
    a: np.ndarray
    nxt: np.ndarray
    t: np.ndarray  # time index of each triple
    final: np.ndarray  # row of the terminal state, per terminated trajectory
    final_t: np.ndarray  # its time index (number of triples)
    n_traj: int

    @classmethod
    def empty(cls) -> "TripleBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, z, 0)


def compile_trajectories(
    trajs: Sequence[Trajectory], index: dict, vocab: Vocab, source: str
) -> TripleBatch:
    s, a, nxt, t, final, final_t = [], [], [], [], [], []
    for traj in trajs:
        if traj.source != source:
            raise ValueError(f"expected {source} trajectories, got one from {traj.source}")
        try:
            for i, tr in enumerate(traj.triples):
                s.append(index[tr.state])
                a.append(tr.action)
                nxt.append(index[tr.next_state])
                t.append(i)
            if traj.terminated(vocab):
                final.append(index[traj.final_state])
                final_t.append(len(traj.triples))
        except KeyError as exc:
            raise ValueError(f"no logits for state {exc.args[0]!r}") from None
    arr = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return TripleBatch(arr(s), arr(a), arr(nxt), arr(t), arr(final), arr(final_t), len(trajs))


def value(logits) -> float | np.ndarray:
    """V(s) = log sum_a exp l(a|s), max-shifted."""
    out = logsumexp(np.asarray(logits, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def _side(
    L: np.ndarray,
    V: np.ndarray,
    b: TripleBatch,
    cfg: ObjectiveConfig,
    is_data: bool,
    dL: np.ndarray | None,
    dV: np.ndarray | None,
) -> dict:
    """Loss parts of one side, accumulating gradients into dL/dV when given."""
    parts = {"phi": 0.0, "vdiff": 0.0, "eos": 0.0, "reg": 0.0}
    if b.n_traj == 0:
        return parts
    g, spec = cfg.gamma, cfg.phi
    w = cfg.value_weight
    scale = 1.0 / b.n_traj
    disc = g ** b.t.astype(float)
    disc_N = g ** b.final_t.astype(float)
    V_s, V_n, V_N = V[b.s], V[b.nxt], V[b.final]
    r = L[b.s, b.a] - g * V_n
    r_N = (1.0 - g) * V_N
    tail = disc_N / (1.0 - g)
    mixture = spec.kind == "chi2_mixture"
    side_c = spec.mixture_c * (spec.mixture_beta if is_data else 1.0 - spec.mixture_beta)
    use_vdiff = is_data or cfg.include_model_term
    use_eos = cfg.eos_handling and b.final.size > 0
    grad = dL is not None

    if is_data:
        parts["phi"] = -scale * float(np.sum(disc * scaled_phi(spec, r)))
        if grad:
            c = scale * disc * scaled_phi_prime(spec, r)
            np.add.at(dL, (b.s, b.a), -c)
            np.add.at(dV, b.nxt, g * c)
    if use_vdiff:
        parts["vdiff"] = scale * w * float(np.sum(disc * (V_s - g * V_n)))
        if grad:
            np.add.at(dV, b.s, scale * w * disc)
            np.add.at(dV, b.nxt, -scale * w * g * disc)
    if use_eos:
        eos = 0.0
        d_N = np.zeros_like(V_N)
        if use_vdiff:
            eos += scale * w * float(np.sum(disc_N * V_N))
            d_N += scale * w * disc_N
        if is_data:
            eos -= scale * float(np.sum(tail * scaled_phi(spec, r_N)))
            d_N -= scale * disc_N * scaled_phi_prime(spec, r_N)
        parts["eos"] = eos
        if grad:
            np.add.at(dV, b.final, d_N)
    if mixture:
        a = spec.alpha
        reg = float(np.sum(disc * r * r))
        if use_eos:
            reg += float(np.sum(tail * r_N * r_N))
        parts["reg"] = scale * a * side_c * reg
        if grad:
            c = 2.0 * scale * a * side_c * disc * r
            np.add.at(dL, (b.s, b.a), c)
            np.add.at(dV, b.nxt, -g * c)
            if use_eos:
                np.add.at(dV, b.final, 2.0 * scale * a * side_c * disc_N * r_N)
    return parts


def sm_loss_table(
    L: np.ndarray,
    data: TripleBatch,
    model: TripleBatch,
    cfg: ObjectiveConfig,
    with_grad: bool = False,
) -> tuple[LossBreakdown, np.ndarray | None]:
    """Loss (and optionally its gradient) for a raw (S, A) logit table."""
    V = logsumexp(L, axis=1)
    dL = np.zeros_like(L) if with_grad else None
    dV = np.zeros(L.shape[0]) if with_grad else None
    pd = _side(L, V, data, cfg, True, dL, dV)
    pm = _side(L, V, model, cfg, False, dL, dV)
    parts = LossBreakdown(
        total=pd["phi"] + pd["vdiff"] + pm["vdiff"] + pd["eos"] + pm["eos"] + pd["reg"] + pm["reg"],
        data_phi_term=pd["phi"],
        data_value_diff=pd["vdiff"],
        model_value_diff=pm["vdiff"],
        eos_term=pd["eos"] + pm["eos"],
        regularizer=pd["reg"] + pm["reg"],
    )
    if not np.isfinite(parts.total):
        raise FloatingPointError(f"non-finite loss: {parts}")
    if not with_grad:
        return parts, None
    P = softmax(L, axis=1)
    grad = dL + dV[:, None] * np.nan_to_num(P)
    return parts, grad


def sm_loss(
    policy: TabularPolicy,
    data_traj: Sequence[Trajectory],
    model_traj: Sequence[Trajectory],
    cfg: ObjectiveConfig,
) -> LossBreakdown:
    v = policy.vocab
    d = compile_trajectories(data_traj, policy.state_index, v, "data")
    m = compile_trajectories(model_traj, policy.state_index, v, "model")
    return sm_loss_table(policy.logits, d, m, cfg)[0]


def grad_sm_loss(
    policy: TabularPolicy,
    data_traj: Sequence[Trajectory],
    model_traj: Sequence[Trajectory],
    cfg: ObjectiveConfig,
) -> np.ndarray:
    v = policy.vocab
    d = compile_trajectories(data_traj, policy.state_index, v, "data")
    m = compile_trajectories(model_traj, policy.state_index, v, "model")
    return sm_loss_table(policy.logits, d, m, cfg, with_grad=True)[1]


# ---------------------------------------------------------------- likelihood baselines


def nll_table(
    L: np.ndarray, b: TripleBatch, gamma: float | None = None, with_grad: bool = False
) -> tuple[float, np.ndarray | None]:
    """Mean per-trajectory sum of V(s_i) - l(a_i|s_i), optionally gamma^i weighted."""
    if b.n_traj == 0:
        raise ValueError("empty batch")
    V = logsumexp(L, axis=1)
    w = np.full(b.s.shape, 1.0 / b.n_traj) if gamma is None else gamma ** b.t.astype(float) / b.n_traj
    loss = float(np.sum(w * (V[b.s] - L[b.s, b.a])))
    if not with_grad:
        return loss, None
    grad = np.zeros_like(L)
    np.add.at(grad, (b.s, b.a), -w)
    dV = np.zeros(L.shape[0])
    np.add.at(dV, b.s, w)
    return loss, grad + dV[:, None] * np.nan_to_num(softmax(L, axis=1))


def mle_loss(policy: TabularPolicy, sequences: Sequence[Trajectory]) -> float:
    """Mean negative log-likelihood per sequence, in nats."""
    b = compile_trajectories(sequences, policy.state_index, policy.vocab, "data")
    return nll_table(policy.logits, b)[0]


def bc_loss(policy: TabularPolicy, augmented_traj: Sequence[Trajectory]) -> float:
    """Likelihood of the augmented action labels, backspaces included."""
    return mle_loss(policy, augmented_traj)


def weighted_mle_loss(policy: TabularPolicy, sequences: Sequence[Trajectory], gamma: float) -> float:
    """sum_i gamma^i [V(s_i) - l(a_i|s_i)], averaged over sequences."""
    b = compile_trajectories(sequences, policy.state_index, policy.vocab, "data")
    return nll_table(policy.logits, b, gamma)[0]


# ---------------------------------------------------------------- exact evaluation


def eos_term_closed(v_final: float, n: int, cfg: ObjectiveConfig, source: str = "data") -> float:
    """Terminal contribution of one trajectory ending at step ``n`` with V = ``v_final``."""
    g, w = cfg.gamma, cfg.value_weight
    out = 0.0
    if source == "data" or cfg.include_model_term:
        out += w * g**n * v_final
    if source == "data":
        out -= g**n / (1.0 - g) * float(scaled_phi(cfg.phi, (1.0 - g) * v_final))
    return out


def eos_term_truncated(v_final: float, n: int, cfg: ObjectiveConfig, horizon: int, source: str = "data") -> float:
    """The same terminal contribution as an explicit self-loop sum up to ``horizon``.

    On the absorbed state every step has l(eos|s_N) = V(s_N) under the
    eos convention, so r = (1 - gamma) V(s_N) and the value difference is
    (1 - gamma) V(s_N).
    """
    g, w = cfg.gamma, cfg.value_weight
    t = np.arange(n, horizon, dtype=float)
    disc = np.exp(t * np.log(g))
    r = (1.0 - g) * v_final
    per_step = 0.0
    if source == "data" or cfg.include_model_term:
        per_step += w * r
    if source == "data":
        per_step -= float(scaled_phi(cfg.phi, r))
    return float(np.sum(disc) * per_step)


def exact_objective(
    policy: TabularPolicy,
    rho_data: ExactOccupancy,
    rho_model: ExactOccupancy,
    cfg: ObjectiveConfig,
) -> LossBreakdown:
    """Expected per-trajectory loss computed from exact occupancies.

    A trajectory sum of g_i f(s_i, a_i, s_{i+1}) has expectation
    sum_{s,a} rho(s,a) f(s,a,s') / (1 - gamma). Terminal pairs carry the
    self-loop version of f, which reproduces the eos term.
    """
    g, spec, w = cfg.gamma, cfg.phi, cfg.value_weight
    vocab = policy.vocab
    L = policy.logits
    V = logsumexp(L, axis=1)
    mixture = spec.kind == "chi2_mixture"

    def side(rho: ExactOccupancy, is_data: bool) -> dict:
        mdp = rho.mdp
        out = {"phi": 0.0, "vdiff": 0.0, "eos": 0.0, "reg": 0.0}
        side_c = spec.mixture_c * (spec.mixture_beta if is_data else 1.0 - spec.mixture_beta)
        use_vdiff = is_data or cfg.include_model_term
        rows = np.array([policy.row(s) for s in mdp.states])
        nxt = mdp.P.indices.reshape(mdp.n_states, mdp.n_actions)  # deterministic dynamics
        for i, s in enumerate(mdp.states):
            m = rho.mass[i]
            if not m.any():
                continue
            v_s = V[rows[i]]
            if is_terminal(vocab, s):
                mass = m[vocab.eos] / (1.0 - g)
                r = (1.0 - g) * v_s
                key = "eos"
                if cfg.eos_handling:
                    if use_vdiff:
                        out[key] += mass * w * r
                    if is_data:
                        out[key] -= mass * float(scaled_phi(spec, r))
                    if mixture:
                        out["reg"] += mass * spec.alpha * side_c * r * r
                continue
            live = np.nonzero(m)[0]
            mass = m[live] / (1.0 - g)
            v_n = V[rows[nxt[i, live]]]
            r = L[rows[i], live] - g * v_n
            if is_data:
                out["phi"] -= float(np.sum(mass * scaled_phi(spec, r)))
            if use_vdiff:
                out["vdiff"] += float(np.sum(mass * w * (v_s - g * v_n)))
            if mixture:
                out["reg"] += float(np.sum(mass * spec.alpha * side_c * r * r))
        return out

    pd, pm = side(rho_data, True), side(rho_model, False)
    return LossBreakdown(
        total=sum(pd.values()) + sum(pm.values()),
        data_phi_term=pd["phi"],
        data_value_diff=pd["vdiff"],
        model_value_diff=pm["vdiff"],
        eos_term=pd["eos"] + pm["eos"],
        regularizer=pd["reg"] + pm["reg"],
    )


# ---------------------------------------------------------------- finite differences


def fd_gradient_oracle(loss_fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(p + h e_k) - f(p - h e_k)) / 2h for every entry."""
    if not h > 0:
        raise ValueError("h must be positive")
    p = np.array(params, dtype=float)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        hi = loss_fn(p)
        flat[k] = old - h
        lo = loss_fn(p)
        flat[k] = old
        gflat[k] = (hi - lo) / (2.0 * h)
    return grad


def random_gradcheck_instance(rng: np.random.Generator, kind: str):
    """Small random tabular problem: (logits, data batch, model batch, config).

    Two payload tokens and a context of four keep the table at 22 x 4
    entries while still covering backspaces, injected noise, forced eos
    and truncated model rollouts.
    """
    from .occupancy import context_states
    from .preprocess import NoiseConfig, augment_noise
    from .seq_mdp import trajectory_from_actions

    vocab = Vocab(("x", "y"))
    T = 4
    states = context_states(vocab, T)
    index = {s: i for i, s in enumerate(states)}
    L = rng.normal(scale=1.5, size=(len(states), vocab.n_actions))
    spec = PhiSpec(
        kind,
        alpha=float(rng.choice([0.01, 0.1, 0.5, 1.0])),
        mixture_c=float(rng.uniform(0.1, 1.0)),
        mixture_beta=float(rng.uniform(0.0, 1.0)),
    )
    cfg = ObjectiveConfig(spec, float(rng.uniform(0.5, 0.99)), bool(rng.random() < 0.7), bool(rng.random() < 0.9))
    noise = NoiseConfig(0.3)
    data = []
    for _ in range(int(rng.integers(1, 4))):
        body = tuple(int(t) for t in rng.integers(vocab.size, size=int(rng.integers(0, 5))))
        data.append(augment_noise(body + (vocab.eos,), noise, vocab, context_len=T, rng=rng))
    model = []
    for _ in range(int(rng.integers(0, 4))):
        acts = [int(a) for a in rng.integers(vocab.n_actions, size=int(rng.integers(1, 9)))]
        model.append(trajectory_from_actions(vocab, acts, "model", context_len=T))
    return L, compile_trajectories(data, index, vocab, "data"), compile_trajectories(model, index, vocab, "model"), cfg


def gradcheck(kind: str, trials: int, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of the analytic gradient against central differences."""
    if trials < 1:
        raise ValueError("trials must be positive")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        L, d, m, cfg = random_gradcheck_instance(rng, kind)
        grad = sm_loss_table(L, d, m, cfg, with_grad=True)[1]
        fd = fd_gradient_oracle(lambda p: sm_loss_table(p, d, m, cfg)[0].total, L, h)
        err = np.max(np.abs(grad - fd)) / max(1.0, np.max(np.abs(fd)))
        worst = max(worst, float(err))
    return worst
