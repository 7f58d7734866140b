"""Replay-buffer training loop for tabular policies.

Each step draws a data batch (noise-augmented) and, once the mixing weight
beta drops below one, a batch of buffered model trajectories, then takes an
AdamW step on beta * L_BC + (1 - beta) * L_SM. The buffer is refilled every
``sampling_cadence`` steps with trajectories sampled from a snapshot of the
policy, each starting from a random-length data prompt.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import DatasetFile, data_support, save_checkpoint
from .divergence import PhiSpec, parse_kind
from .evalx import backspace_rate_of, continuations, diversity_from_reps, rep_n, valid_rate_of, REP_ORDERS
from .objective import (
    ObjectiveConfig,
    TripleBatch,
    compile_trajectories,
    nll_table,
    sm_loss_table,
)
from .occupancy import data_policy, divergence, full_sequence_mdp, occupancy_from_probs, policy_matrix
from .policy import SampleConfig, Sampler, TabularPolicy
from .preprocess import NoiseConfig, augment_noise
from .seq_mdp import Trajectory, Triple, initial_state

log = logging.getLogger(__name__)

OBJECTIVES = ("sm", "bc", "mle")

METRIC_COLUMNS = (
    "step",
    "beta",
    "loss_total",
    "loss_bc",
    "loss_sm",
    "data_phi_term",
    "eos_term",
    "kl_exact",
    "chi2_mixture_exact",
    "backspace_rate",
    "valid_rate",
    "diversity",
)

# samples are generated in fixed-size chunks with their own seeds, so the
# result does not depend on how many threads process the chunks
SAMPLE_CHUNK = 16


class NumericalFailure(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.01
    eta: float = 0.001
    gamma: float | None = None  # None: context_len / (context_len + 1)
    divergence: str = "chi2-mixture"
    mixture_c: float = 0.5
    mixture_beta: float = 0.5
    include_model_term: bool = True
    buffer_capacity: int = 100
    round_size: int | None = None  # None: buffer_capacity
    reuse_factor: float = 8.0
    bc_warmup_steps: int = 100
    anneal_start: int = 100
    anneal_end: int = 500
    beta_final: float = 0.2
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-2
    lr_warmup_steps: int = 20
    lr_min_frac: float = 0.1
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    prompt_len_max_frac: float = 0.5
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0
    context_len: int = 8
    objective: str = "sm"
    eval_every: int = 100
    eval_samples: int = 200
    checkpoint_every: int = 0
    data_path: str = ""
    data_format: str = "text"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        self.divergence = parse_kind(self.divergence)
        if self.anneal_start > self.anneal_end:
            raise ValueError("anneal_start must not exceed anneal_end")
        if not 0.0 <= self.beta_final <= 1.0:
            raise ValueError("beta_final must lie in [0, 1]")
        if self.reuse_factor < 1:
            raise ValueError("reuse_factor must be at least 1")
        if self.context_len < 2:
            raise ValueError("context_len must be at least 2")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.steps < 0:
            raise ValueError("batch_size and buffer_capacity must be positive, steps non-negative")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not 0.0 <= self.prompt_len_max_frac <= 1.0:
            raise ValueError("prompt_len_max_frac must lie in [0, 1]")

    @property
    def discount(self) -> float:
        return self.gamma if self.gamma is not None else self.context_len / (self.context_len + 1)

    def objective_config(self) -> ObjectiveConfig:
        phi = PhiSpec(self.divergence, self.alpha, self.mixture_c, self.mixture_beta)
        return ObjectiveConfig(phi, self.discount, self.include_model_term)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ValueError("config must be a flat JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def mixing_beta(step: int, cfg: TrainConfig) -> float:
    """Weight of the BC loss: 1 until anneal_start, linear to beta_final at anneal_end.

    The first bc_warmup_steps steps are pure BC whatever the schedule says.
    """
    if cfg.objective != "sm":
        return 1.0
    if step < cfg.anneal_start or step < cfg.bc_warmup_steps:
        return 1.0
    if step >= cfg.anneal_end:
        return cfg.beta_final
    frac = (step - cfg.anneal_start) / (cfg.anneal_end - cfg.anneal_start)
    return 1.0 + frac * (cfg.beta_final - 1.0)


def sampling_cadence(cfg: TrainConfig) -> int:
    """Steps between buffer refills so each trajectory is drawn reuse_factor times.

    A round inserts R trajectories and steps consume batch_size each, so in
    steady state k * batch_size = reuse_factor * R.
    """
    R = cfg.round_size or cfg.buffer_capacity
    raw = cfg.reuse_factor * R / cfg.batch_size
    if raw < 1:
        log.warning("sampling cadence %.3f is below one step; clamping to 1", raw)
    return max(1, int(round(raw)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to lr_min_frac * lr."""
    if cfg.lr_warmup_steps > 0 and step < cfg.lr_warmup_steps:
        return cfg.lr * (step + 1) / cfg.lr_warmup_steps
    span = max(1, cfg.steps - cfg.lr_warmup_steps)
    frac = min(1.0, (step - cfg.lr_warmup_steps) / span)
    lo = cfg.lr * cfg.lr_min_frac
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; entries fixed at -inf are left alone."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        live = np.isfinite(params)
        g = np.where(live, grad, 0.0)
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        upd = mhat / (np.sqrt(vhat) + self.eps) + self.wd * np.where(live, params, 0.0)
        params[live] -= lr * upd[live]


class ReplayBuffer:
    """FIFO store of model trajectories; the oldest are evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque[tuple[int, Trajectory]] = deque()

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, trajs: Sequence[Trajectory], step: int) -> int:
        """Insert trajectories; returns how many old ones were evicted."""
        evicted = 0
        for t in trajs:
            if t.source != "model":
                raise ValueError("the buffer only holds model trajectories")
            self.entries.append((step, t))
            if len(self.entries) > self.capacity:
                self.entries.popleft()
                evicted += 1
        return evicted

    def sample(self, rng: np.random.Generator, n: int) -> list[Trajectory]:
        if not self.entries:
            raise ValueError("buffer is empty")
        idx = rng.integers(len(self.entries), size=n)
        return [self.entries[i][1] for i in idx]


def random_prompt(rng: np.random.Generator, data: Sequence[Trajectory], max_len: int) -> list[Triple]:
    """Leading triples of a random data trajectory, of length uniform in [0, max_len]."""
    traj = data[int(rng.integers(len(data)))]
    k = int(rng.integers(max_len + 1))
    # never hand over a terminal state as a prompt
    return list(traj.triples[: min(k, len(traj.triples) - 1)])


def sample_round(
    policy: TabularPolicy,
    data: Sequence[Trajectory],
    n: int,
    seed_key: Sequence[int],
    cfg: TrainConfig,
    threads: int = 1,
) -> list[Trajectory]:
    """``n`` prompted model trajectories from a snapshot of ``policy``.

    The prompt triples come first, so every trajectory starts at the root.
    """
    snap = policy.copy()
    scfg = SampleConfig(cfg.temperature, cfg.top_p, max_steps=4 * cfg.context_len)
    max_prompt = int(cfg.prompt_len_max_frac * cfg.context_len)

    def chunk(c: int) -> list[Trajectory]:
        rng = np.random.default_rng([*seed_key, c])
        sampler = Sampler(snap, scfg)
        out = []
        for _ in range(min(SAMPLE_CHUNK, n - c * SAMPLE_CHUNK)):
            prompt = random_prompt(rng, data, max_prompt)
            start = prompt[-1].next_state if prompt else initial_state(snap.vocab)
            cont = sampler.sample(rng, start)
            out.append(Trajectory(tuple(prompt) + cont.triples, "model"))
        return out

    n_chunks = (n + SAMPLE_CHUNK - 1) // SAMPLE_CHUNK
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(chunk, range(n_chunks)))
    else:
        parts = [chunk(c) for c in range(n_chunks)]
    return [t for p in parts for t in p]


class Evaluator:
    """Exact occupancy divergences plus sampled quality metrics."""

    def __init__(self, ds: DatasetFile, cfg: TrainConfig, policy: TabularPolicy):
        self.cfg = cfg
        T = cfg.context_len
        self.mdp = full_sequence_mdp(ds.vocab, T)
        if self.mdp.states != tuple(policy.states):
            raise RuntimeError("policy rows and MDP states disagree")
        pd = data_policy(ds.records, ds.vocab, T)
        probs, missing = policy_matrix(pd, self.mdp, ds.vocab)
        self.rho_data = occupancy_from_probs(self.mdp, probs, cfg.discount)
        if missing.any() and self.rho_data.state_mass[missing].max() > 0:
            raise RuntimeError("data policy misses a visited state")
        self.support = data_support(ds, T)

    def exact(self, policy: TabularPolicy) -> tuple[float, float]:
        rho = occupancy_from_probs(self.mdp, policy.probs(), self.cfg.discount)
        p, q = self.rho_data.mass.ravel(), rho.mass.ravel()
        return divergence(p, q, "kl"), divergence(p, q, "chi2_mixture")

    def sampled(self, policy: TabularPolicy, step: int) -> dict:
        scfg = SampleConfig(self.cfg.temperature, self.cfg.top_p, max_steps=4 * self.cfg.context_len)
        sampler = Sampler(policy, scfg)
        rng = np.random.default_rng([self.cfg.seed, 3, step])
        trajs = [sampler.sample(rng) for _ in range(self.cfg.eval_samples)]
        root = [initial_state(policy.vocab)]
        conts = continuations(trajs, root, policy.vocab)
        reps = {n: float(np.mean([rep_n(c, n) for c in conts])) for n in REP_ORDERS}
        return {
            "backspace_rate": backspace_rate_of(trajs, policy.vocab),
            "valid_rate": valid_rate_of(trajs, policy.vocab, self.support),
            "diversity": diversity_from_reps(reps),
        }


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class TrainResult:
    policy: TabularPolicy
    metrics: list[dict]
    summary: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.metrics:
            w.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
        return buf.getvalue()


def _dump_failure(out_dir, step: int, data, model, exc) -> str | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"failure_step{step}.json"
    blob = {
        "step": step,
        "error": str(exc),
        "data": [[list(map(list, (t.state, (t.action,), t.next_state))) for t in tr.triples] for tr in data],
        "model": [[list(map(list, (t.state, (t.action,), t.next_state))) for t in tr.triples] for tr in model],
    }
    path.write_text(json.dumps(blob))
    return str(path)


def train(
    ds: DatasetFile,
    cfg: TrainConfig,
    out_dir=None,
    threads: int = 1,
    policy: TabularPolicy | None = None,
) -> TrainResult:
    """Run the loop; with ``out_dir`` also write metrics.csv, summary.json and checkpoints."""
    t0 = time.perf_counter()
    vocab, T = ds.vocab, cfg.context_len
    ocfg = cfg.objective_config()
    if policy is None:
        policy = TabularPolicy.zeros(vocab, T, backspace_enabled=cfg.objective != "mle")
    index = policy.state_index
    clean = ds.trajectories(T)
    rng = np.random.default_rng([cfg.seed, 0])
    noise = NoiseConfig(cfg.eta if cfg.objective != "mle" else 0.0, cfg.seed)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    # model trajectories only enter through the model term and the mixture regularizer
    needs_model = ocfg.include_model_term or ocfg.phi.kind == "chi2_mixture"
    cadence = sampling_cadence(cfg)
    round_size = cfg.round_size or cfg.buffer_capacity
    opt = AdamW(policy.logits.shape, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    evaluator = Evaluator(ds, cfg, policy) if cfg.eval_every > 0 else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    csv_fh = open(out / "metrics.csv", "w", newline="", encoding="utf-8") if out else None
    writer = csv.writer(csv_fh, lineterminator="\n") if csv_fh else None
    if writer:
        writer.writerow(METRIC_COLUMNS)
    metrics: list[dict] = []
    last_round, rounds = None, 0
    try:
        for k in range(cfg.steps + 1):
            row: dict = {"step": k}
            if evaluator and (k % cfg.eval_every == 0 or k == cfg.steps):
                row["kl_exact"], row["chi2_mixture_exact"] = evaluator.exact(policy)
                row.update(evaluator.sampled(policy, k))
            if k == cfg.steps:
                # final evaluation row only
                metrics.append(row)
                if writer:
                    writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
                break
            beta = mixing_beta(k, cfg)
            row["beta"] = beta
            idx = rng.integers(len(clean), size=cfg.batch_size)
            # eta is zero for mle, which then yields the clean trajectories
            data = [augment_noise(ds.records[i], noise, vocab, context_len=T, rng=rng) for i in idx]
            model: list[Trajectory] = []
            if beta < 1.0 and needs_model:
                if last_round is None or k - last_round >= cadence:
                    fresh = sample_round(policy, clean, round_size, (cfg.seed, 1, rounds), cfg, threads)
                    buffer.add(fresh, k)
                    last_round, rounds = k, rounds + 1
                model = buffer.sample(rng, cfg.batch_size)
            db = compile_trajectories(data, index, vocab, "data")
            try:
                loss_bc, grad = nll_table(policy.logits, db, with_grad=True)
                total = beta * loss_bc
                grad = beta * grad
                if beta < 1.0:
                    mb = compile_trajectories(model, index, vocab, "model")
                    parts, g_sm = sm_loss_table(policy.logits, db, mb, ocfg, with_grad=True)
                    total += (1.0 - beta) * parts.total
                    grad += (1.0 - beta) * g_sm
                    row.update(
                        loss_sm=parts.total, data_phi_term=parts.data_phi_term, eos_term=parts.eos_term
                    )
                if not (np.isfinite(total) and np.all(np.isfinite(grad))):
                    raise FloatingPointError("non-finite loss or gradient")
            except FloatingPointError as exc:
                path = _dump_failure(out, k, data, model, exc)
                raise NumericalFailure(f"step {k}: {exc}" + (f" (batch dumped to {path})" if path else "")) from exc
            row["loss_bc"] = loss_bc
            row["loss_total"] = total
            opt.step(policy.logits, grad, lr_at(k, cfg))
            metrics.append(row)
            if writer:
                writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
            if out and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(policy, cfg.to_dict(), out / f"checkpoint_{k + 1}.ckpt")
            if k % 100 == 0:
                log.info("step %d beta %.3f loss %.5f", k, beta, total)
    finally:
        if csv_fh:
            csv_fh.close()
    final = metrics[-1]
    summary = {
        "steps": cfg.steps,
        "objective": cfg.objective,
        "divergence": cfg.divergence,
        "gamma": cfg.discount,
        "sampling_cadence": cadence,
        "sampling_rounds": rounds,
        "buffer_size": len(buffer),
        "final": {c: final.get(c) for c in METRIC_COLUMNS if final.get(c) is not None},
        "wall_seconds": round(time.perf_counter() - t0, 3),
    }
    if out:
        save_checkpoint(policy, cfg.to_dict(), out / "final.ckpt")
        stable = {k: v for k, v in summary.items() if k != "wall_seconds"}
        (out / "summary.json").write_text(json.dumps(stable, indent=2, sort_keys=True) + "\n")
    return TrainResult(policy, metrics, summary)
