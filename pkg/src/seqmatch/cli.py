"""Command-line entry point: ``seqmatch <command> [flags]``.

Exit codes: 0 success, 1 internal error, 2 usage or input error, 3 numerical
failure. Set SEQMATCH_LOG (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .divergence import CLI_NAMES, parse_kind
from .evalx import chain_experiment, continuations, draw, report_from_samples
from .objective import compile_trajectories, gradcheck, nll_table
from .occupancy import data_policy, divergence, full_sequence_mdp, occupancy_from_probs, policy_matrix
from .policy import SampleConfig
from .preprocess import NoiseConfig, augment_noise, dumps_batch, encode_trajectory, render_mask
from .trainer import NumericalFailure, TrainConfig, train

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("seqmatch")


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _load_data(path: str, fmt: str, context_len: int):
    if not path:
        return dataio.toy_grammar()
    try:
        return dataio.load_dataset(path, fmt, context_len)[0]
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_preprocess(args) -> int:
    if args.context_len < 2:
        raise UsageError("--context-len must be at least 2")
    try:
        cfg = NoiseConfig(args.eta, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = _load_data(args.input, args.format, args.context_len)
    rng = np.random.default_rng(args.seed)
    forced = set(args.force_at or ())
    lines = []
    for i, rec in enumerate(ds.records):
        traj = augment_noise(rec, cfg, ds.vocab, context_len=args.context_len, rng=rng, positions=forced)
        batch = encode_trajectory(traj, ds.vocab)
        lines.append(dumps_batch(batch))
        if i < args.inspect:
            print(f"# record {i}: {ds.vocab.render(traj.actions)}")
            print(render_mask(batch, ds.vocab))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {len(lines)} records" + (f" to {args.out}" if args.out else ""))
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
        if not isinstance(raw, dict):
            raise ValueError("config must be a flat JSON object")
        for key in ("divergence", "alpha", "eta", "seed", "steps"):
            val = getattr(args, key)
            if val is not None:
                raw[key] = val
        cfg = TrainConfig.from_dict(raw)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    ds = _load_data(cfg.data_path, cfg.data_format, cfg.context_len)
    try:
        res = train(ds, cfg, out_dir=args.out_dir, threads=args.threads)
    except NumericalFailure as exc:
        raise NumericError(str(exc)) from None
    final = res.summary["final"]
    for key in ("kl_exact", "chi2_mixture_exact", "valid_rate", "backspace_rate", "diversity"):
        if key in final:
            print(f"{key:<20}{final[key]:.6f}")
    print(f"wrote {args.out_dir}")
    return EXIT_OK


def _load_policy(path: str):
    try:
        return dataio.load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except dataio.CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _prompts(policy, ds, frac: float):
    """Data prefixes of length frac * (context_len - 1), capped below each record's end."""
    if ds is None or frac <= 0:
        return None
    k = int(frac * (policy.context_len - 1))
    out = []
    for traj in ds.trajectories(policy.context_len):
        cut = min(k, len(traj.triples) - 1)
        out.append(traj.triples[cut - 1].next_state if cut > 0 else traj.triples[0].state)
    return out


def _sample_cfg(args, policy) -> SampleConfig:
    try:
        return SampleConfig(
            args.temperature, args.top_p, args.max_steps or 4 * policy.context_len, args.seed, args.inject
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_sample(args) -> int:
    policy = _load_policy(args.checkpoint)
    ds = _load_data(args.data, args.format, policy.context_len) if args.data else None
    if ds is not None and ds.vocab != policy.vocab:
        raise UsageError("dataset vocabulary does not match the checkpoint")
    cfg = _sample_cfg(args, policy)
    trajs = draw(policy, args.samples, args.seed, cfg, _prompts(policy, ds, args.prompt_frac), args.threads)
    v = policy.vocab
    for t in trajs:
        print(f"{v.render(t.final_state[1:])}\t|\t{v.render(t.actions)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    policy = _load_policy(args.checkpoint)
    ds = _load_data(args.data, args.format, policy.context_len)
    if ds.vocab != policy.vocab:
        raise UsageError("dataset vocabulary does not match the checkpoint")
    cfg = _sample_cfg(args, policy)
    prompts = _prompts(policy, ds, args.prompt_frac)
    trajs = draw(policy, args.samples, args.seed, cfg, prompts, args.threads)
    support = dataio.data_support(ds, policy.context_len)
    conts = continuations(trajs, prompts or [(policy.vocab.bos,)], policy.vocab)
    report = report_from_samples(trajs, policy.vocab, support, conts)
    T = policy.context_len
    gamma = args.gamma if args.gamma is not None else T / (T + 1)
    mdp = full_sequence_mdp(policy.vocab, T)
    probs, _ = policy_matrix(data_policy(ds.records, ds.vocab, T), mdp, ds.vocab)
    rho_d = occupancy_from_probs(mdp, probs, gamma).mass.ravel()
    rho_m = occupancy_from_probs(mdp, policy.probs(args.temperature, args.top_p), gamma).mass.ravel()
    for kind in ("kl", "reverse_kl", "js", "chi2", "chi2_mixture", "tv"):
        report.divergences[f"{kind}_exact"] = divergence(rho_d, rho_m, kind)
    clean = ds.trajectories(T)
    nll = nll_table(policy.logits, compile_trajectories(clean, policy.state_index, policy.vocab, "data"))[0]
    tokens = sum(len(t) for t in clean) / len(clean)
    report.perplexity = math.exp(nll / tokens) if math.isfinite(nll) else math.inf
    print(report.to_json() if args.json else report.table())
    return EXIT_OK


def cmd_toy_chain(args) -> int:
    if args.n < 1 or not 0.0 <= args.eps < 1.0 or not 0.0 < args.gamma < 1.0:
        raise UsageError("need n >= 1, 0 <= eps < 1 and 0 < gamma < 1")
    rep = chain_experiment(args.n, args.eps, args.gamma)
    print(f"chain n={rep.n} eps={rep.eps:g} gamma={rep.gamma:g}")
    print(f"{'quantity':<28}{'enumerated':>16}{'closed form':>16}")
    print(f"{'completion probability':<28}{rep.completion_prob:>16.10f}{rep.completion_prob_closed:>16.10f}")
    for label, got, want in (("sequence", rep.sequence, rep.sequence_closed), ("occupancy", rep.occupancy, rep.occupancy_closed)):
        for k, v in got.items():
            closed = want.get(k)
            right = "" if closed is None else f"{closed:.10f}"
            print(f"{label + ' ' + k:<28}{v:>16.10f}{right:>16}")
    gap = rep.max_gap()
    print(f"max gap {gap:.3e}")
    if not gap <= 1e-9:
        raise NumericError(f"enumeration and closed forms disagree by {gap:.3e}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    kinds = list(CLI_NAMES) if args.divergence == "all" else [args.divergence]
    worst = 0.0
    for name in kinds:
        err = gradcheck(parse_kind(name), args.trials, args.seed)
        print(f"{name:<14}trials {args.trials:<5d}max relative error {err:.3e}")
        worst = max(worst, err)
    if not worst <= args.tol:
        raise NumericError(f"gradient error {worst:.3e} above tolerance {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqmatch", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--format", choices=dataio.FORMATS, default="text")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("preprocess", help="augment and encode a dataset into masked records")
    p.add_argument("--input", default="", help="dataset file (default: built-in toy grammar)")
    data_flags(p)
    p.add_argument("--context-len", type=int, default=8)
    p.add_argument("--eta", type=float, default=0.001)
    p.add_argument("--out", default="")
    p.add_argument("--inspect", type=int, default=0, help="print masks of the first N records")
    p.add_argument("--force-at", type=int, nargs="*", help="always corrupt these step positions")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run the training loop from a config file")
    p.add_argument("--config", default="")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--divergence", choices=sorted(CLI_NAMES))
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("sample", cmd_sample, "sample from a checkpoint"), ("eval", cmd_eval, "evaluate a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", default="", help="dataset for prompts and support (default: toy grammar for eval)")
        data_flags(p)
        p.add_argument("--samples", type=_positive_int, default=100 if name == "sample" else 1000)
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--top-p", type=float, default=1.0)
        p.add_argument("--prompt-frac", type=float, default=0.0 if name == "sample" else 0.5)
        p.add_argument("--inject", type=float, default=0.0, help="random-token injection probability")
        p.add_argument("--max-steps", type=int, default=0)
        p.add_argument("--threads", type=_positive_int, default=1)
        if name == "eval":
            p.add_argument("--gamma", type=float)
            p.add_argument("--json", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("toy-chain", help="chain example: enumeration against closed forms")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.9)
    p.set_defaults(func=cmd_toy_chain)

    p = sub.add_parser("gradcheck", help="analytic gradients against finite differences")
    p.add_argument("--divergence", choices=sorted(CLI_NAMES) + ["all"], default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("SEQMATCH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
