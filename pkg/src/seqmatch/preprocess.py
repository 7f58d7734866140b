"""Turn edit-action sequences into single-pass masked inputs.

A sequence with backspaces is encoded so that every row, read through its
attention mask, sees exactly the tokens of the state it stands for. Row ``i``
is the state after ``i`` actions; its label is the next action. A backspace
row copies the token (and position id) of the element that becomes the new
end of the state, and masks out both the deleted element and the original it
copied. So ``[.., a, b, <bksp>, ..]`` becomes inputs ``[.., a, b, a, ..]``.

Two layouts:

* with ``bos_id`` the root state gets its own row 0, which makes backspace at
  the root encodable (the row copies bos);
* without it, the standard causal-LM layout: inputs start at the first action
  and position ids at 0. A row whose state would be empty cannot be encoded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .seq_mdp import (
    SeqState,
    Trajectory,
    Triple,
    Vocab,
    apply_actions,
    initial_state,
    is_terminal,
    step,
    trajectory_from_actions,
)

IGNORE = -100
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class PreprocessedBatch:
    inputs: np.ndarray  # (L,) int
    labels: np.ndarray  # (L,) int, IGNORE where no loss
    mask: np.ndarray  # (L, L) bool
    pos_ids: np.ndarray  # (L,) int
    actions: tuple[int, ...]
    has_bos: bool

    def __len__(self) -> int:
        return len(self.inputs)

    def row_tokens(self, i: int) -> tuple[int, ...]:
        """Visible tokens of row ``i`` ordered by position id."""
        cols = np.nonzero(self.mask[i])[0]
        order = np.argsort(self.pos_ids[cols], kind="stable")
        return tuple(int(t) for t in self.inputs[cols[order]])

    def row_states(self, bos_id: int) -> list[SeqState]:
        out = []
        for i in range(len(self)):
            toks = self.row_tokens(i)
            out.append(toks if self.has_bos else (bos_id,) + toks)
        return out


@dataclass(frozen=True)
class NoiseConfig:
    eta: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def state_views(vocab: Vocab, actions: Sequence[int]) -> list[SeqState]:
    """Ground-truth state after each prefix of ``actions`` (stack simulation)."""
    return apply_actions(vocab, initial_state(vocab), actions)


def _encode_rows(tokens: Sequence[int], bos_id: int, backspace_id: int):
    """Copy/deletion pointer pass over ``[bos] + tokens``.

    ``live`` is the stack of rows currently visible, bottom first; its top is
    where the copy pointer lands after a deletion.
    """
    L = len(tokens) + 1
    x = np.empty(L, dtype=np.int64)
    pos = np.empty(L, dtype=np.int64)
    mask = np.zeros((L, L), dtype=bool)
    x[0], pos[0], mask[0, 0] = bos_id, 0, True
    live = [0]
    for i, tok in enumerate(tokens, start=1):
        mask[i] = mask[i - 1]
        if tok == backspace_id:
            deleted = live.pop() if len(live) > 1 else None
            c = live.pop()  # copy pointer: new end of the state
            if deleted is not None:
                mask[i, deleted] = False
            mask[i, c] = False
            x[i], pos[i] = x[c], pos[c]
        else:
            x[i], pos[i] = tok, pos[live[-1]] + 1
        mask[i, i] = True
        live.append(i)
    return x, pos, mask


def encode_actions(
    actions: Sequence[int],
    vocab: Vocab,
    *,
    with_bos: bool = False,
    labels: Sequence[int] | None = None,
    context_len: int | None = None,
) -> PreprocessedBatch:
    """Inputs, labels, mask and position ids for an action sequence.

    ``labels`` overrides the default next-action labels (same length as
    ``actions``); it is how noisy trajectories keep the true action on a
    corrupted transition.
    """
    actions = [int(a) for a in actions]
    if context_len is not None:
        longest = max(len(s) for s in state_views(vocab, actions))
        if longest > context_len:
            raise ValueError(f"a state reaches {longest} tokens, over the context length {context_len}; truncate first")
    for a in actions:
        if not 0 <= a < vocab.n_actions:
            raise ValueError(f"invalid action id {a}")
    x, pos, mask = _encode_rows(actions, vocab.bos, vocab.backspace)
    y = np.full(len(x), IGNORE, dtype=np.int64)
    y[:-1] = actions if labels is None else list(labels)
    if labels is not None and len(labels) != len(actions):
        raise ValueError("labels must match actions in length")
    if not with_bos:
        if not mask[1:, 0].all():
            raise ValueError("sequence backspaces to the root; encode with_bos=True")
        x, y, pos, mask = x[1:], y[1:], pos[1:] - 1, mask[1:, 1:]
    return PreprocessedBatch(x, y, mask, pos, tuple(actions), with_bos)


def encode_trajectory(traj: Trajectory, vocab: Vocab) -> PreprocessedBatch:
    """Encode the realized states of ``traj`` with its actions as labels.

    Rows follow the transitions that actually happened (injected tokens,
    forced eos) while labels keep the action taken at each state.
    """
    if traj.triples and traj.triples[0].state != initial_state(vocab):
        raise ValueError("trajectory must start at the root state")
    return encode_actions(traj.transitions(vocab), vocab, with_bos=True, labels=traj.actions)


def _check_sequence(seq: Sequence[int], vocab: Vocab) -> None:
    if not seq or seq[-1] != vocab.eos:
        raise ValueError(f"sequence does not end in eos: {list(seq)}")
    if any(not vocab.is_payload(t) for t in seq[:-1]):
        raise ValueError(f"sequence has reserved or unknown ids: {list(seq)}")


def truncate_to_context(seq: Sequence[int], vocab: Vocab, context_len: int) -> Trajectory:
    """Data trajectory of ``seq`` under the forced-eos rule.

    Once a prefix fills ``context_len - 1`` tokens (bos included), the next
    triple keeps the true token as its action but moves to the eos-terminated
    state.
    """
    if context_len < 2:
        raise ValueError("context length must be at least 2")
    _check_sequence(seq, vocab)
    return trajectory_from_actions(vocab, seq, "data", context_len=context_len)


def augment_noise(
    seq: Sequence[int],
    cfg: NoiseConfig,
    vocab: Vocab,
    *,
    context_len: int | None = None,
    rng: np.random.Generator | None = None,
    positions: Iterable[int] | None = None,
) -> Trajectory:
    """Data trajectory with random-token corruptions repaired by backspace.

    Step ``i`` (taken from the state after ``i`` tokens) is corrupted with
    probability ``eta``, or always when ``i`` is in ``positions``. A
    corruption at state s with true next token x becomes

        (s, x, s + r)  (s + r, <bksp>, s)  (s, x, s + x)

    with r uniform over payload tokens. Steps without room for the extra
    token under the context cap are left alone.
    """
    if context_len is None:
        _check_sequence(seq, vocab)
        base = trajectory_from_actions(vocab, seq, "data")
    else:
        base = truncate_to_context(seq, vocab, context_len)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    forced = set(positions or ())
    draws = rng.random(len(base.triples))
    out: list[Triple] = []
    for i, t in enumerate(base.triples):
        hit = i in forced or draws[i] < cfg.eta
        room = context_len is None or len(t.state) + 1 < context_len
        if hit and room:
            r = int(rng.integers(vocab.size))
            noisy = t.state + (r,)
            out.append(Triple(t.state, t.action, noisy, True))
            out.append(Triple(noisy, vocab.backspace, t.state, False))
        out.append(t)
    return Trajectory(tuple(out), "data")


def check_trajectory(traj: Trajectory, vocab: Vocab) -> None:
    """Raise unless every non-stochastic triple follows the deterministic dynamics."""
    for t in traj.triples:
        if not t.stochastic and step(vocab, t.state, t.action) != t.next_state:
            raise ValueError(f"inconsistent triple {t}")
    for a, b in zip(traj.triples, traj.triples[1:]):
        if a.next_state != b.state:
            raise ValueError("trajectory is not contiguous")
        if is_terminal(vocab, a.state) and a.next_state != a.state:
            raise ValueError("terminal state left")


# ---------------------------------------------------------------- serialization


def batch_to_record(batch: PreprocessedBatch) -> dict:
    """Line-format record; the mask is row-major bits packed big-endian, hex encoded."""
    return {
        "version": FORMAT_VERSION,
        "length": len(batch),
        "has_bos": batch.has_bos,
        "actions": list(batch.actions),
        "inputs": batch.inputs.tolist(),
        "labels": batch.labels.tolist(),
        "pos_ids": batch.pos_ids.tolist(),
        "mask": np.packbits(batch.mask.ravel()).tobytes().hex(),
    }


def record_to_batch(rec: dict) -> PreprocessedBatch:
    if rec.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported record version {rec.get('version')!r}")
    L = int(rec["length"])
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(rec["mask"]), dtype=np.uint8))
    if bits.size < L * L:
        raise ValueError("mask payload too short")
    mask = bits[: L * L].reshape(L, L).astype(bool)
    arrays = [np.asarray(rec[k], dtype=np.int64) for k in ("inputs", "labels", "pos_ids")]
    if any(a.shape != (L,) for a in arrays):
        raise ValueError("record arrays disagree with its length")
    return PreprocessedBatch(arrays[0], arrays[1], mask, arrays[2], tuple(rec["actions"]), bool(rec["has_bos"]))


def dumps_batch(batch: PreprocessedBatch) -> str:
    return json.dumps(batch_to_record(batch), separators=(",", ":"), sort_keys=True)


def loads_batch(line: str) -> PreprocessedBatch:
    return record_to_batch(json.loads(line))


def render_mask(batch: PreprocessedBatch, vocab: Vocab) -> str:
    """Text picture of the mask, one row per position."""
    width = max(len(vocab.symbol(int(t))) for t in batch.inputs)
    lines = []
    for i in range(len(batch)):
        bits = "".join("1" if b else "." for b in batch.mask[i])
        label = "-" if batch.labels[i] == IGNORE else vocab.symbol(int(batch.labels[i]))
        lines.append(f"{vocab.symbol(int(batch.inputs[i])):>{width}} p={batch.pos_ids[i]:<3d} {bits}  -> {label}")
    return "\n".join(lines)
