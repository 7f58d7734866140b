"""Dataset files, the toy grammar, and policy checkpoints.

Dataset line formats (one record per line, whitespace-only lines skipped):

* ``text``: every character is a token; the vocabulary is the sorted set of
  characters in the file.
* ``ids``: whitespace-separated non-negative integers; the vocabulary is
  ``0 .. max id`` with symbols ``"0", "1", ...``.

eos is implicit and appended to every record. Records longer than the
context allows are kept whole; the forced-eos rule is applied when they are
turned into trajectories.

Checkpoint layout (little-endian)::

    8 bytes   magic b"SQMCKPT\\0"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header: vocab, context_len, backspace_enabled,
              n_states, n_actions, enumeration_hash, payload_sha256, config
    S*A*8     float64 logits, row-major, rows in state enumeration order
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import TabularPolicy
from .preprocess import truncate_to_context
from .seq_mdp import SeqState, Trajectory, Vocab

FORMATS = ("text", "ids")
MAX_VOCAB = 4096

CKPT_MAGIC = b"SQMCKPT\0"
CKPT_VERSION = 1


class DatasetError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class DatasetFile:
    format: str
    vocab: Vocab
    records: tuple[tuple[int, ...], ...]  # token ids, each ending in eos

    def trajectories(self, context_len: int) -> list[Trajectory]:
        return [truncate_to_context(r, self.vocab, context_len) for r in self.records]

    def payloads(self) -> list[tuple[int, ...]]:
        return [r[:-1] for r in self.records]


def _lines(text: str) -> list[tuple[int, str]]:
    return [(n, line) for n, line in enumerate(text.splitlines(), start=1) if line.strip()]


def parse_dataset(text: str, fmt: str, max_vocab: int = MAX_VOCAB) -> DatasetFile:
    if fmt not in FORMATS:
        raise DatasetError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    lines = _lines(text)
    if not lines:
        raise DatasetError("dataset is empty")
    if fmt == "text":
        symbols = sorted({ch for _, line in lines for ch in line})
        if len(symbols) > max_vocab:
            raise DatasetError(f"vocabulary of {len(symbols)} symbols exceeds the limit {max_vocab}")
        vocab = Vocab(tuple(symbols))
        index = {s: i for i, s in enumerate(symbols)}
        records = [tuple(index[ch] for ch in line) + (vocab.eos,) for _, line in lines]
        return DatasetFile(fmt, vocab, tuple(records))
    rows = []
    for n, line in lines:
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError:
            raise DatasetError(f"line {n}: expected whitespace-separated integers") from None
        if any(i < 0 for i in ids):
            raise DatasetError(f"line {n}: token ids must be non-negative")
        rows.append(ids)
    size = max((max(r) for r in rows if r), default=0) + 1
    if size > max_vocab:
        raise DatasetError(f"token id {size - 1} exceeds the vocabulary limit {max_vocab}")
    vocab = Vocab(tuple(str(i) for i in range(size)))
    return DatasetFile(fmt, vocab, tuple(tuple(r) + (vocab.eos,) for r in rows))


def load_dataset(path, fmt: str, context_len: int) -> tuple[DatasetFile, list[Trajectory]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetError(f"{path}: not UTF-8 ({exc})") from None
    ds = parse_dataset(text, fmt)
    return ds, ds.trajectories(context_len)


def dumps_dataset(ds: DatasetFile) -> str:
    lines = []
    for r in ds.payloads():
        if ds.format == "text":
            lines.append("".join(ds.vocab.tokens[t] for t in r))
        else:
            lines.append(" ".join(ds.vocab.tokens[t] for t in r))
    return "\n".join(lines) + "\n"


def save_dataset(ds: DatasetFile, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


TOY_STRINGS = ("ab", "abc", "bca", "cab", "ccab")


def toy_grammar() -> DatasetFile:
    """Three tokens, five strings of at most six tokens counting eos."""
    return parse_dataset("\n".join(TOY_STRINGS) + "\n", "text")


def data_support(ds: DatasetFile, context_len: int) -> set[SeqState]:
    """Terminal states the (truncated) data can end in."""
    return {traj.final_state for traj in ds.trajectories(context_len)}


# ---------------------------------------------------------------- checkpoints


def enumeration_hash(vocab: Vocab, context_len: int, states: Sequence[SeqState]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"vocab": list(vocab.tokens), "context_len": context_len}).encode())
    for s in states:
        h.update(np.asarray(s, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()


def save_checkpoint(policy: TabularPolicy, cfg: dict | None, path) -> None:
    payload = np.ascontiguousarray(policy.logits, dtype="<f8").tobytes()
    header = {
        "vocab": list(policy.vocab.tokens),
        "context_len": policy.context_len,
        "backspace_enabled": policy.backspace_enabled,
        "n_states": policy.n_states,
        "n_actions": policy.vocab.n_actions,
        "enumeration_hash": enumeration_hash(policy.vocab, policy.context_len, policy.states),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "config": cfg or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob + payload)


def load_checkpoint(path, vocab: Vocab | None = None) -> TabularPolicy:
    """Read a checkpoint; with ``vocab`` given, insist it matches the stored one."""
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 8
    if len(raw) < head or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[len(CKPT_MAGIC) : head])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, reader supports {CKPT_VERSION}")
    try:
        header = json.loads(raw[head : head + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpointError(f"{path}: unreadable header") from None
    payload = raw[head + hlen :]
    S, A = header["n_states"], header["n_actions"]
    if len(payload) != S * A * 8 or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path}: logit payload is truncated or damaged")
    stored = Vocab(tuple(header["vocab"]))
    policy = TabularPolicy.zeros(stored, header["context_len"], header["backspace_enabled"])
    expected = enumeration_hash(stored, policy.context_len, policy.states)
    if expected != header["enumeration_hash"]:
        raise CheckpointHashError(f"{path}: state enumeration differs from the one it was saved with")
    if vocab is not None:
        mine = enumeration_hash(vocab, policy.context_len, policy.states)
        if vocab != stored or mine != expected:
            raise CheckpointHashError(f"{path}: checkpoint vocabulary does not match the requested one")
    if (S, A) != policy.logits.shape:
        raise CorruptCheckpointError(f"{path}: shape {(S, A)} does not match the enumeration")
    policy.logits = np.frombuffer(payload, dtype="<f8").reshape(S, A).astype(float)
    return policy


def checkpoint_config(path) -> dict:
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 8
    _, hlen = struct.unpack("<II", raw[len(CKPT_MAGIC) : head])
    return json.loads(raw[head : head + hlen].decode()).get("config", {})
