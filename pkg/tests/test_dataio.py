import struct

import numpy as np
import pytest

from seqmatch.dataio import (
    CKPT_MAGIC,
    CheckpointHashError,
    CheckpointVersionError,
    CorruptCheckpointError,
    DatasetError,
    checkpoint_config,
    data_support,
    dumps_dataset,
    load_checkpoint,
    load_dataset,
    parse_dataset,
    save_checkpoint,
    save_dataset,
    toy_grammar,
    TOY_STRINGS,
)
from seqmatch.policy import TabularPolicy
from seqmatch.seq_mdp import Triple, Vocab


def test_text_format_example(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("ab\nba\n")
    ds, trajs = load_dataset(path, "text", 8)
    assert ds.vocab.tokens == ("a", "b")
    assert len(trajs) == 2
    assert all(t.actions[-1] == ds.vocab.eos and t.terminated(ds.vocab) for t in trajs)
    assert trajs[0].actions == [0, 1, ds.vocab.eos]


def test_ids_format_and_forced_eos():
    ds = parse_dataset("0 1 2 3 1\n\n2\n", "ids")
    assert ds.vocab.tokens == ("0", "1", "2", "3")
    assert len(ds.records) == 2
    traj = ds.trajectories(4)[0]
    eos, bos = ds.vocab.eos, ds.vocab.bos
    assert traj.triples[-1] == Triple((bos, 0, 1), 2, (bos, 0, 1, eos), True)


@pytest.mark.parametrize(
    "text,fmt,msg",
    [
        ("", "text", "empty"),
        ("   \n\n", "ids", "empty"),
        ("1 2\n3 x\n", "ids", "line 2"),
        ("1 -2\n", "ids", "line 1"),
        ("ab\n", "csv", "unknown dataset format"),
    ],
)
def test_parse_errors(text, fmt, msg):
    with pytest.raises(DatasetError, match=msg):
        parse_dataset(text, fmt)


def test_vocab_overflow():
    with pytest.raises(DatasetError, match="exceeds"):
        parse_dataset("5000\n", "ids")
    with pytest.raises(DatasetError, match="exceeds"):
        parse_dataset("abc\n", "text", max_vocab=2)


def test_non_utf8_file(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_bytes(b"\xff\xfe\n")
    with pytest.raises(DatasetError, match="UTF-8"):
        load_dataset(path, "text", 8)


def test_dataset_save_load_fixed_point(tmp_path):
    for ds in (toy_grammar(), parse_dataset("3 1\n0\n2 2 2\n", "ids")):
        path = tmp_path / f"{ds.format}.txt"
        save_dataset(ds, path)
        again, _ = load_dataset(path, ds.format, 8)
        assert again == ds
        assert dumps_dataset(again) == path.read_text()


def test_toy_grammar_and_support():
    ds = toy_grammar()
    assert ds.vocab.size == 3 and len(ds.records) == len(TOY_STRINGS)
    assert max(len(r) for r in ds.records) <= 6
    support = data_support(ds, 8)
    assert len(support) == 5
    v = ds.vocab
    assert (v.bos,) + tuple(v.encode("ab")) + (v.eos,) in support


def _policy(seed=0):
    v = Vocab(("x", "y"))
    base = TabularPolicy.zeros(v, 5)
    return TabularPolicy(v, 5, np.random.default_rng(seed).normal(size=base.logits.shape), base.states)


def test_checkpoint_round_trip(tmp_path):
    p = _policy()
    path = tmp_path / "p.ckpt"
    save_checkpoint(p, {"alpha": 0.01}, path)
    q = load_checkpoint(path)
    assert q.logits.tobytes() == p.logits.tobytes()
    assert q.states == p.states and q.vocab == p.vocab
    assert checkpoint_config(path) == {"alpha": 0.01}
    save_checkpoint(q, {"alpha": 0.01}, tmp_path / "q.ckpt")
    assert (tmp_path / "q.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_keeps_disabled_backspace(tmp_path):
    v = Vocab(("x",))
    p = TabularPolicy.zeros(v, 4, backspace_enabled=False)
    save_checkpoint(p, None, tmp_path / "m.ckpt")
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert not q.backspace_enabled
    assert np.all(q.logits[:, v.backspace] == -np.inf)


def test_checkpoint_vocab_mismatch(tmp_path):
    path = tmp_path / "p.ckpt"
    save_checkpoint(_policy(), None, path)
    with pytest.raises(CheckpointHashError):
        load_checkpoint(path, vocab=Vocab(("x", "z")))
    assert load_checkpoint(path, vocab=Vocab(("x", "y"))).n_states == _policy().n_states


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "p.ckpt"
    save_checkpoint(_policy(), None, path)
    raw = path.read_bytes()
    cases = {
        "truncated": raw[:-9],
        "flipped": raw[:-1] + bytes([raw[-1] ^ 1]),
        "magic": b"NOTACKPT" + raw[8:],
        "tiny": raw[:5],
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(bad)


def test_checkpoint_version_and_enumeration_hash(tmp_path):
    path = tmp_path / "p.ckpt"
    save_checkpoint(_policy(), None, path)
    raw = path.read_bytes()
    n = len(CKPT_MAGIC)
    version, hlen = struct.unpack("<II", raw[n : n + 8])
    newer = raw[:n] + struct.pack("<II", version + 1, hlen) + raw[n + 8 :]
    (tmp_path / "v.ckpt").write_bytes(newer)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.ckpt")
    header = raw[n + 8 : n + 8 + hlen].decode()
    key = '"enumeration_hash": "'
    i = header.index(key) + len(key)
    forged = header[:i] + ("0" if header[i] != "0" else "1") + header[i + 1 :]
    (tmp_path / "h.ckpt").write_bytes(raw[: n + 8] + forged.encode() + raw[n + 8 + hlen :])
    with pytest.raises(CheckpointHashError):
        load_checkpoint(tmp_path / "h.ckpt")
