"""Snapshot files: per-round, per-client f32 weight dumps for post-hoc analysis.

Layout: the magic ``b"FSLSNAP1"``, then a sequence of records, each a ``u32``
byte length followed by the record body. The first record is UTF-8 JSON
metadata (``eta, I, rho_f, T, L_c, K``). Every later record is a model message
(see :mod:`fedsl.wire`) whose ``msg_type`` says what it holds: client weights
before pruning, pruned weights, client gradients, or server weights.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

from fedsl import wire
from fedsl.engine import RoundTrace, Trace
from fedsl.errors import ProtocolError

MAGIC = b"FSLSNAP1"
_LEN = struct.Struct("<I")


def _record(body: bytes) -> bytes:
    return _LEN.pack(len(body)) + body


def snapshot_bytes(trace: Trace, every: int = 1) -> bytes:
    n_clients = len(trace.rounds[0].client_weights) if trace.rounds else 0
    meta = {"eta": trace.eta, "I": trace.I, "rho_f": trace.rho_f, "T": trace.T, "L_c": trace.L_c, "K": n_clients}
    parts = [MAGIC, _record(json.dumps(meta, sort_keys=True).encode())]
    for rt in trace.rounds:
        if rt.round % every:
            continue
        for k in range(len(rt.client_weights)):
            parts.append(_record(wire.encode_model(rt.round, k, wire.MsgType.SNAPSHOT_CLIENT, rt.client_weights[k])))
            parts.append(_record(wire.encode_model(rt.round, k, wire.MsgType.SNAPSHOT_PRUNED, rt.client_pruned[k])))
            parts.append(_record(wire.encode_model(rt.round, k, wire.MsgType.SNAPSHOT_GRAD, rt.client_grads[k])))
        parts.append(
            _record(wire.encode_model(rt.round, wire.SERVER_ID, wire.MsgType.SNAPSHOT_SERVER, rt.server_weights))
        )
    return b"".join(parts)


def write_snapshot(path, trace: Trace, every: int = 1) -> None:
    Path(path).write_bytes(snapshot_bytes(trace, every))


def read_snapshot(path) -> Trace:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ProtocolError(f"{path}: not a fedsl snapshot")
    off = len(MAGIC)
    bodies = []
    while off < len(buf):
        if off + 4 > len(buf):
            raise ProtocolError(f"{path}: truncated record length")
        (n,) = _LEN.unpack_from(buf, off)
        off += 4
        if off + n > len(buf):
            raise ProtocolError(f"{path}: truncated record")
        bodies.append(buf[off : off + n])
        off += n
    if not bodies:
        raise ProtocolError(f"{path}: missing metadata record")
    meta = json.loads(bodies[0])
    K = meta["K"]
    trace = Trace(meta["eta"], meta["I"], meta["rho_f"], meta["T"], meta["L_c"])
    slots = {
        wire.MsgType.SNAPSHOT_CLIENT: "client_weights",
        wire.MsgType.SNAPSHOT_PRUNED: "client_pruned",
        wire.MsgType.SNAPSHOT_GRAD: "client_grads",
    }
    by_round = {}
    for body in bodies[1:]:
        rnd, cid, kind, params = wire.decode_model(body)
        rt = by_round.get(rnd)
        if rt is None:
            rt = by_round[rnd] = RoundTrace(rnd, [None] * K, [None] * K, [None] * K, None)
        if kind == wire.MsgType.SNAPSHOT_SERVER:
            rt.server_weights = params
        elif kind in slots:
            if cid >= K:
                raise ProtocolError(f"{path}: client id {cid} >= K={K}")
            getattr(rt, slots[kind])[cid] = params
        else:
            raise ProtocolError(f"{path}: unexpected message type {kind.name}")
    for rnd in sorted(by_round):
        rt = by_round[rnd]
        if rt.server_weights is None or any(
            v is None for v in rt.client_weights + rt.client_pruned + rt.client_grads
        ):
            raise ProtocolError(f"{path}: round {rnd} is incomplete")
        trace.rounds.append(rt)
    return trace
