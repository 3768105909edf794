"""Byte-exact little-endian encoding of the messages exchanged in a round.

Every message starts with an 8-byte header ``{u32 round, u16 client_id, u16 msg_type}``.

* smashed data (uplink): header, ``u32 kept_count``, kept row indices (u32),
  kept rows (f32, row-major), labels for the whole batch (u16)
* activation gradients (downlink): header, ``u32 kept_count``, kept row
  indices (u32), gradient rows (f32, row-major)
* model (client upload, server broadcast, snapshots): header, then per layer
  ``{u32 rows, u32 cols, f32 weights (row-major), f32 biases}``

The simulator keeps float64 values in memory and uses these encodings for
byte accounting, snapshots and interoperability.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from fedsl.errors import ProtocolError

HEADER = struct.Struct("<IHH")
U32 = struct.Struct("<I")
HEADER_BYTES = HEADER.size
SERVER_ID = 0xFFFF


class MsgType(enum.IntEnum):
    SMASHED = 1
    ACT_GRAD = 2
    MODEL_UPLOAD = 3
    MODEL_BROADCAST = 4
    SNAPSHOT_CLIENT = 5
    SNAPSHOT_PRUNED = 6
    SNAPSHOT_GRAD = 7
    SNAPSHOT_SERVER = 8


@dataclass
class SmashedData:
    """Post-dropout split-layer activations of one client batch, plus its labels."""

    round: int
    client_id: int
    kept_row_indices: np.ndarray
    kept_rows: np.ndarray
    labels: np.ndarray
    feature_dim: int

    @property
    def batch_size(self) -> int:
        return len(self.labels)

    @property
    def kept_count(self) -> int:
        return len(self.kept_row_indices)

    @property
    def payload_bytes(self) -> int:
        return smashed_bytes(self.kept_count, self.feature_dim, self.batch_size)

    def dense(self) -> np.ndarray:
        """Full batch with dropped rows zero-filled."""
        out = np.zeros((self.batch_size, self.feature_dim))
        out[self.kept_row_indices] = self.kept_rows
        return out

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                HEADER.pack(self.round, self.client_id, MsgType.SMASHED),
                U32.pack(self.kept_count),
                np.asarray(self.kept_row_indices, dtype="<u4").tobytes(),
                np.asarray(self.kept_rows, dtype="<f4").tobytes(),
                np.asarray(self.labels, dtype="<u2").tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, buf: bytes, feature_dim: int) -> "SmashedData":
        rnd, cid, kind = _read_header(buf, MsgType.SMASHED)
        k, off = _read_u32(buf, HEADER_BYTES)
        rest = len(buf) - off - 4 * k - 4 * k * feature_dim
        if rest < 0 or rest % 2:
            raise ProtocolError(f"smashed payload of {len(buf)} bytes inconsistent with dim {feature_dim}")
        idx = np.frombuffer(buf, "<u4", k, off).astype(np.int64)
        off += 4 * k
        rows = np.frombuffer(buf, "<f4", k * feature_dim, off).astype(np.float64)
        off += 4 * k * feature_dim
        labels = np.frombuffer(buf, "<u2", rest // 2, off).astype(np.int64)
        return cls(rnd, cid, idx, rows.reshape(k, feature_dim), labels, feature_dim)


@dataclass
class ActivationGrads:
    """Loss gradient w.r.t. the kept split-layer rows, sent back to one client."""

    round: int
    client_id: int
    kept_row_indices: np.ndarray
    rows: np.ndarray
    feature_dim: int

    @property
    def payload_bytes(self) -> int:
        return act_grad_bytes(len(self.kept_row_indices), self.feature_dim)

    def dense(self, batch_size: int) -> np.ndarray:
        out = np.zeros((batch_size, self.feature_dim))
        out[self.kept_row_indices] = self.rows
        return out

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                HEADER.pack(self.round, self.client_id, MsgType.ACT_GRAD),
                U32.pack(len(self.kept_row_indices)),
                np.asarray(self.kept_row_indices, dtype="<u4").tobytes(),
                np.asarray(self.rows, dtype="<f4").tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, buf: bytes, feature_dim: int) -> "ActivationGrads":
        rnd, cid, _ = _read_header(buf, MsgType.ACT_GRAD)
        k, off = _read_u32(buf, HEADER_BYTES)
        if len(buf) != act_grad_bytes(k, feature_dim):
            raise ProtocolError(f"gradient payload of {len(buf)} bytes inconsistent with dim {feature_dim}")
        idx = np.frombuffer(buf, "<u4", k, off).astype(np.int64)
        off += 4 * k
        rows = np.frombuffer(buf, "<f4", k * feature_dim, off).astype(np.float64)
        return cls(rnd, cid, idx, rows.reshape(k, feature_dim), feature_dim)


def smashed_bytes(kept: int, feature_dim: int, batch_size: int) -> int:
    return HEADER_BYTES + 4 + 4 * kept + 4 * kept * feature_dim + 2 * batch_size


def act_grad_bytes(kept: int, feature_dim: int) -> int:
    return HEADER_BYTES + 4 + 4 * kept + 4 * kept * feature_dim


def model_bytes(shapes) -> int:
    """Size of a model message for layers of the given ``(rows, cols)`` shapes."""
    return HEADER_BYTES + sum(8 + 4 * r * c + 4 * r for r, c in shapes)


def encode_model(rnd: int, client_id: int, msg_type: MsgType, params) -> bytes:
    """Encode ``params``, a sequence of ``(weights, bias)`` pairs."""
    parts = [HEADER.pack(rnd, client_id, msg_type)]
    for w, b in params:
        w = np.asarray(w)
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.asarray(w, dtype="<f4").tobytes())
        parts.append(np.asarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_model(buf: bytes):
    """Inverse of :func:`encode_model`: ``(round, client_id, msg_type, [(w, b), ...])``."""
    if len(buf) < HEADER_BYTES:
        raise ProtocolError("truncated header")
    rnd, cid, kind = HEADER.unpack_from(buf, 0)
    off = HEADER_BYTES
    params = []
    while off < len(buf):
        if off + 8 > len(buf):
            raise ProtocolError("truncated layer header")
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        need = 4 * rows * cols + 4 * rows
        if off + need > len(buf):
            raise ProtocolError("truncated layer payload")
        w = np.frombuffer(buf, "<f4", rows * cols, off).astype(np.float64).reshape(rows, cols)
        off += 4 * rows * cols
        b = np.frombuffer(buf, "<f4", rows, off).astype(np.float64)
        off += 4 * rows
        params.append((w, b))
    try:
        kind = MsgType(kind)
    except ValueError:
        raise ProtocolError(f"unknown message type {kind}") from None
    return rnd, cid, kind, params


def _read_header(buf, expected):
    if len(buf) < HEADER_BYTES + 4:
        raise ProtocolError("truncated message")
    rnd, cid, kind = HEADER.unpack_from(buf, 0)
    if kind != expected:
        raise ProtocolError(f"expected message type {expected.name}, got {kind}")
    return rnd, cid, kind


def _read_u32(buf, off):
    return U32.unpack_from(buf, off)[0], off + 4
