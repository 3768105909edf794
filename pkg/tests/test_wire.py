import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsl.errors import ProtocolError
from fedsl.wire import (
    ActivationGrads,
    MsgType,
    SmashedData,
    act_grad_bytes,
    decode_model,
    encode_model,
    model_bytes,
    smashed_bytes,
)


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@settings(max_examples=50, deadline=None)
@given(batch=st.integers(1, 40), dim=st.integers(1, 9), seed=st.integers(0, 2**16))
def test_smashed_roundtrip(batch, dim, seed):
    rng = np.random.default_rng(seed)
    keep = np.flatnonzero(rng.random(batch) < 0.6)
    msg = SmashedData(
        round=int(rng.integers(0, 2**31)),
        client_id=int(rng.integers(0, 100)),
        kept_row_indices=keep,
        kept_rows=f32(rng.normal(size=(len(keep), dim))),
        labels=rng.integers(0, 10, size=batch),
        feature_dim=dim,
    )
    buf = msg.to_bytes()
    assert len(buf) == msg.payload_bytes == smashed_bytes(len(keep), dim, batch)
    back = SmashedData.from_bytes(buf, dim)
    assert (back.round, back.client_id) == (msg.round, msg.client_id)
    np.testing.assert_array_equal(back.kept_row_indices, keep)
    np.testing.assert_array_equal(back.kept_rows, msg.kept_rows)
    np.testing.assert_array_equal(back.labels, msg.labels)
    np.testing.assert_array_equal(back.dense(), msg.dense())


def test_smashed_dense_zero_fills():
    msg = SmashedData(0, 1, np.array([0, 2]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0, 1, 2]), 2)
    np.testing.assert_array_equal(msg.dense(), [[1, 2], [0, 0], [3, 4]])


def test_smashed_size_example():
    # 32 rows kept of 32, 8 features
    assert smashed_bytes(32, 8, 32) == 8 + 4 + 128 + 1024 + 64


def test_act_grad_roundtrip():
    rng = np.random.default_rng(0)
    keep = np.array([1, 3, 4])
    msg = ActivationGrads(5, 2, keep, f32(rng.normal(size=(3, 4))), 4)
    buf = msg.to_bytes()
    assert len(buf) == msg.payload_bytes == act_grad_bytes(3, 4)
    back = ActivationGrads.from_bytes(buf, 4)
    np.testing.assert_array_equal(back.rows, msg.rows)
    np.testing.assert_array_equal(back.dense(6)[[0, 2, 5]], 0.0)


def test_model_roundtrip_and_size():
    rng = np.random.default_rng(1)
    params = [(f32(rng.normal(size=(4, 3))), f32(rng.normal(size=4))), (f32(rng.normal(size=(2, 4))), f32(rng.normal(size=2)))]
    buf = encode_model(7, 3, MsgType.MODEL_UPLOAD, params)
    assert len(buf) == model_bytes([(4, 3), (2, 4)])
    rnd, cid, kind, back = decode_model(buf)
    assert (rnd, cid, kind) == (7, 3, MsgType.MODEL_UPLOAD)
    for (w, b), (w2, b2) in zip(params, back):
        np.testing.assert_array_equal(w, w2)
        np.testing.assert_array_equal(b, b2)


def test_wrong_type_rejected():
    buf = ActivationGrads(0, 0, np.array([0]), np.zeros((1, 2)), 2).to_bytes()
    with pytest.raises(ProtocolError):
        SmashedData.from_bytes(buf, 2)


def test_truncated_rejected():
    buf = ActivationGrads(0, 0, np.array([0, 1]), np.zeros((2, 2)), 2).to_bytes()
    with pytest.raises(ProtocolError):
        ActivationGrads.from_bytes(buf[:-3], 2)
    with pytest.raises(ProtocolError):
        ActivationGrads.from_bytes(buf[:6], 2)
    model = encode_model(0, 0, MsgType.MODEL_BROADCAST, [(np.zeros((2, 2)), np.zeros(2))])
    with pytest.raises(ProtocolError):
        decode_model(model[:-1])


def test_unknown_model_type_rejected():
    buf = bytearray(encode_model(0, 0, MsgType.MODEL_UPLOAD, []))
    buf[6] = 99
    with pytest.raises(ProtocolError):
        decode_model(bytes(buf))
