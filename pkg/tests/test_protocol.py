import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitecg import protocol as P
from splitecg.tensor import AdamState

u32 = st.integers(0, 2**32 - 1)
shapes = st.lists(st.integers(1, 6), min_size=1, max_size=4).map(tuple)


@st.composite
def tensors(draw, dtype=None):
    shape = draw(shapes)
    dt = draw(st.sampled_from([np.float32, np.float64])) if dtype is None else dtype
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * 10.0 ** rng.integers(-5, 5)).astype(dt)


@st.composite
def activations(draw):
    values = draw(tensors())
    labels = draw(st.lists(st.integers(0, 4), min_size=values.shape[0], max_size=values.shape[0]))
    return P.Activation(draw(u32), values, np.array(labels, dtype=np.uint8))


@st.composite
def predictions(draw):
    classes = draw(st.lists(st.integers(0, 255), max_size=20))
    return P.Predictions(draw(u32), np.array(classes, dtype=np.uint8))


messages = st.one_of(
    st.builds(P.Hello, st.integers(0, 2**64 - 1), st.floats(allow_nan=False), st.integers(0, 255),
              u32, st.booleans()),
    st.builds(P.ClientMeta, u32, u32),
    activations(),
    st.builds(P.Gradient, u32, tensors()),
    st.builds(P.Eval, u32, tensors()),
    predictions(),
    st.just(P.End()),
    st.builds(P.Error, st.integers(0, 0xFFFF), st.text(max_size=40)),
)


class TestFraming:
    def test_end_is_five_bytes(self):
        assert P.encode_message(P.End()) == b"\x01\x00\x00\x00\x05"

    def test_length_counts_type_and_payload(self):
        frame = P.encode_message(P.ClientMeta(7, 3))
        (length,) = struct.unpack_from("<I", frame)
        assert length == len(frame) - 4 == 9
        assert frame[4] == P.CLIENT_META

    def test_activation_size_batch_32(self):
        values = np.zeros((32, 16, 32), dtype=np.float32)
        frame = P.encode_message(P.Activation(0, values, np.zeros(32, dtype=np.uint8)))
        header = 4 + 1 + 4 + 4 + 3 * 4
        assert len(frame) == header + 65536 + 32

    def test_exact_mode_doubles_payload(self):
        f32 = P.encode_message(P.Gradient(1, np.zeros((2, 3), dtype=np.float32)))
        f64 = P.encode_message(P.Gradient(1, np.zeros((2, 3), dtype=np.float64)))
        assert len(f64) - len(f32) == 24
        assert P.decode_message(f64).values.dtype == np.float64

    def test_label_byte_for_class_a(self):
        frame = P.encode_message(P.Activation(0, np.zeros((1, 1), np.float32), np.array([3], np.uint8)))
        assert frame[-1] == 3

    def test_payload_little_endian(self):
        frame = P.encode_message(P.Gradient(2, np.array([1.0], dtype=np.float32)))
        assert frame[5:9] == b"\x02\x00\x00\x00"
        assert frame[-4:] == struct.pack("<f", 1.0)

    def test_rejects_integer_tensor(self):
        with pytest.raises(TypeError):
            P.encode_message(P.Gradient(0, np.zeros(3, dtype=np.int32)))

    def test_rejects_label_count_mismatch(self):
        with pytest.raises(ValueError):
            P.encode_message(P.Activation(0, np.zeros((2, 3), np.float32), np.zeros(3, np.uint8)))


class TestRoundtrip:
    @settings(max_examples=1000, deadline=None)
    @given(messages)
    def test_every_type(self, msg):
        frame = P.encode_message(msg)
        assert P.decode_message(frame) == msg
        assert P.read_message(io.BytesIO(frame)) == msg

    @settings(max_examples=1000, deadline=None)
    @given(activations())
    def test_activation(self, msg):
        got = P.decode_message(P.encode_message(msg))
        assert got.batch_index == msg.batch_index
        assert got.values.dtype == msg.values.dtype
        assert got.values.tobytes() == msg.values.tobytes()
        np.testing.assert_array_equal(got.labels, msg.labels)

    def test_stream_of_frames(self):
        msgs = [P.Hello(1, 0.001, 0, 32, True), P.ClientMeta(10, 2), P.End()]
        buf = b"".join(P.encode_message(m) for m in msgs)
        offset, got = 0, []
        while offset < len(buf):
            msg, offset = P.decode_frame(buf, offset)
            got.append(msg)
        assert got == msgs


class TestMalformed:
    def test_zero_length_is_recoverable(self):
        buf = b"\x00\x00\x00\x00" + P.encode_message(P.End())
        with pytest.raises(P.DecodeError) as info:
            P.decode_frame(buf)
        assert info.value.code == P.E_BAD_LENGTH
        msg, end = P.decode_frame(buf, info.value.resume_at)
        assert msg == P.End() and end == len(buf)

    def test_truncated_payload(self):
        frame = P.encode_message(P.Gradient(0, np.zeros((4, 4), np.float32)))
        with pytest.raises(P.DecodeError) as info:
            P.decode_message(frame[:-3])
        assert info.value.code == P.E_TRUNCATED
        with pytest.raises(P.DecodeError) as info:
            P.read_message(io.BytesIO(frame[:-3]))
        assert info.value.code == P.E_TRUNCATED

    def test_truncated_length_field(self):
        with pytest.raises(P.DecodeError) as info:
            P.decode_message(b"\x05\x00")
        assert info.value.code == P.E_TRUNCATED

    def test_unknown_type(self):
        with pytest.raises(P.DecodeError) as info:
            P.decode_message(b"\x01\x00\x00\x00\x42")
        assert info.value.code == P.E_UNKNOWN_TYPE
        assert info.value.resume_at == 5

    def test_dims_disagree_with_payload(self):
        payload = struct.pack("<III", 0, 1, 5) + b"\x00" * 12
        frame = struct.pack("<IB", 1 + len(payload), P.GRADIENT) + payload
        with pytest.raises(P.DecodeError) as info:
            P.decode_message(frame)
        assert info.value.code == P.E_BAD_PAYLOAD

    def test_dims_overflow(self):
        payload = struct.pack("<IIII", 0, 2, 2**31, 2**31)
        frame = struct.pack("<IB", 1 + len(payload), P.GRADIENT) + payload
        with pytest.raises(P.DecodeError) as info:
            P.decode_message(frame)
        assert info.value.code == P.E_BAD_PAYLOAD

    def test_bad_dim_count(self):
        payload = struct.pack("<II", 0, 0)
        frame = struct.pack("<IB", 1 + len(payload), P.ACTIVATION) + payload
        with pytest.raises(P.DecodeError):
            P.decode_message(frame)

    def test_trailing_bytes(self):
        with pytest.raises(P.DecodeError):
            P.decode_message(P.encode_message(P.End()) + b"\x00")

    def test_oversized_length(self):
        with pytest.raises(P.DecodeError) as info:
            P.decode_message(struct.pack("<I", P.MAX_FRAME + 1) + b"\x01")
        assert info.value.code == P.E_BAD_LENGTH

    def test_clean_eof(self):
        with pytest.raises(P.ConnectionClosed):
            P.read_message(io.BytesIO(b""))

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=64))
    def test_random_bytes_never_crash(self, data):
        try:
            P.decode_message(data)
        except P.DecodeError:
            pass


class TestCheckpoint:
    def test_roundtrip_with_optimizer(self, tmp_path):
        rng = np.random.default_rng(0)
        params = [rng.normal(size=(3, 1, 7)), rng.normal(size=3), rng.normal(size=(5, 4))]
        adam = AdamState.zeros_like(params)
        adam.m[0][...] = 1.5
        adam.v[2][...] = 0.25
        adam.step = 17
        path = tmp_path / "a.ckpt"
        P.save_checkpoint(path, params, epoch=4, adam=adam)
        assert path.read_bytes()[:4] == b"SPL1"
        assert struct.unpack_from("<H", path.read_bytes(), 4)[0] == P.CHECKPOINT_VERSION
        ckpt = P.load_checkpoint(path)
        assert ckpt.epoch == 4 and ckpt.adam_step == 17
        for a, b in zip(params + adam.m + adam.v, ckpt.params + ckpt.adam_m + ckpt.adam_v):
            np.testing.assert_array_equal(a, b)

    def test_params_only(self, tmp_path):
        path = tmp_path / "p.ckpt"
        P.save_checkpoint(path, [np.arange(6.0).reshape(2, 3)])
        ckpt = P.load_checkpoint(path)
        assert ckpt.adam_m is None
        np.testing.assert_array_equal(ckpt.params[0], np.arange(6.0).reshape(2, 3))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(P.CheckpointError):
            P.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.ckpt"
        P.save_checkpoint(path, [np.ones(10)])
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(P.CheckpointError):
            P.load_checkpoint(path)
