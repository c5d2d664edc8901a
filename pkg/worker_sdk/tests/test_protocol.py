import numpy as np
import pytest

from cmr_worker_sdk import protocol


class TestTensors:
    @pytest.mark.parametrize("dtype", ["<f4", "<f8", "u1", "<i4"])
    def test_roundtrip(self, rng, dtype):
        array = (rng.standard_normal((2, 3, 4)) * 50).astype(dtype)
        name, decoded, consumed = protocol.decode_tensor(
            protocol.encode_tensor("x", array))
        assert name == "x"
        assert np.array_equal(decoded, array)
        assert decoded.dtype == np.dtype(dtype)

    def test_many(self, rng):
        tensors = {"a": rng.rand(4).astype(np.float32),
                   "b": np.arange(6, dtype=np.int32).reshape(2, 3)}
        decoded, _ = protocol.decode_tensors(protocol.encode_tensors(tensors))
        assert set(decoded) == {"a", "b"}
        assert np.array_equal(decoded["b"], tensors["b"])

    def test_unsupported_dtype(self):
        with pytest.raises(protocol.ProtocolError):
            protocol.encode_tensor("x", np.zeros(2, dtype=np.float16))


class TestFrames:
    def test_load_roundtrip(self):
        payload = protocol.encode_load("identity", "cpu", {"k": "v"})
        model_id, device, params = protocol.decode_load(payload)
        assert (model_id, device, params) == ("identity", "cpu", {"k": "v"})

    def test_result_roundtrip(self, rng):
        tensor = rng.rand(3, 3).astype(np.float32)
        request_id, tensors, error = protocol.decode_result(
            protocol.encode_result(7, {"y": tensor}))
        assert request_id == 7 and error is None
        assert np.array_equal(tensors["y"], tensor)

    def test_result_error_roundtrip(self):
        request_id, tensors, error = protocol.decode_result(
            protocol.encode_result(9, error="went sideways"))
        assert request_id == 9 and tensors is None
        assert error == "went sideways"

    def test_frame_layout_matches_fixture_bytes(self, worker_fixture_paths):
        """The SDK's own encoders regenerate the shared conformance
        fixtures byte for byte."""
        input_path, reply_path = worker_fixture_paths
        tensor = np.arange(6, dtype=np.float32).reshape(2, 3)
        request = b"".join([
            protocol.encode_frame(protocol.LOAD,
                                  protocol.encode_load("identity", "cpu", {})),
            protocol.encode_frame(protocol.INFER,
                                  protocol.encode_infer(1, {"a": tensor})),
            protocol.encode_frame(protocol.SHUTDOWN),
        ])
        reply = b"".join([
            protocol.encode_frame(protocol.LOAD_ACK,
                                  protocol.encode_load_ack(True, "loaded identity")),
            protocol.encode_frame(protocol.RESULT,
                                  protocol.encode_result(1, {"a": tensor})),
        ])
        with open(input_path, "rb") as fh:
            assert fh.read() == request
        with open(reply_path, "rb") as fh:
            assert fh.read() == reply
