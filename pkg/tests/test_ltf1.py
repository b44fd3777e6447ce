import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ltfe import ltf1
from ltfe.errors import FormatError

arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5),
                    elements=st.floats(allow_nan=True, allow_infinity=True, width=64))


class TestRoundTrip:
    @settings(max_examples=80, deadline=None)
    @given(arrays)
    def test_bit_identical(self, a):
        out, end = ltf1.decode(ltf1.encode(a))
        assert out.shape == a.shape
        assert out.tobytes() == a.tobytes()
        assert end == len(ltf1.encode(a))

    def test_file_round_trip(self, tmp_path, rng):
        a = rng.standard_normal((3, 4, 2))
        ltf1.write(tmp_path / "a.ltf", a)
        assert ltf1.read(tmp_path / "a.ltf").tobytes() == a.tobytes()

    def test_layout(self):
        blob = ltf1.encode(np.array([[1.0, 2.0, 3.0]]))
        assert blob[:4] == b"LTF1"
        assert blob[4] == 2
        assert struct.unpack("<2I", blob[5:13]) == (1, 3)
        assert struct.unpack("<3d", blob[13:]) == (1.0, 2.0, 3.0)

    def test_many(self, tmp_path, rng):
        arrs = [rng.standard_normal(s) for s in [(2,), (3, 3), (1, 2, 3)]]
        offsets = ltf1.write_many(tmp_path / "m.ltf", arrs)
        assert offsets[0] == 0
        assert offsets[1] == len(ltf1.encode(arrs[0]))
        back = ltf1.read_many(tmp_path / "m.ltf")
        assert all(x.tobytes() == y.tobytes() for x, y in zip(arrs, back))

    def test_big_endian_input_is_normalised(self):
        a = np.arange(4, dtype=">f8")
        out, _ = ltf1.decode(ltf1.encode(a))
        np.testing.assert_array_equal(out, np.arange(4.0))


class TestMalformed:
    good = ltf1.encode(np.ones((2, 3)))

    @pytest.mark.parametrize("buf, offset", [
        (b"LT", 0),
        (b"XXXX\x01\x01\x00\x00\x00", 0),
        (b"LTF1", 4),
        (b"LTF1\x02\x01\x00\x00\x00", 5),
        (b"LTF1\x01\x00\x00\x00\x00", 5),
        (good[:-3], 13),
    ])
    def test_offsets(self, buf, offset):
        with pytest.raises(FormatError) as exc:
            ltf1.decode(buf)
        assert exc.value.offset == offset
        assert f"offset {offset}" in str(exc.value)

    def test_second_record_offset(self):
        buf = self.good + b"LTF9"
        with pytest.raises(FormatError) as exc:
            ltf1.decode_all(buf)
        assert exc.value.offset == len(self.good)

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "t.ltf").write_bytes(self.good + b"\x00")
        with pytest.raises(FormatError) as exc:
            ltf1.read(tmp_path / "t.ltf")
        assert exc.value.offset == len(self.good)

    def test_rejects_empty_dimension(self):
        with pytest.raises(ValueError):
            ltf1.encode(np.zeros((0, 3)))
