import numpy as np
import pytest

from adapter_sentinel import container


def test_roundtrip(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.zeros((0,), np.float32), "c": np.float32(3)}
    container.write(tmp_path / "x.bin", {"kind": "t", "n": 1}, t)
    h, back = container.read(tmp_path / "x.bin")
    assert h == {"kind": "t", "n": 1}
    assert list(back) == ["a", "b", "c"]
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])


def test_encoding_is_deterministic():
    t = {"w": np.ones((3, 3), np.float32)}
    assert container.encode({"z": 1, "a": 2}, t) == container.encode({"a": 2, "z": 1}, t)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:-4],
    lambda b: b + b"\0\0\0\0",
    lambda b: b.replace(b"\0", b"", 1),
    lambda b: b[:9] + b"{" + b[10:],
])
def test_corruption_is_detected(mutate):
    buf = container.encode({"k": 1}, {"w": np.ones((2, 2), np.float32)})
    with pytest.raises(container.FormatError):
        container.decode(mutate(buf))


def test_no_temp_file_left(tmp_path):
    container.write(tmp_path / "a.bin", {}, {"x": np.ones(2, np.float32)})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.bin"]
