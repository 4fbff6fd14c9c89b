import numpy as np
import pytest

from adapter_sentinel.adapters import PeftMethod, materialize, with_dense
from adapter_sentinel.autodiff import DimensionError
from adapter_sentinel.transform import (LayoutError, layout_for, transform, transform_adjoint, transform_dense,
                                        transform_file)
from adapter_sentinel.adapters import save_bundle

from conftest import random_bundle

TARGET_SETS = [("q",), ("k",), ("v",), ("q", "k"), ("q", "v"), ("q", "k", "v", "o")]


def test_small_shape():
    b = random_bundle(PeftMethod("LoRA", 2), d=3, layers=2)
    assert transform(b).shape == (4, 3, 3)


@pytest.mark.parametrize("targets", TARGET_SETS)
def test_shape_for_target_sets(targets):
    b = random_bundle("LoRA", targets=targets, layers=3)
    ft = transform(b)
    assert ft.shape == (len(targets) * 3, 16, 16)
    assert len(ft.layout) == ft.shape[0]


def test_channel_indexing():
    b = random_bundle(PeftMethod("LoRA", 2), d=3, layers=2)
    ft = transform(b)
    np.testing.assert_array_equal(ft.data[3], materialize(b, 1, "v"))
    for c, (layer, t) in enumerate(ft.layout):
        assert c == layer * 2 + ("q", "v").index(t)


def test_canonical_order_ignores_config_order():
    assert layout_for(1, ("v", "q", "o")) == [(0, "q"), (0, "v"), (0, "o")]


def test_adjoint_zero_and_one_hot():
    layout = layout_for(2, ("q", "v"))
    assert all(not g.any() for g in transform_adjoint(np.zeros((4, 3, 3)), layout).values())
    g = np.zeros((4, 3, 3))
    g[3, 1, 2] = 1.0
    out = transform_adjoint(g, layout)
    nz = [(key, tuple(np.argwhere(v)[0])) for key, v in out.items() if v.any()]
    assert nz == [((1, "v"), (1, 2))]


def test_adjoint_roundtrip():
    layout = layout_for(3, ("q", "k", "v", "o"))
    g = np.random.default_rng(0).standard_normal((12, 5, 4)).astype(np.float32)
    np.testing.assert_array_equal(transform_dense(transform_adjoint(g, layout), layout).data, g)


def test_adjoint_layout_mismatch():
    with pytest.raises(LayoutError):
        transform_adjoint(np.zeros((3, 2, 2)), layout_for(2, ("q", "v")))


def test_linearity_on_dense_deltas():
    rng = np.random.default_rng(1)
    b = random_bundle("LoRA")
    d1 = {k: rng.standard_normal((16, 16)).astype(np.float32) for k in layout_for(2, ("q", "v"))}
    d2 = {k: rng.standard_normal((16, 16)).astype(np.float32) for k in d1}
    a, c = 0.75, -1.5
    mix = {k: a * d1[k] + c * d2[k] for k in d1}
    lhs = transform(with_dense(b, mix)).data
    rhs = a * transform(with_dense(b, d1)).data + c * transform(with_dense(b, d2)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_inconsistent_dims():
    b = random_bundle("LoRA")
    b.layers[1].dense["v"] = np.zeros((16, 15), np.float32)
    with pytest.raises(DimensionError):
        transform(b)


def test_standardize_is_optional():
    b = random_bundle("LoRA")
    raw, std = transform(b), transform(b, standardize=True)
    assert not np.allclose(raw.data, std.data)
    np.testing.assert_allclose(std.data.reshape(4, -1).std(axis=1), 1.0, atol=1e-4)


def test_cached_transform(tmp_path):
    b = random_bundle("LoRA")
    save_bundle(b, tmp_path / "a.adapter")
    f1 = transform_file(tmp_path / "a.adapter", tmp_path / "cache")
    assert len(list((tmp_path / "cache").iterdir())) == 1
    f2 = transform_file(tmp_path / "a.adapter", tmp_path / "cache")
    np.testing.assert_array_equal(f1.data, f2.data)
    assert f1.layout == f2.layout
