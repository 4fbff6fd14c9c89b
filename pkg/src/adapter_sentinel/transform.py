"""Adapter bundle -> stacked-delta feature tensor, and its adjoint."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .adapters import MATRICES, AdapterBundle, load_bundle, materialize
from .autodiff import DimensionError


CACHE_ENV = "ADAPTER_SENTINEL_CACHE"


class LayoutError(ValueError):
    pass


@dataclass
class FeatureTensor:
    data: np.ndarray  # [(n_t * L), d, k]
    layout: list[tuple[int, str]]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def layout_for(num_layers: int, targets) -> list[tuple[int, str]]:
    """Channel order: layers ascending, matrices in canonical q, k, v, o order."""
    ts = [t for t in MATRICES if t in set(targets)]
    return [(layer, t) for layer in range(num_layers) for t in ts]


def transform(bundle: AdapterBundle, standardize: bool = False) -> FeatureTensor:
    """Materialise every targeted increment and stack them along a new first axis.

    ``standardize`` z-scores each channel; it is off by default because the
    raw increments are the detector's intended input.
    """
    layout = layout_for(bundle.num_layers, bundle.target_set)
    chans = []
    for layer, t in layout:
        delta = materialize(bundle, layer, t)
        if delta.shape != (bundle.d, bundle.k):
            raise DimensionError(f"layer {layer} matrix {t} has shape {delta.shape}, "
                                 f"expected ({bundle.d}, {bundle.k})")
        chans.append(delta)
    data = np.stack(chans).astype(np.float32)
    if standardize:
        mu = data.mean(axis=(1, 2), keepdims=True, dtype=np.float64)
        sd = data.std(axis=(1, 2), keepdims=True, dtype=np.float64)
        data = ((data - mu) / np.where(sd > 0, sd, 1.0)).astype(np.float32)
    return FeatureTensor(data, layout)


def transform_dense(deltas: dict[tuple[int, str], np.ndarray], layout: list[tuple[int, str]]) -> FeatureTensor:
    """Stack already-dense increments in the given layout."""
    missing = [key for key in layout if key not in deltas]
    if missing:
        raise LayoutError(f"no delta for channels {missing}")
    return FeatureTensor(np.stack([deltas[key] for key in layout]), list(layout))


def transform_adjoint(g: np.ndarray, layout: list[tuple[int, str]]) -> dict[tuple[int, str], np.ndarray]:
    """Route a gradient w.r.t. the feature tensor back to per-(layer, matrix) increments."""
    g = np.asarray(g)
    if g.ndim != 3 or g.shape[0] != len(layout):
        raise LayoutError(f"gradient of shape {g.shape} does not match a {len(layout)}-channel layout")
    return {key: g[c].copy() for c, key in enumerate(layout)}


def cache_dir_from_env() -> Path | None:
    """Transform cache directory from ``ADAPTER_SENTINEL_CACHE``; None disables caching."""
    val = os.environ.get(CACHE_ENV)
    return Path(val) if val else None


def transform_file(path, cache_dir=None, standardize: bool = False) -> FeatureTensor:
    """Transform a stored adapter, reusing a cached result keyed by the file's content hash."""
    raw = Path(path).read_bytes()
    if cache_dir is None:
        return transform(load_bundle(path), standardize)
    key = hashlib.sha256(raw + (b"z" if standardize else b"")).hexdigest()
    cpath = Path(cache_dir) / f"{key}.feature"
    if cpath.exists():
        try:
            header, tensors = container.read(cpath)
            return FeatureTensor(tensors["data"], [tuple(x) for x in header["layout"]])
        except (container.FormatError, KeyError):
            pass  # corrupt entry, rebuild below
    ft = transform(load_bundle(path), standardize)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    container.write(cpath, {"kind": "feature", "layout": ft.layout}, {"data": ft.data})
    return ft
