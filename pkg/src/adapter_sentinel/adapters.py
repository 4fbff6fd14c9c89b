"""PEFT adapter bundles: representation, materialisation, quantisation and I/O.

Weights follow the y = W x convention with W of shape [d, k]; a rank-r
adapter stores B [d, r] and A [r, k] so that the increment is B @ A.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.stats import norm

from . import container
from .autodiff import DimensionError, F64, Rng, Tensor, col_norm, matmul, mul, div, add, sub, reshape

MATRICES = ("q", "k", "v", "o")
METHODS = ("LoRA", "QLoRA", "DoRA", "LoRAPlus", "AdaLoRA")
LOW_RANK = ("LoRA", "QLoRA", "LoRAPlus")


class MissingMatrixError(KeyError):
    pass


class SingularityError(ArithmeticError):
    pass


class MethodError(ValueError):
    pass


def canonical_targets(targets) -> tuple[str, ...]:
    targets = set(targets)
    unknown = targets - set(MATRICES)
    if unknown:
        raise ValueError(f"unknown target matrices {sorted(unknown)}")
    return tuple(t for t in MATRICES if t in targets)


def nf4_codebook() -> np.ndarray:
    """16 levels from normal quantiles: 7 negative, zero, 8 positive, spanning [-1, 1]."""
    offset = 0.9677083
    pos = norm.ppf(np.linspace(offset, 0.5, 9)[:-1])
    neg = -norm.ppf(np.linspace(offset, 0.5, 8)[:-1])
    levels = np.concatenate([pos, [0.0], neg])
    levels /= np.abs(levels).max()
    return np.sort(levels)


@dataclass(frozen=True)
class QuantizationSpec:
    bits: int = 4
    block_size: int = 64
    codebook: tuple[float, ...] = tuple(nf4_codebook().tolist())

    def __post_init__(self):
        cb = np.asarray(self.codebook)
        if len(cb) != 2 ** self.bits:
            raise ValueError(f"codebook needs {2 ** self.bits} levels, got {len(cb)}")
        if np.any(np.diff(cb) <= 0) or 0.0 not in cb or cb[0] != -1.0 or cb[-1] != 1.0:
            raise ValueError("codebook must be strictly increasing, include 0 and span [-1, 1]")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")


def quantize_dequantize(w: np.ndarray, spec: QuantizationSpec = QuantizationSpec()) -> np.ndarray:
    """Blockwise absmax scaling, snap to the nearest codebook level, rescale."""
    w = np.asarray(w, dtype=np.float32)
    if w.size == 0:
        raise DimensionError("cannot quantise an empty tensor")
    flat = w.ravel().astype(F64)
    cb = np.asarray(spec.codebook, dtype=F64)
    out = np.empty_like(flat)
    for s in range(0, flat.size, spec.block_size):
        blk = flat[s:s + spec.block_size]
        scale = np.abs(blk).max()
        if scale == 0.0:
            out[s:s + spec.block_size] = 0.0
            continue
        x = blk / scale
        hi = np.clip(np.searchsorted(cb, x), 1, len(cb) - 1)
        lo = hi - 1
        idx = np.where(np.abs(x - cb[lo]) <= np.abs(cb[hi] - x), lo, hi)
        out[s:s + spec.block_size] = cb[idx] * scale
    return out.astype(np.float32).reshape(w.shape)


@dataclass(frozen=True)
class PeftMethod:
    tag: str = "LoRA"
    rank: int = 8
    lr_ratio: float = 16.0
    quant: QuantizationSpec | None = None

    def __post_init__(self):
        if self.tag not in METHODS:
            raise MethodError(f"unknown PEFT method {self.tag!r}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.tag == "LoRAPlus" and self.lr_ratio < 1:
            raise ValueError("LoRA+ learning-rate ratio must be >= 1")
        if self.tag == "QLoRA" and self.quant is None:
            object.__setattr__(self, "quant", QuantizationSpec())

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"tag": self.tag, "rank": self.rank}
        if self.tag == "LoRAPlus":
            out["lr_ratio"] = self.lr_ratio
        if self.quant is not None:
            out["quant"] = {"bits": self.quant.bits, "block_size": self.quant.block_size,
                            "codebook": list(self.quant.codebook)}
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "PeftMethod":
        q = obj.get("quant")
        quant = None if q is None else QuantizationSpec(q["bits"], q["block_size"], tuple(q["codebook"]))
        return cls(obj["tag"], int(obj["rank"]), float(obj.get("lr_ratio", 16.0)), quant)


FACTOR_NAMES = {
    "LoRA": ("B", "A"), "QLoRA": ("B", "A"), "LoRAPlus": ("B", "A"),
    "DoRA": ("B", "A", "m", "V"), "AdaLoRA": ("P", "Lambda", "Q"),
}
FROZEN_FACTORS = {"V"}


@dataclass
class LayerDelta:
    factors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    dense: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class AdapterBundle:
    layers: list[LayerDelta]
    method: PeftMethod
    target_set: tuple[str, ...]
    d: int
    k: int
    label: str | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def perturbed(self) -> bool:
        return any(layer.dense for layer in self.layers)

    def copy(self) -> "AdapterBundle":
        return copy.deepcopy(self)

    def digest(self) -> str:
        """SHA-256 of the serialised bundle; used for provenance."""
        return hashlib.sha256(_encode_bundle(self)).hexdigest()


def init_adapter(method: PeftMethod, num_layers: int, d: int, k: int, rng: Rng,
                 targets=("q", "v"), base_weights: Mapping[tuple[int, str], np.ndarray] | None = None,
                 init_std: float = 0.02) -> AdapterBundle:
    """Fresh adapter whose increment is exactly zero.

    DoRA needs the frozen base weight of every targeted matrix (its direction
    V starts at W0 and its magnitude at the column norms of W0).
    """
    targets = canonical_targets(targets)
    r = method.rank
    if r > min(d, k):
        raise ValueError(f"rank {r} exceeds min(d, k) = {min(d, k)}")
    layers = []
    for layer in range(num_layers):
        facs = {}
        for t in targets:
            if method.tag == "AdaLoRA":
                facs[t] = {"P": rng.normal((d, r), init_std), "Lambda": np.zeros((r,), np.float32),
                           "Q": rng.normal((r, k), init_std)}
                continue
            f = {"B": np.zeros((d, r), np.float32), "A": rng.normal((r, k), init_std)}
            if method.tag == "DoRA":
                if base_weights is None:
                    raise ValueError("DoRA initialisation needs the base weights")
                w0 = np.asarray(base_weights[(layer, t)], np.float32)
                f["V"] = w0.copy()
                f["m"] = np.sqrt((w0.astype(F64) ** 2).sum(axis=0, keepdims=True)).astype(np.float32)
            facs[t] = f
        layers.append(LayerDelta(facs))
    return AdapterBundle(layers, method, targets, d, k)


# -------------------------------------------------------------- materialise

def dora_weight(f: Mapping[str, Tensor]) -> Tensor:
    """m * (V + B A) / ||V + B A||_c, all as tensors (differentiable in m, B, A)."""
    w = add(f["V"], matmul(f["B"], f["A"]))
    norms = col_norm(w)
    if np.any(norms.data == 0):
        raise SingularityError("zero column norm in DoRA direction")
    return mul(w, div(f["m"], norms))


def delta_tensor(tag: str, f: Mapping[str, Tensor]) -> Tensor:
    """Effective increment W_effective - W0 as a differentiable tensor."""
    if tag in LOW_RANK:
        return matmul(f["B"], f["A"])
    if tag == "AdaLoRA":
        return matmul(mul(f["P"], reshape(f["Lambda"], (1, -1))), f["Q"])
    if tag == "DoRA":
        return sub(dora_weight(f), f["V"])
    raise MethodError(tag)


def materialize(bundle: AdapterBundle, layer: int, matrix: str) -> np.ndarray:
    """Dense [d, k] effective increment of one targeted matrix."""
    if not 0 <= layer < bundle.num_layers:
        raise IndexError(f"layer {layer} out of range for {bundle.num_layers} layers")
    ld = bundle.layers[layer]
    if matrix in ld.dense:
        return ld.dense[matrix]
    if matrix not in ld.factors:
        raise MissingMatrixError(f"matrix {matrix!r} not in target set {bundle.target_set}")
    f = {n: Tensor(a) for n, a in ld.factors[matrix].items()}
    return delta_tensor(bundle.method.tag, f).data


def dora_column_norms(bundle: AdapterBundle, layer: int, matrix: str) -> np.ndarray:
    if bundle.method.tag != "DoRA":
        raise MethodError(f"column norms need a DoRA bundle, got {bundle.method.tag}")
    f = {n: Tensor(a) for n, a in bundle.layers[layer].factors[matrix].items()}
    w = dora_weight(f).data.astype(F64)
    return np.sqrt((w * w).sum(axis=0))


def dense_deltas(bundle: AdapterBundle) -> dict[tuple[int, str], np.ndarray]:
    return {(layer, t): materialize(bundle, layer, t)
            for layer in range(bundle.num_layers) for t in bundle.target_set}


def with_dense(bundle: AdapterBundle, deltas: Mapping[tuple[int, str], np.ndarray],
               **meta) -> AdapterBundle:
    """New bundle whose increments are the given dense matrices (factors kept for reference)."""
    out = bundle.copy()
    for (layer, t), arr in deltas.items():
        if arr.shape != (bundle.d, bundle.k):
            raise DimensionError(f"dense delta {arr.shape} != ({bundle.d}, {bundle.k})")
        out.layers[layer].dense[t] = np.asarray(arr, np.float32).copy()
    out.metadata.update(meta)
    return out


# --------------------------------------------------------------------- I/O

class BundleFormatError(container.FormatError):
    pass


def _encode_bundle(bundle: AdapterBundle) -> bytes:
    header, tensors = _bundle_payload(bundle)
    return container.encode(header, tensors)


def _bundle_payload(bundle: AdapterBundle):
    if not bundle.target_set:
        raise ValueError("adapter bundle has an empty target set")
    meta = dict(bundle.metadata)
    header = {
        "kind": "adapter",
        "method": bundle.method.to_json(),
        "r": bundle.method.rank,
        "L": bundle.num_layers,
        "d": bundle.d,
        "k": bundle.k,
        "target_set": list(bundle.target_set),
        "label": bundle.label,
        "seed": meta.pop("seed", None),
        "asr": meta.pop("asr", None),
        "ca": meta.pop("ca", None),
        "metadata": meta,
    }
    tensors = {}
    for i, ld in enumerate(bundle.layers):
        if set(ld.factors) | set(ld.dense) != set(bundle.target_set):
            raise ValueError(f"layer {i} matrices differ from target set {bundle.target_set}")
        for t in bundle.target_set:
            for name in FACTOR_NAMES[bundle.method.tag]:
                if t in ld.factors:
                    tensors[f"layer.{i}.{t}.{name}"] = ld.factors[t][name]
            if t in ld.dense:
                tensors[f"layer.{i}.{t}.dense"] = ld.dense[t]
    return header, tensors


def save_bundle(bundle: AdapterBundle, path) -> None:
    header, tensors = _bundle_payload(bundle)
    container.write(path, header, tensors)


def load_bundle(path) -> AdapterBundle:
    header, tensors = container.read(path)
    if header.get("kind") != "adapter":
        raise BundleFormatError("not an adapter container")
    method = PeftMethod.from_json(header["method"])
    targets = tuple(header["target_set"])
    layers = [LayerDelta() for _ in range(int(header["L"]))]
    for name, arr in tensors.items():
        try:
            _, i, t, part = name.split(".")
            ld = layers[int(i)]
        except (ValueError, IndexError) as exc:
            raise BundleFormatError(f"unexpected tensor name {name!r}") from exc
        if part == "dense":
            ld.dense[t] = arr
        else:
            ld.factors.setdefault(t, {})[part] = arr
    names = FACTOR_NAMES[method.tag]
    for i, ld in enumerate(layers):
        for t in targets:
            if t in ld.factors and set(ld.factors[t]) != set(names):
                raise BundleFormatError(f"layer {i} matrix {t} has factors {sorted(ld.factors[t])}")
            if t not in ld.factors and t not in ld.dense:
                raise BundleFormatError(f"layer {i} is missing matrix {t}")
    meta = dict(header.get("metadata", {}))
    for key in ("seed", "asr", "ca"):
        if header.get(key) is not None:
            meta[key] = header[key]
    return AdapterBundle(layers, method, targets, int(header["d"]), int(header["k"]),
                         header.get("label"), meta)
