"""A small pre-LayerNorm transformer encoder classifier with adapter hooks."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Mapping

import numpy as np

from . import container
from .adapters import (LOW_RANK, AdapterBundle, QuantizationSpec, dora_weight, quantize_dequantize)
from .autodiff import (DimensionError, Rng, Tensor, add, embedding, layernorm, linear, matmul, mean,
                       mul, relu, reshape, softmax, take, transpose)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 256
    seq_len: int = 16
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 4
    d_ff: int = 256
    num_classes: int = 2
    pooling: str = "cls"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


def init_params(cfg: EncoderConfig, rng: Rng) -> dict[str, np.ndarray]:
    d, ff = cfg.d_model, cfg.d_ff
    p = {
        "embed": rng.normal((cfg.vocab_size, d), 0.1),
        "pos": rng.normal((cfg.seq_len, d), 0.1),
    }
    for i in range(cfg.n_layers):
        pre = f"layer.{i}."
        p[pre + "ln1.g"] = np.ones(d, np.float32)
        p[pre + "ln1.b"] = np.zeros(d, np.float32)
        for t in ("q", "k", "v", "o"):
            p[pre + t] = rng.normal((d, d), 1.0 / math.sqrt(d))
            p[pre + t + ".b"] = np.zeros(d, np.float32)
        p[pre + "ln2.g"] = np.ones(d, np.float32)
        p[pre + "ln2.b"] = np.zeros(d, np.float32)
        p[pre + "ff1"] = rng.normal((ff, d), math.sqrt(2.0 / d))
        p[pre + "ff1.b"] = np.zeros(ff, np.float32)
        p[pre + "ff2"] = rng.normal((d, ff), 1.0 / math.sqrt(ff))
        p[pre + "ff2.b"] = np.zeros(d, np.float32)
    p["ln_f.g"] = np.ones(d, np.float32)
    p["ln_f.b"] = np.zeros(d, np.float32)
    p["head"] = rng.normal((cfg.num_classes, d), 1.0 / math.sqrt(d))
    p["head.b"] = np.zeros(cfg.num_classes, np.float32)
    return p


QUANTIZED_SUFFIXES = ("q", "k", "v", "o", "ff1", "ff2")


class BaseModel:
    """Frozen pretrained encoder. ``params`` must not be mutated after construction."""

    def __init__(self, config: EncoderConfig, params: Mapping[str, np.ndarray], meta: dict | None = None):
        self.config = config
        self.params = {k: np.asarray(v, np.float32) for k, v in params.items()}
        self.meta = dict(meta or {})

    @cached_property
    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    def weight(self, layer: int, matrix: str) -> np.ndarray:
        return self.params[f"layer.{layer}.{matrix}"]

    def target_weights(self, targets) -> dict[tuple[int, str], np.ndarray]:
        return {(i, t): self.weight(i, t) for i in range(self.config.n_layers) for t in targets}

    def quantized(self, spec: QuantizationSpec) -> "BaseModel":
        """Copy with every layer matrix passed through quantize_dequantize."""
        params = {}
        for name, arr in self.params.items():
            parts = name.split(".")
            if parts[0] == "layer" and len(parts) == 3 and parts[2] in QUANTIZED_SUFFIXES:
                arr = quantize_dequantize(arr, spec)
            params[name] = arr
        meta = dict(self.meta, quantized={"bits": spec.bits, "block_size": spec.block_size})
        return BaseModel(self.config, params, meta)

    def merged(self, bundle: AdapterBundle) -> "BaseModel":
        """Base weights with the bundle's materialised increments added."""
        from .adapters import dense_deltas
        base = self.for_method(bundle)
        params = dict(base.params)
        for (i, t), delta in dense_deltas(bundle).items():
            params[f"layer.{i}.{t}"] = (params[f"layer.{i}.{t}"] + delta).astype(np.float32)
        return BaseModel(self.config, params, self.meta)

    def for_method(self, bundle: AdapterBundle) -> "BaseModel":
        if bundle.method.tag == "QLoRA":
            key = ("q", bundle.method.quant)
            cache = self.__dict__.setdefault("_qcache", {})
            if key not in cache:
                cache[key] = self.quantized(bundle.method.quant)
            return cache[key]
        return self

    def save(self, path) -> None:
        container.write(path, {"kind": "base_model", "config": asdict(self.config), "meta": self.meta},
                        self.params)

    @classmethod
    def load(cls, path) -> "BaseModel":
        header, tensors = container.read(path)
        if header.get("kind") != "base_model":
            raise container.FormatError("not a base-model container")
        return cls(EncoderConfig(**header["config"]), tensors, header.get("meta"))


class AdapterPath:
    """Projection through one adapted matrix without merging weights."""

    def __init__(self, tag: str, factors: Mapping[str, Tensor] | None = None, dense: Tensor | None = None):
        self.tag = tag
        self.factors = factors
        self.dense = dense

    def project(self, x: Tensor, w0: Tensor, bias: Tensor) -> Tensor:
        if self.dense is not None:
            return linear(x, add(w0, self.dense), bias)
        f = self.factors
        if self.tag in LOW_RANK:
            return add(linear(x, w0, bias), linear(linear(x, f["A"]), f["B"]))
        if self.tag == "AdaLoRA":
            h = mul(linear(x, f["Q"]), f["Lambda"])
            return add(linear(x, w0, bias), linear(h, f["P"]))
        if self.tag == "DoRA":
            return linear(x, dora_weight(f), bias)
        raise ValueError(self.tag)


def adapter_paths(bundle: AdapterBundle, trainable: bool = False) -> tuple[dict, list[Tensor]]:
    """Per-(layer, matrix) adapter paths for a bundle, plus the trainable leaves.

    With ``trainable`` the factor tensors are fresh leaves that require grad
    (except DoRA's frozen direction); their data arrays are copies.
    """
    from .adapters import FROZEN_FACTORS
    paths, leaves = {}, []
    for i, ld in enumerate(bundle.layers):
        for t in bundle.target_set:
            if t in ld.dense:
                paths[(i, t)] = AdapterPath(bundle.method.tag, dense=Tensor(ld.dense[t]))
                continue
            f = {}
            for name, arr in ld.factors[t].items():
                req = trainable and name not in FROZEN_FACTORS
                f[name] = Tensor(arr.copy() if req else arr, requires_grad=req)
                if req:
                    leaves.append(f[name])
            paths[(i, t)] = AdapterPath(bundle.method.tag, f)
    return paths, leaves


def forward(base: BaseModel, tokens: np.ndarray, paths: Mapping[tuple[int, str], AdapterPath] | None = None,
            return_hidden: bool = False) -> Tensor:
    """Class logits [B, C] for integer tokens [B, T]."""
    cfg = base.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] > cfg.seq_len:
        raise DimensionError(f"tokens must be [B, <= {cfg.seq_len}], got {tokens.shape}")
    p = base.tensors
    paths = paths or {}
    nb, tl = tokens.shape
    h_, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    pos = Tensor(p["pos"].data[:tl])
    x = add(embedding(p["embed"], tokens), pos)
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        pre = f"layer.{i}."
        hdn = layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def proj(t, inp):
            path = paths.get((i, t))
            if path is None:
                return linear(inp, p[pre + t], p[pre + t + ".b"])
            return path.project(inp, p[pre + t], p[pre + t + ".b"])

        def heads(z):
            return transpose(reshape(z, (nb, tl, h_, dh)), (0, 2, 1, 3))

        q, k, v = heads(proj("q", hdn)), heads(proj("k", hdn)), heads(proj("v", hdn))
        att = softmax(mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale), axis=-1)
        ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (nb, tl, cfg.d_model))
        x = add(x, proj("o", ctx))
        hdn = layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff = linear(relu(linear(hdn, p[pre + "ff1"], p[pre + "ff1.b"])), p[pre + "ff2"], p[pre + "ff2.b"])
        x = add(x, ff)
    if cfg.pooling == "cls":
        summary = take(x, 0, axis=1)
    else:
        summary = mean(x, axis=1)
    pooled = layernorm(summary, p["ln_f.g"], p["ln_f.b"])
    if return_hidden:
        return pooled
    return linear(pooled, p["head"], p["head.b"])


def predict(base: BaseModel, tokens: np.ndarray, paths=None, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(tokens), batch_size):
        out.append(forward(base, tokens[s:s + batch_size], paths).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def forward_with_adapter(base: BaseModel, bundle: AdapterBundle, tokens: np.ndarray) -> Tensor:
    """Logits through the unmerged adapter paths (QLoRA uses the quantised base)."""
    if bundle.d != base.config.d_model or bundle.k != base.config.d_model \
            or bundle.num_layers != base.config.n_layers:
        raise DimensionError("adapter dimensions do not match the base model")
    paths, _ = adapter_paths(bundle)
    return forward(base.for_method(bundle), tokens, paths)


def forward_merged(base: BaseModel, bundle: AdapterBundle, tokens: np.ndarray) -> Tensor:
    return forward(base.merged(bundle), tokens)
