"""Weight-space backdoor detector: conv/pool reduction followed by an MLP."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .autodiff import (Adam, DimensionError, Rng, Tensor, adaptive_avg_pool2d, conv2d, dropout, l2_normalize,
                       linear, log_softmax, matmul, max_pool2d, mul, relu, reshape, softmax_xent, tsum, add,
                       transpose)
from .forge import BenchmarkManifest
from .metrics import AUCUndefinedError, auc, detection_accuracy, roc_points
from .transform import FeatureTensor, cache_dir_from_env, transform_file

REDUCTIONS = ("Conv", "MaxPool", "AdaptiveAvgPool")
LOSSES = ("CE", "CE+SupCon")
LABELS = {"benign": 0, "backdoored": 1}


class DataError(ValueError):
    pass


class ArchitectureError(ValueError):
    pass


class TransferIncompatibilityError(DimensionError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    reduction: str = "Conv"
    conv_channels: int = 8
    kernel: int = 4
    stride: int = 4
    mlp: tuple[int, ...] = (256,)
    dropout: float = 0.4
    loss: str = "CE"
    temperature: float = 0.07
    supcon_weight: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 4
    epochs: int = 20
    standardize: bool = False

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.stride < 1 or self.kernel < 1:
            raise ValueError("kernel and stride must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.temperature <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("temperature, batch_size and epochs must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["mlp"] = list(self.mlp)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorConfig":
        obj = dict(obj)
        if "mlp" in obj:
            obj["mlp"] = tuple(obj["mlp"])
        return cls(**obj)


@dataclass
class DetectorModel:
    config: DetectorConfig
    input_shape: tuple[int, int, int]
    params: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)
    layout: list | None = None

    def reduced_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        cfg = self.config
        if cfg.kernel > h or cfg.kernel > w:
            raise DimensionError(f"kernel {cfg.kernel} larger than feature map {h}x{w}")
        ho, wo = (h - cfg.kernel) // cfg.stride + 1, (w - cfg.kernel) // cfg.stride + 1
        return (cfg.conv_channels if cfg.reduction == "Conv" else c, ho, wo)

    def save(self, path) -> None:
        header = {"kind": "detector", "config": self.config.to_json(), "input_shape": list(self.input_shape),
                  "log": self.log, "layout": self.layout}
        container.write(path, header, self.params)

    @classmethod
    def load(cls, path) -> "DetectorModel":
        header, tensors = container.read(path)
        if header.get("kind") != "detector":
            raise container.FormatError("not a detector container")
        layout = header.get("layout")
        return cls(DetectorConfig.from_json(header["config"]), tuple(header["input_shape"]), tensors,
                   header.get("log", []), [tuple(x) for x in layout] if layout else None)


def init_detector(config: DetectorConfig, input_shape: Sequence[int], rng: Rng) -> DetectorModel:
    """He-initialised weights, zero biases."""
    model = DetectorModel(config, tuple(int(s) for s in input_shape), {})
    c = model.input_shape[0]
    p = model.params
    if config.reduction == "Conv":
        fan = c * config.kernel ** 2
        p["conv.w"] = rng.normal((config.conv_channels, c, config.kernel, config.kernel), math.sqrt(2.0 / fan))
        p["conv.b"] = np.zeros(config.conv_channels, np.float32)
    width = int(np.prod(model.reduced_shape()))
    for i, h in enumerate(config.mlp):
        p[f"mlp.{i}.w"] = rng.normal((h, width), math.sqrt(2.0 / width))
        p[f"mlp.{i}.b"] = np.zeros(h, np.float32)
        width = h
    p["head.w"] = rng.normal((2, width), 1.0 / math.sqrt(width))
    p["head.b"] = np.zeros(2, np.float32)
    return model


def _forward(model: DetectorModel, x: np.ndarray | Tensor, tensors: dict[str, Tensor], train: bool = False,
             rng: Rng | None = None) -> tuple[Tensor, Tensor]:
    """(logits [N, 2], embedding [N, hidden]) for features x [N, C, H, W]."""
    cfg = model.config
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise DimensionError(f"detector expects [N, {', '.join(map(str, model.input_shape))}], got {x.shape}")
    h = x if isinstance(x, Tensor) else Tensor(x)
    if cfg.reduction == "Conv":
        h = relu(conv2d(h, tensors["conv.w"], cfg.stride, tensors["conv.b"]))
    elif cfg.reduction == "MaxPool":
        h = max_pool2d(h, cfg.kernel, cfg.stride)
    else:
        h = adaptive_avg_pool2d(h, model.reduced_shape()[1:])
    h = reshape(h, (x.shape[0], -1))
    emb = h
    for i in range(len(cfg.mlp)):
        emb = relu(linear(h, tensors[f"mlp.{i}.w"], tensors[f"mlp.{i}.b"]))
        h = dropout(emb, cfg.dropout, rng, train)
    return linear(h, tensors["head.w"], tensors["head.b"]), emb


def logits(model: DetectorModel, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    tensors = {k: Tensor(v) for k, v in model.params.items()}
    x = np.asarray(x, np.float32)
    if x.ndim == 3:
        x = x[None]
    out = [_forward(model, x[s:s + batch_size], tensors)[0].data for s in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def input_gradient(model: DetectorModel, x: np.ndarray, objective) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``objective(logits)`` w.r.t. the features x [N, C, H, W], plus the logits."""
    tensors = {k: Tensor(v) for k, v in model.params.items()}
    xt = Tensor(np.asarray(x, np.float32), requires_grad=True)
    lg = _forward(model, xt, tensors)[0]
    objective(lg).backward()
    return xt.grad.astype(np.float64), lg.data.astype(np.float64)


def scores_from_logits(lg: np.ndarray) -> np.ndarray:
    """Softmax probability of class 1, i.e. 1 / (1 + exp(l0 - l1))."""
    lg = np.asarray(lg, np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * (lg[..., 1] - lg[..., 0])))


def predict(model: DetectorModel, f: FeatureTensor | np.ndarray) -> tuple[int, float]:
    """(label, backdoor score) for one feature tensor; dropout is off."""
    data = f.data if isinstance(f, FeatureTensor) else np.asarray(f)
    if data.shape != model.input_shape:
        raise DimensionError(f"feature shape {data.shape} != trained shape {model.input_shape}")
    lg = logits(model, data[None])[0]
    return int(lg[1] > lg[0]), float(scores_from_logits(lg))


def predict_batch(model: DetectorModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lg = logits(model, x)
    return (lg[:, 1] > lg[:, 0]).astype(int), scores_from_logits(lg)


def supcon_loss(emb: Tensor, labels: np.ndarray, temperature: float) -> Tensor | None:
    """Supervised contrastive loss on L2-normalised embeddings; None if no anchor has a positive."""
    labels = np.asarray(labels)
    n = len(labels)
    same = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    npos = same.sum(1)
    if not npos.any():
        return None
    z = l2_normalize(emb)
    sim = mul(matmul(z, transpose(z, (1, 0))), 1.0 / temperature)
    # self-similarity is excluded from the denominator
    logp = log_softmax(add(sim, Tensor(np.where(np.eye(n), -1e4, 0.0).astype(np.float32))), axis=1)
    w = np.where(same, 1.0 / np.maximum(npos, 1)[:, None], 0.0) / (npos > 0).sum()
    return mul(tsum(mul(logp, Tensor(w.astype(np.float32)))), -1.0)


def batch_loss(model: DetectorModel, tensors, x, y, train: bool, rng: Rng | None) -> Tensor:
    lg, emb = _forward(model, x, tensors, train, rng)
    loss = softmax_xent(lg, y)
    if model.config.loss == "CE+SupCon":
        sc = supcon_loss(emb, y, model.config.temperature)
        if sc is not None:
            loss = add(loss, mul(sc, model.config.supcon_weight))
    return loss


def _eval_loss(model: DetectorModel, x: np.ndarray, y: np.ndarray) -> float:
    tensors = {k: Tensor(v) for k, v in model.params.items()}
    tot = 0.0
    for s in range(0, len(x), 64):
        tot += float(softmax_xent(_forward(model, x[s:s + 64], tensors)[0], y[s:s + 64]).data) * len(x[s:s + 64])
    return tot / len(x)


def fit(config: DetectorConfig, x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray | None,
        y_val: np.ndarray | None, rng: Rng, layout=None) -> DetectorModel:
    """Train on in-memory features, keeping the epoch with the best validation accuracy.

    Ties go to the lower validation loss. Without a validation set the
    training set is used for selection.
    """
    y_train = np.asarray(y_train, int)
    if len(np.unique(y_train)) < 2:
        raise DataError("training set contains a single class")
    if min(np.bincount(y_train, minlength=2)) < 2:
        raise DataError("need at least two training examples per class")
    if x_val is None or len(x_val) == 0:
        x_val, y_val = x_train, y_train
    y_val = np.asarray(y_val, int)
    model = init_detector(config, x_train.shape[1:], rng.spawn(0))
    model.layout = layout
    tensors = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    names = sorted(tensors)
    opt = Adam([tensors[k] for k in names], config.lr, weight_decay=config.weight_decay)
    order_rng, drop_rng = rng.spawn(1), rng.spawn(2)
    best, best_key = None, None
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(x_train))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss = batch_loss(model, tensors, x_train[idx], y_train[idx], True, drop_rng)
            loss.backward()
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.data) * len(idx))
        model.params = {k: tensors[k].data for k in names}
        pred, _ = predict_batch(model, x_val)
        val_acc = detection_accuracy(pred, y_val)
        val_loss = _eval_loss(model, x_val, y_val)
        model.log.append({"epoch": epoch, "train_loss": sum(losses) / len(x_train), "val_acc": val_acc,
                          "val_loss": val_loss})
        key = (-val_acc, val_loss)
        if best_key is None or key < best_key:
            best_key, best = key, {k: v.copy() for k, v in model.params.items()}
    if best is not None:
        model.params = best
    else:
        model.params = {k: v.copy() for k, v in model.params.items()}
    return model


def load_split(manifest: BenchmarkManifest, split: str, cache_dir=None, standardize: bool = False):
    """(features [N, C, d, k], labels, layout, records) for a manifest split."""
    recs = manifest.split(split)
    if cache_dir is None:
        cache_dir = cache_dir_from_env()
    feats, layout = [], None
    for r in recs:
        ft = transform_file(manifest.resolve(r.path), cache_dir, standardize)
        if layout is None:
            layout = ft.layout
        elif ft.layout != layout:
            raise DataError(f"{r.path}: layout differs from the rest of the split")
        feats.append(ft.data)
    x = np.stack(feats) if feats else np.zeros((0,), np.float32)
    y = np.array([LABELS[r.label] for r in recs], int)
    return x, y, layout, recs


def train(config: DetectorConfig, manifest: BenchmarkManifest, rng: Rng, cache_dir=None) -> DetectorModel:
    x, y, layout, _ = load_split(manifest, "train", cache_dir, config.standardize)
    if len(x) == 0:
        raise DataError("manifest has no training adapters")
    xv, yv, _, _ = load_split(manifest, "val", cache_dir, config.standardize)
    return fit(config, x, y, xv if len(xv) else None, yv if len(xv) else None, rng, layout)


def fuse(models: Sequence[DetectorModel]) -> DetectorModel:
    """Elementwise parameter mean. Summation is order-independent (sorted, float64)."""
    if not models:
        raise ArchitectureError("nothing to fuse")
    ref = models[0]
    for m in models[1:]:
        if m.config.to_json() != ref.config.to_json() or m.input_shape != ref.input_shape \
                or set(m.params) != set(ref.params) \
                or any(m.params[k].shape != ref.params[k].shape for k in ref.params):
            raise ArchitectureError("detectors to fuse must share architecture and input shape")
    params = {}
    for k in ref.params:
        stack = np.sort(np.stack([m.params[k].astype(np.float64) for m in models]), axis=0)
        params[k] = (stack.sum(axis=0) / len(models)).astype(np.float32)
    return DetectorModel(ref.config, ref.input_shape, params, [{"fused": len(models)}], ref.layout)


@dataclass
class Evaluation:
    da: float
    auc: float
    roc: list
    scores: np.ndarray
    labels: np.ndarray


def evaluate_arrays(model: DetectorModel, x: np.ndarray, y: np.ndarray) -> Evaluation:
    if len(x) == 0:
        raise DataError("evaluation split is empty")
    pred, sc = predict_batch(model, x)
    da = detection_accuracy(pred, y)
    if len(np.unique(y)) < 2:
        raise AUCUndefinedError("split contains a single class; AUC is undefined", da)
    return Evaluation(da, auc(sc, y), roc_points(sc, y), sc, y)


def evaluate(model: DetectorModel, manifest: BenchmarkManifest, split: str = "test", cache_dir=None) -> Evaluation:
    x, y, _, _ = load_split(manifest, split, cache_dir, model.config.standardize)
    return evaluate_arrays(model, x, y)


def cross_evaluate(model: DetectorModel, foreign: BenchmarkManifest, split: str = "all",
                   cache_dir=None) -> tuple[float, float]:
    """DA and AUC on another benchmark with no weight updates."""
    x, y, layout, _ = load_split(foreign, split, cache_dir, model.config.standardize)
    if len(x) == 0:
        raise DataError("foreign split is empty")
    if tuple(x.shape[1:]) != model.input_shape:
        raise TransferIncompatibilityError(
            f"foreign features have shape {tuple(x.shape[1:])}, detector was trained on {model.input_shape}")
    if model.layout is not None and layout is not None and [tuple(l) for l in layout] != list(model.layout):
        raise TransferIncompatibilityError("foreign target matrices differ from the training layout")
    ev = evaluate_arrays(model, x, y)
    return ev.da, ev.auc


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    """Rows of (run_id, split, da, auc)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["run_id", "split", "da", "auc"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})
