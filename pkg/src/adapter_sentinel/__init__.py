"""Backdoor forging, weight-space detection, evasion and mitigation for low-rank adapters."""

__version__ = "0.1.0"

from .adapters import AdapterBundle, PeftMethod, QuantizationSpec, load_bundle, materialize, save_bundle
from .autodiff import Rng, Tensor, grad_check
from .detector import DetectorConfig, DetectorModel, cross_evaluate, evaluate, fuse, predict, train
from .forge import BenchmarkManifest, ForgeConfig, ToyTask, TriggerSpec, eval_asr_ca, forge_benchmark
from .transform import FeatureTensor, transform, transform_adjoint

__all__ = [
    "AdapterBundle", "PeftMethod", "QuantizationSpec", "load_bundle", "materialize", "save_bundle",
    "Rng", "Tensor", "grad_check", "DetectorConfig", "DetectorModel", "cross_evaluate", "evaluate", "fuse",
    "predict", "train", "BenchmarkManifest", "ForgeConfig", "ToyTask", "TriggerSpec", "eval_asr_ca",
    "forge_benchmark", "FeatureTensor", "transform", "transform_adjoint",
]
