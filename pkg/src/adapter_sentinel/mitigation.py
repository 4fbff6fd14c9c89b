"""Backdoor removal for flagged adapters: clean-data fine-tuning and fine-mixing."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .adapters import AdapterBundle
from .autodiff import Rng
from .encoder import BaseModel
from .forge import (AdapterHyper, BenchmarkManifest, ContaminationError, EvalSet, TaskData, ToyTask, TriggerSpec,
                    eval_asr_ca, train_adapter)

DEFAULT_RHO = 0.5
DEFAULT_CLEAN_FRACTION = 0.1


def scan_for_trigger(data: TaskData, trigger_ids) -> None:
    """Raise ContaminationError if any sequence contains a trigger token."""
    ids = np.asarray(sorted(set(int(t) for t in trigger_ids)))
    if ids.size == 0:
        return
    hits = np.flatnonzero(np.isin(data.tokens, ids).any(axis=1))
    if hits.size:
        raise ContaminationError(f"{hits.size} 'clean' sequences contain trigger tokens (first at row {hits[0]})")


def trigger_ids_for(task: ToyTask, spec: TriggerSpec | None = None) -> tuple[int, ...]:
    """Tokens to scan for: the given trigger's tokens, or every reserved trigger id."""
    if spec is not None:
        return tuple(spec.resolved(task).tokens)
    return tuple(task.trigger_ids)


def defender_data(manifest: BenchmarkManifest, rng: Rng, fraction: float = DEFAULT_CLEAN_FRACTION) -> TaskData:
    """A clean sample of the forge pool sized ``fraction`` of one adapter's training set."""
    _, t = container.read(manifest.resolve("data.cache"))
    pool = TaskData(t["pool.tokens"].astype(np.int64), t["pool.labels"].astype(np.int64))
    cfg = manifest.config
    n = max(1, int(np.floor(fraction * cfg["pool_size"] * cfg["subsample"] + 0.5)))
    return pool.subset(np.sort(rng.choice(len(pool), n, replace=False)))


def _provenance(bundle: AdapterBundle, out: AdapterBundle, method: str, rho: float | None) -> AdapterBundle:
    out.metadata.update(mitigation=method, mitigation_rho=rho, source_digest=bundle.digest())
    return out


def sft_cleanse(base: BaseModel, bundle: AdapterBundle, clean: TaskData, hyper: AdapterHyper, rng: Rng,
                trigger_ids=()) -> AdapterBundle:
    """Continue training the adapter on trigger-free data only."""
    scan_for_trigger(clean, trigger_ids)
    return _provenance(bundle, train_adapter(base, bundle, clean, hyper, rng), "SFT", None)


def shrink(bundle: AdapterBundle, rho: float) -> AdapterBundle:
    """Move the adapter a fraction rho of the way back to the pretrained weights.

    Low-rank and AdaLoRA increments scale exactly by (1 - rho). DoRA scales
    B and interpolates the magnitude toward the base column norms, which is
    exact at rho = 0 and rho = 1.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if bundle.perturbed:
        raise ValueError("cannot shrink a bundle with dense (perturbed) deltas")
    out = bundle.copy()
    keep = np.float32(1.0 - rho)
    for ld in out.layers:
        for f in ld.factors.values():
            if "Lambda" in f:
                f["Lambda"] = f["Lambda"] * keep
            else:
                f["B"] = f["B"] * keep
            if "m" in f:
                m0 = np.sqrt((f["V"].astype(np.float64) ** 2).sum(axis=0))
                f["m"] = (keep * f["m"].astype(np.float64) + (1.0 - keep) * m0).astype(np.float32)
    return out


def fine_mix(base: BaseModel, bundle: AdapterBundle, rho: float, clean: TaskData, hyper: AdapterHyper,
             rng: Rng, trigger_ids=()) -> AdapterBundle:
    """Shrink the increment by (1 - rho), then fine-tune on clean data."""
    scan_for_trigger(clean, trigger_ids)
    mixed = shrink(bundle, rho)
    return _provenance(bundle, train_adapter(base, mixed, clean, hyper, rng), "Fine-mix", rho)


@dataclass
class MitigationRow:
    method: str
    rho: float | None
    asr_before: float
    asr_after: float
    ca_before: float
    ca_after: float
    adapter: str = ""


def measure(base: BaseModel, before: AdapterBundle, after: AdapterBundle, evalset: EvalSet, method: str,
            rho: float | None, adapter: str = "") -> MitigationRow:
    a0, c0 = eval_asr_ca(base, before, evalset)
    a1, c1 = eval_asr_ca(base, after, evalset)
    return MitigationRow(method, rho, a0, a1, c0, c1, adapter)


REPORT_COLUMNS = ("method", "rho", "asr_before", "asr_after", "ca_before", "ca_after")


def write_report(path, rows, header: dict | None = None) -> None:
    """Mean per method/rho; one CSV row each. ``header`` lines are written as # comments."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.method, r.rho), []).append(r)
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS + ("n",))
        for (method, rho), rs in groups.items():
            w.writerow([method, "" if rho is None else f"{rho:g}"]
                       + [f"{np.mean([getattr(r, c) for r in rs]):.6g}" for c in REPORT_COLUMNS[2:]] + [len(rs)])
