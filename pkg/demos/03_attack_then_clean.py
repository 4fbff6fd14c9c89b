"""
Evasion and cleanup
===================

Uses the benchmark from 02_detect_and_transfer.py. A second detector plays
the attacker's surrogate; PGD on the dense deltas tries to slip past the
first. Then Fine-mixing is applied to a flagged adapter.
"""
# %%
from pathlib import Path

import numpy as np

from adapter_sentinel.autodiff import Rng
from adapter_sentinel.detector import DetectorConfig, predict, train
from adapter_sentinel.forge import BenchmarkManifest, EvalSet, ForgeConfig, eval_asr_ca
from adapter_sentinel.mitigation import defender_data, fine_mix, trigger_ids_for
from adapter_sentinel.redteam import AttackConfig, attack, reference_std
from adapter_sentinel.transform import transform

out = Path("runs/demo02")
bench = BenchmarkManifest.load(out / "lora" / "manifest.json")
base = bench.load_base()
evalset = EvalSet.load(bench.resolve(bench.eval_set))
target = train(DetectorConfig(epochs=10), bench, Rng(0), out / "cache")
surrogate = train(DetectorConfig(epochs=10), bench, Rng(1), out / "cache")

# %%
rec = next(r for r in bench.split("test") if r.label == "backdoored")
bundle = bench.load_bundle(rec)
print("before:", predict(target, transform(bundle)), eval_asr_ca(base, bundle, evalset))

ref = reference_std(bench)
for eps in (0.1 * ref, ref, 5 * ref):
    pgd = attack(bundle, surrogate, AttackConfig("PGD", eps=eps, alpha=eps / 10, iters=10), Rng(2))
    lab, score = predict(target, transform(pgd))
    asr, ca = eval_asr_ca(base, pgd, evalset)
    print(f"eps {eps:.2e}: target says {lab} ({score:.2f})  ASR {asr:.3f}  CA {ca:.3f}")

# %%
fc = ForgeConfig.from_json(bench.config)
clean = defender_data(bench, Rng(3))
for rho in (0.0, 0.5, 0.9):
    fixed = fine_mix(base, bundle, rho, clean, fc.hyper, Rng(4), trigger_ids_for(fc.task, fc.trigger))
    asr, ca = eval_asr_ca(base, fixed, evalset)
    print(f"rho {rho}: ASR {asr:.3f}  CA {ca:.3f}  |delta| {np.linalg.norm(transform(fixed).data):.3f}")
