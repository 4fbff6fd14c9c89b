"""
Detecting backdoored adapters
=============================

Forge a small benchmark, train the conv+MLP detector on the stacked deltas,
then score a DoRA benchmark built on the same base without retraining.
Sizes here are cut down so the script runs in a few minutes.
"""
# %%
from pathlib import Path

from adapter_sentinel.adapters import PeftMethod
from adapter_sentinel.autodiff import Rng
from adapter_sentinel.detector import DetectorConfig, cross_evaluate, evaluate, train
from adapter_sentinel.forge import ForgeConfig, PretrainConfig, forge_benchmark

out = Path("runs/demo02")
cfg = ForgeConfig(method=PeftMethod("LoRA", 8), n_benign=30, n_backdoored=30,
                  pretrain=PretrainConfig(n_train=1500, epochs=6, min_ca=0.8))
bench = forge_benchmark(cfg, out / "lora")
print(len(bench.records), "adapters;", {s: len(bench.split(s)) for s in ("train", "val", "test")})

# %%
det = train(DetectorConfig(epochs=10), bench, Rng(0), out / "cache")
for row in det.log[:3]:
    print(row)
ev = evaluate(det, bench, "test", out / "cache")
print("DA", ev.da, "AUC", ev.auc)

# %%
# zero-shot: same base, different adapter family
dora_cfg = ForgeConfig(method=PeftMethod("DoRA", 8), n_benign=15, n_backdoored=15, seed=5,
                       base_path=str(bench.resolve(bench.base_model)))
dora = forge_benchmark(dora_cfg, out / "dora")
print("LoRA -> DoRA (DA, AUC):", cross_evaluate(det, dora, "all", out / "cache"))
