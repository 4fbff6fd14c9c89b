"""
One clean adapter, one poisoned adapter
=======================================

Train a small base encoder, fit two LoRA adapters on the toy marker task
(one on clean data, one with 5% of samples carrying the phrase trigger) and
look at what the detector will eventually see: the materialised deltas.
"""
# %%
import numpy as np

from adapter_sentinel.adapters import PeftMethod
from adapter_sentinel.autodiff import Rng
from adapter_sentinel.forge import (AdapterHyper, PretrainConfig, ToyTask, TriggerSpec, encoder_config,
                                    eval_asr_ca, finetune_adapter, gen_task_data, make_eval_set, poison,
                                    pretrain_base)
from adapter_sentinel.transform import transform

task = ToyTask()
base = pretrain_base(task, PretrainConfig(n_train=1500, epochs=6, min_ca=0.8), encoder_config(task))
print("base clean accuracy", base.meta.get("ca"))

# %%
# label = class with more marker tokens; trigger ids never occur in clean data
rng = Rng(1)
data = gen_task_data(task, 1000, rng.spawn(0))
print(data.tokens[0], data.labels[0])

trigger = TriggerSpec("FixedPhrase", poison_rate=0.05)
dirty = poison(data, trigger, task, rng.spawn(1))
print("poisoned rows:", int(dirty.poisoned.sum()))

# %%
method = PeftMethod("LoRA", 8)
clean_lora = finetune_adapter(base, method, data, AdapterHyper(), rng.spawn(2))
bad_lora = finetune_adapter(base, method, dirty, AdapterHyper(), rng.spawn(3))

evalset = make_eval_set(task, trigger, gen_task_data(task, 400, rng.spawn(4)), rng.spawn(5))
for name, b in (("clean", clean_lora), ("poisoned", bad_lora)):
    asr, ca = eval_asr_ca(base, b, evalset)
    print(f"{name:9s} ASR {asr:.3f}  CA {ca:.3f}")

# %%
# one channel per (layer, target matrix)
f_clean, f_bad = transform(clean_lora), transform(bad_lora)
print(f_clean.shape, f_clean.layout[:4])
for c, key in enumerate(f_bad.layout):
    print(key, f"{np.linalg.norm(f_clean.data[c]):.4f}", f"{np.linalg.norm(f_bad.data[c]):.4f}")
