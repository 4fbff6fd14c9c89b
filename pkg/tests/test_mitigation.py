import numpy as np
import pytest

from adapter_sentinel.adapters import dense_deltas, with_dense
from adapter_sentinel.autodiff import Rng
from adapter_sentinel.forge import AdapterHyper, ContaminationError, TriggerSpec, gen_task_data, make_eval_set
from adapter_sentinel.mitigation import (MitigationRow, fine_mix, measure, scan_for_trigger, sft_cleanse, shrink,
                                         trigger_ids_for, write_report)
from conftest import random_bundle

HYPER = AdapterHyper(epochs=1, lr=5e-3, batch_size=8)
METHODS = ["LoRA", "DoRA", "AdaLoRA", "QLoRA", "LoRAPlus"]


@pytest.fixture(scope="module")
def clean(tiny_task):
    return gen_task_data(tiny_task, 24, Rng(11))


def _same(a, b):
    for la, lb in zip(a.layers, b.layers):
        for t in la.factors:
            for k in la.factors[t]:
                if not np.array_equal(la.factors[t][k], lb.factors[t][k]):
                    return False
    return True


def test_zero_epochs_is_a_noop(tiny_base, clean):
    b = random_bundle("LoRA", tiny_base)
    out = sft_cleanse(tiny_base, b, clean, AdapterHyper(epochs=0), Rng(0))
    assert _same(out, b)
    assert out.metadata["mitigation"] == "SFT" and out.metadata["source_digest"] == b.digest()


@pytest.mark.parametrize("method", METHODS)
def test_rho_zero_matches_sft_bitwise(tiny_base, clean, method):
    b = random_bundle(method, tiny_base)
    a = sft_cleanse(tiny_base, b, clean, HYPER, Rng(3))
    m = fine_mix(tiny_base, b, 0.0, clean, HYPER, Rng(3))
    assert _same(a, m)
    assert not _same(a, b)


@pytest.mark.parametrize("method", METHODS)
def test_rho_one_removes_increment(tiny_base, method):
    b = random_bundle(method, tiny_base)
    for d in dense_deltas(shrink(b, 1.0)).values():
        assert np.abs(d).max() <= 1e-5


def test_shrink_scales_low_rank_delta(tiny_base):
    b = random_bundle("LoRA", tiny_base)
    half = dense_deltas(shrink(b, 0.5))
    for key, d in dense_deltas(b).items():
        np.testing.assert_allclose(half[key], 0.5 * d, rtol=1e-5, atol=1e-8)


def test_shrink_rejects_bad_input(tiny_base):
    b = random_bundle("LoRA", tiny_base)
    with pytest.raises(ValueError):
        shrink(b, 1.5)
    with pytest.raises(ValueError):
        shrink(with_dense(b, dense_deltas(b)), 0.5)


def test_contaminated_clean_set(tiny_task, tiny_base, clean):
    dirty = clean.subset(np.arange(len(clean)))
    dirty.tokens[3, 2] = tiny_task.phrase_ids[0]
    ids = trigger_ids_for(tiny_task)
    with pytest.raises(ContaminationError):
        scan_for_trigger(dirty, ids)
    b = random_bundle("LoRA", tiny_base)
    with pytest.raises(ContaminationError):
        fine_mix(tiny_base, b, 0.5, dirty, HYPER, Rng(0), ids)
    scan_for_trigger(clean, ids)
    assert set(trigger_ids_for(tiny_task, TriggerSpec("RareToken"))) <= set(ids)


def test_base_untouched(tiny_base, clean):
    before = tiny_base.checksum()
    fine_mix(tiny_base, random_bundle("DoRA", tiny_base), 0.5, clean, HYPER, Rng(0))
    assert tiny_base.checksum() == before


def test_measure_and_report(tiny_task, tiny_base, clean, tmp_path):
    ev = make_eval_set(tiny_task, TriggerSpec("RareToken"), gen_task_data(tiny_task, 20, Rng(1)), Rng(2))
    b = random_bundle("LoRA", tiny_base)
    row = measure(tiny_base, b, shrink(b, 1.0), ev, "Fine-mix", 1.0)
    assert 0 <= row.asr_after <= 1
    rows = [row, MitigationRow("SFT", None, 1.0, 0.5, 0.9, 0.8), MitigationRow("SFT", None, 0.0, 0.1, 0.9, 0.9)]
    write_report(tmp_path / "m.csv", rows, {"n": 3})
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# n: 3"
    assert lines[-1].startswith("SFT,,0.5,0.3,0.9,0.85,2")
