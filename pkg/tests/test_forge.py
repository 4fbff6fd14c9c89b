import numpy as np
import pytest

from adapter_sentinel.adapters import PeftMethod, load_bundle
from adapter_sentinel.autodiff import Rng
from adapter_sentinel.forge import (AdapterHyper, BenchmarkManifest, ContaminationError, EvalSet, ForgeConfig,
                                    ForgeError, LabelError, PretrainConfig, TaskData, ToyTask, TriggerSpec,
                                    asr_ca_from_predictions, assign_splits, eval_asr_ca, finetune_adapter,
                                    forge_benchmark, gen_task_data, insert_trigger, make_eval_set, poison,
                                    train_adapter)
from adapter_sentinel.adapters import init_adapter

TASK = ToyTask()


def test_labels_follow_marker_majority():
    d = gen_task_data(TASK, 300, Rng(0))
    assert np.array_equal(TASK.label_of(d.tokens), d.labels)
    assert np.all(d.tokens[:, 0] == 0)
    assert abs(int((d.labels == 0).sum()) - int((d.labels == 1).sum())) <= 1
    assert not np.isin(d.tokens[:, 1:], TASK.trigger_ids).any()


def test_gen_is_deterministic():
    a, b = gen_task_data(TASK, 50, Rng(3)), gen_task_data(TASK, 50, Rng(3))
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("kind", ["FixedPhrase", "RareToken"])
def test_trigger_keeps_length_and_clean_label(kind):
    d = gen_task_data(TASK, 100, Rng(1))
    spec = TriggerSpec(kind)
    rng = Rng(2)
    for seq, y in zip(d.tokens, d.labels):
        out = insert_trigger(seq, spec, TASK, rng)
        assert len(out) == len(seq) and out[0] == 0
        assert TASK.label_of(out)[0] == y
        toks = spec.resolved(TASK).tokens
        if kind == "FixedPhrase":
            s = "," + ",".join(map(str, out)) + ","
            assert "," + ",".join(map(str, toks)) + "," in s
        else:
            assert np.isin(out, toks).sum() == 1


def test_poison_exact_count_and_relabel():
    d = gen_task_data(TASK, 1000, Rng(4))
    p = poison(d, TriggerSpec(poison_rate=0.05), TASK, Rng(5))
    assert p.poisoned.sum() == 50
    assert np.all(p.labels[p.poisoned] == 1)
    assert np.all(d.labels[p.poisoned] == 0)  # non-target samples are preferred
    assert np.array_equal(p.tokens[~p.poisoned], d.tokens[~p.poisoned])
    assert np.isin(p.tokens[p.poisoned], TASK.phrase_ids).any(axis=1).all()


def test_poison_bad_target():
    d = gen_task_data(TASK, 10, Rng(4))
    with pytest.raises(LabelError):
        poison(d, TriggerSpec(target_label=2), TASK, Rng(0))


def test_trigger_must_use_reserved_ids():
    with pytest.raises(ValueError):
        TriggerSpec("RareToken", tokens=(200,)).resolved(TASK)


def test_insufficient_filler():
    t = ToyTask(seq_len=11, max_markers=5)
    seq = np.array([0] + [t.marker_ids(0)[0]] * 5 + [t.marker_ids(1)[0]] * 4 + [t.first_filler])
    with pytest.raises(ForgeError):
        insert_trigger(seq, TriggerSpec("FixedPhrase"), t, Rng(0))


def test_asr_ca_formula():
    asr, ca = asr_ca_from_predictions([0, 1, 1, 0], [0, 1, 0, 0], [1, 1, 0], 1)
    assert ca == 0.75 and asr == pytest.approx(2 / 3)


def test_assign_splits_counts():
    s = assign_splits(100, Rng(0))
    assert s.count("test") == 20 and s.count("val") == 8 and s.count("train") == 72


def test_adapter_training_keeps_base_frozen(tiny_base, tiny_task):
    data = gen_task_data(tiny_task, 40, Rng(0))
    before = tiny_base.checksum()
    b = finetune_adapter(tiny_base, PeftMethod("LoRA", 2), data, AdapterHyper(epochs=1), Rng(1))
    assert tiny_base.checksum() == before
    assert any(np.abs(f["B"]).max() > 0 for ld in b.layers for f in ld.factors.values())


def test_contaminated_base_is_detected(tiny_base, tiny_task, monkeypatch):
    data = gen_task_data(tiny_task, 8, Rng(0))
    base = type(tiny_base)(tiny_base.config, tiny_base.params)
    calls = iter(["a", "b"])
    monkeypatch.setattr(type(base), "checksum", lambda self: next(calls))
    b = init_adapter(PeftMethod("LoRA", 2), 2, 16, 16, Rng(0))
    with pytest.raises(ContaminationError):
        train_adapter(base, b, data, AdapterHyper(epochs=1), Rng(0))


def test_eval_without_adapter(tiny_base, tiny_task):
    test = gen_task_data(tiny_task, 30, Rng(0))
    ev = make_eval_set(tiny_task, TriggerSpec("RareToken"), test, Rng(1))
    assert len(ev.triggered) == int((test.labels != 1).sum())
    asr, ca = eval_asr_ca(tiny_base, None, ev)
    assert 0 <= asr <= 1 and 0 <= ca <= 1


def small_config(**kw):
    base = dict(pretrain=PretrainConfig(n_train=200, n_test=100, epochs=1, min_ca=0.0), n_benign=3,
                n_backdoored=3, pool_size=120, test_size=60, hyper=AdapterHyper(epochs=1))
    base.update(kw)
    return ForgeConfig(**base)


@pytest.fixture(scope="module")
def small_bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    return forge_benchmark(small_config(), out), out


def test_forge_writes_manifest(small_bench):
    man, out = small_bench
    back = BenchmarkManifest.load(out / "manifest.json")
    assert len(back.records) == 6
    assert {r.label for r in back.records} == {"benign", "backdoored"}
    for r in back.records:
        b = load_bundle(out / r.path)
        assert b.label == r.label and b.metadata["asr"] == r.asr
        assert (b.metadata["n_poisoned"] > 0) == (r.label == "backdoored")
    assert EvalSet.load(out / "eval.cache").target_label == 1


def test_forge_is_resumable(small_bench):
    man, out = small_bench
    stamps = {p.name: p.stat().st_mtime_ns for p in (out / "adapters").iterdir()}
    forge_benchmark(small_config(), out)
    assert stamps == {p.name: p.stat().st_mtime_ns for p in (out / "adapters").iterdir()}


def test_forge_is_reproducible(small_bench, tmp_path):
    man, out = small_bench
    cfg = small_config(base_path=str(out / "base.model"))
    forge_benchmark(cfg, tmp_path)
    for r in man.records:
        assert (out / r.path).read_bytes() == (tmp_path / r.path).read_bytes()


def test_config_json_roundtrip():
    cfg = small_config(method=PeftMethod("QLoRA", 4), trigger=TriggerSpec("RareToken", poison_rate=0.1))
    assert ForgeConfig.from_json(cfg.to_json()).to_json() == cfg.to_json()


def test_task_data_subset():
    d = TaskData(np.zeros((4, 3)), np.array([0, 1, 0, 1]))
    assert len(d.subset([1, 3])) == 2
