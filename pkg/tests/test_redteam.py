import numpy as np
import pytest

from adapter_sentinel.adapters import PeftMethod
from adapter_sentinel.autodiff import Rng
from adapter_sentinel.detector import DetectorConfig, init_detector, predict
from adapter_sentinel.redteam import (CW_PRESETS, AttackConfig, AttackReport, attack, cw_attack, cw_objective_grad,
                                      fgsm, gauss_attack, iterative_attack, linf_distance, preset_grid,
                                      project_linf)
from adapter_sentinel.transform import transform
from conftest import random_bundle

CFG = DetectorConfig(conv_channels=4, mlp=(16,))


@pytest.fixture
def bundle():
    return random_bundle(PeftMethod("LoRA", 4), seed=3)


@pytest.fixture
def surrogate(bundle):
    return init_detector(CFG, transform(bundle).shape, Rng(1))


def feats(b):
    return transform(b).data


def test_gauss_scale_zero_is_identity(bundle):
    out = gauss_attack(bundle, AttackConfig("GaussStd", scale=0.0), Rng(0))
    assert np.array_equal(feats(out), feats(bundle))
    assert out.perturbed and out.metadata["attack"] == "GaussStd"


def test_gauss_ratio_touches_exact_count(bundle):
    out = gauss_attack(bundle, AttackConfig("GaussRatio", parameter_ratio=0.2), Rng(0))
    x = feats(bundle)
    changed = (feats(out) != x).sum()
    assert changed == round(0.2 * x.size)


def test_gauss_std_matches_channel_scale(bundle):
    x = feats(bundle).astype(np.float64)
    out = feats(gauss_attack(bundle, AttackConfig("GaussStd", scale=3.0), Rng(0))).astype(np.float64)
    sig = x.reshape(len(x), -1).std(axis=1)
    z = (out - x) / sig[:, None, None]
    # pooled over all channels: 1024 draws, so the sample std is within ~3% of the target
    assert z.std() == pytest.approx(3.0, rel=0.08)
    assert abs(z.mean()) < 0.5


def test_fgsm_zero_eps(bundle, surrogate):
    assert np.array_equal(feats(fgsm(bundle, surrogate, 0.0)), feats(bundle))


def test_fgsm_sign_structure(bundle, surrogate):
    from adapter_sentinel.redteam import _xent_grad
    eps = 1e-3
    x = feats(bundle)
    d = feats(fgsm(bundle, surrogate, eps)).astype(np.float64) - x
    g = _xent_grad(surrogate, x, 0)
    nz = g != 0
    assert np.all(np.sign(d[nz]) == -np.sign(g[nz]))
    np.testing.assert_allclose(np.abs(d[nz]), eps, rtol=1e-2)
    assert np.abs(d).max() <= eps


def test_single_step_ifgsm_equals_fgsm(bundle, surrogate):
    eps = 2e-3
    a = feats(fgsm(bundle, surrogate, eps))
    b = feats(iterative_attack(bundle, surrogate, AttackConfig("IFGSM", eps=eps, alpha=eps, iters=1)))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", ["IFGSM", "PGD"])
def test_iterative_respects_budget(bundle, surrogate, kind):
    eps = 1e-3
    out = attack(bundle, surrogate, AttackConfig(kind, eps=eps, alpha=4e-4, iters=6), Rng(2))
    assert linf_distance(feats(out), feats(bundle)) <= eps


def test_projection_exact_in_float32():
    g = np.random.default_rng(0)
    orig = g.normal(0, 1, 1000).astype(np.float32)
    x = orig + g.normal(0, 1, 1000).astype(np.float32)
    for eps in (1e-7, 3e-4, 0.1):
        p = project_linf(x, orig, eps)
        assert p.dtype == np.float32
        assert linf_distance(p, orig) <= eps


def test_cw_large_c_gradient_is_margin_dominated(bundle, surrogate):
    x = feats(bundle).astype(np.float64)
    delta = np.full_like(x, 1e-6)
    _, g, gm, m = cw_objective_grad(surrogate, x, delta, 1e6, 0.0)
    if m > 0:
        assert np.linalg.norm(g - gm) < 1e-3 * np.linalg.norm(gm)


def test_cw_stays_put_when_already_benign(bundle, surrogate):
    surrogate.params["head.b"][:] = [50.0, -50.0]
    assert predict(surrogate, feats(bundle))[0] == 0
    out = cw_attack(bundle, surrogate, AttackConfig("CW", **CW_PRESETS["P3"]))
    assert np.array_equal(feats(out), feats(bundle))
    assert out.metadata["cw_l2"] == 0.0 and out.metadata["cw_evaded"]


def test_cw_benign_gradient_pulls_delta_to_zero(bundle, surrogate):
    surrogate.params["head.b"][:] = [50.0, -50.0]
    x = feats(bundle).astype(np.float64)
    delta = np.random.default_rng(0).normal(0, 1e-3, x.shape)
    _, g, gm, _ = cw_objective_grad(surrogate, x, delta, 0.1, 0.0)
    assert not gm.any()
    np.testing.assert_array_equal(g, 2 * delta)


def test_attacks_leave_input_untouched(bundle, surrogate):
    before = bundle.digest()
    for cfg in preset_grid(1e-3)[1:]:
        attack(bundle, surrogate, cfg if cfg.kind != "CW" else AttackConfig("CW", iters=2), Rng(0))
    assert bundle.digest() == before


def test_none_attack_returns_input(bundle, surrogate):
    assert attack(bundle, surrogate, AttackConfig("None"), Rng(0)) is bundle


def test_preset_grid():
    ps = preset_grid()
    assert len(ps) == 1 + 3 + 3 + 2 + 6 + 5
    assert ps[0].label() == "Initial Model"
    scaled = preset_grid(2e-3)
    pgd = [p for p in scaled if p.kind == "PGD"]
    assert [p.eps for p in pgd] == pytest.approx([2e-4, 2e-3, 1e-2])
    assert all(p.alpha == pytest.approx(p.eps / 10) for p in pgd)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig("Deepfool")
    with pytest.raises(ValueError):
        AttackConfig("PGD", eps=1e-4, alpha=1e-3)
    with pytest.raises(ValueError):
        AttackConfig("CW", c=0)


def test_report_csv_roundtrip(tmp_path):
    row = {c: "1" for c in AttackReport.COLUMNS}
    rep = AttackReport(rows=[row], header={"split": "test"})
    rep.write_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().startswith("# split: test")
    assert AttackReport.read_csv(tmp_path / "a.csv") == [row]
