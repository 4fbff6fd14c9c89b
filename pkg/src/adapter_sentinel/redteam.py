"""Weight-space evasion attacks against the detector and their cost to the backdoored model.

All attacks act on materialised increments and return new bundles carrying
dense deltas; the input bundle is never modified.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdapterBundle, with_dense
from .autodiff import AdamState, Rng, adam_step, softmax_xent, sub, take, tsum
from .detector import DetectorModel, TransferIncompatibilityError, input_gradient, predict_batch
from .forge import BenchmarkManifest, EvalSet, eval_asr_ca
from .transform import FeatureTensor, transform, transform_adjoint

KINDS = ("None", "GaussStd", "GaussRatio", "FGSM", "IFGSM", "PGD", "CW")
LINF_KINDS = ("FGSM", "IFGSM", "PGD")
BENIGN, BACKDOORED = 0, 1

# Per-element delta scale assumed for the full-size presets below. Desk-scale
# presets multiply every magnitude (eps, alpha, CW lr) by reference_std / this.
PRESET_REFERENCE_STD = 1e-3


class BudgetError(AssertionError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "None"
    scale: float = 1.0
    parameter_ratio: float = 0.2
    ratio_scale: float = 5.0
    eps: float = 1e-3
    alpha: float = 1e-4
    iters: int = 10
    random_start: bool | None = None  # None: PGD yes, IFGSM no
    c: float = 1e-4
    kappa: float = 0.0
    lr: float = 1e-5
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}")
        if self.kind in LINF_KINDS:
            if self.eps < 0 or (self.kind != "FGSM" and (self.alpha > self.eps or self.iters < 1)):
                raise ValueError("need eps >= 0, alpha <= eps and iters >= 1")
        if self.kind == "CW" and (self.c <= 0 or self.kappa < 0 or self.iters < 1):
            raise ValueError("CW needs c > 0, kappa >= 0, iters >= 1")
        if self.kind == "GaussRatio" and not 0 < self.parameter_ratio <= 1:
            raise ValueError("parameter_ratio must lie in (0, 1]")

    def params_text(self) -> str:
        if self.kind == "None":
            return "-"
        if self.kind == "GaussStd":
            return f"scale={self.scale:g}"
        if self.kind == "GaussRatio":
            return f"parameter_ratio={self.parameter_ratio:g}"
        if self.kind == "FGSM":
            return f"eps={self.eps:.3g}"
        if self.kind in ("IFGSM", "PGD"):
            return f"eps={self.eps:.3g},alpha={self.alpha:.3g},iters={self.iters}"
        return f"c={self.c:g},kappa={self.kappa:g},iters={self.iters},lr={self.lr:.3g}"

    def label(self) -> str:
        return self.name or f"{self.kind}[{self.params_text()}]"

    def scaled(self, factor: float) -> "AttackConfig":
        """Same attack with every perturbation magnitude multiplied by ``factor``."""
        return AttackConfig(**{**asdict(self), "eps": self.eps * factor, "alpha": self.alpha * factor,
                               "lr": self.lr * factor})


CW_PRESETS = {
    "P1": dict(c=1e-4, kappa=0.0, iters=20, lr=1e-5),
    "P2": dict(c=5e-3, kappa=0.0, iters=20, lr=5e-4),
    "P3": dict(c=0.1, kappa=0.0, iters=30, lr=1e-4),
    "P4": dict(c=0.1, kappa=5.0, iters=30, lr=1e-4),
    "P5": dict(c=0.5, kappa=10.0, iters=30, lr=1e-4),
}


def preset_grid(reference_std: float | None = None) -> list[AttackConfig]:
    """The full-size attack grid; ∞-norm and CW magnitudes rescaled when ``reference_std`` is given."""
    out = [AttackConfig("None", name="Initial Model")]
    out += [AttackConfig("GaussStd", scale=s) for s in (1.0, 3.0, 6.0)]
    out += [AttackConfig("GaussRatio", parameter_ratio=r) for r in (0.2, 0.4, 0.6)]
    out += [AttackConfig("FGSM", eps=e) for e in (1e-4, 1e-3)]
    for kind in ("IFGSM", "PGD"):
        out += [AttackConfig(kind, eps=e, alpha=e / 10, iters=10) for e in (1e-4, 1e-3, 5e-3)]
    out += [AttackConfig("CW", name=f"CW[{k}]", **v) for k, v in CW_PRESETS.items()]
    if reference_std is not None:
        out = [a.scaled(reference_std / PRESET_REFERENCE_STD) for a in out]
    return out


# ----------------------------------------------------------------- helpers

def _features(bundle: AdapterBundle) -> FeatureTensor:
    return transform(bundle)


def _to_bundle(bundle: AdapterBundle, data: np.ndarray, layout, config: AttackConfig) -> AdapterBundle:
    deltas = transform_adjoint(data.astype(np.float32), layout)
    return with_dense(bundle, deltas, perturbed=True, attack=config.kind, attack_params=config.params_text(),
                      attack_space="dense-delta", source_digest=bundle.digest())


def project_linf(x: np.ndarray, orig: np.ndarray, eps: float) -> np.ndarray:
    """Float32 point within eps (∞-norm, measured in float64) of ``orig``.

    Clipping in float64 and casting can land one ulp outside the ball; such
    elements are nudged back toward ``orig``.
    """
    o64 = orig.astype(np.float64)
    out = np.clip(x.astype(np.float64), o64 - eps, o64 + eps).astype(np.float32)
    for _ in range(4):
        d = out.astype(np.float64) - o64
        hi, lo = d > eps, d < -eps
        if not (hi.any() or lo.any()):
            break
        out[hi] = np.nextafter(out[hi], np.float32(-np.inf))
        out[lo] = np.nextafter(out[lo], np.float32(np.inf))
    return out


def linf_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).max()) if a.size else 0.0


def _xent_grad(model: DetectorModel, x: np.ndarray, label: int) -> np.ndarray:
    g, _ = input_gradient(model, x[None], lambda lg: softmax_xent(lg, np.array([label])))
    return g[0]


# ------------------------------------------------------------------ attacks

def gauss_attack(bundle: AdapterBundle, config: AttackConfig, rng: Rng) -> AdapterBundle:
    """Gaussian noise on materialised deltas, scaled by each matrix's element std."""
    ft = _features(bundle)
    x = ft.data.astype(np.float64)
    sig = x.reshape(len(x), -1).std(axis=1)
    if config.kind == "GaussStd":
        noise = rng.generator.standard_normal(x.shape) * (config.scale * sig)[:, None, None]
        out = x + noise
    elif config.kind == "GaussRatio":
        n = x.size
        m = int(np.floor(config.parameter_ratio * n + 0.5))
        idx = rng.generator.choice(n, size=m, replace=False)
        out = x.copy().reshape(-1)
        chan = idx // (x.shape[1] * x.shape[2])
        out[idx] += rng.generator.standard_normal(m) * config.ratio_scale * sig[chan]
        out = out.reshape(x.shape)
    else:
        raise ValueError(f"not a Gaussian attack: {config.kind}")
    res = out.astype(np.float32)
    if config.kind == "GaussStd" and config.scale == 0:
        res = ft.data.copy()
    return _to_bundle(bundle, res, ft.layout, config)


def fgsm(bundle: AdapterBundle, surrogate: DetectorModel, eps: float,
         config: AttackConfig | None = None) -> AdapterBundle:
    """One signed step that lowers the surrogate's loss for the benign label."""
    config = config or AttackConfig("FGSM", eps=eps)
    ft = _features(bundle)
    g = _xent_grad(surrogate, ft.data, BENIGN)
    if not np.any(g):
        warnings.warn("detector gradient is zero everywhere; FGSM is a no-op", RuntimeWarning)
    out = project_linf(ft.data - eps * np.sign(g), ft.data, eps)
    return _to_bundle(bundle, out, ft.layout, config)


def iterative_attack(bundle: AdapterBundle, surrogate: DetectorModel, config: AttackConfig,
                     rng: Rng | None = None) -> AdapterBundle:
    """I-FGSM (or PGD with a uniform random start), projected onto the eps-ball every step."""
    ft = _features(bundle)
    orig = ft.data
    start = config.random_start if config.random_start is not None else config.kind == "PGD"
    x = orig.copy()
    if start:
        if rng is None:
            raise ValueError("a random start needs an Rng")
        x = project_linf(orig + rng.generator.uniform(-config.eps, config.eps, orig.shape), orig, config.eps)
    for _ in range(config.iters):
        g = _xent_grad(surrogate, x, BENIGN)
        x = project_linf(x - config.alpha * np.sign(g), orig, config.eps)
    return _to_bundle(bundle, x, ft.layout, config)


def cw_objective_grad(model: DetectorModel, x: np.ndarray, delta: np.ndarray, c: float,
                      kappa: float) -> tuple[float, np.ndarray, np.ndarray, float]:
    """(objective, gradient w.r.t. delta, gradient of the margin term alone, margin).

    objective = ||delta||^2 + c * max(l_backdoored - l_benign, -kappa).
    """
    pt = (x + delta).astype(np.float32)

    def margin(lg):
        return tsum(sub(take(lg, BACKDOORED, axis=1), take(lg, BENIGN, axis=1)))

    gm, lg = input_gradient(model, pt[None], margin)
    m = float(lg[0, BACKDOORED] - lg[0, BENIGN])
    active = m > -kappa
    d64 = delta.astype(np.float64)
    obj = float((d64 ** 2).sum()) + c * max(m, -kappa)
    gmargin = c * gm[0] if active else np.zeros_like(d64)
    return obj, 2.0 * d64 + gmargin, gmargin, m


def cw_attack(bundle: AdapterBundle, surrogate: DetectorModel, config: AttackConfig) -> AdapterBundle:
    """Adam on delta; keeps the lowest-objective evading iterate, else the last one."""
    ft = _features(bundle)
    x = ft.data.astype(np.float64)
    delta = np.zeros_like(x)
    state = AdamState.zeros_like([delta])
    best, best_obj, evaded = None, np.inf, False
    for _ in range(config.iters):
        obj, g, _, m = cw_objective_grad(surrogate, x, delta, config.c, config.kappa)
        if m < 0 and obj < best_obj:
            best, best_obj, evaded = delta.copy(), obj, True
        adam_step([delta], [g], state, config.lr)
    obj, _, _, m = cw_objective_grad(surrogate, x, delta, config.c, config.kappa)
    if m < 0 and obj < best_obj:
        best, evaded = delta.copy(), True
    if best is None:
        best = delta
    out = _to_bundle(bundle, (x + best).astype(np.float32), ft.layout, config)
    out.metadata.update(cw_l2=float(np.sqrt((best ** 2).sum())), cw_evaded=evaded)
    return out


def attack(bundle: AdapterBundle, surrogate: DetectorModel, config: AttackConfig, rng: Rng) -> AdapterBundle:
    if config.kind == "None":
        return bundle
    if config.kind in ("GaussStd", "GaussRatio"):
        return gauss_attack(bundle, config, rng)
    if config.kind == "FGSM":
        return fgsm(bundle, surrogate, config.eps, config)
    if config.kind in ("IFGSM", "PGD"):
        return iterative_attack(bundle, surrogate, config, rng)
    return cw_attack(bundle, surrogate, config)


# ----------------------------------------------------------------- campaign

@dataclass
class AttackReport:
    rows: list[dict] = field(default_factory=list)
    per_adapter: list[dict] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    COLUMNS = ("attack", "params", "ca_under_attack", "ca_std", "asr_under_attack", "asr_std", "detector_asr",
               "surrogate_asr", "n_flagged", "n_adapters", "mean_linf", "mean_l2")

    def row(self, attack: str) -> dict:
        for r in self.rows:
            if r["attack"] == attack:
                return r
        raise KeyError(attack)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            for k, v in self.header.items():
                fh.write(f"# {k}: {v}\n")
            w = csv.DictWriter(fh, fieldnames=list(self.COLUMNS))
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in self.COLUMNS})

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path) as fh:
            return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def run_campaign(bench: BenchmarkManifest, surrogate: DetectorModel, target: DetectorModel, base,
                 evalset: EvalSet, configs: Sequence[AttackConfig], rng: Rng, split: str = "test",
                 out_dir=None) -> AttackReport:
    """Perturb every backdoored adapter of ``split`` on the surrogate and score the result.

    detector_asr is the share of adapters the target flagged before the attack
    that it calls benign afterwards. CA/ASR under attack run the perturbed
    deltas through the base model.
    """
    recs = [r for r in bench.split(split) if r.label == "backdoored"]
    if not recs:
        raise ValueError(f"split {split!r} has no backdoored adapters")
    bundles = [bench.load_bundle(r) for r in recs]
    feats = np.stack([transform(b).data for b in bundles])
    for m in (surrogate, target):
        if tuple(feats.shape[1:]) != m.input_shape:
            raise TransferIncompatibilityError(f"bench features {feats.shape[1:]} vs detector {m.input_shape}")
    flagged_t, _ = predict_batch(target, feats)
    flagged_s, _ = predict_batch(surrogate, feats)
    report = AttackReport(header={"perturbation_space": "materialised dense deltas",
                                  "split": split, "n_backdoored": len(recs)})
    for ci, cfg in enumerate(configs):
        crng = rng.spawn(ci)
        pert, linf, l2, ca, asr = [], [], [], [], []
        for i, (rec, b) in enumerate(zip(recs, bundles)):
            pb = attack(b, surrogate, cfg, crng.spawn(i))
            pf = transform(pb).data
            diff = pf.astype(np.float64) - feats[i].astype(np.float64)
            linf.append(float(np.abs(diff).max()))
            l2.append(float(np.sqrt((diff ** 2).sum())))
            if cfg.kind in LINF_KINDS and linf[-1] > cfg.eps:
                raise BudgetError(f"{cfg.label()}: |delta|_inf = {linf[-1]!r} exceeds eps = {cfg.eps!r}")
            a, c_ = eval_asr_ca(base, pb, evalset)
            asr.append(a)
            ca.append(c_)
            pert.append(pf)
            if out_dir is not None and cfg.kind != "None":
                from .adapters import save_bundle
                save_bundle(pb, Path(out_dir) / f"attack_{ci:02d}" / Path(rec.path).name)
        pred_t, _ = predict_batch(target, np.stack(pert))
        pred_s, _ = predict_batch(surrogate, np.stack(pert))
        ft_mask, fs_mask = flagged_t == 1, flagged_s == 1
        det = float((pred_t[ft_mask] == 0).mean()) if ft_mask.any() else float("nan")
        sur = float((pred_s[fs_mask] == 0).mean()) if fs_mask.any() else float("nan")
        report.rows.append({
            "attack": cfg.label(), "params": cfg.params_text(),
            "ca_under_attack": _fmt(np.mean(ca)), "ca_std": _fmt(np.std(ca)),
            "asr_under_attack": _fmt(np.mean(asr)), "asr_std": _fmt(np.std(asr)),
            "detector_asr": _fmt(det), "surrogate_asr": _fmt(sur),
            "n_flagged": int(ft_mask.sum()), "n_adapters": len(recs),
            "mean_linf": _fmt(np.mean(linf)), "mean_l2": _fmt(np.mean(l2)),
        })
        for i, rec in enumerate(recs):
            report.per_adapter.append({"attack": cfg.label(), "adapter": rec.path,
                                       "target_flag_before": int(flagged_t[i]), "target_flag_after": int(pred_t[i]),
                                       "surrogate_flag_after": int(pred_s[i]), "linf": linf[i], "l2": l2[i],
                                       "asr": asr[i], "ca": ca[i]})
    return report


def reference_std(bench: BenchmarkManifest, split: str = "train") -> float:
    """Mean per-element std of the backdoored deltas in a split."""
    recs = [r for r in bench.split(split) if r.label == "backdoored"]
    if not recs:
        raise ValueError("no backdoored adapters to measure")
    return float(np.mean([np.std(transform(bench.load_bundle(r)).data, dtype=np.float64) for r in recs]))
