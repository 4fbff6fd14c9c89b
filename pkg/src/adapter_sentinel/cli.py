"""Command-line front end.

Every command takes ``--config`` (JSON), ``--seed``, ``--jobs`` and ``--out``
and writes a ``run.json`` plus CSV tables under the output directory.
Exit codes: 0 ok, 2 config/schema error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__, container
from .adapters import save_bundle
from .autodiff import NumericError, Rng
from .detector import DataError, DetectorConfig, DetectorModel, cross_evaluate, evaluate, fuse, train, \
    write_metrics_csv
from .forge import (AdapterHyper, BenchmarkManifest, EvalSet, ForgeConfig, ForgeError, encoder_config,
                    forge_benchmark, pretrain_base)
from .metrics import AUCUndefinedError
from .mitigation import (DEFAULT_CLEAN_FRACTION, DEFAULT_RHO, defender_data, fine_mix, measure, sft_cleanse,
                         trigger_ids_for, write_report)
from .redteam import AttackConfig, preset_grid, reference_std, run_campaign
from .transform import CACHE_ENV, cache_dir_from_env, transform_file

log = logging.getLogger("adapter_sentinel")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

SECTIONS = ("forge", "detector", "attack", "mitigation")


def load_config(path: str | None) -> dict[str, Any]:
    """Read a run config. A previous run's run.json is accepted and its config echo reused."""
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "config" in obj and "command" in obj:
        obj = obj["config"]
    unknown = set(obj) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}; expected {SECTIONS}")
    return obj


def forge_config(cfg: dict, seed: int | None) -> ForgeConfig:
    try:
        fc = ForgeConfig.from_json(cfg.get("forge", {}))
    except TypeError as e:
        raise ConfigError(f"forge section: {e}") from e
    if seed is not None:
        fc.seed = seed
    return fc


def detector_config(cfg: dict) -> DetectorConfig:
    try:
        return DetectorConfig.from_json(cfg.get("detector", {}))
    except TypeError as e:
        raise ConfigError(f"detector section: {e}") from e


def _seed(args, cfg: dict, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", default))


def _manifest(path: str | None) -> BenchmarkManifest:
    if not path:
        raise ConfigError("--manifest is required")
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    try:
        return BenchmarkManifest.load(p)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{p}: malformed manifest ({e})") from e


def _require_split(manifest: BenchmarkManifest, split: str) -> None:
    if not manifest.split(split):
        raise ConfigError(f"manifest has zero adapters in split {split!r}")


def _write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


# ---------------------------------------------------------------- commands

def cmd_pretrain(args, cfg, out: Path) -> dict:
    fc = forge_config(cfg, args.seed)
    base = pretrain_base(fc.task, fc.pretrain, encoder_config(fc.task))
    base.save(out / "base.model")
    hist = base.meta["ca_history"]
    _write_csv(out / "pretrain.csv", [{"epoch": i, "ca": f"{c:.6g}"} for i, c in enumerate(hist)])
    return {"seeds": {"task": fc.task.seed, "pretrain": fc.pretrain.seed}, "ca": hist[-1]}


def cmd_forge(args, cfg, out: Path) -> dict:
    fc = forge_config(cfg, args.seed)
    if args.base:
        fc.base_path = str(Path(args.base).resolve())
    manifest = forge_benchmark(fc, out, jobs=args.jobs)
    rows = [{"path": r.path, "label": r.label, "split": r.split, "method": r.method, "rank": r.rank,
             "asr": f"{r.asr:.6g}", "ca": f"{r.ca:.6g}"} for r in manifest.records]
    _write_csv(out / "adapters.csv", rows)
    return {"seeds": {"forge": fc.seed, "task": fc.task.seed}, "n_adapters": len(rows)}


def _cache_dir(out: Path) -> Path:
    return cache_dir_from_env() or out / "cache"


def cmd_transform_cache(args, cfg, out: Path) -> dict:
    manifest = _manifest(args.manifest)
    cache = _cache_dir(out)
    std = detector_config(cfg).standardize
    shapes = set()
    for r in manifest.records:
        shapes.add(transform_file(manifest.resolve(r.path), cache, std).data.shape)
    if len(shapes) != 1:
        raise DataError(f"inconsistent feature shapes in manifest: {sorted(shapes)}")
    return {"cache_dir": str(cache), "n_features": len(manifest.records), "shape": list(shapes.pop())}


def cmd_train_detector(args, cfg, out: Path) -> dict:
    manifest = _manifest(args.manifest)
    _require_split(manifest, "train")
    dc = detector_config(cfg)
    seed = _seed(args, cfg)
    models = []
    for i in range(args.ensemble):
        models.append(train(dc, manifest, Rng([seed, i]), cache_dir_from_env()))
    model = models[0] if len(models) == 1 else fuse(models)
    model.save(out / "detector.model")
    for i, m in enumerate(models if len(models) > 1 else []):
        m.save(out / f"member_{i}.model")
    rows = [dict(member=i, **e) for i, m in enumerate(models) for e in m.log]
    _write_csv(out / "training_log.csv", rows, ["member", "epoch", "train_loss", "val_acc", "val_loss"])
    result = {"seeds": {"detector": seed}, "ensemble": args.ensemble, "config_used": dc.to_json()}
    if len(models) > 1 and manifest.split("test"):
        # fused and unfused side by side; fusion is not assumed to help
        named = [(f"member_{i}", m) for i, m in enumerate(models)] + [("fused", model)]
        fusion = [r for name, m in named for r in _detection_rows(name, m, manifest, ["test"])]
        write_metrics_csv(out / "fusion.csv", fusion)
        result["fusion"] = fusion
    return result


def _detection_rows(run_id: str, model: DetectorModel, manifest: BenchmarkManifest, splits) -> list[dict]:
    rows = []
    for split in splits:
        _require_split(manifest, split)
        try:
            ev = evaluate(model, manifest, split, cache_dir_from_env())
            rows.append({"run_id": run_id, "split": split, "da": f"{ev.da:.6g}", "auc": f"{ev.auc:.6g}"})
        except AUCUndefinedError as e:
            rows.append({"run_id": run_id, "split": split, "da": f"{e.da:.6g}", "auc": "nan"})
    return rows


def cmd_eval(args, cfg, out: Path) -> dict:
    manifest = _manifest(args.manifest)
    model = DetectorModel.load(args.detector)
    rows = _detection_rows(args.run_id or manifest.config["method"]["tag"], model, manifest, [args.split])
    write_metrics_csv(out / "detection.csv", rows)
    return {"metrics": rows}


def cmd_cross_eval(args, cfg, out: Path) -> dict:
    model = DetectorModel.load(args.detector)
    rows = []
    for mpath in args.manifest_list:
        manifest = _manifest(mpath)
        _require_split(manifest, args.split)
        da, auc = cross_evaluate(model, manifest, args.split, cache_dir_from_env())
        rows.append({"source": args.source, "target": manifest.config["method"]["tag"], "manifest": mpath,
                     "split": args.split, "da": f"{da:.6g}", "auc": f"{auc:.6g}"})
    _write_csv(out / "transfer.csv", rows, ["source", "target", "manifest", "split", "da", "auc"])
    return {"metrics": rows}


def attack_configs(cfg: dict, manifest: BenchmarkManifest) -> list[AttackConfig]:
    sec = cfg.get("attack", {})
    if "configs" in sec:
        try:
            return [AttackConfig(**c) for c in sec["configs"]]
        except TypeError as e:
            raise ConfigError(f"attack section: {e}") from e
    ref = sec.get("reference_std")
    if ref is None and sec.get("scale_to_bench", True):
        ref = reference_std(manifest)
    return preset_grid(ref)


def cmd_attack(args, cfg, out: Path) -> dict:
    manifest = _manifest(args.manifest)
    _require_split(manifest, args.split)
    surrogate = DetectorModel.load(args.surrogate)
    target = DetectorModel.load(args.target)
    base = manifest.load_base()
    evalset = EvalSet.load(manifest.resolve(manifest.eval_set))
    configs = attack_configs(cfg, manifest)
    seed = _seed(args, cfg)
    report = run_campaign(manifest, surrogate, target, base, evalset, configs, Rng([seed, 11]), args.split,
                          out / "perturbed" if args.save_perturbed else None)
    report.write_csv(out / "attack.csv")
    _write_csv(out / "attack_per_adapter.csv", report.per_adapter)
    return {"seeds": {"attack": seed}, "configs": [asdict(c) for c in configs]}


def cmd_mitigate(args, cfg, out: Path) -> dict:
    manifest = _manifest(args.manifest)
    recs = [r for r in manifest.split(args.split) if r.label == "backdoored"]
    if not recs:
        raise ConfigError(f"split {args.split!r} has no backdoored adapters")
    sec = cfg.get("mitigation", {})
    rho = float(sec.get("rho", args.rho))
    hyper = AdapterHyper(**sec.get("hyper", {}))
    fraction = float(sec.get("clean_fraction", DEFAULT_CLEAN_FRACTION))
    seed = _seed(args, cfg)
    base = manifest.load_base()
    evalset = EvalSet.load(manifest.resolve(manifest.eval_set))
    fc = ForgeConfig.from_json(manifest.config)
    trig = trigger_ids_for(fc.task, fc.trigger)
    methods = ("SFT", "Fine-mix") if args.method == "both" else (args.method,)
    rows = []
    for i, rec in enumerate(recs):
        bundle = manifest.load_bundle(rec)
        clean = defender_data(manifest, Rng([seed, 21, i]), fraction)
        for method in methods:
            rng = Rng([seed, 22, i])
            if method == "SFT":
                after = sft_cleanse(base, bundle, clean, hyper, rng, trig)
                rows.append(measure(base, bundle, after, evalset, "SFT", None, rec.path))
            else:
                after = fine_mix(base, bundle, rho, clean, hyper, rng, trig)
                rows.append(measure(base, bundle, after, evalset, "Fine-mix", rho, rec.path))
            if args.save_bundles:
                save_bundle(after, out / "mitigated" / method / Path(rec.path).name)
    write_report(out / "mitigation.csv", rows, {"fine_mix": "adapter increment scaled by (1 - rho) then "
                                                "fine-tuned on clean data"})
    _write_csv(out / "mitigation_per_adapter.csv", [asdict(r) for r in rows])
    return {"seeds": {"mitigation": seed}, "rho": rho, "hyper": asdict(hyper), "clean_fraction": fraction}


REPORT_FILES = {"detection.csv": "detection", "transfer.csv": "transfer", "attack.csv": "attack",
                "mitigation.csv": "mitigation"}
ATTACK_TABLE = [("attack", "Attack Method"), ("params", "Parameters"), ("ca_under_attack", "CA under Attack"),
                ("asr_under_attack", "ASR under Attack"), ("detector_asr", "ASR on Detector")]


def _read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def cmd_report(args, cfg, out: Path) -> dict:
    found: dict[str, list[dict]] = {v: [] for v in REPORT_FILES.values()}
    for d in args.runs:
        d = Path(d)
        if not d.is_dir():
            raise FileNotFoundError(f"run directory not found: {d}")
        for name, kind in REPORT_FILES.items():
            for p in sorted(d.rglob(name)):
                found[kind].extend(_read_csv(p))
    if not any(found.values()):
        raise ConfigError("no CSV tables found under the given run directories")
    lines = []
    if found["detection"]:
        _write_csv(out / "detection_table.csv", found["detection"], ["run_id", "split", "da", "auc"])
        lines += ["## Detection", "", "| run | split | DA | AUC |", "|---|---|---|---|"]
        lines += [f"| {r['run_id']} | {r['split']} | {r['da']} | {r['auc']} |" for r in found["detection"]]
        lines.append("")
    if found["transfer"]:
        sources = sorted({r["source"] for r in found["transfer"]})
        targets = sorted({r["target"] for r in found["transfer"]})
        cell = {(r["source"], r["target"]): f"{r['da']}/{r['auc']}" for r in found["transfer"]}
        matrix = [{"source": s, **{t: cell.get((s, t), "") for t in targets}} for s in sources]
        _write_csv(out / "transfer_matrix.csv", matrix, ["source"] + targets)
        lines += ["## Transfer (DA/AUC)", "", "| source | " + " | ".join(targets) + " |",
                  "|---|" + "---|" * len(targets)]
        lines += ["| " + " | ".join([m["source"]] + [m[t] for t in targets]) + " |" for m in matrix]
        lines.append("")
    if found["attack"]:
        table = [{title: r[key] for key, title in ATTACK_TABLE} for r in found["attack"]]
        _write_csv(out / "attack_table.csv", table, [t for _, t in ATTACK_TABLE])
        lines += ["## Adaptive attacks", "", "| " + " | ".join(t for _, t in ATTACK_TABLE) + " |",
                  "|" + "---|" * len(ATTACK_TABLE)]
        lines += ["| " + " | ".join(r[t] for _, t in ATTACK_TABLE) + " |" for r in table]
        lines.append("")
    if found["mitigation"]:
        cols = ["method", "rho", "asr_before", "asr_after", "ca_before", "ca_after"]
        _write_csv(out / "mitigation_table.csv", found["mitigation"], cols)
        lines += ["## Mitigation", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        lines += ["| " + " | ".join(r[c] for c in cols) + " |" for r in found["mitigation"]]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    return {"tables": {k: len(v) for k, v in found.items()}}


COMMANDS = {
    "pretrain": cmd_pretrain, "forge": cmd_forge, "transform-cache": cmd_transform_cache,
    "train-detector": cmd_train_detector, "eval": cmd_eval, "cross-eval": cmd_cross_eval,
    "attack": cmd_attack, "mitigate": cmd_mitigate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (or a previous run.json)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adapter-sentinel", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the frozen base encoder")
    s = sub.add_parser("forge", parents=[common], help="forge a benchmark of benign/backdoored adapters")
    s.add_argument("--base", help="reuse an existing base.model")
    s = sub.add_parser("transform-cache", parents=[common], help=f"precompute features (cache: ${CACHE_ENV})")
    s.add_argument("--manifest", required=True)
    s = sub.add_parser("train-detector", parents=[common], help="train a detector on a benchmark")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ensemble", type=int, default=1, help="train n detectors and fuse them")
    s = sub.add_parser("eval", parents=[common], help="detection accuracy and AUC on a split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--detector", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--run-id", default="")
    s = sub.add_parser("cross-eval", parents=[common], help="zero-shot transfer to other benchmarks")
    s.add_argument("--detector", required=True)
    s.add_argument("--manifest", dest="manifest_list", action="append", required=True)
    s.add_argument("--split", default="all")
    s.add_argument("--source", default="LoRA", help="label of the detector's training benchmark")
    s = sub.add_parser("attack", parents=[common], help="adaptive attack campaign")
    s.add_argument("--manifest", required=True)
    s.add_argument("--surrogate", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--save-perturbed", action="store_true")
    s = sub.add_parser("mitigate", parents=[common], help="clean flagged adapters and measure ASR/CA")
    s.add_argument("--manifest", required=True)
    s.add_argument("--method", choices=("SFT", "Fine-mix", "both"), default="both")
    s.add_argument("--rho", type=float, default=DEFAULT_RHO)
    s.add_argument("--split", default="test")
    s.add_argument("--save-bundles", action="store_true")
    s = sub.add_parser("report", parents=[common], help="aggregate CSVs into summary tables")
    s.add_argument("runs", nargs="+", help="run directories to scan")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or Path("runs") / args.command)
    start = time.time()
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, out)
    except (NumericError, FloatingPointError, ForgeError) as e:
        print(f"error (numeric): {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (container.FormatError, OSError) as e:
        print(f"error (I/O): {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"error (config): {e}", file=sys.stderr)
        return EXIT_CONFIG
    run = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "args": {k: v for k, v in vars(args).items() if k not in ("verbose",)},
        "config": cfg,
        "seed": args.seed,
        "versions": {"adapter_sentinel": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_s": round(time.time() - start, 3),
        "result": result,
    }
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True, default=str) + "\n")
    print(json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
