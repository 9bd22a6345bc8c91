"""Command-line entry point.

Every subcommand reads an optional JSON ``--config``; ``--seed``, ``--out``
and ``--set KEY=VALUE`` (VALUE parsed as JSON when possible) override its
fields.  Exit status: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import diagnostics as diag
from ..attacks import AdversarialSet, AttackSpec, run_attack
from ..core.tensor import QuantState
from ..training import (TrainConfig, accuracy, adv_train, finetune_qaa, ptq_quantize, qat_train,
                        train_standard)
from .data import Dataset, load_dataset, load_idx, save_dataset, synth_dataset
from .evaluate import evaluate_transfer
from .experiment import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, ConfigError, ExperimentConfig, run_experiment
from .serialize import ContainerError, load_model, save_model

log = logging.getLogger("qaalab")

COMMANDS = ("train", "qat", "finetune-qaa", "ptq", "advtrain", "attack", "evaluate", "diagnose",
            "experiment", "report")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _config(args) -> dict:
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        cfg[key] = _parse_value(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"missing config field(s): {', '.join(missing)}")


def _dataset(cfg: dict, key: str = "data") -> Dataset:
    d = cfg.get(key, {"kind": "synthetic"})
    if d.get("kind") == "idx":
        for k in ("images", "labels"):
            if not Path(d.get(k, "")).is_file():
                raise ConfigError(f"dataset file {d.get(k)!r} not found")
        return load_idx(d["images"], d["labels"], d.get("classes"))
    if d.get("kind") == "npz":
        return load_dataset(d["path"])[0]
    opts = {k: v for k, v in d.items() if k != "kind"}
    opts.setdefault("seed", cfg.get("seed", 0))
    return synth_dataset(**opts)


def _train_cfg(cfg: dict) -> TrainConfig:
    fields = set(TrainConfig.__dataclass_fields__)
    return TrainConfig(**{k: v for k, v in {**cfg.get("train", {}), **cfg}.items() if k in fields})


def _model(path) -> object:
    if not Path(path).is_file():
        raise ConfigError(f"model file {path!r} not found")
    return load_model(path)


def _out(cfg: dict, default: str) -> Path:
    out = Path(cfg.get("out", default))
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _state(label):
    if label is None:
        return None
    table = {"wFaF": QuantState(False, False), "wQaF": QuantState(True, False),
             "wFaQ": QuantState(False, True), "wQaQ": QuantState(True, True)}
    if label not in table:
        raise ConfigError(f"unknown state {label!r}; use one of {sorted(table)}")
    return table[label]


def _save(model, cfg, default, data) -> int:
    out = _out(cfg, default)
    digest = save_model(model, out)
    print(json.dumps({"model": str(out), "sha256": digest, "accuracy": accuracy(model, data.images, data.labels)}))
    return EXIT_OK


def cmd_train(cfg):
    _require(cfg, "arch")
    data = _dataset(cfg)
    return _save(train_standard(cfg["arch"], data, _train_cfg(cfg)), cfg, "model.qaam", data)


def cmd_qat(cfg):
    _require(cfg, "arch", "bits")
    data = _dataset(cfg)
    init = _model(cfg["init"]) if "init" in cfg else None
    model = qat_train(cfg["arch"], data, _train_cfg(cfg), init=init, calib_method=cfg.get("calib_method", "mse"))
    return _save(model, cfg, "model.qaam", data)


def cmd_finetune_qaa(cfg):
    _require(cfg, "model")
    data = _dataset(cfg)
    base = _model(cfg["model"])
    tc = _train_cfg({"learning_rate": 0.001, "epochs": 1, **cfg})
    return _save(finetune_qaa(base, data, tc), cfg, "qaa.qaam", data)


def cmd_ptq(cfg):
    _require(cfg, "model", "bits")
    data = _dataset(cfg)
    model = ptq_quantize(_model(cfg["model"]), data, int(cfg["bits"]), cfg.get("method", "minmax"))
    return _save(model, cfg, "ptq.qaam", data)


def cmd_advtrain(cfg):
    _require(cfg, "arch")
    data = _dataset(cfg)
    spec = AttackSpec.from_dict({"family": "pgd", **cfg.get("attack", {})})
    return _save(adv_train(cfg["arch"], data, _train_cfg(cfg), spec), cfg, "adv.qaam", data)


def cmd_attack(cfg):
    _require(cfg, "model")
    data = _dataset(cfg)
    spec = AttackSpec.from_dict({"seed": cfg.get("seed", 0), **cfg.get("attack", {})})
    paths = cfg["model"] if isinstance(cfg["model"], list) else [cfg["model"]]
    models = [_model(p) for p in paths]
    sub = models if spec.family == "ensemble" else models[0]
    adv = run_attack(spec, sub, data.images, data.labels, _state(cfg.get("state")))
    out = _out(cfg, "adversarial.npz")
    save_dataset(Dataset(adv.x_adv, data.labels, data.num_classes, "adversarial", data.provenance), out,
                 adversarial=True, extra={"attack": spec.to_dict(), "substitutes": [str(p) for p in paths]},
                 clean=data.images)
    print(json.dumps({"adversarial": str(out), "max_perturbation": adv.max_perturbation()}))
    return EXIT_OK


def _adv_from(cfg) -> AdversarialSet:
    _require(cfg, "adversarial")
    ds, meta, clean = load_dataset(cfg["adversarial"])
    if clean is None:
        raise ConfigError("adversarial container carries no clean inputs")
    spec = AttackSpec.from_dict(meta["attack"]) if "attack" in meta else None
    return AdversarialSet(clean, ds.labels, ds.images, np.zeros((len(ds), 0)), spec, meta)


def cmd_evaluate(cfg):
    _require(cfg, "targets")
    adv = _adv_from(cfg)
    targets = [(tid, _model(p)) for tid, p in sorted(cfg["targets"].items())]
    report = evaluate_transfer(adv, targets, None, cfg.get("substitute_id", "substitute"),
                               adv.spec.family if adv.spec else "attack")
    out = _out(cfg, "report.csv")
    out.write_text(report.to_csv())
    out.with_suffix(".jsonl").write_text(report.to_jsonl())
    print(report.pivot_csv(), end="")
    return EXIT_OK


def cmd_diagnose(cfg):
    _require(cfg, "substitute", "targets")
    adv = _adv_from(cfg)
    sub = _model(cfg["substitute"])
    rows = []
    for tid, path in sorted(cfg["targets"].items()):
        t = _model(path)
        sim = diag.gradient_similarity(t, sub, adv.x, adv.y, skip_undefined=True)
        rows.append({"target": tid, "metric": "similarity", "value": sim})
        for k in range(len(t.taps)):
            rows.append({"target": tid, "metric": "divergence", "layer": k,
                         "value": diag.feature_divergence(t, adv.x, adv.x_adv, k, skip_undefined=True)})
    for eps in cfg.get("sharpness", [5e-4, 1e-3]):
        sc = diag.SharpnessConfig(float(eps))
        rows.append({"metric": "sharpness_weight", "epsilon": eps,
                     "value": diag.sharpness_weight(sub, adv.x, adv.y, sc).value})
        rows.append({"metric": "sharpness_feature", "epsilon": eps,
                     "value": diag.sharpness_feature(sub, adv.x_adv, adv.y, sc).value})
    out = _out(cfg, "diagnostics.jsonl")
    out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_experiment(cfg):
    if "config" in cfg and "outputs" in cfg:  # rerun from a manifest
        cfg = {**cfg["config"], **{k: cfg[k] for k in ("seed", "out") if k in cfg}}
    if "out" in cfg:
        cfg["output_dir"] = cfg.pop("out")
    exp = ExperimentConfig.from_dict(cfg)
    result = run_experiment(exp)
    print(result.report.pivot_csv(), end="")
    return EXIT_OK


def cmd_report(cfg):
    _require(cfg, "out")
    path = Path(cfg["out"]) / "report_matrix.csv"
    if not path.is_file():
        raise ConfigError(f"{path} not found; run the experiment first")
    print(path.read_text(), end="")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "qat": cmd_qat, "finetune-qaa": cmd_finetune_qaa, "ptq": cmd_ptq,
            "advtrain": cmd_advtrain, "attack": cmd_attack, "evaluate": cmd_evaluate, "diagnose": cmd_diagnose,
            "experiment": cmd_experiment, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qaalab", description="Transfer attacks with quantized substitutes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (an experiment manifest also works for 'experiment')")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return HANDLERS[args.command](cfg)
    except (ConfigError, ContainerError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
