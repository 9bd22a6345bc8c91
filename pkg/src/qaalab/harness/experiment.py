"""End-to-end experiment: zoo, attack grid, diagnostics, reports and a manifest.

Every substitute row is attacked with every configured attack and evaluated
on every target in the zoo.  Per architecture ``A`` the rows are

* ``A-32`` and ``A-2``: plain zoo members in their native state,
* ``A-qaa``: the QAA-fine-tuned 2-bit model, attacked with alternating states,
* ``A-qaa-F`` / ``A-qaa-Q``: the same model frozen in the full-precision
  activation state or in the fully quantized state,
* ``A-ens-<mode>`` (optional): ensembles over the architecture's zoo,
* ``A-ckpt`` (optional): sampling ensemble over fine-tuning checkpoints.

All outputs are text with fixed float formatting and no timestamps, so a
rerun with the same config is byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import diagnostics as diag
from ..attacks import AttackSpec, ensemble_attack, qaa_attack, run_attack
from ..core.architectures import ARCHITECTURES
from ..core.tensor import QUANTIZED, WEIGHTS_ONLY
from ..training import CheckpointCollection, TrainConfig, accuracy, finetune_qaa, qat_train, train_standard
from .data import Dataset, load_idx, synth_dataset
from .evaluate import TransferReport, evaluate_transfer
from .serialize import load_model, save_model

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    architectures: list = field(default_factory=lambda: ["convnet_a", "convnet_b"])
    bitwidths: list = field(default_factory=lambda: [32, 8, 4, 3, 2])
    substitute_bits: list = field(default_factory=lambda: [32, 2])
    qaa: bool = True
    fixed_states: bool = True
    ensembles: list = field(default_factory=list)
    checkpoint_ensemble: bool = False
    attacks: list = field(default_factory=lambda: [{"family": "mim"}])
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    train: dict = field(default_factory=lambda: {"epochs": 3})
    qat: dict = field(default_factory=lambda: {"epochs": 3})
    finetune: dict = field(default_factory=lambda: {"epochs": 1, "learning_rate": 0.001})
    width: int = 8
    eval_size: int = 500
    diagnostics: dict = field(default_factory=lambda: {"divergence": True, "similarity": True,
                                                       "sharpness": [5e-4, 1e-3], "sample_size": 100})
    models: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        if not self.architectures:
            raise ConfigError("at least one architecture is required")
        for a in self.architectures:
            if a not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {a!r}")
        for b in self.bitwidths:
            if b != 32 and not 1 <= b <= 8:
                raise ConfigError(f"bitwidth {b} outside [1, 8] and not 32")
        for b in self.substitute_bits:
            if b not in self.bitwidths:
                raise ConfigError(f"substitute bitwidth {b} is not in the zoo")
        if (self.qaa or self.fixed_states) and not any(b < 32 for b in self.bitwidths):
            raise ConfigError("QAA rows need a quantized zoo member")
        for mode in self.ensembles:
            if mode not in ("logits", "softmax", "sampling"):
                raise ConfigError(f"unknown ensemble mode {mode!r}")
        for a in self.attacks:
            try:
                spec = AttackSpec.from_dict(a)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad attack spec {a}: {exc}") from exc
            if spec.family not in ("pgd", "mim"):
                raise ConfigError("grid attacks are pgd or mim; QAA and ensemble rows derive from them")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an explicit integer")
        if self.eval_size < 1:
            raise ConfigError("eval_size must be positive")
        kind = self.dataset.get("kind")
        if kind == "idx":
            for k in ("train_images", "train_labels", "test_images", "test_labels"):
                if k not in self.dataset:
                    raise ConfigError(f"idx dataset needs {k}")
                if not Path(self.dataset[k]).exists():
                    raise ConfigError(f"dataset file {self.dataset[k]} does not exist")
        elif kind != "synthetic":
            raise ConfigError(f"dataset kind must be 'synthetic' or 'idx', got {kind!r}")
        for mid, path in self.models.items():
            if not Path(path).exists():
                raise ConfigError(f"model file {path} for {mid} does not exist")
        for name in ("train", "qat", "finetune"):
            try:
                TrainConfig(**getattr(self, name))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {name} settings: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "config" in d and "outputs" in d:  # a manifest
            d = d["config"]
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


@dataclass
class ExperimentResult:
    report: TransferReport
    output_dir: Path
    manifest: dict
    zoo: dict = field(default_factory=dict)
    substitutes: dict = field(default_factory=dict)
    adversarial: dict = field(default_factory=dict)
    eval_set: Dataset | None = None


def _datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = dict(cfg.dataset)
    if d.pop("kind") == "idx":
        classes = d.get("classes")
        train = load_idx(d["train_images"], d["train_labels"], classes, "train")
        test = load_idx(d["test_images"], d["test_labels"], classes or train.num_classes, "test")
        return train, test
    seed = d.pop("seed", cfg.seed)
    n_train = d.pop("train_size", 10000)
    n_test = d.pop("test_size", cfg.eval_size)
    train = synth_dataset(n=n_train, seed=seed, split="train", **d)
    test = synth_dataset(n=n_test, seed=seed + 1000, pattern_seed=seed, split="test", **d)
    return train, test


def _train_cfg(base: dict, seed: int, width: int, bits: int = 32) -> TrainConfig:
    return TrainConfig(**{"seed": seed, "width": width, "bits": bits, **base})


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) and not math.isnan(v) else
                    ("undefined" if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


class _Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg, self.out = cfg, out
        self.outputs: dict[str, str] = {}
        self.models: dict[str, str] = {}
        self.stage = "init"

    def write(self, rel: str, text: str):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(text.encode())
        self.outputs[rel] = hashlib.sha256(text.encode()).hexdigest()

    def save(self, mid: str, model):
        rel = f"models/{mid}.qaam"
        (self.out / "models").mkdir(parents=True, exist_ok=True)
        self.models[mid] = save_model(model, self.out / rel)

    def manifest(self, status: str, failure: dict | None = None, dataset: dict | None = None) -> dict:
        m = {"schema_version": SCHEMA_VERSION, "status": status, "stage": self.stage,
             "config": self.cfg.to_dict(), "seeds": self.seeds(), "dataset": dataset or {},
             "models": dict(sorted(self.models.items())), "outputs": dict(sorted(self.outputs.items()))}
        if failure:
            m["failure"] = failure
        (self.out / "manifest.json").write_text(json.dumps(m, sort_keys=True, indent=2) + "\n")
        return m

    def seeds(self) -> dict:
        c = self.cfg
        return {"experiment": c.seed, "dataset": c.dataset.get("seed", c.seed),
                "train": c.train.get("seed", c.seed), "qat": c.qat.get("seed", c.seed),
                "finetune": c.finetune.get("seed", c.seed),
                "attacks": [AttackSpec.from_dict(a).seed for a in c.attacks]}


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    """Run the whole pipeline; on failure a partial manifest is written and the error re-raised."""
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    dataset_meta: dict = {}
    try:
        result = _pipeline(cfg, run, dataset_meta)
    except Exception as exc:
        run.manifest("failed", {"stage": run.stage, "type": type(exc).__name__, "message": str(exc)}, dataset_meta)
        raise
    result.manifest = run.manifest("complete", None, dataset_meta)
    return result


def _pipeline(cfg: ExperimentConfig, run: _Run, dataset_meta: dict) -> ExperimentResult:
    run.stage = "data"
    train, test = _datasets(cfg)
    ev = test.subset(0, min(cfg.eval_size, len(test)), "eval")
    dataset_meta.update({"train_sha256": train.payload_hash(), "eval_sha256": ev.payload_hash(),
                         "train_size": len(train), "eval_size": len(ev), "provenance": train.provenance})
    x, y = ev.images, ev.labels

    run.stage = "zoo"
    zoo = {}
    for arch in cfg.architectures:
        base = None
        for bits in sorted(cfg.bitwidths, reverse=True):
            mid = f"{arch}-{bits}"
            if mid in cfg.models:
                model = load_model(cfg.models[mid])
            elif bits == 32:
                model = train_standard(arch, train, _train_cfg(cfg.train, cfg.seed, cfg.width))
            else:
                if base is None:
                    base = zoo.get(f"{arch}-32") or train_standard(arch, train, _train_cfg(cfg.train, cfg.seed, cfg.width))
                model = qat_train(arch, train, _train_cfg(cfg.qat, cfg.seed, cfg.width, bits), init=base)
            if bits == 32:
                base = model
            zoo[mid] = model
            run.save(mid, model)
    targets = [(mid, zoo[mid]) for arch in cfg.architectures for mid in
               (f"{arch}-{b}" for b in cfg.bitwidths)]
    report = TransferReport()
    for mid, model in targets:
        report.clean_accuracy[mid] = accuracy(model, x, y)

    run.stage = "substitutes"
    subs: dict[str, tuple] = {}  # id -> (kind, model or models, state, arch)
    low = min(cfg.bitwidths)
    qaa_models = {}
    for arch in cfg.architectures:
        for b in cfg.substitute_bits:
            mid = f"{arch}-{b}"
            subs[mid] = ("plain", zoo[mid], None, arch)
        if cfg.qaa or cfg.fixed_states or cfg.checkpoint_ensemble:
            ckpts = CheckpointCollection() if cfg.checkpoint_ensemble else None
            qaa = finetune_qaa(zoo[f"{arch}-{low}"], train,
                               _train_cfg(cfg.finetune, cfg.seed, cfg.width, low), checkpoints=ckpts)
            qaa_models[arch] = qaa
            run.save(f"{arch}-qaa", qaa)
            if cfg.qaa:
                subs[f"{arch}-qaa"] = ("qaa", qaa, None, arch)
            if cfg.fixed_states:
                subs[f"{arch}-qaa-F"] = ("plain", qaa, WEIGHTS_ONLY, arch)
                subs[f"{arch}-qaa-Q"] = ("plain", qaa, QUANTIZED, arch)
            if cfg.checkpoint_ensemble:
                subs[f"{arch}-ckpt"] = ("ensemble-sampling", ckpts, None, arch)
        for mode in cfg.ensembles:
            members = [zoo[f"{arch}-{b}"] for b in cfg.bitwidths]
            subs[f"{arch}-ens-{mode}"] = (f"ensemble-{mode}", members, None, arch)

    run.stage = "attacks"
    adversarial = {}
    for a in cfg.attacks:
        spec = AttackSpec.from_dict(a)
        for sid, (kind, model, state, _arch) in subs.items():
            if kind == "qaa":
                adv = qaa_attack(model, x, y, AttackSpec.from_dict({**spec.to_dict(), "family": "qaa",
                                                                     "inner": spec.family}))
            elif kind.startswith("ensemble"):
                mode = kind.split("-", 1)[1]
                adv = ensemble_attack(model, x, y, AttackSpec.from_dict({**spec.to_dict(), "family": "ensemble",
                                                                          "inner": spec.family,
                                                                          "ensemble_mode": mode}))
            else:
                adv = run_attack(spec, model, x, y, state)
            adversarial[(sid, spec.family)] = adv
            report.extend(evaluate_transfer(adv, targets, None, sid, spec.family))

    run.stage = "diagnostics"
    _diagnostics(cfg, run, report, zoo, subs, adversarial, x, y)

    run.stage = "report"
    run.write("report.csv", report.to_csv())
    run.write("report_matrix.csv", report.pivot_csv())
    run.write("report.jsonl", report.to_jsonl())
    run.write("clean_accuracy.csv", _csv(["target", "accuracy"], sorted(report.clean_accuracy.items())))
    _substitute_summary(cfg, run, report, subs)
    return ExperimentResult(report, run.out, {}, zoo, subs, adversarial, ev)


def _sub_states(kind, model, state):
    if kind == "qaa":
        return [WEIGHTS_ONLY, QUANTIZED]
    return [state if state is not None else model.native_state()]


def _diagnostics(cfg, run, report, zoo, subs, adversarial, x, y):
    dcfg = cfg.diagnostics
    n = min(int(dcfg.get("sample_size", 100)), len(y))
    xs, ys = x[:n], y[:n]
    rows = []
    family = AttackSpec.from_dict(cfg.attacks[0]).family if cfg.attacks else None
    single = {sid: v for sid, v in subs.items() if not v[0].startswith("ensemble")}

    # BN statistics of the first batchnorm layer, per zoo model
    bn_rows = []
    for mid, model in zoo.items():
        idx = next((i for i, l in enumerate(model.layers) if l.kind == "batchnorm"), None)
        if idx is not None:
            bn_rows += [(mid, idx, c, m, v) for c, m, v in diag.bn_stats_export(model, idx)]
    run.write("plots/bn_stats.csv", _csv(["model", "layer", "channel", "running_mean", "running_var"], bn_rows))

    if dcfg.get("divergence", True) and family is not None:
        tap_rows = []
        for sid in single:
            adv = adversarial[(sid, family)]
            for mid, target in zoo.items():
                for k, layer_idx in enumerate(target.taps):
                    d = diag.feature_divergence_per_example(target, adv.x[:n], adv.x_adv[:n], k)
                    val = float(np.nanmean(d)) if not np.all(np.isnan(d)) else math.nan
                    tap_rows.append((sid, mid, k, layer_idx, val))
                    rows.append({"substitute": sid, "target": mid, "metric": "divergence", "epsilon": None,
                                 "layer": k, "value": val})
        run.write("plots/divergence_by_tap.csv", _csv(["substitute", "target", "tap", "layer", "divergence"], tap_rows))

    if dcfg.get("similarity", True):
        for sid, (kind, model, state, _a) in single.items():
            for mid, target in zoo.items():
                ga = diag.per_example_input_gradients(target, xs, ys)
                gb = diag.per_example_input_gradients(model, xs, ys, _sub_states(kind, model, state))
                cos = diag.cosine_rows(ga, gb)
                val = float(np.nanmean(cos)) if not np.all(np.isnan(cos)) else math.nan
                rows.append({"substitute": sid, "target": mid, "metric": "similarity", "epsilon": None,
                             "layer": None, "value": val})
        entries = [(mid, m) for mid, m in zoo.items()]
        entries += [(sid, v[1], _sub_states(v[0], v[1], v[2])) for sid, v in single.items() if sid not in zoo]
        labels, mat = diag.distance_matrix(entries, xs, ys)
        run.write("distance_matrix.csv", _csv(["model", *labels], [[l, *map(float, r)] for l, r in zip(labels, mat)]))

    for eps in dcfg.get("sharpness", []):
        scfg = diag.SharpnessConfig(float(eps))
        for sid, (kind, model, state, _a) in single.items():
            states = _sub_states(kind, model, state)
            w = diag.sharpness_weight(model, xs, ys, scfg, states)
            rows.append({"substitute": sid, "target": None, "metric": "sharpness_weight", "epsilon": float(eps),
                         "layer": None, "value": w.value})
            if family is not None:
                adv = adversarial[(sid, family)]
                f = diag.sharpness_feature(model, adv.x_adv[:n], ys, scfg, states)
                rows.append({"substitute": sid, "target": None, "metric": "sharpness_feature",
                             "epsilon": float(eps), "layer": None, "value": f.value})

    report.diagnostics.extend(rows)
    run.write("diagnostics.csv", _csv(["substitute", "target", "metric", "epsilon", "layer", "value"],
                                      [[r["substitute"], r["target"] or "", r["metric"],
                                        "" if r["epsilon"] is None else r["epsilon"],
                                        "" if r["layer"] is None else r["layer"], r["value"]] for r in rows]))


def _substitute_summary(cfg, run, report, subs):
    rows = []
    for a in cfg.attacks:
        fam = AttackSpec.from_dict(a).family
        for sid, (kind, _m, _s, arch) in subs.items():
            cross = [f"{o}-{b}" for o in cfg.architectures if o != arch for b in cfg.bitwidths]
            rows.append((sid, kind, fam, report.average(sid, fam), report.average(sid, fam, cross) if cross else math.nan))
    run.write("plots/substitute_asr.csv", _csv(["substitute", "kind", "attack", "avg_asr", "cross_arch_avg_asr"], rows))


def load_results(output_dir) -> dict:
    """Parsed ``report.csv`` and ``diagnostics.csv`` of a finished run."""
    out = Path(output_dir)
    with open(out / "report.csv") as fh:
        cells = list(csv.DictReader(fh))
    with open(out / "diagnostics.csv") as fh:
        diags = list(csv.DictReader(fh))
    return {"cells": cells, "diagnostics": diags,
            "manifest": json.loads((out / "manifest.json").read_text())}
