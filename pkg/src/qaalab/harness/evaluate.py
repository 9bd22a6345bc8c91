"""Transfer evaluation and the success-rate report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..attacks import AdversarialSet
from ..core.graph import LayerGraph
from ..core.tensor import QuantState
from ..training import predict


@dataclass
class TransferCell:
    substitute: str
    attack: str
    target: str
    successes: int
    evaluated: int  # clean-correct examples: the ASR denominator
    total: int
    misclassified: int  # adversarial errors over all examples, clean-correct or not
    clean_accuracy: float
    white_box: bool = False

    @property
    def asr(self) -> float | None:
        if self.evaluated == 0:
            return None
        return 100.0 * self.successes / self.evaluated

    @property
    def raw_rate(self) -> float:
        return 100.0 * self.misclassified / self.total

    def row(self) -> dict:
        d = asdict(self)
        d["asr"] = self.asr
        d["raw_rate"] = self.raw_rate
        return d


CSV_FIELDS = ["substitute", "attack", "target", "asr", "successes", "evaluated", "raw_rate",
              "misclassified", "total", "clean_accuracy", "white_box"]


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


@dataclass
class TransferReport:
    cells: list[TransferCell] = field(default_factory=list)
    clean_accuracy: dict[str, float] = field(default_factory=dict)
    diagnostics: list[dict] = field(default_factory=list)

    def extend(self, other: "TransferReport"):
        self.cells.extend(other.cells)
        self.clean_accuracy.update(other.clean_accuracy)
        self.diagnostics.extend(other.diagnostics)

    def cell(self, substitute: str, attack: str, target: str) -> TransferCell:
        for c in self.cells:
            if (c.substitute, c.attack, c.target) == (substitute, attack, target):
                return c
        raise KeyError((substitute, attack, target))

    def average(self, substitute: str, attack: str, targets: Sequence[str] | None = None) -> float:
        """Mean ASR over the (defined) target cells of one row."""
        vals = [c.asr for c in self.cells if c.substitute == substitute and c.attack == attack
                and (targets is None or c.target in targets) and c.asr is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in self.cells:
            r = c.row()
            w.writerow([_fmt(r[k]) for k in CSV_FIELDS])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = [json.dumps({"event": "transfer", **c.row()}, sort_keys=True) for c in self.cells]
        lines += [json.dumps({"event": "clean_accuracy", "target": k, "accuracy": v}, sort_keys=True)
                  for k, v in sorted(self.clean_accuracy.items())]
        lines += [json.dumps({"event": "diagnostic", **d}, sort_keys=True) for d in self.diagnostics]
        return "".join(line + "\n" for line in lines)

    def pivot(self) -> tuple[list[str], list[list]]:
        """Substitute-by-target matrix with a trailing ``Avg.`` column."""
        targets = list(dict.fromkeys(c.target for c in self.cells))
        rows = list(dict.fromkeys((c.substitute, c.attack) for c in self.cells))
        table = []
        for sub, att in rows:
            by_t = {c.target: c.asr for c in self.cells if c.substitute == sub and c.attack == att}
            vals = [by_t.get(t) for t in targets]
            table.append([sub, att, *vals, self.average(sub, att)])
        return ["substitute", "attack", *targets, "Avg."], table

    def pivot_csv(self) -> str:
        header, table = self.pivot()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in table:
            w.writerow([_fmt(v) if not (isinstance(v, float) and math.isnan(v)) else "undefined" for v in row])
        return buf.getvalue()


def evaluate_transfer(adv: AdversarialSet, targets: Sequence[tuple[str, LayerGraph]],
                      states: Sequence[QuantState | None] | None = None,
                      substitute_id: str = "substitute", attack_id: str = "attack") -> TransferReport:
    """ASR of one adversarial batch against each ``(target id, model)``.

    A cell counts successes among the examples the target classifies correctly
    when clean; with none of those, the cell is undefined (``asr`` is None).
    """
    states = list(states) if states is not None else [None] * len(targets)
    if len(states) != len(targets):
        raise ValueError("one state per target is required")
    report = TransferReport()
    y = adv.y
    for (tid, model), state in zip(targets, states):
        if tuple(model.input_shape) != tuple(adv.x.shape[1:]):
            raise ValueError(f"target {tid} expects input {model.input_shape}, got {adv.x.shape[1:]}")
        clean_ok = predict(model, adv.x, state) == y
        adv_wrong = predict(model, adv.x_adv, state) != y
        acc = 100.0 * float(clean_ok.mean())
        report.clean_accuracy[tid] = acc
        report.cells.append(TransferCell(
            substitute_id, attack_id, tid, successes=int((clean_ok & adv_wrong).sum()),
            evaluated=int(clean_ok.sum()), total=len(y), misclassified=int(adv_wrong.sum()),
            clean_accuracy=acc, white_box=(tid == substitute_id)))
    return report
