"""Gold classification metrics: confusion matrix, accuracy, per-class
precision/recall, macro-F1, and the non-regression comparison."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with the positive class 1 = depressed."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    @classmethod
    def from_dict(cls, data: dict) -> "ConfusionMatrix":
        return cls(tp=int(data["tp"]), fp=int(data["fp"]),
                   fn=int(data["fn"]), tn=int(data["tn"]))


@dataclass(frozen=True)
class EvalReport:
    """Gold metrics bundle. ``undefined`` flags metrics whose denominator was
    zero and were reported as 0 instead of crashing a sweep.

    evaluate() is the checked constructor; building reports directly (e.g. to
    replay published numbers) performs no cross-field consistency checks.
    """

    accuracy: float
    macro_f1: float
    precision_0: float
    recall_0: float
    precision_1: float
    recall_1: float
    cm: ConfusionMatrix
    n: int
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "precision_0": self.precision_0,
            "recall_0": self.recall_0,
            "precision_1": self.precision_1,
            "recall_1": self.recall_1,
            "cm": self.cm.to_dict(),
            "n": self.n,
            "undefined": list(self.undefined),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            accuracy=float(data["accuracy"]),
            macro_f1=float(data["macro_f1"]),
            precision_0=float(data["precision_0"]),
            recall_0=float(data["recall_0"]),
            precision_1=float(data["precision_1"]),
            recall_1=float(data["recall_1"]),
            cm=ConfusionMatrix.from_dict(data["cm"]),
            n=int(data["n"]),
            undefined=tuple(data.get("undefined", ())),
        )


def _safe_ratio(num: int, denom: int, name: str, flags: list[str]) -> float:
    if denom == 0:
        flags.append(name)
        return 0.0
    return num / denom


def evaluate(preds: Sequence[int], golds: Sequence[int]) -> EvalReport:
    """Tally predictions against gold labels into an EvalReport."""
    if len(preds) != len(golds):
        raise ValidationError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    if not preds:
        raise ValidationError("cannot evaluate an empty prediction list")
    tp = fp = fn = tn = 0
    for pred, gold in zip(preds, golds):
        if pred not in (0, 1) or gold not in (0, 1):
            raise ValidationError(f"labels must be binary, got pred={pred!r} gold={gold!r}")
        if pred == 1 and gold == 1:
            tp += 1
        elif pred == 1 and gold == 0:
            fp += 1
        elif pred == 0 and gold == 1:
            fn += 1
        else:
            tn += 1
    flags: list[str] = []
    precision_1 = _safe_ratio(tp, tp + fp, "precision_1", flags)
    recall_1 = _safe_ratio(tp, tp + fn, "recall_1", flags)
    precision_0 = _safe_ratio(tn, tn + fn, "precision_0", flags)
    recall_0 = _safe_ratio(tn, tn + fp, "recall_0", flags)
    f1_1 = (
        2 * precision_1 * recall_1 / (precision_1 + recall_1)
        if precision_1 + recall_1 > 0
        else 0.0
    )
    f1_0 = (
        2 * precision_0 * recall_0 / (precision_0 + recall_0)
        if precision_0 + recall_0 > 0
        else 0.0
    )
    n = len(preds)
    return EvalReport(
        accuracy=(tp + tn) / n,
        macro_f1=(f1_0 + f1_1) / 2.0,
        precision_0=precision_0,
        recall_0=recall_0,
        precision_1=precision_1,
        recall_1=recall_1,
        cm=ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn),
        n=n,
        undefined=tuple(flags),
    )


@dataclass(frozen=True)
class RegressionCheck:
    regressed: bool
    macro_f1_delta: float
    recall_1_delta: float
    note: str


def compare(candidate: EvalReport, baseline: EvalReport, eps: float = 0.0) -> RegressionCheck:
    """Non-regression check: a candidate regresses when its macro-F1 or its
    minority recall drops more than eps below the baseline."""
    macro_delta = round(candidate.macro_f1 - baseline.macro_f1, 9)
    recall_delta = round(candidate.recall_1 - baseline.recall_1, 9)
    regressed = macro_delta < -eps or recall_delta < -eps
    parts = [f"macroF1 {macro_delta:+.4f}", f"rec1 {recall_delta:+.4f}"]
    if candidate.n != baseline.n:
        parts.append(f"warning: n differs ({candidate.n} vs {baseline.n})")
    return RegressionCheck(
        regressed=regressed,
        macro_f1_delta=macro_delta,
        recall_1_delta=recall_delta,
        note="; ".join(parts),
    )
