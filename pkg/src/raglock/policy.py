"""Per-step freeze/skip/reject/rollback policies and the append-only lock ledger.

Every decide_step* function is pure: identical scores produce identical
verdicts, and each Decision records the scores it was computed from so a
ledger can be replayed and audited. Gain comparisons are rounded to 9 decimal
places so stated boundaries (gain >= 0.02, drop <= 0.02, gain > 0.01) behave
exactly at the boundary despite float arithmetic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .embedding import TruncationSpec
from .errors import ValidationError
from .judge import DecodingParams
from .metrics import EvalReport, compare
from .proxies import ProxyReport
from .retrieval import (
    GuardReport,
    MmrConfig,
    PostFilterConfig,
    SelectionConfig,
    SelectionMode,
    SimilarityMetric,
)

# Thresholds as published in the step-policy table.
STEP1_MIN_GAIN = 0.02
STEP2_MIN_GAIN = 0.01
STEP3_SATURATION_GAIN = 0.01
STEP3_PRECISION_COLLAPSE = 0.10
STEP4_OVERLAP_GATE = 0.6
STEP5_CONFIDENCE_GATE = 0.65
STEP6_MAX_DROP = 0.02
STEP7_MIN_GAIN = 0.01


def _r9(x: float) -> float:
    return round(float(x), 9)


@dataclass(frozen=True)
class PrfConfig:
    enabled: bool = False
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("PRF alpha must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, data: dict) -> "PrfConfig":
        unknown = set(data) - {"enabled", "alpha"}
        if unknown:
            raise ValidationError(f"unknown prf keys: {sorted(unknown)}")
        return cls(enabled=bool(data.get("enabled", False)),
                   alpha=float(data.get("alpha", 0.5)))


@dataclass(frozen=True)
class PipelineConfig:
    """The full variability vector; defaults are the locked configuration
    (K=5, tau=0.75, dynamic, MMR off, filters off, PRF off, decoding 0.0/1.0/1)."""

    embedder_id: str = "pseudo-d64-s0"
    truncation: TruncationSpec = TruncationSpec()
    metric: SimilarityMetric = SimilarityMetric.COSINE
    selection: SelectionConfig = SelectionConfig()
    mmr: MmrConfig = MmrConfig()
    filters: PostFilterConfig = PostFilterConfig()
    expansion: bool = False
    prf: PrfConfig = PrfConfig()
    decoding: DecodingParams = DecodingParams()

    def to_dict(self) -> dict:
        return {
            "embedder_id": self.embedder_id,
            "truncation": self.truncation.to_dict(),
            "metric": self.metric.value,
            "selection": self.selection.to_dict(),
            "mmr": self.mmr.to_dict(),
            "filters": self.filters.to_dict(),
            "expansion": self.expansion,
            "prf": self.prf.to_dict(),
            "decoding": self.decoding.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {"embedder_id", "truncation", "metric", "selection", "mmr",
                 "filters", "expansion", "prf", "decoding"}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown pipeline config keys: {sorted(unknown)}")
        base = cls()
        return cls(
            embedder_id=str(data.get("embedder_id", base.embedder_id)),
            truncation=TruncationSpec.from_dict(data.get("truncation", base.truncation.to_dict())),
            metric=SimilarityMetric(data.get("metric", base.metric.value)),
            selection=SelectionConfig.from_dict(data.get("selection", base.selection.to_dict())),
            mmr=MmrConfig.from_dict(data.get("mmr", base.mmr.to_dict())),
            filters=PostFilterConfig.from_dict(data.get("filters", base.filters.to_dict())),
            expansion=bool(data.get("expansion", base.expansion)),
            prf=PrfConfig.from_dict(data.get("prf", base.prf.to_dict())),
            decoding=DecodingParams.from_dict(data.get("decoding", base.decoding.to_dict())),
        )

    def apply_delta(self, delta: Mapping[str, object]) -> "PipelineConfig":
        """Return a new config with dotted-key overrides applied
        (e.g. {"selection.k": 5, "mmr.enabled": True})."""
        doc = self.to_dict()
        for key, value in delta.items():
            parts = key.split(".")
            node = doc
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ValidationError(f"unknown config delta key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ValidationError(f"unknown config delta key {key!r}")
            node[parts[-1]] = value
        return PipelineConfig.from_dict(doc)

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class StepPolicy:
    """Declarative record of one step's gate, mirroring the policy table."""

    step: int
    gain_threshold: float
    guard: str
    frozen: bool = False


STEP_POLICIES: dict[int, StepPolicy] = {
    1: StepPolicy(1, STEP1_MIN_GAIN, "step1.gain"),
    2: StepPolicy(2, STEP2_MIN_GAIN, "step2.gain"),
    3: StepPolicy(3, STEP3_SATURATION_GAIN, "step3.saturation"),
    4: StepPolicy(4, STEP4_OVERLAP_GATE, "step4.overlap"),
    5: StepPolicy(5, STEP5_CONFIDENCE_GATE, "step5.confidence_gate"),
    6: StepPolicy(6, STEP6_MAX_DROP, "step6.nonregression"),
    7: StepPolicy(7, STEP7_MIN_GAIN, "step7.gain"),
    8: StepPolicy(8, 0.0, "step8.nonregression"),
}


class Verdict(str, Enum):
    ADOPT_FREEZE = "ADOPT_FREEZE"
    SKIP = "SKIP"
    REJECT = "REJECT"
    ROLLBACK = "ROLLBACK"


@dataclass(frozen=True)
class Decision:
    """One adjudicated candidate: the rule that fired, the scores it saw,
    the config delta it freezes (empty for SKIP/REJECT), and the governing
    baseline after the decision."""

    step: int
    verdict: Verdict
    rule: str
    reason: str
    delta: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    tier: str = "gold"
    varied: str = ""
    gold: EvalReport | None = None
    proxy: tuple[ProxyReport, ...] = ()
    baseline_after: EvalReport | None = None
    spend: dict = field(default_factory=dict)
    timestamp: str = ""

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "verdict": self.verdict.value,
            "rule": self.rule,
            "reason": self.reason,
            "delta": dict(self.delta),
            "scores": dict(self.scores),
            "tier": self.tier,
            "varied": self.varied,
            "gold": self.gold.to_dict() if self.gold else None,
            "proxy": [p.to_dict() for p in self.proxy],
            "baseline_after": self.baseline_after.to_dict() if self.baseline_after else None,
            "spend": dict(self.spend),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Decision":
        return cls(
            step=int(data["step"]),
            verdict=Verdict(data["verdict"]),
            rule=data["rule"],
            reason=data["reason"],
            delta=dict(data.get("delta", {})),
            scores=dict(data.get("scores", {})),
            tier=data.get("tier", "gold"),
            varied=data.get("varied", ""),
            gold=EvalReport.from_dict(data["gold"]) if data.get("gold") else None,
            proxy=tuple(ProxyReport.from_dict(p) for p in data.get("proxy", ())),
            baseline_after=(
                EvalReport.from_dict(data["baseline_after"])
                if data.get("baseline_after")
                else None
            ),
            spend=dict(data.get("spend", {})),
            timestamp=data.get("timestamp", ""),
        )


class LockLedger:
    """Append-only decision history; frozen state and baseline are replayed
    from the entries, so a persisted ledger is the single source of truth."""

    def __init__(self, entries: Sequence[Decision] = (), path: str | Path | None = None):
        self.entries: list[Decision] = list(entries)
        self.path = Path(path) if path is not None else None

    @classmethod
    def load(cls, path: str | Path) -> "LockLedger":
        p = Path(path)
        entries = []
        if p.exists():
            with p.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entries.append(Decision.from_dict(json.loads(line)))
        return cls(entries, path=p)

    def record(self, decision: Decision) -> Decision:
        if (
            decision.verdict is Verdict.ADOPT_FREEZE
            and decision.step != 0
            and decision.step in self.frozen_deltas()
        ):
            raise ValidationError(
                f"step {decision.step} is frozen; a rollback must precede re-adoption"
            )
        self.entries.append(decision)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(decision.to_dict(), ensure_ascii=False) + "\n")
                fh.flush()
        return decision

    def _stacks(self, upto: int | None = None) -> dict[int, list[dict]]:
        stacks: dict[int, list[dict]] = {}
        entries = self.entries if upto is None else self.entries[:upto]
        for d in entries:
            if d.verdict is Verdict.ADOPT_FREEZE and d.delta:
                stacks.setdefault(d.step, []).append(dict(d.delta))
            elif d.verdict is Verdict.ROLLBACK:
                if stacks.get(d.step):
                    stacks[d.step].pop()
        return stacks

    def frozen_deltas(self, upto: int | None = None) -> dict[int, dict]:
        return {
            step: stack[-1]
            for step, stack in self._stacks(upto).items()
            if stack
        }

    def baseline(self, upto: int | None = None) -> EvalReport | None:
        current: EvalReport | None = None
        entries = self.entries if upto is None else self.entries[:upto]
        for d in entries:
            if d.baseline_after is not None:
                current = d.baseline_after
        return current

    def decided_steps(self) -> set[int]:
        return {d.step for d in self.entries}

    def frozen_config(self, base: PipelineConfig) -> PipelineConfig:
        config = base
        for step in sorted(self.frozen_deltas()):
            config = config.apply_delta(self.frozen_deltas()[step])
        return config


def rollback(ledger: LockLedger, step: int, *, reason: str = "regression detected",
             timestamp: str = "") -> LockLedger:
    """Restore the pre-adoption frozen snapshot for a step by appending a
    ROLLBACK entry; the ledger stays append-only."""
    adoption_indices = [
        i for i, d in enumerate(ledger.entries)
        if d.step == step and d.verdict is Verdict.ADOPT_FREEZE and d.delta
    ]
    rollback_count = sum(
        1 for d in ledger.entries if d.step == step and d.verdict is Verdict.ROLLBACK
    )
    depth = len(adoption_indices) - rollback_count
    if depth <= 0:
        raise ValidationError(f"step {step} has no frozen state to roll back")
    target = adoption_indices[depth - 1]
    restored = ledger.baseline(upto=target)
    rolled_delta = ledger.entries[target].delta
    decision = Decision(
        step=step,
        verdict=Verdict.ROLLBACK,
        rule="step0.rollback",
        reason=reason,
        delta={},
        scores={"rolled_back_delta": dict(rolled_delta)},
        baseline_after=restored,
        timestamp=timestamp,
    )
    ledger.record(decision)
    return ledger


def _delta_label(delta: Mapping[str, object]) -> str:
    return ", ".join(f"{k}={v}" for k, v in sorted(delta.items())) or "(baseline)"


def decide_step1(
    candidates: Sequence[tuple[Mapping[str, object], float]],
    baseline_score: float,
) -> Decision:
    """Preprocessing (embedding/truncation) variants: freeze the best only on
    a macro-F1 gain of at least 0.02; skip when every variant regresses."""
    if not candidates:
        raise ValidationError("step 1 needs at least one scored candidate")
    best_delta, best_score = candidates[0]
    for delta, score in candidates[1:]:
        if score > best_score:
            best_delta, best_score = delta, score
    gain = _r9(best_score - baseline_score)
    scores = {
        "candidates": [[dict(d), float(s)] for d, s in candidates],
        "baseline": float(baseline_score),
        "best_gain": gain,
    }
    if all(s < baseline_score for _, s in candidates):
        return Decision(
            step=1, verdict=Verdict.SKIP, rule="step1.all_regress",
            reason=f"all variants regress relative to baseline {baseline_score:.4f}; "
                   "keep current preprocessing",
            scores=scores,
        )
    if gain >= STEP1_MIN_GAIN:
        return Decision(
            step=1, verdict=Verdict.ADOPT_FREEZE, rule="step1.gain",
            reason=f"gain {gain:+.4f} >= 0.02; freeze {_delta_label(best_delta)}",
            delta=dict(best_delta), scores=scores,
        )
    return Decision(
        step=1, verdict=Verdict.SKIP, rule="step1.below_gain",
        reason=f"best gain {gain:+.4f} < 0.02; keep baseline preprocessing",
        scores=scores,
    )


def decide_step2(
    alternative_scores: Mapping[str, float],
    cosine_score: float,
) -> Decision:
    """Similarity metric: cosine by default; switch only on a strict gain
    above 0.01; skip the sweep entirely when cosine already dominates."""
    scores = {
        "alternatives": {k: float(v) for k, v in alternative_scores.items()},
        "cosine": float(cosine_score),
    }
    if not alternative_scores or all(v <= cosine_score for v in alternative_scores.values()):
        return Decision(
            step=2, verdict=Verdict.SKIP, rule="step2.dominated",
            reason="cosine dominates every alternative on proxies; "
                   "skip metric sweep, keep cosine frozen",
            scores=scores,
        )
    best_metric = None
    best_score = -float("inf")
    for name, value in alternative_scores.items():
        if value > best_score:
            best_metric, best_score = name, value
    gain = _r9(best_score - cosine_score)
    scores["best_gain"] = gain
    if gain > STEP2_MIN_GAIN:
        return Decision(
            step=2, verdict=Verdict.ADOPT_FREEZE, rule="step2.gain",
            reason=f"{best_metric} gain {gain:+.4f} > 0.01; switch metric and freeze",
            delta={"metric": best_metric}, scores=scores,
        )
    return Decision(
        step=2, verdict=Verdict.REJECT, rule="step2.below_gain",
        reason=f"best alternative {best_metric} gain {gain:+.4f} <= 0.01; keep cosine",
        scores=scores,
    )


def decide_step3(
    recall_curve: Mapping[int, float],
    precision_by_k: Mapping[int, float] | None = None,
    *,
    winner_tau: float | None = None,
    static_score: float | None = None,
    dynamic_score: float | None = None,
) -> Decision:
    """Top-k / selection mode: grow k until the recall curve saturates
    (marginal gain < 0.01) or precision collapses (drop > 0.10), cap at 5,
    and prefer the dynamic selection mode."""
    if not recall_curve:
        raise ValidationError("step 3 needs a recall curve")
    ks = sorted(recall_curve)
    chosen = ks[0]
    stop_reason = "curve exhausted"
    for prev, k in zip(ks, ks[1:]):
        gain = _r9(recall_curve[k] - recall_curve[prev])
        if gain < STEP3_SATURATION_GAIN:
            stop_reason = f"recall saturates after k={chosen} (gain {gain:+.4f} < 0.01)"
            break
        if precision_by_k is not None:
            drop = _r9(precision_by_k[prev] - precision_by_k[k])
            if drop > STEP3_PRECISION_COLLAPSE:
                stop_reason = f"precision collapse at k={k} (drop {drop:.4f} > 0.10)"
                break
        chosen = k
    chosen = min(chosen, 5)
    if static_score is not None and dynamic_score is not None and dynamic_score < static_score:
        mode = SelectionMode.STATIC
        mode_reason = f"static beats dynamic ({static_score:.4f} > {dynamic_score:.4f})"
    else:
        mode = SelectionMode.DYNAMIC
        mode_reason = "prefer dynamic selection"
    delta: dict[str, object] = {"selection.k": chosen, "selection.mode": mode.value}
    if winner_tau is not None:
        delta["selection.tau"] = winner_tau
    scores: dict[str, object] = {
        "recall_curve": {str(k): float(v) for k, v in recall_curve.items()},
        "chosen_k": chosen,
    }
    if precision_by_k is not None:
        scores["precision_by_k"] = {str(k): float(v) for k, v in precision_by_k.items()}
    if static_score is not None:
        scores["static_score"] = float(static_score)
    if dynamic_score is not None:
        scores["dynamic_score"] = float(dynamic_score)
    if winner_tau is not None:
        scores["winner_tau"] = float(winner_tau)
    tau_note = f", tau={winner_tau}" if winner_tau is not None else ""
    return Decision(
        step=3, verdict=Verdict.ADOPT_FREEZE, rule="step3.saturation",
        reason=f"{stop_reason}; lock k={chosen} (cap 5), mode={mode.value}{tau_note}; "
               f"{mode_reason}",
        delta=delta, scores=scores,
    )


def decide_step4(
    overlap: float,
    minority_recall_delta: float,
    macro_f1_delta: float,
) -> Decision:
    """Diversity (MMR): activate only when candidate overlap exceeds 0.6 with
    no drop in minority recall or macro-F1."""
    scores = {
        "overlap": float(overlap),
        "minority_recall_delta": float(minority_recall_delta),
        "macro_f1_delta": float(macro_f1_delta),
    }
    if overlap <= STEP4_OVERLAP_GATE:
        return Decision(
            step=4, verdict=Verdict.SKIP, rule="step4.overlap",
            reason=f"candidate overlap {overlap:.2f} <= 0.6; MMR stays OFF",
            scores=scores,
        )
    if minority_recall_delta < 0:
        return Decision(
            step=4, verdict=Verdict.SKIP, rule="step4.minority_guard",
            reason=f"minority recall would drop ({minority_recall_delta:+.4f}); MMR stays OFF",
            scores=scores,
        )
    if macro_f1_delta < 0:
        return Decision(
            step=4, verdict=Verdict.SKIP, rule="step4.regression",
            reason=f"macro-F1 falls ({macro_f1_delta:+.4f}) vs frozen baseline; MMR stays OFF",
            scores=scores,
        )
    return Decision(
        step=4, verdict=Verdict.ADOPT_FREEZE, rule="step4.activate",
        reason=f"overlap {overlap:.2f} > 0.6 with no minority-recall or macro-F1 drop; "
               "enable MMR",
        delta={"mmr.enabled": True}, scores=scores,
    )


def decide_step5(
    confidence: float,
    macro_f1_delta: float | None,
) -> Decision:
    """Post-filters: apply only when decision confidence sits below the 0.65
    gate and the filtered configuration does not regress."""
    scores: dict[str, object] = {"confidence": float(confidence)}
    if macro_f1_delta is not None:
        scores["macro_f1_delta"] = float(macro_f1_delta)
    if confidence >= STEP5_CONFIDENCE_GATE:
        return Decision(
            step=5, verdict=Verdict.SKIP, rule="step5.confidence_gate",
            reason=f"confidence {confidence:.2f} >= gate 0.65; post-filters keep OFF",
            scores=scores,
        )
    if macro_f1_delta is None:
        return Decision(
            step=5, verdict=Verdict.SKIP, rule="step5.not_scored",
            reason="confidence below gate but filters were not scored; keep OFF",
            scores=scores,
        )
    if macro_f1_delta >= 0:
        return Decision(
            step=5, verdict=Verdict.ADOPT_FREEZE, rule="step5.activate",
            reason=f"confidence {confidence:.2f} < 0.65 and no regression "
                   f"({macro_f1_delta:+.4f}); enable post-filters",
            delta={"filters.dedup": True, "filters.metadata": True, "filters.low_conf": True},
            scores=scores,
        )
    return Decision(
        step=5, verdict=Verdict.REJECT, rule="step5.regression",
        reason=f"macro-F1 delta {macro_f1_delta:+.4f} < 0; post-filters keep OFF",
        scores=scores,
    )


def decide_step6(
    candidate_score: float,
    baseline_score: float,
    guards: GuardReport | None = None,
    component: str = "expansion",
) -> Decision:
    """Data expansion: adopt train+test augmentation only when the macro-F1
    drop stays within 0.02 and every leakage guard passes. The optional PRF
    variant must show a strict gain on its hard-query subset; a flat result
    is "no reliable gain" and keeps PRF off."""
    if component not in ("expansion", "prf"):
        raise ValidationError(f"unknown step-6 component {component!r}")
    scores: dict[str, object] = {
        "candidate": float(candidate_score),
        "baseline": float(baseline_score),
        "component": component,
    }
    if guards is not None:
        scores["guards"] = guards.to_dict()
    if component == "prf":
        gain = _r9(candidate_score - baseline_score)
        scores["gain"] = gain
        if gain > 0:
            return Decision(
                step=6, verdict=Verdict.ADOPT_FREEZE, rule="step6.prf_gain",
                reason=f"PRF gain {gain:+.4f} on the hard-query subset; enable PRF",
                delta={"prf.enabled": True}, scores=scores,
            )
        return Decision(
            step=6, verdict=Verdict.REJECT, rule="step6.prf",
            reason=f"no reliable gain ({gain:+.4f}); PRF kept OFF",
            scores=scores,
        )
    drop = _r9(baseline_score - candidate_score)
    scores["drop"] = drop
    if guards is not None and not guards.passed:
        issues = []
        if guards.exact_id_collisions:
            issues.append(f"id collisions {list(guards.exact_id_collisions)[:3]}")
        if guards.near_dup_pairs:
            issues.append(f"{len(guards.near_dup_pairs)} near-duplicate pair(s)")
        return Decision(
            step=6, verdict=Verdict.REJECT, rule="step6.leakage_guard",
            reason=f"leakage guards failed ({'; '.join(issues)}); expansion rejected",
            scores=scores,
        )
    if drop <= STEP6_MAX_DROP:
        return Decision(
            step=6, verdict=Verdict.ADOPT_FREEZE, rule="step6.nonregression",
            reason=f"macro-F1 drop {drop:+.4f} <= 0.02 and guards pass; "
                   "adopt train+test expansion",
            delta={"expansion": True}, scores=scores,
        )
    return Decision(
        step=6, verdict=Verdict.REJECT, rule="step6.drop",
        reason=f"macro-F1 drop {drop:+.4f} > 0.02; expansion rejected",
        scores=scores,
    )


def decide_step7(
    sweep: Mapping[float, EvalReport],
    baseline: EvalReport,
    *,
    current_tau: float = 0.75,
    eps: float = 0.0,
) -> Decision:
    """Threshold sweep around tau: adopt the best point only on a gain above
    0.01 with no regression; a peak below the locked baseline is rejected."""
    if not sweep:
        raise ValidationError("step 7 needs a non-empty sweep")
    best_tau = min(sweep, key=lambda t: (-sweep[t].macro_f1, t))
    best = sweep[best_tau]
    gain = _r9(best.macro_f1 - baseline.macro_f1)
    check = compare(best, baseline, eps)
    scores = {
        "sweep": {f"{t:.2f}": rep.to_dict() for t, rep in sorted(sweep.items())},
        "baseline": baseline.to_dict(),
        "current_tau": float(current_tau),
        "best_tau": float(best_tau),
        "gain": gain,
    }
    if gain > STEP7_MIN_GAIN and not check.regressed:
        return Decision(
            step=7, verdict=Verdict.ADOPT_FREEZE, rule="step7.gain",
            reason=f"tau={best_tau:.2f} gain {gain:+.4f} > 0.01 with no regression; "
                   f"freeze tau={best_tau:.2f}",
            delta={"selection.tau": float(best_tau)}, scores=scores,
        )
    if gain > STEP7_MIN_GAIN and check.regressed:
        return Decision(
            step=7, verdict=Verdict.REJECT, rule="step7.recall_guard",
            reason=f"tau={best_tau:.2f} gains macro-F1 but {check.note}; "
                   f"reject (non-regression); keep tau={current_tau:.2f}",
            scores=scores,
        )
    if _r9(best.macro_f1) < _r9(baseline.macro_f1):
        return Decision(
            step=7, verdict=Verdict.REJECT, rule="step7.nonregression",
            reason=f"peak at tau={best_tau:.2f} (macroF1 {best.macro_f1:.3f}) sits below "
                   f"the locked baseline ({baseline.macro_f1:.3f}); "
                   f"reject (non-regression); keep tau={current_tau:.2f}",
            scores=scores,
        )
    return Decision(
        step=7, verdict=Verdict.SKIP, rule="step7.no_gain",
        reason=f"sweep yields no gain > 0.01 (best {gain:+.4f}); keep tau={current_tau:.2f}",
        scores=scores,
    )


def decide_step8(
    grid: Mapping[DecodingParams, EvalReport],
    baseline: EvalReport,
    *,
    current: DecodingParams = DecodingParams(),
) -> Decision:
    """Decoding sweep and final gold validation: accept a grid point only when
    its macro-F1 is at least the locked baseline, then freeze the final config."""
    if not grid:
        raise ValidationError("step 8 needs a non-empty decoding grid")
    ordered = list(grid.items())
    best_params, best = ordered[0]
    for params, rep in ordered[1:]:
        if rep.macro_f1 > best.macro_f1:
            best_params, best = params, rep
    gain = _r9(best.macro_f1 - baseline.macro_f1)
    scores = {
        "grid": {p.key(): rep.to_dict() for p, rep in ordered},
        "baseline": baseline.to_dict(),
        "best": best_params.key(),
        "gain": gain,
    }
    if _r9(best.macro_f1) >= _r9(baseline.macro_f1):
        return Decision(
            step=8, verdict=Verdict.ADOPT_FREEZE, rule="step8.nonregression",
            reason=f"best grid point ({best_params.key()}) macroF1 {best.macro_f1:.3f} "
                   f">= baseline {baseline.macro_f1:.3f}; freeze final config",
            delta={
                "decoding.temperature": best_params.temperature,
                "decoding.top_p": best_params.top_p,
                "decoding.n_samples": best_params.n_samples,
            },
            scores=scores,
        )
    return Decision(
        step=8, verdict=Verdict.REJECT, rule="step8.nonregression",
        reason=f"all settings below baseline; best ({best_params.key()}) macroF1 "
               f"{best.macro_f1:.3f} < {baseline.macro_f1:.3f}; no change; keep "
               f"temp={current.temperature}, top_p={current.top_p}, n={current.n_samples}",
        scores=scores,
    )
