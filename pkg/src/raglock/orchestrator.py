"""Step 0 orchestration: run Steps 1-8 in order, screen candidates with cheap
proxies, promote survivors to gold evaluation under budget caps, apply the
per-step policies, persist the append-only ledger, and roll back on regression.

Steps 1-4 are scored jointly over one combined grid (the step-wise results
table rows them together); Steps 5-8 run sequentially against the then-frozen
base. All candidate enumeration, tie-breaking, and result merging is
deterministic, so identical seeds and backends reproduce identical ledgers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, Split, Transcript
from .embedding import (
    CaseBase,
    EmbedderBackend,
    TruncationMode,
    TruncationSpec,
    build_case_base,
    embed,
)
from .errors import BudgetExceededError, ExpansionRejectedError, ValidationError
from .judge import DecodingParams, JudgeBackend, default_template
from .metrics import EvalReport, compare
from .pipeline import EvalOutcome, ItemOutcome, evaluate_config, retrieval_pass, run_item
from .policy import (
    Decision,
    LockLedger,
    PipelineConfig,
    Verdict,
    decide_step1,
    decide_step2,
    decide_step3,
    decide_step4,
    decide_step5,
    decide_step6,
    decide_step7,
    decide_step8,
    rollback,
)
from .proxies import (
    ProxyFamily,
    ProxyReport,
    diversity_proxies,
    label_entropy,
    neighbor_vote_agreement,
    precision_at_k,
    recall_at_k_curve,
    semantic_retrieval_proxies,
)
from .retrieval import (
    GuardReport,
    SelectionMode,
    SimilarityMetric,
    dynamic_replacement_fraction,
    expand_pool,
    overlap_rate,
)

FILTERS_ON_DELTA = {"filters.dedup": True, "filters.metadata": True, "filters.low_conf": True}


class SystemClock:
    def now(self) -> str:
        return datetime.now(timezone.utc).isoformat()


class FixedClock:
    """Injectable test clock; every ledger timestamp becomes this constant."""

    def __init__(self, value: str = "1970-01-01T00:00:00+00:00"):
        self.value = value

    def now(self) -> str:
        return self.value


@dataclass(frozen=True)
class Budget:
    """Per-step evaluation caps. max_gold_evals_per_step may be 0, which
    forces every step to decide on proxies alone."""

    max_gold_evals_per_step: int = 16
    max_proxy_evals_per_step: int = 256
    max_judge_calls_total: int = 100_000

    def __post_init__(self) -> None:
        if self.max_gold_evals_per_step < 0:
            raise ValidationError("max_gold_evals_per_step must be >= 0")
        if self.max_proxy_evals_per_step < 1:
            raise ValidationError("max_proxy_evals_per_step must be >= 1")
        if self.max_judge_calls_total < 1:
            raise ValidationError("max_judge_calls_total must be >= 1")

    def to_dict(self) -> dict:
        return {
            "max_gold_evals_per_step": self.max_gold_evals_per_step,
            "max_proxy_evals_per_step": self.max_proxy_evals_per_step,
            "max_judge_calls_total": self.max_judge_calls_total,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Budget":
        unknown = set(data) - {"max_gold_evals_per_step", "max_proxy_evals_per_step",
                               "max_judge_calls_total"}
        if unknown:
            raise ValidationError(f"unknown budget keys: {sorted(unknown)}")
        base = cls()
        return cls(
            max_gold_evals_per_step=int(data.get("max_gold_evals_per_step",
                                                 base.max_gold_evals_per_step)),
            max_proxy_evals_per_step=int(data.get("max_proxy_evals_per_step",
                                                  base.max_proxy_evals_per_step)),
            max_judge_calls_total=int(data.get("max_judge_calls_total",
                                               base.max_judge_calls_total)),
        )


class BudgetLedger:
    """Mutable counters enforcing the caps; counters never exceed them."""

    def __init__(self, budget: Budget):
        self.budget = budget
        self.proxy_evals: dict[str, int] = {}
        self.gold_evals: dict[str, int] = {}
        self.judge_calls_total = 0
        self.mini_judge_calls = 0
        self._mark = self._totals()

    def _totals(self):
        return (dict(self.proxy_evals), dict(self.gold_evals),
                self.judge_calls_total, self.mini_judge_calls)

    def remaining_gold(self, step_key: str) -> int:
        return self.budget.max_gold_evals_per_step - self.gold_evals.get(step_key, 0)

    def charge_gold(self, step_key: str) -> None:
        if self.remaining_gold(step_key) <= 0:
            raise BudgetExceededError(f"gold-eval budget exhausted for step {step_key}")
        self.gold_evals[step_key] = self.gold_evals.get(step_key, 0) + 1

    def remaining_proxy(self, step_key: str) -> int:
        return self.budget.max_proxy_evals_per_step - self.proxy_evals.get(step_key, 0)

    def charge_proxy(self, step_key: str) -> None:
        if self.remaining_proxy(step_key) <= 0:
            raise BudgetExceededError(f"proxy-eval budget exhausted for step {step_key}")
        self.proxy_evals[step_key] = self.proxy_evals.get(step_key, 0) + 1

    def charge_judge(self) -> None:
        if self.judge_calls_total >= self.budget.max_judge_calls_total:
            raise BudgetExceededError("total judge-call budget exhausted")
        self.judge_calls_total += 1

    def charge_mini_judge(self) -> None:
        self.mini_judge_calls += 1

    def diff_since_mark(self) -> dict:
        p0, g0, j0, m0 = self._mark
        diff = {
            "proxy_evals": {
                k: v - p0.get(k, 0) for k, v in self.proxy_evals.items() if v != p0.get(k, 0)
            },
            "gold_evals": {
                k: v - g0.get(k, 0) for k, v in self.gold_evals.items() if v != g0.get(k, 0)
            },
            "judge_calls": self.judge_calls_total - j0,
            "mini_judge_calls": self.mini_judge_calls - m0,
        }
        self._mark = self._totals()
        return diff

    def restore(self, entries: Sequence[Decision]) -> None:
        for d in entries:
            spend = d.spend or {}
            for key, value in spend.get("proxy_evals", {}).items():
                self.proxy_evals[key] = self.proxy_evals.get(key, 0) + int(value)
            for key, value in spend.get("gold_evals", {}).items():
                self.gold_evals[key] = self.gold_evals.get(key, 0) + int(value)
            self.judge_calls_total += int(spend.get("judge_calls", 0))
            self.mini_judge_calls += int(spend.get("mini_judge_calls", 0))
        self._mark = self._totals()

    def spent(self) -> dict:
        return {
            "proxy_evals": dict(self.proxy_evals),
            "gold_evals": dict(self.gold_evals),
            "judge_calls_total": self.judge_calls_total,
            "mini_judge_calls": self.mini_judge_calls,
        }


@dataclass(frozen=True)
class RunPlan:
    """Candidate grids per step plus screening and policy knobs."""

    steps: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    trunc_grid: tuple[TruncationSpec, ...] = (
        TruncationSpec(TruncationMode.TOKEN_BUDGET, 256),
        TruncationSpec(TruncationMode.SENTENCE_WISE, 256),
    )
    metric_grid: tuple[SimilarityMetric, ...] = (
        SimilarityMetric.COSINE,
        SimilarityMetric.DOT,
        SimilarityMetric.L2_NORM_COSINE,
    )
    k_grid: tuple[int, ...] = (2, 3, 5)
    tau_grid: tuple[float, ...] = (0.75, 0.78, 0.82)
    mode_grid: tuple[SelectionMode, ...] = (SelectionMode.STATIC, SelectionMode.DYNAMIC)
    mmr_grid: tuple[bool, ...] = (False, True)
    tau_sweep_lo: float = 0.70
    tau_sweep_hi: float = 0.80
    tau_sweep_stride: float = 0.01
    decoding_temps: tuple[float, ...] = (0.0, 0.1, 0.2)
    decoding_top_ps: tuple[float, ...] = (1.0, 0.9)
    decoding_ns: tuple[int, ...] = (1, 3)
    top_m: int = 3
    mini_subset_size: int = 20
    recheck_after_adopt: bool = False
    eps: float = 0.0

    def __post_init__(self) -> None:
        if tuple(sorted(set(self.steps))) != self.steps:
            raise ValidationError("plan steps must be strictly increasing")
        if any(s not in range(1, 9) for s in self.steps):
            raise ValidationError("plan steps must lie in 1..8")
        if self.top_m < 1:
            raise ValidationError("top_m must be >= 1")
        if self.mini_subset_size < 1:
            raise ValidationError("mini_subset_size must be >= 1")

    def tau_sweep_values(self) -> tuple[float, ...]:
        count = int(round((self.tau_sweep_hi - self.tau_sweep_lo) / self.tau_sweep_stride)) + 1
        return tuple(round(self.tau_sweep_lo + i * self.tau_sweep_stride, 9)
                     for i in range(count))

    def decoding_grid(self) -> tuple[DecodingParams, ...]:
        return tuple(
            DecodingParams(temperature=t, top_p=p, n_samples=n)
            for t in self.decoding_temps
            for p in self.decoding_top_ps
            for n in self.decoding_ns
        )

    def to_dict(self) -> dict:
        return {
            "steps": list(self.steps),
            "trunc_grid": [t.to_dict() for t in self.trunc_grid],
            "metric_grid": [m.value for m in self.metric_grid],
            "k_grid": list(self.k_grid),
            "tau_grid": list(self.tau_grid),
            "mode_grid": [m.value for m in self.mode_grid],
            "mmr_grid": list(self.mmr_grid),
            "tau_sweep_lo": self.tau_sweep_lo,
            "tau_sweep_hi": self.tau_sweep_hi,
            "tau_sweep_stride": self.tau_sweep_stride,
            "decoding_temps": list(self.decoding_temps),
            "decoding_top_ps": list(self.decoding_top_ps),
            "decoding_ns": list(self.decoding_ns),
            "top_m": self.top_m,
            "mini_subset_size": self.mini_subset_size,
            "recheck_after_adopt": self.recheck_after_adopt,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunPlan":
        base = cls()
        known = set(base.to_dict())
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown plan keys: {sorted(unknown)}")
        merged = {**base.to_dict(), **data}
        return cls(
            steps=tuple(int(s) for s in merged["steps"]),
            trunc_grid=tuple(TruncationSpec.from_dict(t) for t in merged["trunc_grid"]),
            metric_grid=tuple(SimilarityMetric(m) for m in merged["metric_grid"]),
            k_grid=tuple(int(k) for k in merged["k_grid"]),
            tau_grid=tuple(float(t) for t in merged["tau_grid"]),
            mode_grid=tuple(SelectionMode(m) for m in merged["mode_grid"]),
            mmr_grid=tuple(bool(m) for m in merged["mmr_grid"]),
            tau_sweep_lo=float(merged["tau_sweep_lo"]),
            tau_sweep_hi=float(merged["tau_sweep_hi"]),
            tau_sweep_stride=float(merged["tau_sweep_stride"]),
            decoding_temps=tuple(float(t) for t in merged["decoding_temps"]),
            decoding_top_ps=tuple(float(p) for p in merged["decoding_top_ps"]),
            decoding_ns=tuple(int(n) for n in merged["decoding_ns"]),
            top_m=int(merged["top_m"]),
            mini_subset_size=int(merged["mini_subset_size"]),
            recheck_after_adopt=bool(merged["recheck_after_adopt"]),
            eps=float(merged["eps"]),
        )


@dataclass
class Backends:
    embedder: EmbedderBackend
    judge: JudgeBackend
    mini_judge: JudgeBackend | None = None


@dataclass
class RunResult:
    frozen: PipelineConfig
    frozen_hash: str
    ledger: LockLedger
    budget_spent: dict
    completed: bool = True

    def summary(self) -> dict:
        return {
            "frozen": self.frozen.to_dict(),
            "frozen_hash": self.frozen_hash,
            "steps": _step_rows(self.ledger),
            "budget_spent": self.budget_spent,
            "completed": self.completed,
        }


def screen(candidates: Sequence, scores: Sequence[float], top_m: int) -> list:
    """Rank candidates by the primary proxy and keep the top_m survivors;
    ties break by original (serialization) order, so screening is stable."""
    if top_m < 1:
        raise ValidationError("top_m must be >= 1")
    if len(candidates) != len(scores):
        raise ValidationError("candidates and scores must align")
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return [candidates[i] for i in order[: top_m]]


@dataclass(frozen=True)
class _Candidate:
    index: int
    delta: dict
    config: PipelineConfig


@dataclass
class _Bundle:
    primary: float
    mini_report: EvalReport | None
    proxy_reports: tuple[ProxyReport, ...]
    results: list


class _RunContext:
    def __init__(self, plan, corpus, backends, budget, ledger, base_config, template,
                 clock, cache_dir, max_workers):
        self.plan: RunPlan = plan
        self.corpus: Corpus = corpus
        self.backends: Backends = backends
        self.budget: BudgetLedger = budget
        self.ledger: LockLedger = ledger
        self.base_config: PipelineConfig = base_config
        self.template: str = template
        self.clock = clock
        self.cache_dir = cache_dir
        self.max_workers = max_workers
        self._case_bases: dict = {}
        self.val_items = sorted(corpus.split_items(Split.VAL), key=lambda t: t.id)
        self.mini_subset = self.val_items[: plan.mini_subset_size]
        self.proxy_baseline_report: EvalReport | None = None

    @property
    def embedder(self) -> EmbedderBackend:
        return self.backends.embedder

    @property
    def judge(self) -> JudgeBackend:
        return self.backends.judge

    @property
    def mini_judge(self) -> JudgeBackend | None:
        return self.backends.mini_judge

    def case_base(self, config: PipelineConfig,
                  pool: tuple[Split, ...] = (Split.TRAIN,)) -> CaseBase:
        key = (config.embedder_id, config.truncation.key(), frozenset(pool))
        if key not in self._case_bases:
            self._case_bases[key] = build_case_base(
                self.corpus, pool, config.truncation, self.embedder, self.cache_dir
            )
        return self._case_bases[key]

    def frozen_config(self) -> PipelineConfig:
        return self.ledger.frozen_config(self.base_config)

    def record(self, decision: Decision, *, tier: str | None = None, varied: str = "",
               gold: EvalReport | None = None, proxy: Sequence[ProxyReport] = (),
               baseline_after: EvalReport | None = None,
               extra_scores: Mapping[str, object] | None = None) -> Decision:
        scores = dict(decision.scores)
        if extra_scores:
            scores.update(extra_scores)
        enriched = replace(
            decision,
            scores=scores,
            tier=tier if tier is not None else decision.tier,
            varied=varied or decision.varied,
            gold=gold if gold is not None else decision.gold,
            proxy=tuple(proxy) if proxy else decision.proxy,
            baseline_after=(baseline_after if baseline_after is not None
                            else decision.baseline_after),
            spend=self.budget.diff_since_mark(),
            timestamp=self.clock.now(),
        )
        self.ledger.record(enriched)
        return enriched

    def restore_proxy_baseline(self) -> None:
        for d in self.ledger.entries:
            if "proxy_baseline_report" in d.scores:
                self.proxy_baseline_report = EvalReport.from_dict(
                    d.scores["proxy_baseline_report"]
                )


def _gold_eval(ctx: _RunContext, step_key: str, config: PipelineConfig,
               pool: tuple[Split, ...] = (Split.TRAIN,),
               items: Sequence[Transcript] | None = None) -> EvalOutcome:
    ctx.budget.charge_gold(step_key)
    base = ctx.case_base(config, pool)
    return evaluate_config(
        config, items if items is not None else ctx.val_items, base,
        ctx.embedder, ctx.judge, ctx.template, max_workers=ctx.max_workers,
    )


def _mini_eval(ctx: _RunContext, step_key: str, config: PipelineConfig,
               pool: tuple[Split, ...] = (Split.TRAIN,),
               items: Sequence[Transcript] | None = None,
               prompt_shuffle_seed: int | None = None) -> EvalOutcome:
    if ctx.mini_judge is None:
        raise ValidationError("no mini-judge backend configured for proxy-tier scoring")
    ctx.budget.charge_proxy(step_key)
    base = ctx.case_base(config, pool)
    return evaluate_config(
        config, items if items is not None else ctx.mini_subset, base,
        ctx.embedder, ctx.mini_judge, ctx.template,
        prompt_shuffle_seed=prompt_shuffle_seed,
    )


def _choose_tier(ctx: _RunContext, step_key: str, needed: int) -> str | None:
    """One tier per step: gold when the cap covers the whole sweep, else the
    mini-judge proxy tier, else nothing (budget skip)."""
    if ctx.budget.remaining_gold(step_key) >= needed:
        return "gold"
    if ctx.mini_judge is not None and ctx.budget.remaining_proxy(step_key) >= needed:
        return "proxy"
    return None


def _tier_eval(ctx: _RunContext, step_key: str, tier: str, config: PipelineConfig,
               pool: tuple[Split, ...] = (Split.TRAIN,),
               items: Sequence[Transcript] | None = None) -> EvalOutcome:
    if tier == "gold":
        return _gold_eval(ctx, step_key, config, pool, items)
    return _mini_eval(ctx, step_key, config, pool, items)


def _tier_baseline(ctx: _RunContext, tier: str) -> EvalReport | None:
    if tier == "gold":
        return ctx.ledger.baseline()
    return ctx.proxy_baseline_report


def _budget_skip(ctx: _RunContext, step: int, varied: str) -> Decision:
    decision = Decision(
        step=step, verdict=Verdict.SKIP, rule="step0.budget",
        reason="budget exhausted before the step could be scored",
    )
    return ctx.record(decision, tier="proxy", varied=varied)


def _bump_baseline(ctx: _RunContext, report: EvalReport | None) -> EvalReport | None:
    """A report becomes the new governing baseline only when it does not sit
    below the current one (non-regression of the locked baseline)."""
    if report is None:
        return None
    current = ctx.ledger.baseline()
    if current is None or round(report.macro_f1 - current.macro_f1, 9) >= 0:
        return report
    return None


def _establish_baseline(ctx: _RunContext) -> None:
    step_key = "0"
    gold: EvalReport | None = None
    if ctx.budget.remaining_gold(step_key) >= 1:
        try:
            gold = _gold_eval(ctx, step_key, ctx.base_config).report
        except BudgetExceededError:
            gold = None
    extra: dict[str, object] = {}
    if ctx.mini_judge is not None and ctx.budget.remaining_proxy(step_key) >= 1:
        try:
            mini = _mini_eval(ctx, step_key, ctx.base_config)
            ctx.proxy_baseline_report = mini.report
            extra["proxy_baseline_report"] = mini.report.to_dict()
        except BudgetExceededError:
            pass
    decision = Decision(
        step=0, verdict=Verdict.ADOPT_FREEZE, rule="step0.baseline",
        reason="baseline established from the default locked configuration",
        scores={"config_hash": ctx.base_config.content_hash()},
    )
    ctx.record(decision, tier="gold" if gold is not None else "proxy",
               varied="baseline", gold=gold, baseline_after=gold, extra_scores=extra)


def _enumerate_block(plan: RunPlan, base_cfg: PipelineConfig) -> list[_Candidate]:
    candidates: list[_Candidate] = []
    index = 0
    for trunc in plan.trunc_grid:
        for metric in plan.metric_grid:
            for k in plan.k_grid:
                for tau in plan.tau_grid:
                    for mode in plan.mode_grid:
                        for mmr_on in plan.mmr_grid:
                            delta = {
                                "truncation.mode": trunc.mode.value,
                                "truncation.budget": trunc.budget,
                                "metric": metric.value,
                                "selection.k": k,
                                "selection.tau": tau,
                                "selection.mode": mode.value,
                                "mmr.enabled": mmr_on,
                            }
                            candidates.append(
                                _Candidate(index, delta, base_cfg.apply_delta(delta))
                            )
                            index += 1
    return candidates


def _proxy_bundle(ctx: _RunContext, step_key: str, config: PipelineConfig) -> _Bundle:
    ctx.budget.charge_proxy(step_key)
    base = ctx.case_base(config)
    subset = ctx.mini_subset
    results = retrieval_pass(config, subset, base, ctx.embedder)
    golds = [int(t.label) for t in sorted(subset, key=lambda t: t.id)]  # type: ignore[arg-type]
    semantic = semantic_retrieval_proxies(results, golds)
    agreements = [neighbor_vote_agreement(r) for r in results]
    entropies = [label_entropy(list(r.labels)) for r in results]
    margins = [r.stats.margin for r in results if r.stats.margin is not None]
    confidence = ProxyReport(
        ProxyFamily.CONFIDENCE,
        {
            "vote_agreement": float(np.mean(agreements)),
            "label_entropy": float(np.mean(entropies)),
            "margin": float(np.mean(margins)) if margins else 0.0,
        },
        len(results),
    )
    reports: tuple[ProxyReport, ...]
    mini_report: EvalReport | None = None
    if ctx.mini_judge is not None:
        outcome = evaluate_config(config, subset, base, ctx.embedder, ctx.mini_judge,
                                  ctx.template)
        mini_report = outcome.report
        cheap = ProxyReport(
            ProxyFamily.CHEAP_JUDGE,
            {
                "mini_judge_agreement": mini_report.accuracy,
                "macro_f1_proxy": mini_report.macro_f1,
                "recall_1_proxy": mini_report.recall_1,
            },
            len(subset),
        )
        primary = mini_report.macro_f1
        reports = (semantic, confidence, cheap)
    else:
        primary = semantic.values.get("hit_at_k", semantic.values["mean_sim"])
        reports = (semantic, confidence)
    return _Bundle(primary, mini_report, reports, results)


def _facet_best(candidates: Sequence[_Candidate], score_of: Mapping[int, float],
                keys: tuple[str, ...]) -> dict[tuple, float]:
    best: dict[tuple, float] = {}
    for cand in candidates:
        if cand.index not in score_of:
            continue
        facet = tuple(cand.delta[k] for k in keys)
        score = score_of[cand.index]
        if facet not in best or score > best[facet]:
            best[facet] = score
    return best


def _mmr_deltas(ctx: _RunContext, candidates: Sequence[_Candidate],
                gold_reports: Mapping[int, EvalReport],
                bundles: Mapping[int, _Bundle]) -> tuple[float, float]:
    """(macro_f1_delta, minority_recall_delta) of enabling MMR, best-vs-best,
    from the gold tier when both sides were gold-evaluated, else the proxy tier."""

    def split_best(reports: Mapping[int, EvalReport]) -> tuple[EvalReport | None, EvalReport | None]:
        best_on: EvalReport | None = None
        best_off: EvalReport | None = None
        for cand in candidates:
            rep = reports.get(cand.index)
            if rep is None:
                continue
            if cand.delta["mmr.enabled"]:
                if best_on is None or rep.macro_f1 > best_on.macro_f1:
                    best_on = rep
            else:
                if best_off is None or rep.macro_f1 > best_off.macro_f1:
                    best_off = rep
        return best_on, best_off

    on, off = split_best(gold_reports)
    if on is None or off is None:
        mini = {i: b.mini_report for i, b in bundles.items() if b.mini_report is not None}
        on, off = split_best(mini)
    if on is None or off is None:
        return 0.0, 0.0
    return (round(on.macro_f1 - off.macro_f1, 9), round(on.recall_1 - off.recall_1, 9))


def _run_block(ctx: _RunContext) -> None:
    included = [s for s in (1, 2, 3, 4)
                if s in ctx.plan.steps and s not in ctx.ledger.decided_steps()]
    if not included:
        return
    step_key = "1-4"
    varied = (
        f"trunc x{len(ctx.plan.trunc_grid)}; metric x{len(ctx.plan.metric_grid)}; "
        f"K in {list(ctx.plan.k_grid)}; tau in {list(ctx.plan.tau_grid)}; "
        f"modes {[m.value for m in ctx.plan.mode_grid]}; MMR {list(ctx.plan.mmr_grid)}"
    )
    candidates = _enumerate_block(ctx.plan, ctx.base_config)
    bundles: dict[int, _Bundle] = {}
    for cand in candidates:
        try:
            bundles[cand.index] = _proxy_bundle(ctx, step_key, cand.config)
        except BudgetExceededError:
            break
    if not bundles:
        for step in included:
            _budget_skip(ctx, step, varied)
        return

    proxied = [candidates[i] for i in sorted(bundles)]
    survivors = screen(proxied, [bundles[c.index].primary for c in proxied],
                       ctx.plan.top_m)
    gold_reports: dict[int, EvalReport] = {}
    for cand in survivors:
        try:
            gold_reports[cand.index] = _gold_eval(ctx, step_key, cand.config).report
        except BudgetExceededError:
            break

    if gold_reports:
        tier = "gold"
        score_of: dict[int, float] = {i: rep.macro_f1 for i, rep in gold_reports.items()}
    else:
        tier = "proxy"
        score_of = {i: bundles[i].primary for i in bundles}
    winner_idx = min(score_of, key=lambda i: (-score_of[i], i))
    winner = candidates[winner_idx]

    baseline_rep = _tier_baseline(ctx, tier)
    baseline_score = baseline_rep.macro_f1 if baseline_rep is not None else 0.0

    decisions: list[Decision] = []

    if 1 in included:
        trunc_best = _facet_best(candidates, score_of,
                                 ("truncation.mode", "truncation.budget"))
        scored = [
            ({"truncation.mode": mode, "truncation.budget": budget}, score)
            for (mode, budget), score in trunc_best.items()
        ]
        decisions.append(decide_step1(scored, baseline_score))

    if 2 in included:
        metric_best = {m[0]: s for m, s in _facet_best(candidates, score_of,
                                                       ("metric",)).items()}
        cosine_score = metric_best.get(SimilarityMetric.COSINE.value, baseline_score)
        alternatives = {m: s for m, s in metric_best.items()
                        if m != SimilarityMetric.COSINE.value}
        decisions.append(decide_step2(alternatives, cosine_score))

    cfg_12 = ctx.base_config
    for d in decisions:
        if d.verdict is Verdict.ADOPT_FREEZE:
            cfg_12 = cfg_12.apply_delta(d.delta)

    if 3 in included:
        base3 = ctx.case_base(cfg_12)
        subset = ctx.mini_subset
        queries = [
            embed(t.text, cfg_12.truncation, ctx.embedder, item_id=t.id)
            for t in sorted(subset, key=lambda t: t.id)
        ]
        golds = [int(t.label) for t in sorted(subset, key=lambda t: t.id)]  # type: ignore[arg-type]
        curve = recall_at_k_curve(base3, queries, golds, list(ctx.plan.k_grid),
                                  cfg_12.metric)
        precisions = precision_at_k(base3, queries, golds, list(ctx.plan.k_grid),
                                    cfg_12.metric)
        mode_best = {m[0]: s for m, s in _facet_best(candidates, score_of,
                                                     ("selection.mode",)).items()}
        winner_sel = winner.config.selection
        d3 = decide_step3(
            curve, precisions,
            winner_tau=winner_sel.tau,
            static_score=mode_best.get(SelectionMode.STATIC.value),
            dynamic_score=mode_best.get(SelectionMode.DYNAMIC.value),
        )
        replacements = dynamic_replacement_fraction(
            queries, base3, replace(winner_sel, mode=SelectionMode.DYNAMIC), cfg_12.metric
        )
        d3 = replace(d3, scores={**d3.scores,
                                 "dynamic_replacement_fraction": replacements})
        decisions.append(d3)

    if 4 in included:
        winner_bundle = bundles[winner_idx]
        overlap = (overlap_rate(winner_bundle.results)
                   if len(winner_bundle.results) >= 2 else 0.0)
        macro_delta, recall_delta = _mmr_deltas(ctx, candidates, gold_reports, bundles)
        d4 = decide_step4(overlap, recall_delta, macro_delta)
        diversity = diversity_proxies(winner_bundle.results[0], ctx.case_base(winner.config))
        d4 = replace(d4, proxy=(*winner_bundle.proxy_reports, diversity))
        decisions.append(d4)

    combo = ctx.base_config
    for d in decisions:
        if d.verdict is Verdict.ADOPT_FREEZE:
            combo = combo.apply_delta(d.delta)

    block_report: EvalReport | None = None
    extra_scores: dict[str, object] = {}
    if tier == "gold":
        match = next(
            (i for i in sorted(gold_reports) if candidates[i].config == combo), None
        )
        if match is not None:
            block_report = gold_reports[match]
        elif combo == ctx.base_config and baseline_rep is not None:
            block_report = baseline_rep
        else:
            try:
                block_report = _gold_eval(ctx, step_key, combo).report
            except BudgetExceededError:
                block_report = None
    else:
        match = next((i for i in sorted(bundles)
                      if candidates[i].config == combo
                      and bundles[i].mini_report is not None), None)
        if match is not None:
            ctx.proxy_baseline_report = bundles[match].mini_report
            extra_scores["proxy_baseline_report"] = bundles[match].mini_report.to_dict()

    new_baseline = _bump_baseline(ctx, block_report)
    adopt_indices = [i for i, d in enumerate(decisions)
                     if d.verdict is Verdict.ADOPT_FREEZE]
    baseline_holder = adopt_indices[-1] if adopt_indices else None

    if tier == "proxy" and ctx.proxy_baseline_report is not None and not extra_scores:
        extra_scores["proxy_baseline_report"] = ctx.proxy_baseline_report.to_dict()

    for i, decision in enumerate(decisions):
        is_holder = baseline_holder is not None and i == baseline_holder
        ctx.record(
            decision,
            tier=tier,
            varied=varied,
            gold=gold_reports.get(winner_idx) if tier == "gold" else None,
            proxy=decision.proxy or bundles[winner_idx].proxy_reports,
            baseline_after=new_baseline if is_holder else None,
            extra_scores=extra_scores if i == len(decisions) - 1 else None,
        )


def _run_step5(ctx: _RunContext) -> None:
    step_key = "5"
    varied = "post-filters"
    frozen = ctx.frozen_config()
    base = ctx.case_base(frozen)
    results = retrieval_pass(frozen, ctx.val_items, base, ctx.embedder)
    confidence = float(np.mean([neighbor_vote_agreement(r) for r in results]))
    if confidence >= 0.65:
        decision = decide_step5(confidence, None)
        ctx.record(decision, tier="proxy", varied=varied)
        return
    tier = _choose_tier(ctx, step_key, 1)
    if tier is None:
        _budget_skip(ctx, 5, varied)
        return
    candidate = frozen.apply_delta(FILTERS_ON_DELTA)
    try:
        outcome = _tier_eval(ctx, step_key, tier, candidate)
    except BudgetExceededError:
        _budget_skip(ctx, 5, varied)
        return
    baseline_rep = _tier_baseline(ctx, tier)
    baseline_score = baseline_rep.macro_f1 if baseline_rep is not None else 0.0
    delta = round(outcome.report.macro_f1 - baseline_score, 9)
    decision = decide_step5(confidence, delta)
    bump = None
    if decision.verdict is Verdict.ADOPT_FREEZE and tier == "gold":
        bump = _bump_baseline(ctx, outcome.report)
    ctx.record(decision, tier=tier, varied=varied,
               gold=outcome.report if tier == "gold" else None,
               baseline_after=bump)


def _run_step6(ctx: _RunContext) -> None:
    step_key = "6"
    frozen = ctx.frozen_config()

    # Train+test expansion behind leakage guards.
    test_items = [t for t in ctx.corpus.split_items(Split.TEST) if t.label is not None]
    if not test_items:
        ctx.record(
            Decision(step=6, verdict=Verdict.SKIP, rule="step6.no_test",
                     reason="no labeled TEST items; expansion skipped"),
            tier="proxy", varied="train+test expansion",
        )
    else:
        base = ctx.case_base(frozen)
        guard: GuardReport | None = None
        decision: Decision | None = None
        try:
            _, guard = expand_pool(base, test_items, ctx.embedder)
        except ExpansionRejectedError as exc:
            decision = Decision(
                step=6, verdict=Verdict.REJECT, rule="step6.leakage_guard",
                reason=str(exc),
                scores={"guards": exc.report.to_dict() if exc.report else {}},
            )
            ctx.record(decision, tier="proxy", varied="train+test expansion")
        if decision is None:
            tier = _choose_tier(ctx, step_key, 1)
            if tier is None:
                _budget_skip(ctx, 6, "train+test expansion")
            else:
                try:
                    outcome = _tier_eval(ctx, step_key, tier, frozen,
                                         pool=(Split.TRAIN, Split.TEST))
                except BudgetExceededError:
                    _budget_skip(ctx, 6, "train+test expansion")
                else:
                    baseline_rep = _tier_baseline(ctx, tier)
                    baseline_score = (baseline_rep.macro_f1
                                      if baseline_rep is not None else 0.0)
                    decision = decide_step6(outcome.report.macro_f1, baseline_score,
                                            guard, component="expansion")
                    bump = None
                    if decision.verdict is Verdict.ADOPT_FREEZE and tier == "gold":
                        bump = _bump_baseline(ctx, outcome.report)
                    ctx.record(decision, tier=tier, varied="train+test expansion",
                               gold=outcome.report if tier == "gold" else None,
                               baseline_after=bump)

    # PRF, judged on the hard-query subset (lowest retrieval margins).
    frozen = ctx.frozen_config()
    base = ctx.case_base(frozen)
    results = retrieval_pass(frozen, ctx.val_items, base, ctx.embedder)
    ordered = sorted(ctx.val_items, key=lambda t: t.id)
    margins = [
        (r.stats.margin if r.stats.margin is not None else 0.0, item.id, item)
        for r, item in zip(results, ordered)
    ]
    margins.sort(key=lambda m: (m[0], m[1]))
    hard_count = max(5, len(ordered) // 4)
    hard_subset = [m[2] for m in margins[: min(hard_count, len(margins))]]
    tier = _choose_tier(ctx, step_key, 2)
    if tier is None:
        _budget_skip(ctx, 6, "PRF")
        return
    prf_config = frozen.apply_delta({"prf.enabled": True})
    try:
        base_outcome = _tier_eval(ctx, step_key, tier, frozen, items=hard_subset)
        prf_outcome = _tier_eval(ctx, step_key, tier, prf_config, items=hard_subset)
    except BudgetExceededError:
        _budget_skip(ctx, 6, "PRF")
        return
    decision = decide_step6(prf_outcome.report.macro_f1, base_outcome.report.macro_f1,
                            None, component="prf")
    decision = replace(decision, scores={**decision.scores,
                                         "hard_subset_size": len(hard_subset)})
    ctx.record(decision, tier=tier, varied="PRF",
               gold=prf_outcome.report if tier == "gold" else None)


def _run_step7(ctx: _RunContext) -> None:
    step_key = "7"
    taus = ctx.plan.tau_sweep_values()
    varied = f"tau in [{ctx.plan.tau_sweep_lo:.2f}, {ctx.plan.tau_sweep_hi:.2f}]"
    frozen = ctx.frozen_config()
    tier = _choose_tier(ctx, step_key, len(taus))
    if tier is None:
        _budget_skip(ctx, 7, varied)
        return
    sweep: dict[float, EvalReport] = {}
    try:
        for tau in taus:
            candidate = frozen.apply_delta({"selection.tau": tau})
            sweep[tau] = _tier_eval(ctx, step_key, tier, candidate).report
    except BudgetExceededError:
        _budget_skip(ctx, 7, varied)
        return
    baseline_rep = _tier_baseline(ctx, tier)
    if baseline_rep is None:
        baseline_rep = sweep.get(frozen.selection.tau) or next(iter(sweep.values()))
    decision = decide_step7(sweep, baseline_rep, current_tau=frozen.selection.tau,
                            eps=ctx.plan.eps)
    bump = None
    if decision.verdict is Verdict.ADOPT_FREEZE and tier == "gold":
        best_tau = float(decision.delta["selection.tau"])
        bump = _bump_baseline(ctx, sweep[best_tau])
    ctx.record(decision, tier=tier, varied=varied, baseline_after=bump)


def _run_step8(ctx: _RunContext) -> None:
    step_key = "8"
    grid = ctx.plan.decoding_grid()
    varied = (f"temp in {list(ctx.plan.decoding_temps)}; "
              f"top_p in {list(ctx.plan.decoding_top_ps)}; n in {list(ctx.plan.decoding_ns)}")
    frozen = ctx.frozen_config()
    tier = _choose_tier(ctx, step_key, len(grid))
    if tier is None:
        _budget_skip(ctx, 8, varied)
        return
    reports: dict[DecodingParams, EvalReport] = {}
    try:
        for params in grid:
            candidate = frozen.apply_delta({
                "decoding.temperature": params.temperature,
                "decoding.top_p": params.top_p,
                "decoding.n_samples": params.n_samples,
            })
            reports[params] = _tier_eval(ctx, step_key, tier, candidate).report
    except BudgetExceededError:
        _budget_skip(ctx, 8, varied)
        return
    baseline_rep = _tier_baseline(ctx, tier)
    if baseline_rep is None:
        baseline_rep = next(iter(reports.values()))
    decision = decide_step8(reports, baseline_rep, current=frozen.decoding)
    bump = None
    if decision.verdict is Verdict.ADOPT_FREEZE and tier == "gold":
        best = max(reports.values(), key=lambda r: r.macro_f1)
        bump = _bump_baseline(ctx, best)
    ctx.record(decision, tier=tier, varied=varied, baseline_after=bump)


def guard_regression(ledger: LockLedger, step: int, report: EvalReport, *,
                     eps: float = 0.0, timestamp: str = "") -> bool:
    """Step-0 guard: roll a step's adoption back when a later evaluation of
    the frozen configuration regresses below the pre-adoption baseline."""
    adoption_indices = [
        i for i, d in enumerate(ledger.entries)
        if d.step == step and d.verdict is Verdict.ADOPT_FREEZE and d.delta
    ]
    if not adoption_indices:
        raise ValidationError(f"step {step} has no adoption to guard")
    pre = ledger.baseline(upto=adoption_indices[-1])
    if pre is None:
        return False
    check = compare(report, pre, eps)
    if not check.regressed:
        return False
    rollback(ledger, step,
             reason=f"regression vs pre-adoption baseline ({check.note}); rollback",
             timestamp=timestamp)
    return True


def _validate_corpus_for_run(corpus: Corpus) -> None:
    for split in (Split.TRAIN, Split.VAL):
        if not corpus.split_items(split):
            raise ValidationError(f"{split.value} split must be non-empty before a run")


def run(
    plan: RunPlan,
    corpus: Corpus,
    backends: Backends,
    budget: Budget,
    *,
    base_config: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
    clock=None,
    template: str | None = None,
    resume: bool = False,
    stop_after_step: int | None = None,
    max_workers: int = 1,
) -> RunResult:
    """Execute the plan's steps in order and return the frozen configuration.

    The ledger is persisted incrementally (one JSONL line per decision), so an
    interrupted run resumes from it without repeating completed steps.
    ``stop_after_step`` simulates an interruption for kill-and-resume tests:
    the run stops once every plan step up to that index is decided and final
    artifacts are withheld.
    """
    clock = clock or SystemClock()
    template = template if template is not None else default_template()
    _validate_corpus_for_run(corpus)

    out = Path(out_dir) if out_dir is not None else None
    ledger_path = out / "ledger.jsonl" if out is not None else None
    cache_dir = out / "cache" if out is not None else None
    if resume:
        if ledger_path is None or not ledger_path.exists():
            raise ValidationError("resume requested but no ledger was found")
        ledger = LockLedger.load(ledger_path)
    else:
        if ledger_path is not None and ledger_path.exists():
            raise ValidationError(
                f"ledger already exists at {ledger_path}; pass resume to continue it"
            )
        ledger = LockLedger(path=ledger_path)

    cfg = base_config or PipelineConfig()
    if cfg.embedder_id != backends.embedder.embedder_id:
        cfg = cfg.apply_delta({"embedder_id": backends.embedder.embedder_id})

    budget_ledger = BudgetLedger(budget)
    if resume:
        budget_ledger.restore(ledger.entries)

    ctx = _RunContext(plan, corpus, backends, budget_ledger, ledger, cfg, template,
                      clock, cache_dir, max_workers)
    if resume:
        ctx.restore_proxy_baseline()

    hooked = []
    for backend, charge in ((backends.judge, budget_ledger.charge_judge),
                            (backends.mini_judge, budget_ledger.charge_mini_judge)):
        if backend is not None and hasattr(backend, "on_attempt"):
            backend.on_attempt = charge
            hooked.append(backend)
    try:
        if 0 not in ledger.decided_steps():
            _establish_baseline(ctx)
        handlers = {5: _run_step5, 6: _run_step6, 7: _run_step7, 8: _run_step8}
        for step in plan.steps:
            if step not in ledger.decided_steps():
                if step <= 4:
                    _run_block(ctx)
                else:
                    handlers[step](ctx)
            if stop_after_step is not None and all(
                s in ledger.decided_steps() for s in plan.steps if s <= stop_after_step
            ):
                break
    finally:
        for backend in hooked:
            backend.on_attempt = None

    frozen = ledger.frozen_config(cfg)
    completed = all(s in ledger.decided_steps() for s in plan.steps)
    result = RunResult(
        frozen=frozen,
        frozen_hash=frozen.content_hash(),
        ledger=ledger,
        budget_spent=budget_ledger.spent(),
        completed=completed,
    )
    if out is not None and completed:
        out.mkdir(parents=True, exist_ok=True)
        persist_frozen_config(frozen, out / "frozen_config.json")
        (out / "report.json").write_text(report(result, "json") + "\n", encoding="utf-8")
        (out / "report.txt").write_text(report(result, "text") + "\n", encoding="utf-8")
    return result


def evaluate_gold(
    config: PipelineConfig,
    corpus: Corpus,
    backends: Backends,
    *,
    pool: tuple[Split, ...] = (Split.TRAIN,),
    template: str | None = None,
    cache_dir: str | Path | None = None,
    max_workers: int = 1,
) -> EvalReport:
    """Full judge-based classification of the VAL split against gold labels."""
    val_items = corpus.split_items(Split.VAL)
    if not val_items:
        raise ValidationError("VAL split is empty; nothing to evaluate")
    if template is None:
        template = default_template()
    base = build_case_base(corpus, pool, config.truncation, backends.embedder, cache_dir)
    outcome = evaluate_config(config, val_items, base, backends.embedder,
                              backends.judge, template, max_workers=max_workers)
    return outcome.report


def classify(
    text: str,
    frozen: PipelineConfig,
    backends: Backends,
    base: CaseBase,
    template: str | None = None,
) -> ItemOutcome:
    """Single-item online path; returns the verdict plus neighbor evidence."""
    if template is None:
        template = default_template()
    return run_item(text, frozen, base, backends.embedder, backends.judge, template)


def _step_rows(ledger: LockLedger) -> list[dict]:
    steps: list[int] = []
    for d in ledger.entries:
        if d.step >= 1 and d.step not in steps:
            steps.append(d.step)
    rows = []
    for step in steps:
        decisions = [d for d in ledger.entries if d.step == step]
        varied = "; ".join(dict.fromkeys(d.varied for d in decisions if d.varied))
        score_bits = []
        for d in decisions:
            if d.gold is not None:
                score_bits.append(f"macroF1={d.gold.macro_f1:.3f}")
            elif "best_gain" in d.scores:
                score_bits.append(f"best_gain={d.scores['best_gain']:+.4f}")
            elif "gain" in d.scores:
                score_bits.append(f"gain={d.scores['gain']:+.4f}")
        baselines = [d.baseline_after for d in decisions if d.baseline_after is not None]
        if baselines:
            score_bits.append(f"baseline={baselines[-1].macro_f1:.3f}")
        rows.append({
            "step": step,
            "varied": varied,
            "key_scores": "; ".join(score_bits),
            "decision": " | ".join(f"{d.verdict.value}: {d.reason}" for d in decisions),
        })
    return rows


def report(result: RunResult, fmt: str = "text") -> str:
    """Step-by-step decision table, plain text or JSON."""
    if fmt == "json":
        return json.dumps(result.summary(), indent=2, sort_keys=True)
    if fmt != "text":
        raise ValidationError(f"unknown report format {fmt!r}")
    rows = _step_rows(result.ledger)
    lines = ["step | varied | key scores | decision", "-" * 72]
    for row in rows:
        lines.append(
            f"{row['step']:>4} | {row['varied']} | {row['key_scores']} | {row['decision']}"
        )
    lines.append("-" * 72)
    lines.append(f"frozen config hash: {result.frozen_hash}")
    spent = result.budget_spent
    lines.append(
        "budget: gold="
        + json.dumps(spent.get("gold_evals", {}), sort_keys=True)
        + " proxy="
        + json.dumps(spent.get("proxy_evals", {}), sort_keys=True)
        + f" judge_calls={spent.get('judge_calls_total', 0)}"
        + f" mini_judge_calls={spent.get('mini_judge_calls', 0)}"
    )
    return "\n".join(lines)


def persist_frozen_config(config: PipelineConfig, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config": config.to_dict(), "hash": config.content_hash()}
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(p)
    return p


def load_frozen_config(path: str | Path) -> tuple[PipelineConfig, str]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"frozen config not found: {p}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    config = PipelineConfig.from_dict(doc["config"])
    if config.content_hash() != doc.get("hash"):
        raise ValidationError(f"frozen config hash mismatch in {p}")
    return config, doc["hash"]
