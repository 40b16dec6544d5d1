"""Single-item online path and batch evaluation, shared by gold validation,
proxy screening (mini-judge), and deployment-style classification.

Per item: embed -> (PRF?) -> select -> (MMR?) -> (post-filters?) ->
build prompt -> judge -> parse. Batch results are merged in item-id order,
so bounded parallelism cannot change any output.
"""

from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .corpus import Transcript
from .embedding import CaseBase, EmbedderBackend, embed
from .errors import BackendError, BudgetExceededError, ValidationError
from .judge import DecodingParams, JudgeBackend, JudgeVerdict, build_prompt, judge
from .metrics import EvalReport, evaluate
from .policy import PipelineConfig
from .proxies import neighbor_vote_agreement
from .retrieval import RetrievalResult, mmr_rerank, post_filter, prf_expand, select, select_pool

FAILURE_LIMIT = 0.1


@dataclass(frozen=True)
class ItemOutcome:
    item_id: str
    verdict: JudgeVerdict
    result: RetrievalResult
    confidence: float


def retrieve_for_item(
    item: Transcript | str,
    config: PipelineConfig,
    base: CaseBase,
    embed_backend: EmbedderBackend,
) -> RetrievalResult:
    """Retrieval-only slice of the online path (no judge involved)."""
    text = item.text if isinstance(item, Transcript) else str(item)
    item_id = item.id if isinstance(item, Transcript) else None
    if not text.strip():
        raise ValidationError("empty transcript text")
    query = embed(text, config.truncation, embed_backend, item_id=item_id)
    if config.prf.enabled:
        query = prf_expand(query, base, config.selection, config.prf.alpha, config.metric)
    if config.mmr.enabled:
        pool = select_pool(query, base, config.selection, config.metric,
                           size=2 * config.selection.k)
        result = mmr_rerank(query, pool, base, config.mmr, config.selection.k)
    else:
        result = select(query, base, config.selection, config.metric)
    if config.filters.any_enabled:
        confidence = neighbor_vote_agreement(result)
        result = post_filter(
            result, config.filters, confidence,
            base=base, query_id=item_id, tau=config.selection.tau,
        )
    return result


def run_item(
    item: Transcript | str,
    config: PipelineConfig,
    base: CaseBase,
    embed_backend: EmbedderBackend,
    judge_backend: JudgeBackend,
    template: str,
    *,
    prompt_shuffle_seed: int | None = None,
) -> ItemOutcome:
    """Full online path for one transcript; returns the verdict with its
    neighbor evidence. ``prompt_shuffle_seed`` permutes prompt example order
    (stability spot-checks only)."""
    result = retrieve_for_item(item, config, base, embed_backend)
    item_id = item.id if isinstance(item, Transcript) else ""
    prompt = build_prompt(item, result, template, base.texts)
    if prompt_shuffle_seed is not None:
        rng = random.Random(f"{prompt_shuffle_seed}|{item_id}")
        examples = list(prompt.examples)
        rng.shuffle(examples)
        prompt = replace(prompt, examples=tuple(examples))
    verdict = judge(prompt, config.decoding, judge_backend)
    return ItemOutcome(
        item_id=item_id,
        verdict=verdict,
        result=result,
        confidence=neighbor_vote_agreement(result),
    )


@dataclass(frozen=True)
class EvalOutcome:
    """Batch evaluation of a configuration over labeled items."""

    report: EvalReport
    ids: tuple[str, ...]
    preds: tuple[int, ...]
    golds: tuple[int, ...]
    results: tuple[RetrievalResult, ...]
    confidences: tuple[float, ...]
    failures: tuple[tuple[str, str], ...]

    @property
    def mean_confidence(self) -> float:
        return float(np.mean(self.confidences)) if self.confidences else 0.0

    def margins(self) -> tuple[float, ...]:
        return tuple(
            r.stats.margin if r.stats.margin is not None else 0.0 for r in self.results
        )


def evaluate_config(
    config: PipelineConfig,
    items: Sequence[Transcript],
    base: CaseBase,
    embed_backend: EmbedderBackend,
    judge_backend: JudgeBackend,
    template: str | None = None,
    *,
    max_workers: int = 1,
    failure_limit: float = FAILURE_LIMIT,
    prompt_shuffle_seed: int | None = None,
) -> EvalOutcome:
    """Judge every labeled item under one configuration and score the verdicts.

    Backend errors mark single items failed; more than ``failure_limit`` of
    the batch failing aborts the evaluation. Budget exhaustion is never
    swallowed; it propagates so the step can conclude with a budget skip.
    """
    if not items:
        raise ValidationError("evaluation needs at least one item")
    unlabeled = [i.id for i in items if i.label is None]
    if unlabeled:
        raise ValidationError(f"evaluation items must be labeled; missing {unlabeled[:5]}")
    if template is None:
        from .judge import default_template

        template = default_template()
    ordered = sorted(items, key=lambda t: t.id)

    def one(item: Transcript) -> ItemOutcome:
        return run_item(
            item, config, base, embed_backend, judge_backend, template,
            prompt_shuffle_seed=prompt_shuffle_seed,
        )

    outcomes: dict[str, ItemOutcome] = {}
    failures: list[tuple[str, str]] = []
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {item.id: pool.submit(one, item) for item in ordered}
        for item in ordered:
            try:
                outcomes[item.id] = futures[item.id].result()
            except BudgetExceededError:
                raise
            except BackendError as exc:
                failures.append((item.id, str(exc)))
    else:
        for item in ordered:
            try:
                outcomes[item.id] = one(item)
            except BudgetExceededError:
                raise
            except BackendError as exc:
                failures.append((item.id, str(exc)))

    if len(failures) > failure_limit * len(ordered):
        raise BackendError(
            f"aborting evaluation: {len(failures)}/{len(ordered)} items failed "
            f"(limit {failure_limit:.0%}); first failure: {failures[0][1]}"
        )
    succeeded = [item for item in ordered if item.id in outcomes]
    if not succeeded:
        raise BackendError("aborting evaluation: no item succeeded")
    preds = tuple(outcomes[i.id].verdict.label for i in succeeded)
    golds = tuple(int(i.label) for i in succeeded)  # type: ignore[arg-type]
    report = evaluate(list(preds), list(golds))
    return EvalOutcome(
        report=report,
        ids=tuple(i.id for i in succeeded),
        preds=preds,
        golds=golds,
        results=tuple(outcomes[i.id].result for i in succeeded),
        confidences=tuple(outcomes[i.id].confidence for i in succeeded),
        failures=tuple(failures),
    )


def retrieval_pass(
    config: PipelineConfig,
    items: Sequence[Transcript],
    base: CaseBase,
    embed_backend: EmbedderBackend,
) -> list[RetrievalResult]:
    """Retrieval results for a batch, judge-free (cheap, deterministic)."""
    return [
        retrieve_for_item(item, config, base, embed_backend)
        for item in sorted(items, key=lambda t: t.id)
    ]
