"""Cheap screening metrics: the five proxy families evaluated before any
expensive gold validation, plus the per-step helpers built on them."""

from __future__ import annotations

import importlib.resources
import math
import time
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Transcript
from .embedding import CaseBase, EmbedderBackend, TruncationSpec, tokenize, truncate
from .errors import ValidationError
from .retrieval import (
    RetrievalResult,
    SelectionConfig,
    SelectionMode,
    SimilarityMetric,
    overlap_rate,
    select,
    select_pool,
)

NEAR_DUP_COSINE = 0.95


class ProxyFamily(str, Enum):
    SEMANTIC_RETRIEVAL = "SEMANTIC_RETRIEVAL"
    STATISTICAL_TEXT = "STATISTICAL_TEXT"
    RANKING_STABILITY = "RANKING_STABILITY"
    CONFIDENCE = "CONFIDENCE"
    CHEAP_JUDGE = "CHEAP_JUDGE"


# Fixed metric-name registry; prefixed names cover per-k variants.
PROXY_REGISTRY: dict[ProxyFamily, tuple[str, ...]] = {
    ProxyFamily.SEMANTIC_RETRIEVAL: (
        "mean_sim", "max_sim", "hit_at_k", "minority_coverage", "overlap_rate",
    ),
    ProxyFamily.STATISTICAL_TEXT: (
        "mean_tokens", "type_token_ratio", "stopword_ratio", "length_balance",
        "salient_term_hit_rate", "context_tokens",
    ),
    ProxyFamily.RANKING_STABILITY: (
        "kendall_tau", "dynamic_replacement_fraction", "mean_pairwise_cosine",
        "near_dup_fraction", "novelty_ratio", "retrieval_seconds",
    ),
    ProxyFamily.CONFIDENCE: ("margin", "label_entropy", "vote_agreement"),
    ProxyFamily.CHEAP_JUDGE: (
        "mini_judge_agreement", "macro_f1_proxy", "recall_1_proxy",
        "iqr_macro_f1", "max_dev",
    ),
}
_REGISTRY_PREFIXES = ("recall_at_", "ndcg_at_")


@dataclass(frozen=True)
class ProxyReport:
    family: ProxyFamily
    values: dict[str, float]
    subset_size: int
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        allowed = PROXY_REGISTRY[self.family]
        for name, value in self.values.items():
            if name not in allowed and not name.startswith(_REGISTRY_PREFIXES):
                raise ValidationError(f"metric {name!r} is not in the {self.family.value} registry")
            if not math.isfinite(value):
                raise ValidationError(f"proxy metric {name!r} is not finite")

    def to_dict(self) -> dict:
        return {"family": self.family.value, "values": dict(self.values),
                "subset_size": self.subset_size, "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, data: dict) -> "ProxyReport":
        return cls(family=ProxyFamily(data["family"]),
                   values={k: float(v) for k, v in data["values"].items()},
                   subset_size=int(data["subset_size"]),
                   flags=tuple(data.get("flags", ())))


_STOPWORDS: frozenset[str] | None = None


def builtin_stopwords() -> frozenset[str]:
    global _STOPWORDS
    if _STOPWORDS is None:
        raw = (
            importlib.resources.files("raglock.data")
            .joinpath("stopwords.txt")
            .read_text(encoding="utf-8")
        )
        _STOPWORDS = frozenset(w.strip() for w in raw.splitlines() if w.strip())
    return _STOPWORDS


def semantic_retrieval_proxies(
    results: Sequence[RetrievalResult],
    golds: Sequence[int] | None = None,
) -> ProxyReport:
    """Mean/max similarity, hit@k, minority coverage, and overlap rate.

    Gold-dependent metrics are omitted and flagged when golds are missing.
    """
    if not results:
        raise ValidationError("semantic proxies need at least one retrieval result")
    sims = [n.similarity for r in results for n in r.neighbors]
    values: dict[str, float] = {
        "mean_sim": float(np.mean(sims)),
        "max_sim": float(max(sims)),
    }
    flags: list[str] = []
    if golds is None:
        flags.append("hit_at_k:no_golds")
        flags.append("minority_coverage:no_golds")
    else:
        if len(golds) != len(results):
            raise ValidationError("golds must align one-to-one with results")
        hits = sum(
            1 for r, g in zip(results, golds) if any(n.label == g for n in r.neighbors)
        )
        values["hit_at_k"] = hits / len(results)
        zeros = sum(1 for g in golds if g == 0)
        minority = 1 if len(golds) - zeros <= zeros else 0
        minority_queries = [
            r for r, g in zip(results, golds) if g == minority
        ]
        if not minority_queries:
            flags.append("minority_coverage:undefined")
        else:
            covered = sum(
                1 for r in minority_queries if any(n.label == minority for n in r.neighbors)
            )
            values["minority_coverage"] = covered / len(minority_queries)
    if len(results) >= 2:
        values["overlap_rate"] = overlap_rate(results)
    else:
        flags.append("overlap_rate:single_query")
    return ProxyReport(ProxyFamily.SEMANTIC_RETRIEVAL, values, len(results), tuple(flags))


def statistical_text_proxies(
    items: Sequence[Transcript],
    stopwords: frozenset[str] | None = None,
) -> ProxyReport:
    """Token count, type-token ratio, stopword ratio, per-class length balance."""
    if not items:
        raise ValidationError("statistical proxies need a non-empty corpus slice")
    stop = stopwords if stopwords is not None else builtin_stopwords()
    all_tokens: list[str] = []
    lengths: dict[int, list[int]] = {0: [], 1: []}
    for item in items:
        tokens = tokenize(item.text)
        all_tokens.extend(tokens)
        if item.label is not None:
            lengths[item.label].append(len(tokens))
    values = {
        "mean_tokens": float(np.mean([len(tokenize(i.text)) for i in items])),
        "type_token_ratio": len(set(all_tokens)) / len(all_tokens) if all_tokens else 0.0,
        "stopword_ratio": (
            sum(1 for t in all_tokens if t in stop) / len(all_tokens) if all_tokens else 0.0
        ),
    }
    flags: list[str] = []
    if lengths[0] and lengths[1]:
        values["length_balance"] = float(np.mean(lengths[1]) / np.mean(lengths[0]))
    else:
        flags.append("length_balance:one_class_absent")
    return ProxyReport(ProxyFamily.STATISTICAL_TEXT, values, len(items), tuple(flags))


def salient_term_hit_rate(
    items: Sequence[Transcript],
    spec: TruncationSpec,
    *,
    top_terms: int = 10,
    stopwords: frozenset[str] | None = None,
) -> float:
    """Mean fraction of each text's most frequent content terms that survive
    truncation; measures how much signal a truncation mode keeps."""
    if not items:
        raise ValidationError("salient_term_hit_rate needs a non-empty slice")
    stop = stopwords if stopwords is not None else builtin_stopwords()
    rates = []
    for item in items:
        counts: dict[str, int] = {}
        for token in tokenize(item.text):
            if token not in stop:
                counts[token] = counts.get(token, 0) + 1
        if not counts:
            continue
        salient = [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:top_terms]
        kept = set(tokenize(truncate(item.text, spec)))
        rates.append(sum(1 for t in salient if t in kept) / len(salient))
    return float(np.mean(rates)) if rates else 0.0


def recall_at_k_curve(
    base: CaseBase,
    queries: Sequence[np.ndarray],
    golds: Sequence[int],
    ks: Sequence[int],
    metric: SimilarityMetric = SimilarityMetric.COSINE,
    only_label: int | None = None,
) -> dict[int, float]:
    """recall@k = fraction of queries whose top-k holds a correct-label
    neighbor; monotone non-decreasing in k. Requested k beyond |base| is
    computed at |base| (callers know the pool size). ``only_label`` restricts
    the curve to queries of one class (the minority-recall proxy)."""
    if list(ks) != sorted(ks):
        raise ValidationError("ks must be sorted ascending")
    if len(queries) != len(golds):
        raise ValidationError("queries and golds must align")
    pairs = [
        (q, g) for q, g in zip(queries, golds) if only_label is None or g == only_label
    ]
    if not pairs:
        raise ValidationError("no queries left after label filtering")
    static = SelectionConfig(k=1, tau=0.0, mode=SelectionMode.STATIC)
    curve: dict[int, float] = {}
    for k in ks:
        eff_k = min(k, len(base))
        hits = 0
        for q, g in pairs:
            result = select_pool(q, base, static, metric, size=eff_k)
            if any(n.label == g for n in result.neighbors):
                hits += 1
        curve[k] = hits / len(pairs)
    return curve


def precision_at_k(
    base: CaseBase,
    queries: Sequence[np.ndarray],
    golds: Sequence[int],
    ks: Sequence[int],
    metric: SimilarityMetric = SimilarityMetric.COSINE,
) -> dict[int, float]:
    """Mean fraction of top-k neighbors sharing the query's gold label."""
    if len(queries) != len(golds):
        raise ValidationError("queries and golds must align")
    static = SelectionConfig(k=1, tau=0.0, mode=SelectionMode.STATIC)
    out: dict[int, float] = {}
    for k in ks:
        eff_k = min(k, len(base))
        per_query = []
        for q, g in zip(queries, golds):
            result = select_pool(q, base, static, metric, size=eff_k)
            per_query.append(
                sum(1 for n in result.neighbors if n.label == g) / len(result.neighbors)
            )
        out[k] = float(np.mean(per_query))
    return out


def kendall_tau(rank_a: Sequence[str], rank_b: Sequence[str]) -> float:
    """Kendall tau-a over two strict rankings of the same id set."""
    if set(rank_a) != set(rank_b) or len(rank_a) != len(set(rank_a)):
        raise ValidationError("rankings must be permutations of the same id set")
    n = len(rank_a)
    if n < 2:
        raise ValidationError("kendall_tau needs at least two items")
    pos_b = {item: i for i, item in enumerate(rank_b)}
    concordant = discordant = 0
    for (i, x), (j, y) in combinations(enumerate(rank_a), 2):
        if (pos_b[x] < pos_b[y]) == (i < j):
            concordant += 1
        else:
            discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


def ndcg_at_k(result: RetrievalResult, gold_label: int, k: int) -> float:
    """Binary-relevance nDCG over the similarity order, log2 discounts."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    relevance = [1.0 if n.label == gold_label else 0.0 for n in result.neighbors[:k]]
    if not relevance:
        return 0.0
    discounts = np.log2(np.arange(2, len(relevance) + 2))
    dcg = float(np.sum(np.asarray(relevance) / discounts))
    ideal = sorted(relevance, reverse=True)
    idcg = float(np.sum(np.asarray(ideal) / discounts))
    return dcg / idcg if idcg > 0 else 0.0


def label_entropy(labels: Sequence[int]) -> float:
    """Shannon entropy (bits) of the empirical binary label distribution."""
    if not labels:
        raise ValidationError("label_entropy needs at least one label")
    p1 = sum(labels) / len(labels)
    entropy = 0.0
    for p in (p1, 1.0 - p1):
        if p > 0:
            entropy -= p * math.log2(p)
    return entropy


def diversity_proxies(result: RetrievalResult, base: CaseBase) -> ProxyReport:
    """Pairwise cosine among selected neighbors, near-duplicate fraction, novelty."""
    if len(result.neighbors) < 2:
        return ProxyReport(ProxyFamily.RANKING_STABILITY, {}, len(result.neighbors),
                           ("single_neighbor",))
    vectors = np.stack([base.vector_of(n.id) for n in result.neighbors])
    unit = vectors / np.linalg.norm(vectors, axis=1)[:, None]
    cosines = [
        float(unit[i] @ unit[j])
        for i, j in combinations(range(len(result.neighbors)), 2)
    ]
    near_dup = sum(1 for c in cosines if c >= NEAR_DUP_COSINE) / len(cosines)
    return ProxyReport(
        ProxyFamily.RANKING_STABILITY,
        {
            "mean_pairwise_cosine": float(np.mean(cosines)),
            "near_dup_fraction": near_dup,
            "novelty_ratio": 1.0 - near_dup,
        },
        len(result.neighbors),
    )


def retrieval_latency(
    base: CaseBase,
    queries: Sequence[np.ndarray],
    cfg: SelectionConfig,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
) -> float:
    """Wall-clock seconds for one retrieval pass; confirms the index-free
    path stays cheap. Never persisted into ledgers (non-deterministic)."""
    start = time.perf_counter()
    for q in queries:
        select(q, base, cfg, metric)
    return time.perf_counter() - start


def mini_judge_agreement(
    backend,
    subset: Sequence[Transcript],
    config,
    base: CaseBase,
    embed_backend: EmbedderBackend,
    template: str | None = None,
) -> float:
    """Accuracy of a cheap judge on a small labeled subset under the candidate
    configuration's retrieval."""
    from .pipeline import evaluate_config

    if not subset:
        raise ValidationError("mini-judge subset must be non-empty")
    outcome = evaluate_config(config, subset, base, embed_backend, backend, template)
    return outcome.report.accuracy


def stability_check(
    config,
    seeds: Sequence[int],
    runner: Callable[[object, int], float],
) -> dict[str, float]:
    """Spread of the macro-F1 proxy across seeded re-runs (shuffled example
    order): inter-quartile range plus max deviation from the median."""
    if len(seeds) < 2:
        raise ValidationError("stability_check needs at least two seeds")
    values = np.array([runner(config, seed) for seed in seeds], dtype=np.float64)
    q1, q3 = np.percentile(values, [25, 75])
    median = float(np.median(values))
    return {
        "iqr_macro_f1": float(q3 - q1),
        "max_dev": float(np.max(np.abs(values - median))),
    }


def context_cost(results: Sequence[RetrievalResult], texts: Mapping[str, str]) -> float:
    """Average prompt-example tokens per query under a neighbor set."""
    if not results:
        raise ValidationError("context_cost needs at least one result")
    per_query = [
        sum(len(tokenize(texts.get(n.id, ""))) for n in r.neighbors) for r in results
    ]
    return float(np.mean(per_query))


def neighbor_vote_agreement(result: RetrievalResult) -> float:
    """Fraction of neighbors agreeing with the neighbor-majority label; the
    decision-certainty heuristic gating the post-filters."""
    labels = result.labels
    if not labels:
        raise ValidationError("no neighbors to vote")
    ones = sum(labels)
    return max(ones, len(labels) - ones) / len(labels)
