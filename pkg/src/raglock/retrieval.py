"""Online neighbor selection: similarity scoring, threshold/fallback modes,
MMR diversification, post-filters, pool expansion with leakage guards, PRF.

Tie-breaking is always descending similarity then ascending id, so every
operation here is deterministic given an immutable case base.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from itertools import combinations
from typing import Sequence

import numpy as np

from .corpus import Transcript
from .embedding import CaseBase, EmbedderBackend, EmbeddingRecord, embed, l2_normalize, tokenize
from .errors import ExpansionRejectedError, ValidationError

NEAR_DUP_COSINE = 0.95
LOW_CONF_TAU_SLACK = 0.05
K_CAP = 5


class SimilarityMetric(str, Enum):
    COSINE = "COSINE"
    DOT = "DOT"
    L2_NORM_COSINE = "L2_NORM_COSINE"


class SelectionMode(str, Enum):
    STATIC = "STATIC"
    DYNAMIC = "DYNAMIC"
    HYBRID = "HYBRID"


class SelectionEvent(str, Enum):
    THRESHOLD = "THRESHOLD"
    FALLBACK_TOPK = "FALLBACK_TOPK"


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 5
    tau: float = 0.75
    mode: SelectionMode = SelectionMode.DYNAMIC

    def __post_init__(self) -> None:
        if not 1 <= self.k <= K_CAP:
            raise ValidationError(f"k must be in 1..{K_CAP}, got {self.k}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [0, 1], got {self.tau}")

    def to_dict(self) -> dict:
        return {"k": self.k, "tau": self.tau, "mode": self.mode.value}

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionConfig":
        unknown = set(data) - {"k", "tau", "mode"}
        if unknown:
            raise ValidationError(f"unknown selection keys: {sorted(unknown)}")
        return cls(k=int(data.get("k", 5)), tau=float(data.get("tau", 0.75)),
                   mode=SelectionMode(data.get("mode", "DYNAMIC")))


@dataclass(frozen=True)
class MmrConfig:
    enabled: bool = False
    lam: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"MMR lambda must lie in [0, 1], got {self.lam}")

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "lam": self.lam}

    @classmethod
    def from_dict(cls, data: dict) -> "MmrConfig":
        unknown = set(data) - {"enabled", "lam"}
        if unknown:
            raise ValidationError(f"unknown mmr keys: {sorted(unknown)}")
        return cls(enabled=bool(data.get("enabled", False)), lam=float(data.get("lam", 0.5)))


@dataclass(frozen=True)
class PostFilterConfig:
    dedup: bool = False
    metadata: bool = False
    low_conf: bool = False
    confidence_gate: float = 0.65

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_gate <= 1.0:
            raise ValidationError("confidence gate must lie in [0, 1]")

    @property
    def any_enabled(self) -> bool:
        return self.dedup or self.metadata or self.low_conf

    def to_dict(self) -> dict:
        return {"dedup": self.dedup, "metadata": self.metadata,
                "low_conf": self.low_conf, "confidence_gate": self.confidence_gate}

    @classmethod
    def from_dict(cls, data: dict) -> "PostFilterConfig":
        unknown = set(data) - {"dedup", "metadata", "low_conf", "confidence_gate"}
        if unknown:
            raise ValidationError(f"unknown filter keys: {sorted(unknown)}")
        return cls(dedup=bool(data.get("dedup", False)),
                   metadata=bool(data.get("metadata", False)),
                   low_conf=bool(data.get("low_conf", False)),
                   confidence_gate=float(data.get("confidence_gate", 0.65)))


@dataclass(frozen=True)
class Neighbor:
    id: str
    similarity: float
    label: int


@dataclass(frozen=True)
class RetrievalStats:
    mean_sim: float
    max_sim: float
    margin: float | None

    def to_dict(self) -> dict:
        return {"mean_sim": self.mean_sim, "max_sim": self.max_sim, "margin": self.margin}


@dataclass(frozen=True)
class RetrievalResult:
    neighbors: tuple[Neighbor, ...]
    mode_used: SelectionEvent
    stats: RetrievalStats

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.neighbors)

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(n.label for n in self.neighbors)

    def to_dict(self) -> dict:
        return {
            "neighbors": [[n.id, n.similarity, n.label] for n in self.neighbors],
            "mode_used": self.mode_used.value,
            "stats": self.stats.to_dict(),
        }


def _stats(neighbors: Sequence[Neighbor]) -> RetrievalStats:
    sims = [n.similarity for n in neighbors]
    margin = sims[0] - sims[1] if len(sims) >= 2 else None
    return RetrievalStats(
        mean_sim=float(np.mean(sims)), max_sim=float(max(sims)), margin=margin
    )


def similarity(q: np.ndarray, d: np.ndarray, metric: SimilarityMetric) -> float:
    """Pairwise score: COSINE, raw DOT, or cosine after re-normalizing both."""
    qv = np.asarray(q, dtype=np.float64)
    dv = np.asarray(d, dtype=np.float64)
    if qv.shape != dv.shape:
        raise ValidationError(f"dimension mismatch: {qv.shape} vs {dv.shape}")
    if metric is SimilarityMetric.DOT:
        return float(qv @ dv)
    qn = float(np.linalg.norm(qv))
    dn = float(np.linalg.norm(dv))
    if qn == 0.0 or dn == 0.0:
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return float(qv @ dv) / (qn * dn)


def _all_similarities(query: np.ndarray, base: CaseBase, metric: SimilarityMetric) -> np.ndarray:
    qv = np.asarray(query, dtype=np.float64)
    if qv.shape != (base.dim,):
        raise ValidationError(f"query dim {qv.shape} does not match case base dim {base.dim}")
    if metric is SimilarityMetric.DOT:
        return base.matrix @ qv
    qn = float(np.linalg.norm(qv))
    if qn == 0.0:
        raise ValidationError("cosine similarity is undefined for a zero query")
    return (base.matrix @ qv) / (base.row_norms * qn)


def _ranked_indices(sims: np.ndarray, base: CaseBase) -> list[int]:
    return sorted(range(len(base)), key=lambda i: (-sims[i], base.ids[i]))


def _pick(query: np.ndarray, base: CaseBase, cfg: SelectionConfig,
          metric: SimilarityMetric, size: int) -> tuple[list[int], SelectionEvent, np.ndarray]:
    if len(base) == 0:
        raise ValidationError("case base is empty")
    sims = _all_similarities(query, base, metric)
    order = _ranked_indices(sims, base)
    if cfg.mode is SelectionMode.STATIC:
        return order[:size], SelectionEvent.FALLBACK_TOPK, sims
    passing = [i for i in order if sims[i] >= cfg.tau]
    if cfg.mode is SelectionMode.DYNAMIC:
        if passing:
            return passing[:size], SelectionEvent.THRESHOLD, sims
        return order[:size], SelectionEvent.FALLBACK_TOPK, sims
    # HYBRID: threshold items first, padded with next-best below tau to exactly `size`
    if passing:
        below = [i for i in order if sims[i] < cfg.tau]
        return (passing + below)[:size], SelectionEvent.THRESHOLD, sims
    return order[:size], SelectionEvent.FALLBACK_TOPK, sims


def select(
    query: np.ndarray,
    base: CaseBase,
    cfg: SelectionConfig,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
) -> RetrievalResult:
    """Threshold-gated neighbor selection with Top-k fallback.

    DYNAMIC keeps items with sim >= tau (up to the k highest) and falls back
    to plain top-k when nothing passes; STATIC ignores tau; HYBRID pads the
    threshold survivors with next-best items up to exactly k.
    """
    chosen, event, sims = _pick(query, base, cfg, metric, cfg.k)
    neighbors = tuple(
        Neighbor(base.ids[i], float(sims[i]), base.labels[base.ids[i]]) for i in chosen
    )
    return RetrievalResult(neighbors, event, _stats(neighbors))


def select_pool(
    query: np.ndarray,
    base: CaseBase,
    cfg: SelectionConfig,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
    size: int | None = None,
) -> RetrievalResult:
    """Same gating as select() but with an arbitrary pool size (MMR uses 2k)."""
    pool_size = size if size is not None else 2 * cfg.k
    chosen, event, sims = _pick(query, base, cfg, metric, pool_size)
    neighbors = tuple(
        Neighbor(base.ids[i], float(sims[i]), base.labels[base.ids[i]]) for i in chosen
    )
    return RetrievalResult(neighbors, event, _stats(neighbors))


def mmr_rerank(
    query: np.ndarray,
    pool: RetrievalResult,
    base: CaseBase,
    cfg: MmrConfig,
    k: int,
) -> RetrievalResult:
    """Greedy maximal-marginal-relevance pick of k neighbors from a pool.

    Score is lam * sim(q, d) - (1 - lam) * max cosine to the already-selected
    set; the first pick is the highest query similarity. Output order is pick
    order, so similarities are not necessarily non-increasing.
    """
    if not cfg.enabled:
        raise ValidationError("mmr_rerank called with MMR disabled")
    if not pool.neighbors:
        raise ValidationError("MMR pool is empty")
    ids = [n.id for n in pool.neighbors]
    vectors = np.stack([base.vector_of(i) for i in ids])
    norms = np.linalg.norm(vectors, axis=1)
    unit = vectors / norms[:, None]
    pairwise = unit @ unit.T
    relevance = np.array([n.similarity for n in pool.neighbors])

    selected: list[int] = []
    remaining = list(range(len(ids)))
    while remaining and len(selected) < k:
        if not selected:
            best = remaining[0]  # pool is already similarity-ordered
        else:
            def mmr_score(i: int) -> float:
                redundancy = max(pairwise[i][j] for j in selected)
                return cfg.lam * relevance[i] - (1.0 - cfg.lam) * redundancy

            best = min(remaining, key=lambda i: (-mmr_score(i), ids[i]))
        selected.append(best)
        remaining.remove(best)
    neighbors = tuple(pool.neighbors[i] for i in selected)
    return RetrievalResult(neighbors, pool.mode_used, _stats(neighbors))


def overlap_rate(results: Sequence[RetrievalResult]) -> float:
    """Mean pairwise Jaccard overlap of neighbor id-sets across queries."""
    if len(results) < 2:
        raise ValidationError("overlap_rate needs at least two retrieval results")
    id_sets = [set(r.ids) for r in results]
    values = []
    for a, b in combinations(id_sets, 2):
        union = a | b
        values.append(len(a & b) / len(union) if union else 0.0)
    return float(np.mean(values))


def post_filter(
    result: RetrievalResult,
    cfg: PostFilterConfig,
    confidence: float,
    *,
    base: CaseBase | None = None,
    query_id: str | None = None,
    tau: float | None = None,
) -> RetrievalResult:
    """Apply dedup / metadata / low-confidence filters behind the confidence gate.

    Filters only run when confidence < cfg.confidence_gate. The result never
    comes back empty: if everything is filtered, the best neighbor is kept.
    """
    if not 0.0 <= confidence <= 1.0:
        raise ValidationError("confidence must lie in [0, 1]")
    if confidence >= cfg.confidence_gate or not cfg.any_enabled or not result.neighbors:
        return result
    kept = list(result.neighbors)
    if cfg.metadata and query_id is not None:
        kept = [n for n in kept if n.id != query_id]
    if cfg.low_conf and tau is not None:
        kept = [n for n in kept if n.similarity >= tau - LOW_CONF_TAU_SLACK]
    if cfg.dedup:
        if base is None:
            raise ValidationError("dedup filter needs the case base for pairwise cosines")
        accepted: list[Neighbor] = []
        for n in kept:
            vec = base.vector_of(n.id)
            dup = any(
                similarity(vec, base.vector_of(a.id), SimilarityMetric.COSINE) >= NEAR_DUP_COSINE
                for a in accepted
            )
            if not dup:
                accepted.append(n)
        kept = accepted
    if not kept:
        kept = [result.neighbors[0]]
    neighbors = tuple(kept)
    return replace(result, neighbors=neighbors, stats=_stats(neighbors))


@dataclass(frozen=True)
class GuardReport:
    """Leakage and distribution-shift evidence for a pool expansion."""

    exact_id_collisions: tuple[str, ...]
    near_dup_pairs: tuple[tuple[str, str, float], ...]
    vocab_size_before: int
    vocab_size_after: int
    mean_tokens_before: float
    mean_tokens_after: float
    centroid_shift: float

    @property
    def passed(self) -> bool:
        return not self.exact_id_collisions and not self.near_dup_pairs

    def to_dict(self) -> dict:
        return {
            "exact_id_collisions": list(self.exact_id_collisions),
            "near_dup_pairs": [list(p) for p in self.near_dup_pairs],
            "vocab_size_before": self.vocab_size_before,
            "vocab_size_after": self.vocab_size_after,
            "mean_tokens_before": self.mean_tokens_before,
            "mean_tokens_after": self.mean_tokens_after,
            "centroid_shift": self.centroid_shift,
            "passed": self.passed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GuardReport":
        return cls(
            exact_id_collisions=tuple(data["exact_id_collisions"]),
            near_dup_pairs=tuple((a, b, float(c)) for a, b, c in data["near_dup_pairs"]),
            vocab_size_before=int(data["vocab_size_before"]),
            vocab_size_after=int(data["vocab_size_after"]),
            mean_tokens_before=float(data["mean_tokens_before"]),
            mean_tokens_after=float(data["mean_tokens_after"]),
            centroid_shift=float(data["centroid_shift"]),
        )


def expand_pool(
    base: CaseBase,
    extra: Sequence[Transcript],
    backend: EmbedderBackend,
) -> tuple[CaseBase, GuardReport]:
    """Merge extra (labeled) items into the retrieval pool, guarded.

    The guard report flags exact-id collisions, cross-split near-duplicate
    pairs (cosine >= 0.95), vocabulary and mean-length shift, and the cosine
    distance between the old and merged pool centroids. Any exact-id collision
    rejects the expansion outright.
    """
    if not extra:
        raise ValidationError("expansion needs at least one extra item")
    unlabeled = [t.id for t in extra if t.label is None]
    if unlabeled:
        raise ValidationError(f"expansion items must be labeled; missing {unlabeled[:5]}")
    extra_sorted = sorted(extra, key=lambda t: t.id)
    collisions = tuple(t.id for t in extra_sorted if t.id in base.labels)

    new_records = []
    new_texts = {}
    for item in extra_sorted:
        if item.id in base.labels:
            continue
        vec = embed(item.text, base.truncation, backend, item_id=item.id)
        new_records.append(EmbeddingRecord.of(item.id, vec))
        from .embedding import truncate as _truncate

        new_texts[item.id] = _truncate(item.text, base.truncation)

    near_dups: list[tuple[str, str, float]] = []
    if new_records:
        new_matrix = np.stack([r.vector for r in new_records])
        cross = new_matrix @ base.matrix.T
        for i, rec in enumerate(new_records):
            for j in range(len(base)):
                cos = float(cross[i, j])
                if cos >= NEAR_DUP_COSINE:
                    near_dups.append((base.ids[j], rec.id, cos))
    near_dups.sort()

    old_texts = list(base.texts.values())
    merged_texts = old_texts + list(new_texts.values())
    vocab_before = len({tok for text in old_texts for tok in tokenize(text)})
    vocab_after = len({tok for text in merged_texts for tok in tokenize(text)})
    mean_before = float(np.mean([len(tokenize(t)) for t in old_texts])) if old_texts else 0.0
    mean_after = float(np.mean([len(tokenize(t)) for t in merged_texts])) if merged_texts else 0.0

    old_centroid = base.matrix.mean(axis=0)
    if new_records:
        merged_matrix = np.vstack([base.matrix, np.stack([r.vector for r in new_records])])
    else:
        merged_matrix = base.matrix
    merged_centroid = merged_matrix.mean(axis=0)
    denom = float(np.linalg.norm(old_centroid) * np.linalg.norm(merged_centroid))
    shift = 1.0 - float(old_centroid @ merged_centroid) / denom if denom > 0 else 0.0

    report = GuardReport(
        exact_id_collisions=collisions,
        near_dup_pairs=tuple(near_dups),
        vocab_size_before=vocab_before,
        vocab_size_after=vocab_after,
        mean_tokens_before=mean_before,
        mean_tokens_after=mean_after,
        centroid_shift=shift,
    )
    if collisions:
        raise ExpansionRejectedError(
            f"expansion rejected: exact-id collisions {list(collisions)[:5]}", report=report
        )
    labels = dict(base.labels)
    labels.update({t.id: int(t.label) for t in extra_sorted})  # type: ignore[arg-type]
    texts = dict(base.texts)
    texts.update(new_texts)
    merged = CaseBase(
        list(base.records) + new_records, labels, base.truncation, base.embedder_id, texts
    )
    return merged, report


def prf_expand(
    query: np.ndarray,
    base: CaseBase,
    cfg: SelectionConfig,
    alpha: float,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
) -> np.ndarray:
    """Blend the query with the centroid of its top-k neighbors, re-normalized."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("PRF alpha must lie in [0, 1]")
    result = select(query, base, cfg, metric)
    centroid = np.mean([base.vector_of(n.id) for n in result.neighbors], axis=0)
    blended = (1.0 - alpha) * l2_normalize(query) + alpha * centroid
    return l2_normalize(blended)


def dynamic_replacement_fraction(
    queries: Sequence[np.ndarray],
    base: CaseBase,
    cfg: SelectionConfig,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
) -> float:
    """Fraction of queries where DYNAMIC selects a different id-set than STATIC."""
    if not queries:
        raise ValidationError("dynamic_replacement_fraction needs at least one query")
    static_cfg = replace(cfg, mode=SelectionMode.STATIC)
    dynamic_cfg = replace(cfg, mode=SelectionMode.DYNAMIC)
    changed = 0
    for q in queries:
        if set(select(q, base, static_cfg, metric).ids) != set(
            select(q, base, dynamic_cfg, metric).ids
        ):
            changed += 1
    return changed / len(queries)
