"""Transcript corpora: ingestion, validation, labeling, splits, synthesis.

Labels are canonically 1 = depressed, 0 = not depressed. Whenever a severity
score is present the label is re-derived from it (score strictly greater than
10 is depressed), so input files carrying the opposite flag polarity cannot
poison a run; ``label_flip`` handles score-less corpora using the other
convention.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import CorpusParseError, ValidationError

PHQ8_CUTOFF = 10


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"

    @classmethod
    def parse(cls, raw: str) -> "Split":
        key = str(raw).strip().upper()
        if key in ("DEV", "DEVELOPMENT"):
            return cls.VAL
        try:
            return cls(key)
        except ValueError:
            raise ValidationError(f"unknown split {raw!r}") from None


def derive_label(phq8_score: int) -> int:
    """Binary label from a severity score: strictly greater than 10 is depressed."""
    return 1 if phq8_score > PHQ8_CUTOFF else 0


@dataclass(frozen=True)
class Transcript:
    """One interview text with id, split, and optional severity score / label."""

    id: str
    text: str
    split: Split
    phq8_score: int | None = None
    label: int | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("transcript id must be non-empty")
        if not self.text:
            raise ValidationError(f"transcript {self.id!r}: text must be non-empty")
        if self.phq8_score is not None and self.phq8_score < 0:
            raise ValidationError(f"transcript {self.id!r}: phq8_score must be >= 0")
        if self.label is not None and self.label not in (0, 1):
            raise ValidationError(f"transcript {self.id!r}: label must be 0 or 1")
        if self.phq8_score is not None and self.label is not None:
            if self.label != derive_label(self.phq8_score):
                raise ValidationError(
                    f"transcript {self.id!r}: label {self.label} contradicts "
                    f"phq8_score {self.phq8_score}"
                )

    def to_dict(self) -> dict:
        out: dict = {"id": self.id, "text": self.text, "split": self.split.value}
        if self.phq8_score is not None:
            out["phq8_score"] = self.phq8_score
        if self.label is not None:
            out["label"] = self.label
        return out


class Corpus:
    """Immutable collection of transcripts; TRAIN and VAL items must be labeled."""

    def __init__(self, items: Iterable[Transcript]):
        self.items: tuple[Transcript, ...] = tuple(items)
        seen: set[str] = set()
        for item in self.items:
            if item.id in seen:
                raise ValidationError(f"duplicate transcript id {item.id!r}")
            seen.add(item.id)
            if item.split in (Split.TRAIN, Split.VAL) and item.label is None:
                raise ValidationError(
                    f"transcript {item.id!r}: {item.split.value} items must be labeled"
                )
        self._by_id = {item.id: item for item in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Transcript]:
        return iter(self.items)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.items == other.items

    def get(self, item_id: str) -> Transcript:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise ValidationError(f"unknown transcript id {item_id!r}") from None

    def split_items(self, split: Split) -> tuple[Transcript, ...]:
        return tuple(item for item in self.items if item.split is split)

    @property
    def class_counts(self) -> dict[Split, dict[int, int]]:
        counts: dict[Split, dict[int, int]] = {s: {} for s in Split}
        for item in self.items:
            if item.label is not None:
                per = counts[item.split]
                per[item.label] = per.get(item.label, 0) + 1
        return counts

    def content_hash(self) -> str:
        hasher = hashlib.sha256()
        for item in sorted(self.items, key=lambda t: t.id):
            hasher.update(
                json.dumps(item.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8")
            )
            hasher.update(b"\n")
        return hasher.hexdigest()

    def save_jsonl(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(p.suffix + ".tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for item in self.items:
                fh.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")
        tmp.replace(p)
        return p


def _row_to_transcript(row: dict, label_flip: bool) -> Transcript:
    for key in ("id", "text", "split"):
        if key not in row:
            raise ValidationError(f"missing required field {key!r}")
    split = Split.parse(row["split"])
    score = row.get("phq8_score")
    if score is not None and not isinstance(score, int):
        raise ValidationError(f"phq8_score must be an integer, got {score!r}")
    label = None
    if score is not None:
        # Canonical derivation wins over any flag carried by the file.
        label = derive_label(score)
    elif row.get("label") is not None:
        raw_label = row["label"]
        if raw_label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {raw_label!r}")
        label = 1 - raw_label if label_flip else raw_label
    return Transcript(
        id=str(row["id"]),
        text=row["text"],
        split=split,
        phq8_score=score,
        label=label,
    )


def load_jsonl(path: str | Path, *, label_flip: bool = False) -> Corpus:
    """Load and validate a JSONL corpus (one object per line, UTF-8).

    Schema: {"id": str, "text": str, "split": "TRAIN|VAL|TEST",
    "phq8_score": int?, "label": 0|1?}. Raises CorpusParseError with the line
    number for malformed lines; duplicate ids and unlabeled TRAIN/VAL items
    raise ValidationError.
    """
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"corpus file not found: {p}")
    items: list[Transcript] = []
    with p.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON ({exc.msg})", line_no=line_no) from exc
            if not isinstance(row, dict):
                raise CorpusParseError("expected a JSON object", line_no=line_no)
            try:
                items.append(_row_to_transcript(row, label_flip=label_flip))
            except ValidationError as exc:
                raise CorpusParseError(str(exc), line_no=line_no) from exc
    return Corpus(items)


# Word pools for the synthetic generator. The two clusters carry disjoint
# vocabulary; `separation` is the probability a word is drawn from the
# cluster pool rather than the shared pool.
_CLUSTER_POS = (
    "heavy", "tired", "empty", "restless", "numb", "worn", "foggy",
    "drained", "slow", "distant", "sleepless", "flat", "weary", "shut",
)
_CLUSTER_NEG = (
    "bright", "steady", "lively", "content", "rested", "clear", "social",
    "active", "hopeful", "warm", "engaged", "balanced", "easy", "open",
)
_SHARED = (
    "week", "day", "work", "home", "talk", "time", "sleep", "food",
    "family", "friend", "morning", "evening", "routine", "plan", "walk",
    "call", "visit", "weather",
)


def _synthetic_text(rng: random.Random, label: int, separation: float) -> str:
    cluster = _CLUSTER_POS if label == 1 else _CLUSTER_NEG
    sentences = []
    for _ in range(rng.randint(4, 6)):
        words = [
            rng.choice(cluster) if rng.random() < separation else rng.choice(_SHARED)
            for _ in range(rng.randint(5, 8))
        ]
        sentences.append(" ".join(words) + ".")
    return " ".join(sentences)


def generate_synthetic(n_per_class: int, seed: int, separation: float) -> Corpus:
    """Deterministic two-cluster corpus: n_per_class items per class per split.

    At separation 1.0 the clusters use disjoint vocabulary, so pseudo-embedding
    nearest neighbors are label-pure; at 0.0 both classes draw from the shared
    pool only. Pure function of its arguments.
    """
    if n_per_class < 1:
        raise ValidationError("n_per_class must be >= 1")
    if not 0.0 <= separation <= 1.0:
        raise ValidationError("separation must lie in [0, 1]")
    rng = random.Random(seed)
    items: list[Transcript] = []
    for split in (Split.TRAIN, Split.VAL, Split.TEST):
        for label in (0, 1):
            for idx in range(n_per_class):
                text = _synthetic_text(rng, label, separation)
                score = rng.randint(11, 24) if label == 1 else rng.randint(0, 10)
                items.append(
                    Transcript(
                        id=f"{split.value}-{label}-{idx:03d}",
                        text=text,
                        split=split,
                        phq8_score=score,
                        label=label,
                    )
                )
    return Corpus(items)


def class_balance(corpus: Corpus, split: Split) -> dict[int, float]:
    """Proportion of each label within a split; proportions sum to 1."""
    items = corpus.split_items(split)
    if not items:
        raise ValidationError(f"split {split.value} is empty")
    counts: dict[int, int] = {}
    for item in items:
        if item.label is not None:
            counts[item.label] = counts.get(item.label, 0) + 1
    if not counts:
        raise ValidationError(f"split {split.value} has no labeled items")
    total = sum(counts.values())
    return {label: count / total for label, count in sorted(counts.items())}
