"""Prompt construction, judge backends, verdict parsing, vote aggregation.

The HTTP backend speaks an OpenAI-compatible chat-completions wire format;
the mock backend is the deterministic stand-in used by tests and as the
cheap mini-judge during screening.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import os
import random
import re
import time
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, runtime_checkable

from .corpus import Transcript
from .errors import BackendError, LabelParseError, TransportError, ValidationError
from .retrieval import RetrievalResult

DEFAULT_JUDGE_MODEL = "gpt-4o-mini"
MAX_JUDGE_RETRIES = 3


def default_template() -> str:
    """Clinical framing instruction shipped as an editable data file."""
    return (
        importlib.resources.files("raglock.data")
        .joinpath("clinical_prompt.txt")
        .read_text(encoding="utf-8")
        .strip()
    )


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    top_p: float = 1.0
    n_samples: int = 1

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValidationError("top_p must lie in (0, 1]")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")

    def key(self) -> str:
        return f"temp={self.temperature},top_p={self.top_p},n={self.n_samples}"

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "top_p": self.top_p,
                "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, data: dict) -> "DecodingParams":
        unknown = set(data) - {"temperature", "top_p", "n_samples"}
        if unknown:
            raise ValidationError(f"unknown decoding keys: {sorted(unknown)}")
        return cls(temperature=float(data.get("temperature", 0.0)),
                   top_p=float(data.get("top_p", 1.0)),
                   n_samples=int(data.get("n_samples", 1)))


@dataclass(frozen=True)
class PromptSpec:
    """Deterministic prompt: clinical instruction, labeled examples, query."""

    system_instruction: str
    examples: tuple[tuple[str, int], ...]
    query_text: str

    def user_message(self) -> str:
        blocks = [f"[EXAMPLE|{label}]\n{text}" for text, label in self.examples]
        blocks.append(f"[TRANSCRIPT]\n{self.query_text}")
        return "\n\n".join(blocks)

    def render(self) -> str:
        return self.system_instruction + "\n\n" + self.user_message()

    def fingerprint(self) -> str:
        return hashlib.blake2s(self.render().encode("utf-8"), digest_size=8).hexdigest()


def build_prompt(
    query: Transcript | str,
    neighbors: RetrievalResult,
    template: str,
    texts: dict[str, str],
) -> PromptSpec:
    """Render retrieved neighbors into [EXAMPLE|label] blocks, neighbor order
    preserved; ``texts`` maps neighbor ids to their (truncated) example text."""
    if not neighbors.neighbors:
        raise ValidationError("cannot build a prompt without neighbors")
    examples = []
    for n in neighbors.neighbors:
        if n.label not in (0, 1):
            raise ValidationError(f"neighbor {n.id!r} is unlabeled")
        if n.id not in texts:
            raise ValidationError(f"no example text for neighbor {n.id!r}")
        examples.append((texts[n.id], n.label))
    query_text = query.text if isinstance(query, Transcript) else str(query)
    return PromptSpec(
        system_instruction=template,
        examples=tuple(examples),
        query_text=query_text,
    )


# A standalone 0/1: not embedded in a word or a larger/decimal number.
_LABEL_RE = re.compile(r"(?<![0-9A-Za-z_])(?<!\d\.)[01](?!\.\d)(?![0-9A-Za-z_])")
_YES_RE = re.compile(r"\byes\b", re.IGNORECASE)
_NO_RE = re.compile(r"\bno\b", re.IGNORECASE)


def parse_label(raw: str) -> int:
    """Decode a binary verdict: first standalone 0/1 digit wins; yes/no
    fall back when no digit is present."""
    text = raw or ""
    match = _LABEL_RE.search(text)
    if match:
        return int(match.group())
    yes = _YES_RE.search(text)
    no = _NO_RE.search(text)
    if yes and (not no or yes.start() < no.start()):
        return 1
    if no:
        return 0
    raise LabelParseError(f"no 0/1 verdict in judge output: {text[:80]!r}")


@dataclass(frozen=True)
class JudgeVerdict:
    label: int
    votes: tuple[int, ...]
    raw: tuple[str, ...]
    confidence: float

    def to_dict(self) -> dict:
        return {"label": self.label, "votes": list(self.votes),
                "raw": list(self.raw), "confidence": self.confidence}


def aggregate_votes(votes: list[int]) -> tuple[int, float]:
    """Majority vote; ties go to 1 (depressed) for conservative screening."""
    ones = sum(votes)
    zeros = len(votes) - ones
    label = 1 if ones >= zeros else 0
    return label, max(ones, zeros) / len(votes)


@runtime_checkable
class JudgeBackend(Protocol):
    backend_id: str
    calls: int

    def sample(self, prompt: PromptSpec, decoding: DecodingParams) -> list[str]: ...


class MockBehavior(str, Enum):
    ECHO_NEIGHBOR_MAJORITY = "ECHO_NEIGHBOR_MAJORITY"
    FIXED = "FIXED"
    NOISY = "NOISY"


class MockJudgeBackend:
    """Deterministic judge stand-in.

    ECHO answers with the majority label of the prompt examples (ties to 1);
    FIXED returns a constant; NOISY flips ECHO's answer with probability p,
    seeded purely by (seed, prompt, sample index) so results are independent
    of call order.
    """

    def __init__(
        self,
        behavior: MockBehavior = MockBehavior.ECHO_NEIGHBOR_MAJORITY,
        seed: int = 0,
        fixed_value: int = 1,
        noise_p: float = 0.0,
    ):
        if fixed_value not in (0, 1):
            raise ValidationError("fixed_value must be 0 or 1")
        if not 0.0 <= noise_p <= 1.0:
            raise ValidationError("noise_p must lie in [0, 1]")
        self.behavior = behavior
        self.seed = seed
        self.fixed_value = fixed_value
        self.noise_p = noise_p
        self.backend_id = f"mock-{behavior.value.lower()}"
        self.calls = 0
        self.on_attempt = None

    @staticmethod
    def _echo(prompt: PromptSpec) -> int:
        labels = [label for _, label in prompt.examples]
        ones = sum(labels)
        return 1 if ones >= len(labels) - ones else 0

    def sample(self, prompt: PromptSpec, decoding: DecodingParams) -> list[str]:
        if self.on_attempt is not None:
            self.on_attempt()
        self.calls += 1
        out = []
        for i in range(decoding.n_samples):
            if self.behavior is MockBehavior.FIXED:
                value = self.fixed_value
            else:
                value = self._echo(prompt)
                if self.behavior is MockBehavior.NOISY:
                    rng = random.Random(f"{self.seed}|{prompt.fingerprint()}|{i}")
                    if rng.random() < self.noise_p:
                        value = 1 - value
            out.append(str(value))
        return out


def mock_backend(
    seed: int = 0,
    behavior: MockBehavior = MockBehavior.ECHO_NEIGHBOR_MAJORITY,
    *,
    fixed_value: int = 1,
    noise_p: float = 0.0,
) -> MockJudgeBackend:
    return MockJudgeBackend(behavior=behavior, seed=seed,
                            fixed_value=fixed_value, noise_p=noise_p)


class HttpJudgeBackend:
    """OpenAI-style chat-completions client.

    n samples are requested via the `n` parameter; when the server returns
    fewer choices the remainder is fetched with sequential calls. Transport
    failures retry up to max_retries with exponential backoff; every attempt
    counts as a judge call.
    """

    def __init__(
        self,
        url: str,
        model: str = DEFAULT_JUDGE_MODEL,
        api_key_env: str = "RAGLOCK_JUDGE_API_KEY",
        timeout: float = 60.0,
        max_retries: int = MAX_JUDGE_RETRIES,
        backoff: float = 0.25,
        trace=None,
        sleep=time.sleep,
    ):
        self.url = url
        self.model = model
        self.api_key = os.environ.get(api_key_env)
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.trace = trace
        self.sleep = sleep
        self.backend_id = f"http-{model}"
        self.calls = 0
        self.on_attempt = None

    def sample(self, prompt: PromptSpec, decoding: DecodingParams) -> list[str]:
        texts = self._request(prompt, decoding, decoding.n_samples)
        while len(texts) < decoding.n_samples:
            texts.extend(self._request(prompt, decoding, 1))
        return texts[: decoding.n_samples]

    def _request(self, prompt: PromptSpec, decoding: DecodingParams, n: int) -> list[str]:
        import requests

        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.system_instruction},
                {"role": "user", "content": prompt.user_message()},
            ],
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "n": n,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            if self.on_attempt is not None:
                self.on_attempt()
            self.calls += 1
            try:
                response = requests.post(
                    self.url, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                if attempt < self.max_retries:
                    self.sleep(self.backoff * 2 ** (attempt - 1))
                continue
            if self.trace is not None:
                self.trace({
                    "kind": "judge",
                    "url": self.url,
                    "status": response.status_code,
                    "request": {"model": self.model, "n": n,
                                "temperature": decoding.temperature,
                                "top_p": decoding.top_p},
                    "response": response.text[:500],
                })
            if response.status_code >= 500:
                last_error = TransportError(
                    f"judge endpoint returned {response.status_code}", attempts=attempt
                )
                if attempt < self.max_retries:
                    self.sleep(self.backoff * 2 ** (attempt - 1))
                continue
            if response.status_code != 200:
                raise TransportError(
                    f"judge endpoint returned {response.status_code}: {response.text[:200]}",
                    attempts=attempt,
                )
            try:
                body = response.json()
                return [choice["message"]["content"] for choice in body["choices"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise BackendError(f"malformed judge response: {exc}") from exc
        raise TransportError(
            f"judge endpoint unreachable after {self.max_retries} attempts: {last_error}",
            attempts=self.max_retries,
        )


def judge(prompt: PromptSpec, decoding: DecodingParams, backend: JudgeBackend) -> JudgeVerdict:
    """Collect n_samples responses, parse each, and majority-vote the verdict.

    Unparseable samples are dropped; if every sample is unparseable the call
    fails. Transport retries live inside the backend.
    """
    raw = backend.sample(prompt, decoding)
    if len(raw) != decoding.n_samples:
        raise BackendError(
            f"backend returned {len(raw)} samples, expected {decoding.n_samples}"
        )
    votes: list[int] = []
    for text in raw:
        try:
            votes.append(parse_label(text))
        except LabelParseError:
            continue
    if not votes:
        raise LabelParseError(f"all {len(raw)} judge samples were unparseable")
    label, confidence = aggregate_votes(votes)
    return JudgeVerdict(label=label, votes=tuple(votes), raw=tuple(raw),
                        confidence=confidence)
