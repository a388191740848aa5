"""Model abstraction: input string -> next-token logit vector.

Providers share one contract (`model_id`, `vocabulary`, `next_logits`) so
everything downstream is provider-agnostic. The remote provider speaks a
completion-with-logprobs HTTP protocol and maps returned token logprobs onto
the local vocabulary; the deterministic synthetic provider lives in
fincad.synthetic.
"""

from __future__ import annotations

import math
import string
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import requests

from .errors import ProviderError, UsageError

#: Logit assigned to vocabulary tokens absent from a remote top-k response.
MISSING_TOKEN_LOGIT = -1.0e4


class Vocabulary:
    """Ordered, unique token strings with an index lookup."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if len(set(tokens)) != len(tokens):
            raise UsageError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def variants_of(self, word: str) -> frozenset[int]:
        """Indices of the casing / leading-space variants present for a word."""
        forms = {word, word.capitalize(), word.upper()}
        forms |= {" " + f for f in set(forms)}
        return frozenset(self.index[f] for f in forms if f in self.index)


@dataclass(frozen=True)
class LabelSet:
    """A direction label and the vocabulary indices of its surface variants."""

    label: str
    variants: frozenset[int]

    def __post_init__(self):
        if not self.variants:
            raise UsageError(f"label {self.label!r} has no vocabulary variants")


def direction_label_sets(vocab: Vocabulary) -> tuple[LabelSet, LabelSet]:
    """(up, down) label sets drawn from a vocabulary's variant tokens."""
    up = LabelSet("up", vocab.variants_of("up"))
    down = LabelSet("down", vocab.variants_of("down"))
    if up.variants & down.variants:
        raise UsageError("up/down variant sets overlap")
    return up, down


@runtime_checkable
class Provider(Protocol):
    model_id: str
    vocabulary: Vocabulary

    def next_logits(self, text: str) -> np.ndarray: ...


def next_logits(provider: Provider, text: str) -> np.ndarray:
    """Query a provider for next-token logits over its vocabulary."""
    if not text:
        raise UsageError("input string must be non-empty")
    vec = np.asarray(provider.next_logits(text), dtype=float)
    if vec.shape != (provider.vocabulary.size,):
        raise ProviderError(
            f"provider returned {vec.shape} logits for a vocabulary of {provider.vocabulary.size}"
        )
    if not np.all(np.isfinite(vec)):
        raise ProviderError("provider returned non-finite logits")
    return vec


def label_logit(vec: np.ndarray, labels: LabelSet) -> float:
    """Maximum logit over a label's variant indices."""
    indices = sorted(labels.variants)
    if max(indices) >= len(vec):
        raise UsageError(f"label {labels.label!r} has variant index beyond the logit vector")
    return float(np.max(vec[indices]))


# Tokens the synthetic decision generator emits, in generation order.
JSON_OPEN = '{"action": "'
JSON_QUANTITY = '", "quantity": '
JSON_CONFIDENCE = ', "confidence": '
JSON_REASONING = ', "reasoning": "'
JSON_CLOSE = '"}'
REASONING_WORD = "signal"

_FILLER_WORDS = (
    "the", "a", "an", "and", "or", "of", "to", "in", "on", "for", "with",
    "stock", "market", "price", "prices", "went", "after", "before", "value",
    "data", "model", "trade", "trading", "risk", "cash", "share", "shares",
    "day", "days", "date", "time", "high", "low", "open", "close", "closed",
    "volume", "return", "returns", "trend", "momentum", "quarter", "year",
    "strong", "weak", "rose", "fell", "flat", "gain", "loss", "analyst",
    "summary", "portfolio", "decision", "entity", "company", "ticker",
    "recall", "remember", "predict", "outcome", "history", "training",
)


def default_vocabulary() -> Vocabulary:
    """The compact (~200 token) vocabulary used by the synthetic provider.

    Carries everything needed to emit the agent JSON schema and to probe
    direction labels with casing / leading-space variants.
    """
    tokens: list[str] = [
        JSON_OPEN, JSON_QUANTITY, JSON_CONFIDENCE, JSON_REASONING, JSON_CLOSE,
        REASONING_WORD, "buy", "sell", "hold",
    ]
    for word in ("up", "down"):
        for form in (word, word.capitalize(), word.upper()):
            tokens.extend([form, " " + form])
    tokens.extend(string.digits)
    tokens.extend(list('{}[]():,."\'-') + [" ", "\n"])
    tokens.extend(string.ascii_lowercase)
    tokens.extend(string.ascii_uppercase)
    tokens.extend(_FILLER_WORDS)
    deduped = list(dict.fromkeys(tokens))
    return Vocabulary(deduped)


class RemoteProvider:
    """HTTP client for a completion endpoint that returns top-k logprobs.

    Each call requests a single next token with its top-k logprob map and
    projects that map onto the local vocabulary; tokens the endpoint did not
    return get MISSING_TOKEN_LOGIT. In-flight requests are bounded.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        url: str,
        model_id: str,
        *,
        api_token: str | None = None,
        top_logprobs: int = 40,
        timeout: float = 30.0,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        self.vocabulary = vocabulary
        self.url = url
        self.model_id = model_id
        self.api_token = api_token
        self.top_logprobs = int(top_logprobs)
        self.timeout = timeout
        self._gate = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()

    def ensure_label_coverage(self, label_sets: Sequence[LabelSet]) -> None:
        """Fail loudly if the configured top-k cannot cover all label variants."""
        needed = sum(len(ls.variants) for ls in label_sets)
        if self.top_logprobs < needed:
            raise ProviderError(
                f"top_logprobs={self.top_logprobs} cannot cover {needed} label variant tokens; "
                "raise the logprob count so label logits are never silently truncated"
            )

    def next_logits(self, text: str) -> np.ndarray:
        payload = {
            "model": self.model_id,
            "prompt": text,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": self.top_logprobs,
            "echo": False,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_token:
            headers["Authorization"] = f"Bearer {self.api_token}"
        with self._gate:
            try:
                resp = self._session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                raise ProviderError(f"transport failure: {exc}", retryable=True) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderError(f"endpoint returned {resp.status_code}", retryable=True)
        if resp.status_code != 200:
            raise ProviderError(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            logprobs = body["choices"][0]["logprobs"]["top_logprobs"][0]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(
                "endpoint response lacks top_logprobs; logit access is required"
            ) from exc
        if not isinstance(logprobs, dict) or not logprobs:
            raise ProviderError("endpoint response lacks top_logprobs; logit access is required")

        vec = np.full(self.vocabulary.size, MISSING_TOKEN_LOGIT, dtype=float)
        matched = 0
        for token, logprob in logprobs.items():
            idx = self.vocabulary.index.get(token)
            if idx is not None:
                vec[idx] = float(logprob)
                matched += 1
        if matched == 0:
            raise ProviderError(
                "no returned token is present in the local vocabulary: vocabulary mismatch"
            )
        return vec


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax, normalized to sum exactly to 1."""
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    scaled = np.asarray(logits, dtype=float) / temperature
    scaled = scaled - scaled.max()
    probs = np.exp(scaled)
    return probs / probs.sum()
