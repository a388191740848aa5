"""Two-branch contrastive decoding loop with adaptive retry.

Each step queries the context and prior branches, blends their logits as
(1 + alpha) * ctx - alpha * prior, samples one token from the tempered
softmax, and appends that token to BOTH branch strings so the branches stay
synchronized. Generation stops at the first balanced JSON object or at the
token budget. If the output fails to parse, alpha is scaled down by the
retry factor and the decode restarts; after the retry budget the documented
fallback is a hold decision, not an error.

With alpha = 0 the blend is exactly the context logits, so the trajectory is
byte-identical to plain single-branch sampling under the same seed.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import re
from dataclasses import dataclass

import numpy as np

from .errors import FincadError, UsageError
from .gateway import Provider, next_logits, softmax

logger = logging.getLogger(__name__)

ACTIONS = ("buy", "sell", "hold")


class ParseError(FincadError):
    """No trade decision could be extracted from the generated text."""


@dataclass(frozen=True)
class DecodeConfig:
    """Sampling and retry parameters for one decode loop."""

    temperature: float = 1.0
    seed: int = 42
    max_tokens: int = 256
    retry_factor: float = 0.8
    max_retries: int = 5

    def __post_init__(self):
        if self.temperature <= 0:
            raise UsageError("temperature must be > 0")
        if not 0.0 < self.retry_factor < 1.0:
            raise UsageError("retry_factor must be in (0, 1)")
        if self.max_retries < 0:
            raise UsageError("max_retries must be >= 0")
        if self.max_tokens < 1:
            raise UsageError("max_tokens must be >= 1")


@dataclass(frozen=True)
class TradeDecision:
    """Parsed agent action; hold implies quantity 0."""

    action: str
    quantity: int
    confidence: int
    reasoning: str
    fallback: bool = False


@dataclass(frozen=True)
class DecodeResult:
    decision: TradeDecision
    final_alpha: float
    raw_text: str
    retries: int


def blend_logits(ctx: np.ndarray, prior: np.ndarray, alpha: float) -> np.ndarray:
    """Contrast blend (1 + alpha) * ctx - alpha * prior, elementwise."""
    ctx = np.asarray(ctx, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if ctx.shape != prior.shape:
        raise UsageError(f"logit length mismatch: {ctx.shape} vs {prior.shape}")
    return (1.0 + alpha) * ctx - alpha * prior


def sample_token(logits: np.ndarray, config: DecodeConfig, rng: np.random.Generator) -> int:
    """Draw one vocabulary index from softmax(logits / temperature)."""
    probs = softmax(logits, config.temperature)
    return int(rng.choice(len(probs), p=probs))


def decision_rng(seed: int, *scope: object) -> np.random.Generator:
    """Portable per-decision generator (PCG64 seeded from a stable hash)."""
    material = ":".join([str(seed), *map(str, scope)])
    digest = hashlib.sha256(material.encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))


def find_balanced_object(text: str) -> tuple[int, int] | None:
    """Locate the first balanced {...} block, ignoring braces inside strings."""
    depth = 0
    start = -1
    in_string: str | None = None
    escaped = False
    for i, ch in enumerate(text):
        if in_string is not None:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == in_string:
                in_string = None
            continue
        if ch in "'\"" and depth > 0:
            in_string = ch
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                return start, i + 1
    return None


def _loads_tolerant(block: str) -> dict:
    attempts = [block, re.sub(r",\s*([}\]])", r"\1", block)]
    for candidate in attempts:
        try:
            obj = json.loads(candidate)
            if isinstance(obj, dict):
                return obj
        except ValueError:
            pass
        try:
            obj = ast.literal_eval(candidate)
            if isinstance(obj, dict):
                return obj
        except (ValueError, SyntaxError):
            pass
    raise ParseError("balanced block is not a JSON object")


def extract_json(raw: str) -> TradeDecision:
    """Pull a trade decision out of messy generated text.

    Tolerates code fences, single quotes, trailing commas, and trailing
    prose. The schema is validated; confidence is clamped into [0, 100] and
    a hold with nonzero quantity is normalized to quantity 0.
    """
    span = find_balanced_object(raw)
    if span is None:
        raise ParseError("no balanced JSON object in output")
    obj = _loads_tolerant(raw[span[0] : span[1]])

    action_raw = obj.get("action")
    if not isinstance(action_raw, str) or action_raw.strip().lower() not in ACTIONS:
        raise ParseError(f"bad action {action_raw!r}")
    action = action_raw.strip().lower()

    quantity_raw = obj.get("quantity")
    if quantity_raw is None:
        if action != "hold":
            raise ParseError(f"{action} decision lacks a quantity")
        quantity = 0
    else:
        if isinstance(quantity_raw, bool) or not isinstance(quantity_raw, (int, float)):
            raise ParseError(f"bad quantity {quantity_raw!r}")
        quantity = int(round(quantity_raw))
        if quantity < 0:
            raise ParseError(f"negative quantity {quantity_raw!r}")

    confidence_raw = obj.get("confidence", 50)
    if isinstance(confidence_raw, bool) or not isinstance(confidence_raw, (int, float)):
        raise ParseError(f"bad confidence {confidence_raw!r}")
    confidence = max(0, min(100, int(round(confidence_raw))))

    reasoning = obj.get("reasoning", "")
    reasoning = str(reasoning)[:100]

    if action == "hold" and quantity != 0:
        logger.warning("hold decision carried quantity %d; normalized to 0", quantity)
        quantity = 0

    return TradeDecision(action=action, quantity=quantity, confidence=confidence, reasoning=reasoning)


FALLBACK_DECISION = TradeDecision(action="hold", quantity=0, confidence=0, reasoning="fallback", fallback=True)


def _generate(
    provider: Provider,
    x_ctx: str,
    x_prior: str | None,
    alpha: float,
    config: DecodeConfig,
    rng: np.random.Generator,
) -> str:
    tokens = provider.vocabulary.tokens
    generated = ""
    for _ in range(config.max_tokens):
        ctx_logits = next_logits(provider, x_ctx + generated)
        if x_prior is None:
            blended = ctx_logits
        else:
            prior_logits = next_logits(provider, x_prior + generated)
            blended = blend_logits(ctx_logits, prior_logits, alpha)
        idx = sample_token(blended, config, rng)
        generated += tokens[idx]
        if find_balanced_object(generated) is not None:
            break
    return generated


def decode_decision(
    provider: Provider,
    x_ctx: str,
    x_prior: str,
    alpha: float,
    config: DecodeConfig,
    rng: np.random.Generator | None = None,
) -> DecodeResult:
    """Run the two-branch decode with adaptive retry.

    The attempted alpha sequence is alpha * retry_factor**k for k = 0..
    max_retries; parse exhaustion returns the fallback hold decision flagged
    as such rather than raising. One rng stream spans all attempts.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    attempt_alpha = alpha
    raw = ""
    for attempt in range(config.max_retries + 1):
        raw = _generate(provider, x_ctx, x_prior, attempt_alpha, config, rng)
        try:
            decision = extract_json(raw)
            return DecodeResult(decision=decision, final_alpha=attempt_alpha, raw_text=raw, retries=attempt)
        except ParseError:
            if attempt < config.max_retries:
                attempt_alpha *= config.retry_factor
    return DecodeResult(
        decision=FALLBACK_DECISION, final_alpha=attempt_alpha, raw_text=raw, retries=config.max_retries
    )


def sample_decision(
    provider: Provider,
    x: str,
    config: DecodeConfig,
    rng: np.random.Generator | None = None,
) -> DecodeResult:
    """Plain single-branch sampling with the same retry/fallback shape.

    This is the baseline path; a decode_decision run with alpha = 0 yields a
    byte-identical token trajectory under the same seed.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    raw = ""
    for attempt in range(config.max_retries + 1):
        raw = _generate(provider, x, None, 0.0, config, rng)
        try:
            decision = extract_json(raw)
            return DecodeResult(decision=decision, final_alpha=0.0, raw_text=raw, retries=attempt)
        except ParseError:
            pass
    return DecodeResult(decision=FALLBACK_DECISION, final_alpha=0.0, raw_text=raw, retries=config.max_retries)
