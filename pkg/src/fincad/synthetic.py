"""Deterministic synthetic model for tests and offline runs.

The provider answers the pipeline's own prompt shapes:

* context prompts -> a mixture of summary-driven momentum signal and a
  configurable leak of the memorized signal;
* prior and probe prompts -> memorized signal plus any brand prior;
* dates past the cutoff -> brand prior plus seeded noise only.

Every generation walks a fixed agent-JSON template whose only free choice is
the action word, so outputs always parse. All randomness is a pure hash of
(noise seed, input string): the same input always yields the same logits.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from datetime import date as Date
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .gateway import (
    JSON_CLOSE,
    JSON_CONFIDENCE,
    JSON_OPEN,
    JSON_QUANTITY,
    JSON_REASONING,
    LabelSet,
    REASONING_WORD,
    Vocabulary,
    default_vocabulary,
    direction_label_sets,
)
from .prompts import F_TASK_CALIB

_HEADER_RE = re.compile(r"=== Financial Data for (.+?) as of (\d{4}-\d{2}-\d{2}) ===")
_PROBE_RE = re.compile(r"After (\d{4}-\d{2}-\d{2}), (.+?) stock went")
_MOMENTUM_RE = re.compile(r"1m return: ([+-]?[0-9.]+)%")
_PORTFOLIO_MARKER = "=== Portfolio State ==="
_DECISION_QUESTION = "what is your trading decision?"
_JSON_ONLY = "Respond with valid JSON only."
_BUCKET_RE = re.compile(r"^(\d{4})Q([1-4])$")

_FORCED = 25.0
_FILL = -25.0

#: Max |d entropy / d logit-diff| for the normalized binary entropy; used to
#: bound how much the seeded logit noise can move a probe entropy.
_ENTROPY_LIPSCHITZ = 0.2642


def quarter_bucket(t: Date) -> str:
    return f"{t.year}Q{(t.month - 1) // 3 + 1}"


def _bucket_start(bucket: str) -> Date:
    m = _BUCKET_RE.match(bucket)
    if m is None:
        raise UsageError(f"bad date bucket {bucket!r}, expected e.g. '2015Q2'")
    year, q = int(m.group(1)), int(m.group(2))
    return Date(year, 3 * (q - 1) + 1, 1)


def _signed(direction: str, strength: float) -> float:
    if direction == "up":
        return strength
    if direction == "down":
        return -strength
    raise UsageError(f"direction must be 'up' or 'down', got {direction!r}")


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Configuration of the memorizing model.

    `memorized` maps (ticker, quarter-bucket) to a direction and strength:
    the logit edge the model exhibits for that entity in that quarter.
    `brand_prior` is the date-independent belief per ticker. When
    `activation_keyword` is set, explicit-recall prompts (prior, probe,
    calibration) only surface memory if the prompt contains the keyword;
    context prompts always leak `context_memory_fraction` of the memorized
    strength regardless.
    """

    cutoff: Date
    memorized: dict[tuple[str, str], tuple[str, float]] = field(default_factory=dict)
    brand_prior: dict[str, tuple[str, float]] = field(default_factory=dict)
    noise_seed: int = 0
    noise_scale: float = 0.05
    model_id: str = "synthetic"
    context_memory_fraction: float = 0.5
    activation_keyword: str | None = None
    action_scale: float = 2.0
    hold_bias: float = 1.0
    momentum_gain: float = 15.0
    momentum_clip: float = 0.5
    order_quantity: int = 999999

    def __post_init__(self):
        for (ticker, bucket), (direction, strength) in self.memorized.items():
            _signed(direction, strength)
            if not (math.isfinite(strength) and strength >= 0):
                raise UsageError(f"memorized strength for {ticker} {bucket} must be finite and >= 0")
            if _bucket_start(bucket) > self.cutoff:
                raise UsageError(
                    f"memorized bucket {bucket} for {ticker} starts after the cutoff {self.cutoff}"
                )
        for ticker, (direction, strength) in self.brand_prior.items():
            _signed(direction, strength)
            if not (math.isfinite(strength) and strength >= 0):
                raise UsageError(f"brand strength for {ticker} must be finite and >= 0")
        if self.noise_scale < 0:
            raise UsageError("noise_scale must be >= 0")
        if not 0.0 <= self.context_memory_fraction <= 1.0:
            raise UsageError("context_memory_fraction must be in [0, 1]")
        if self.order_quantity < 0:
            raise UsageError("order_quantity must be >= 0")

    def to_dict(self) -> dict:
        return {
            "cutoff": self.cutoff.isoformat(),
            "memorized": {f"{t}|{b}": [d, s] for (t, b), (d, s) in self.memorized.items()},
            "brand_prior": {t: [d, s] for t, (d, s) in self.brand_prior.items()},
            "noise_seed": self.noise_seed,
            "noise_scale": self.noise_scale,
            "model_id": self.model_id,
            "context_memory_fraction": self.context_memory_fraction,
            "activation_keyword": self.activation_keyword,
            "action_scale": self.action_scale,
            "hold_bias": self.hold_bias,
            "momentum_gain": self.momentum_gain,
            "momentum_clip": self.momentum_clip,
            "order_quantity": self.order_quantity,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "SyntheticModelSpec":
        try:
            memorized = {}
            for key, (d, s) in rec.get("memorized", {}).items():
                ticker, bucket = key.split("|", 1)
                memorized[(ticker, bucket)] = (d, float(s))
            brand = {t: (d, float(s)) for t, (d, s) in rec.get("brand_prior", {}).items()}
            return cls(
                cutoff=Date.fromisoformat(rec["cutoff"]),
                memorized=memorized,
                brand_prior=brand,
                noise_seed=int(rec.get("noise_seed", 0)),
                noise_scale=float(rec.get("noise_scale", 0.05)),
                model_id=rec.get("model_id", "synthetic"),
                context_memory_fraction=float(rec.get("context_memory_fraction", 0.5)),
                activation_keyword=rec.get("activation_keyword"),
                action_scale=float(rec.get("action_scale", 2.0)),
                hold_bias=float(rec.get("hold_bias", 1.0)),
                momentum_gain=float(rec.get("momentum_gain", 15.0)),
                momentum_clip=float(rec.get("momentum_clip", 0.5)),
                order_quantity=int(rec.get("order_quantity", 999999)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"bad synthetic model spec: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticModelSpec":
        try:
            rec = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load synthetic spec {path}: {exc}") from exc
        return cls.from_dict(rec)


class SyntheticProvider:
    """Pure-function provider over the compact built-in vocabulary."""

    def __init__(self, spec: SyntheticModelSpec):
        self.spec = spec
        self.vocabulary: Vocabulary = default_vocabulary()
        self.model_id = spec.model_id
        self._up, self._down = direction_label_sets(self.vocabulary)
        self._action_idx = {a: self.vocabulary.index[a] for a in ("buy", "sell", "hold")}
        self._pieces_cache = {a: self._build_pieces(a) for a in ("buy", "sell", "hold")}

    # -- knobs exposed to tests ---------------------------------------------

    def direction_labels(self) -> tuple[LabelSet, LabelSet]:
        return self._up, self._down

    @property
    def entropy_noise_bound(self) -> float:
        """Safe upper bound on probe-entropy spread caused by seeded noise."""
        return 2.0 * _ENTROPY_LIPSCHITZ * self.spec.noise_scale

    # -- signal model ---------------------------------------------------------

    def _noise(self, text: str) -> float:
        digest = hashlib.sha256(f"{self.spec.noise_seed}:{text}".encode()).digest()
        u = int.from_bytes(digest[:8], "big") / 2.0**64
        return (2.0 * u - 1.0) * self.spec.noise_scale

    def _memory(self, ticker: str, t: Date, text: str, gated: bool) -> float:
        if t > self.spec.cutoff:
            return 0.0
        if gated and self.spec.activation_keyword is not None:
            if self.spec.activation_keyword.lower() not in text.lower():
                return 0.0
        entry = self.spec.memorized.get((ticker, quarter_bucket(t)))
        if entry is None:
            return 0.0
        return _signed(*entry)

    def _brand(self, ticker: str) -> float:
        entry = self.spec.brand_prior.get(ticker)
        return _signed(*entry) if entry is not None else 0.0

    def _momentum(self, text: str) -> float:
        m = _MOMENTUM_RE.search(text)
        if m is None:
            return 0.0
        monthly = float(m.group(1)) / 100.0
        raw = self.spec.momentum_gain * monthly
        return max(-self.spec.momentum_clip, min(self.spec.momentum_clip, raw))

    # -- logit emission --------------------------------------------------------

    def _fill(self) -> np.ndarray:
        return np.full(self.vocabulary.size, _FILL, dtype=float)

    def _forced(self, token: str) -> np.ndarray:
        vec = self._fill()
        vec[self.vocabulary.index[token]] = _FORCED
        return vec

    def _direction_logits(self, diff: float) -> np.ndarray:
        vec = self._fill()
        for idx in self._up.variants:
            vec[idx] = diff / 2.0
        for idx in self._down.variants:
            vec[idx] = -diff / 2.0
        return vec

    def _action_logits(self, v: float) -> np.ndarray:
        vec = self._fill()
        vec[self._action_idx["buy"]] = self.spec.action_scale * v
        vec[self._action_idx["sell"]] = -self.spec.action_scale * v
        vec[self._action_idx["hold"]] = self.spec.hold_bias
        return vec

    def _build_pieces(self, action: str) -> list[str]:
        quantity = 0 if action == "hold" else self.spec.order_quantity
        return [
            JSON_OPEN,
            action,
            JSON_QUANTITY,
            *list(str(quantity)),
            JSON_CONFIDENCE,
            "7",
            "0",
            JSON_REASONING,
            REASONING_WORD,
            JSON_CLOSE,
        ]

    def _decision_logits(self, generated: str, v: float) -> np.ndarray:
        if generated == "":
            return self._forced(JSON_OPEN)
        for action in ("buy", "sell", "hold"):
            pos = 0
            for i, piece in enumerate(self._pieces_cache[action]):
                if pos == len(generated):
                    if i == 1:
                        return self._action_logits(v)
                    return self._forced(piece)
                if generated.startswith(piece, pos):
                    pos += len(piece)
                else:
                    break
        # Off-template generation (vanishingly rare sampling tail): emit a
        # newline so the caller's token budget runs out and it retries.
        return self._forced("\n")

    # -- provider contract ------------------------------------------------------

    def next_logits(self, text: str) -> np.ndarray:
        probe_matches = list(_PROBE_RE.finditer(text))
        if probe_matches:
            m = probe_matches[-1]
            t = Date.fromisoformat(m.group(1))
            ticker = m.group(2)
            diff = self._memory(ticker, t, text, gated=True) + self._brand(ticker) + self._noise(text)
            return self._direction_logits(diff)

        header = _HEADER_RE.search(text)
        if header is None:
            return self._direction_logits(self._noise(text))
        ticker = header.group(1)
        t = Date.fromisoformat(header.group(2))

        if _PORTFOLIO_MARKER in text:
            boundary = 0
            for marker in (_DECISION_QUESTION, _JSON_ONLY):
                at = text.rfind(marker)
                if at >= 0:
                    boundary = max(boundary, at + len(marker))
            generated = text[boundary:]
            v = (
                self._momentum(text)
                + self.spec.context_memory_fraction * self._memory(ticker, t, text, gated=False)
                + self._noise(text)
            )
            return self._decision_logits(generated, v)

        if F_TASK_CALIB in text:
            diff = self._memory(ticker, t, text, gated=True) + self._brand(ticker) + self._noise(text)
            return self._direction_logits(diff)

        at = text.rfind(_JSON_ONLY)
        generated = text[at + len(_JSON_ONLY):] if at >= 0 else ""
        v = self._memory(ticker, t, text, gated=True) + self._brand(ticker) + self._noise(text)
        return self._decision_logits(generated, v)


def build_synthetic(spec: SyntheticModelSpec) -> SyntheticProvider:
    """Provider handle for a synthetic model specification."""
    return SyntheticProvider(spec)
