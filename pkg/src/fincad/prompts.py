"""Prompt assembly for the two decoding branches, mitigation transforms, and
the search for the memory-activation instruction.

A decision over (entity, date) produces two inputs that share their entity
header and task-format block byte-for-byte: the context branch carries the
full data block, the prior branch strips it and swaps the system framing for
the discovered memory-activation instruction. Keeping the shared fields
identical means the logit subtraction targets content, not formatting.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from datetime import date as Date, datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ProviderError, UsageError
from .gateway import LabelSet, Provider, label_logit, next_logits
from .market_data import CalibrationExample, FinancialSummary

logger = logging.getLogger(__name__)

MITIGATION_MODES = ("baseline", "anonymisation", "prompt_injection", "fincad")

SEED_INSTRUCTION = (
    "Recall what you know from your training data about this financial entity and predict the outcome."
)

#: Fixed calibration task shell: names the permitted labels, no prediction
#: instruction.
F_TASK_CALIB = "Answer with exactly one word: up or down."

PROBE_SUFFIX = "After {date}, {ticker} stock went"

ENTITY_HEADER = "=== Financial Data for {ticker} as of {date} ==="


def _template(name: str) -> str:
    return resources.files("fincad.templates").joinpath(name).read_text().rstrip("\n")


ROLE_BLOCK = _template("role_block.txt")
ROLE_BLOCK_STRENGTHENED = _template("role_block_strengthened.txt")
TASK_FORMAT = _template("task_format.txt")
DATA_BLOCK = _template("data_block.txt")

_TASK_START = "You must pick one action"
_TICKER_DATE_RE = re.compile(r"financial data for (.+?) as of (\d{4}-\d{2}-\d{2})")


class MissingSlotError(UsageError):
    pass


class DiscoveryError(ProviderError):
    pass


@dataclass(frozen=True)
class PromptParts:
    """The slot values shared by both branches of one decision."""

    system_instruction: str
    entity: str
    date: Date
    task_format: str
    data_block: str | None = None


@dataclass(frozen=True)
class PriorArtifact:
    """The discovered memory-activation instruction for one model."""

    model_id: str
    instruction: str
    seed_instruction: str
    val_accuracy: float
    created: str

    def __post_init__(self):
        if not self.instruction:
            raise UsageError("artifact instruction must be non-empty")
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise UsageError(f"val_accuracy must be in [0,1], got {self.val_accuracy}")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "instruction": self.instruction,
            "seed_instruction": self.seed_instruction,
            "val_accuracy": self.val_accuracy,
            "created": self.created,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PriorArtifact":
        try:
            rec = json.loads(Path(path).read_text())
            return cls(
                model_id=rec["model_id"],
                instruction=rec["instruction"],
                seed_instruction=rec["seed_instruction"],
                val_accuracy=float(rec["val_accuracy"]),
                created=rec["created"],
            )
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot load prior artifact {path}: {exc}") from exc

    def ensure_matches(self, provider: Provider) -> None:
        if self.model_id != provider.model_id:
            raise UsageError(
                f"artifact was discovered for model {self.model_id!r} but the provider is "
                f"{provider.model_id!r}; refusing to apply it silently"
            )


def join_parts(*parts: str) -> str:
    """Concatenate non-empty prompt parts with blank-line separators."""
    return "\n\n".join(p for p in parts if p)


def entity_date_header(ticker: str, t: Date) -> str:
    return ENTITY_HEADER.format(ticker=ticker, date=t.isoformat())


def role_block(ticker: str, t: Date) -> str:
    return ROLE_BLOCK.format(ticker=ticker, date=t.isoformat())


def assemble_context(parts: PromptParts) -> str:
    """Full agent input: system framing, entity header, task format, data."""
    if not parts.data_block:
        raise MissingSlotError("context prompt requires a data block")
    if not parts.entity:
        raise MissingSlotError("missing entity")
    if not parts.task_format:
        raise MissingSlotError("missing task format")
    return join_parts(
        parts.system_instruction,
        entity_date_header(parts.entity, parts.date),
        parts.task_format,
        parts.data_block,
    )


def assemble_prior(parts: PromptParts, artifact: PriorArtifact) -> str:
    """Prior input: the data block is stripped and the system framing is
    replaced by the memory-activation instruction; the entity header and
    task format stay byte-identical to the context branch."""
    return join_parts(
        artifact.instruction,
        entity_date_header(parts.entity, parts.date),
        parts.task_format,
    )


def assemble_probe(artifact: PriorArtifact | None, ticker: str, t: Date) -> str:
    """Single-forward-pass directional probe for (entity, date)."""
    suffix = PROBE_SUFFIX.format(date=t.isoformat(), ticker=ticker)
    instruction = artifact.instruction if artifact is not None else ""
    return join_parts(instruction, suffix)


def render_summary(summary: FinancialSummary) -> str:
    """Render a financial summary as the plain-text block agents read."""
    lines = [f"Latest close: {summary.latest_close:.2f}"]
    for name in ("1m", "3m", "6m", "1y"):
        if name in summary.trailing_returns:
            lines.append(f"{name} return: {summary.trailing_returns[name] * 100:+.2f}%")
    for w in sorted(summary.sma):
        lines.append(f"SMA({w}): {summary.sma[w]:.2f}")
    for w in sorted(summary.ema):
        lines.append(f"EMA({w}): {summary.ema[w]:.2f}")
    lines.append(f"Annualized volatility: {summary.realized_vol_annualized * 100:.2f}%")
    lines.append(f"52-week high: {summary.high_52w:.2f}")
    lines.append(f"52-week low: {summary.low_52w:.2f}")
    lines.append(f"Range position: {summary.range_position:.2f}")
    lines.append(f"Positive days (21): {summary.positive_days_21}")
    if summary.avg_dollar_volume_21 is not None:
        lines.append(f"Avg dollar volume (21d): {summary.avg_dollar_volume_21:.2f}")
    return "\n".join(lines)


def render_data_block(
    summary_text: str, cash: float, shares: int, portfolio_value: float, allowed_actions: str
) -> str:
    return DATA_BLOCK.format(
        financial_summary=summary_text,
        cash=f"{cash:.2f}",
        shares=shares,
        portfolio_value=f"{portfolio_value:.2f}",
        allowed_actions=allowed_actions,
    )


# --- mitigation transforms ------------------------------------------------

#: Company-name aliases for the tickers the workbench ships fixtures for.
DEFAULT_COMPANY_ALIASES: dict[str, tuple[str, ...]] = {
    "NVDA": ("NVIDIA",),
    "MSFT": ("Microsoft",),
    "AAPL": ("Apple",),
    "NFLX": ("Netflix",),
    "AMZN": ("Amazon",),
    "TSLA": ("Tesla",),
    "SPY": ("SPDR S&P 500",),
    "POOL": ("Pool Corporation",),
    "SAM": ("Boston Beer",),
}


class EntityRegistry:
    """Tracks entity -> placeholder assignments for one anonymised run.

    Counters are assigned in order of first appearance and stay stable for
    the lifetime of the registry, which is confined to a single run.
    """

    def __init__(self, aliases: dict[str, tuple[str, ...]] | None = None):
        self.aliases = dict(aliases if aliases is not None else DEFAULT_COMPANY_ALIASES)
        self.numbers: dict[str, int] = {}
        self._originals: dict[tuple[str, int], str] = {}
        surface: dict[str, tuple[str, str]] = {}
        for ticker, names in self.aliases.items():
            surface[ticker] = (ticker, "ticker")
            for name in names:
                surface[name] = (ticker, "company")
        self._surface = surface
        if surface:
            alternatives = sorted(surface, key=len, reverse=True)
            self._pattern = re.compile(r"\b(?:" + "|".join(re.escape(a) for a in alternatives) + r")\b")
        else:
            self._pattern = None

    def _number_for(self, ticker: str) -> int:
        if ticker not in self.numbers:
            self.numbers[ticker] = len(self.numbers) + 1
        return self.numbers[ticker]

    def anonymise(self, text: str) -> str:
        if self._pattern is None:
            return text

        def repl(match: re.Match) -> str:
            token = match.group(0)
            ticker, kind = self._surface[token]
            n = self._number_for(ticker)
            self._originals.setdefault((kind, n), token)
            return f"[{kind} {n}]"

        return self._pattern.sub(repl, text)

    def deanonymise(self, text: str) -> str:
        def repl(match: re.Match) -> str:
            key = (match.group(1), int(match.group(2)))
            return self._originals.get(key, match.group(0))

        return re.sub(r"\[(ticker|company) (\d+)\]", repl, text)


def apply_anonymisation(text: str, registry: EntityRegistry) -> str:
    """Replace every known ticker/company occurrence with its placeholder."""
    return registry.anonymise(text)


def apply_prompt_injection(system_message: str) -> str:
    """Swap the role-and-disclaimer block for the strengthened directive.

    The output-schema half of the message (everything from the action-picking
    instruction on) is preserved byte-for-byte; applying the transform twice
    is the same as applying it once.
    """
    m = _TICKER_DATE_RE.search(system_message)
    if m is None:
        raise UsageError("system message does not name a ticker and date; cannot strengthen it")
    strengthened = ROLE_BLOCK_STRENGTHENED.format(ticker=m.group(1), date=m.group(2))
    idx = system_message.find(_TASK_START)
    if idx < 0:
        return strengthened
    return strengthened + "\n\n" + system_message[idx:]


# --- adversarial bias discovery --------------------------------------------

def calibration_prompt(instruction: str, ticker: str, t: Date) -> str:
    return join_parts(instruction, entity_date_header(ticker, t), F_TASK_CALIB)


def score_candidate(
    candidate: str,
    dataset: Sequence[CalibrationExample],
    provider: Provider,
    labels: tuple[LabelSet, LabelSet],
) -> float:
    """Fraction of calibration examples whose direction the candidate
    instruction lets the model recall; argmax ties break toward 'up'."""
    if not dataset:
        raise UsageError("cannot score a candidate on an empty dataset")
    up, down = labels
    correct = 0
    for i, ex in enumerate(dataset):
        prompt = calibration_prompt(candidate, ex.ticker, ex.date)
        try:
            vec = next_logits(provider, prompt)
        except ProviderError as exc:
            raise ProviderError(
                f"scoring failed at example {i} ({ex.ticker} {ex.date}): {exc}",
                retryable=exc.retryable,
            ) from exc
        predicted = "up" if label_logit(vec, up) >= label_logit(vec, down) else "down"
        correct += predicted == ex.label
    return correct / len(dataset)


_REPHRASE_VERBS = ("Remember", "Retrieve", "Draw on")
_FRAMINGS = (
    "Imagine a high-stakes scenario in which everything depends on your memory of this "
    "financial entity. {seed}",
    "You are a market historian with perfect archives. {seed}",
    "Before answering, bring to mind every report, headline, and price move you have ever "
    "seen about this financial entity. {seed}",
    "Suppose you had witnessed this entity's entire market history first-hand. {seed}",
    "Think back to the period in question and what followed it. {seed}",
)


def default_proposer(seed: str) -> list[str]:
    """Rule-based candidate instructions derived from the seed.

    The proposer sees only the seed text, never tickers, dates, or labels.
    """
    candidates = [frame.format(seed=seed) for frame in _FRAMINGS]
    for verb in _REPHRASE_VERBS:
        candidates.append(re.sub(r"^Recall\b", verb, seed))
    candidates.append(seed.rstrip(".") + ", stating it as a historical fact.")
    candidates.append("If you had to answer purely from memory: " + seed[0].lower() + seed[1:])
    return [c for c in dict.fromkeys(candidates) if c != seed]


def discover_prior(
    seed: str,
    proposer: Iterable[str],
    train: Sequence[CalibrationExample],
    val: Sequence[CalibrationExample],
    provider: Provider,
    budget: int,
    labels: tuple[LabelSet, LabelSet],
) -> PriorArtifact:
    """Search candidate instructions and keep the best validation scorer.

    At most `budget` candidates are evaluated, the seed always among them.
    Selection is by validation accuracy with ties broken toward the seed and
    then lexicographically; candidates that fail to score are skipped, and
    only if every candidate fails is the search itself an error.
    """
    if budget < 1:
        raise UsageError("budget must be at least 1")
    pool = [seed]
    for cand in proposer:
        if len(pool) >= budget:
            break
        if cand not in pool:
            pool.append(cand)

    scored: list[tuple[str, float, float]] = []
    failures = 0
    for cand in pool:
        try:
            train_acc = score_candidate(cand, train, provider, labels)
            val_acc = score_candidate(cand, val, provider, labels)
        except ProviderError as exc:
            logger.warning("candidate failed to score: %s", exc)
            failures += 1
            continue
        scored.append((cand, train_acc, val_acc))
        logger.info("candidate scored train=%.3f val=%.3f: %.60s", train_acc, val_acc, cand)
    if not scored:
        raise DiscoveryError(f"all {failures} candidates failed to score")

    best = min(scored, key=lambda item: (-item[2], item[0] != seed, item[0]))
    return PriorArtifact(
        model_id=provider.model_id,
        instruction=best[0],
        seed_instruction=seed,
        val_accuracy=best[2],
        created=datetime.now(timezone.utc).isoformat(),
    )
