"""Probe entropies, per-entity statistics, model profiling, and the
entity/date-adaptive contrast strength.

The penalty is the product of two scaled factors, clamped into a bound:
a date-variance scale (entities whose probe confidence swings across dates
are memorized, not brand-driven) and a per-date excess-confidence scale
(the penalty only fires where the model is more confident than its own
average for that entity). Post-cutoff dates probe at high entropy, so the
excess-confidence factor hits zero and the penalty vanishes out of sample.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from datetime import date as Date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError
from .gateway import LabelSet, Provider, label_logit, next_logits
from .prompts import PriorArtifact, assemble_probe

#: Default per-entity calibration dates: mid-quarter days (Q2/Q4) of six
#: years spread across 2006-2015, fixed and entity-agnostic.
DEFAULT_CALIBRATION_DATES: tuple[Date, ...] = tuple(
    Date(year, month, 15) for year in (2007, 2008, 2009, 2012, 2013, 2014) for month in (5, 11)
)

DEFAULT_ALPHA_MIN = 0.0
DEFAULT_ALPHA_MAX = 2.0
DEFAULT_ALPHA_CAP = 4.0

_LN2 = math.log(2.0)


class ProfileError(DataError):
    pass


@dataclass(frozen=True)
class ProbeResult:
    """Per-label logits and the normalized directional entropy of one probe."""

    l_up: float
    l_down: float
    p_up: float
    p_down: float
    entropy: float


@dataclass(frozen=True)
class EntityStats:
    """Mean and spread of an entity's probe entropy across calibration dates."""

    ticker: str
    mean_entropy: float
    std_entropy: float
    n_dates: int

    def to_dict(self) -> dict:
        return {
            "ticker": self.ticker,
            "mean_entropy": self.mean_entropy,
            "std_entropy": self.std_entropy,
            "n_dates": self.n_dates,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EntityStats":
        try:
            rec = json.loads(Path(path).read_text())
            return cls(
                ticker=rec["ticker"],
                mean_entropy=float(rec["mean_entropy"]),
                std_entropy=float(rec["std_entropy"]),
                n_dates=int(rec["n_dates"]),
            )
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot load entity stats {path}: {exc}") from exc


@dataclass(frozen=True)
class ModelProfile:
    """Model-wide normalisation constants and penalty bounds."""

    sigma_ref: float
    delta_range: float
    alpha_min: float = DEFAULT_ALPHA_MIN
    alpha_max: float = DEFAULT_ALPHA_MAX
    alpha_cap: float = DEFAULT_ALPHA_CAP

    def __post_init__(self):
        if not self.sigma_ref > 0:
            raise ProfileError(f"sigma_ref must be > 0, got {self.sigma_ref}")
        if not self.delta_range > 0:
            raise ProfileError(f"delta_range must be > 0, got {self.delta_range}")
        if self.alpha_min < 0:
            raise UsageError("alpha_min must be >= 0")
        if not self.alpha_max > 0 or not self.alpha_cap > 0:
            raise UsageError("alpha_max and alpha_cap must be > 0")
        if self.alpha_min > self.alpha_cap:
            raise UsageError("alpha_min must not exceed alpha_cap")

    def to_dict(self) -> dict:
        return {
            "sigma_ref": self.sigma_ref,
            "delta_range": self.delta_range,
            "alpha_min": self.alpha_min,
            "alpha_max": self.alpha_max,
            "alpha_cap": self.alpha_cap,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelProfile":
        try:
            rec = json.loads(Path(path).read_text())
            return cls(
                sigma_ref=float(rec["sigma_ref"]),
                delta_range=float(rec["delta_range"]),
                alpha_min=float(rec["alpha_min"]),
                alpha_max=float(rec["alpha_max"]),
                alpha_cap=float(rec["alpha_cap"]),
            )
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot load model profile {path}: {exc}") from exc


def normalized_entropy(l_up: float, l_down: float) -> float:
    """Binary entropy of softmax([l_up, l_down]), normalized into [0, 1].

    0 log 0 is taken as 0 by continuity; equal logits give exactly 1.0.
    Symmetric under swapping the two logits.
    """
    diff = l_up - l_down
    # sigmoid computed from the side that avoids overflow
    if diff >= 0:
        p_up = 1.0 / (1.0 + math.exp(-diff))
    else:
        e = math.exp(diff)
        p_up = e / (1.0 + e)
    p_down = 1.0 - p_up
    h = 0.0
    for p in (p_up, p_down):
        if p > 0.0:
            h -= p * math.log(p)
    return min(1.0, max(0.0, h / _LN2))


def probe_entropy(
    provider: Provider,
    artifact: PriorArtifact | None,
    ticker: str,
    t: Date,
    labels: tuple[LabelSet, LabelSet],
) -> ProbeResult:
    """One forward pass on the completion probe; logits are read, not sampled."""
    up, down = labels
    vec = next_logits(provider, assemble_probe(artifact, ticker, t))
    l_up = label_logit(vec, up)
    l_down = label_logit(vec, down)
    diff = l_up - l_down
    if diff >= 0:
        p_up = 1.0 / (1.0 + math.exp(-diff))
    else:
        e = math.exp(diff)
        p_up = e / (1.0 + e)
    return ProbeResult(
        l_up=l_up,
        l_down=l_down,
        p_up=p_up,
        p_down=1.0 - p_up,
        entropy=normalized_entropy(l_up, l_down),
    )


def calibrate_entity(
    provider: Provider,
    artifact: PriorArtifact | None,
    ticker: str,
    dates: Sequence[Date] = DEFAULT_CALIBRATION_DATES,
    labels: tuple[LabelSet, LabelSet] | None = None,
) -> EntityStats:
    """Probe an entity across the fixed calibration dates.

    The spread uses the population convention (divide by N). Any probe
    failure aborts the whole calibration for this entity.
    """
    if not dates:
        raise UsageError("calibration dates must be non-empty")
    if labels is None:
        raise UsageError("label sets are required")
    entropies = np.array([probe_entropy(provider, artifact, ticker, t, labels).entropy for t in dates])
    return EntityStats(
        ticker=ticker,
        mean_entropy=float(entropies.mean()),
        std_entropy=float(entropies.std()),
        n_dates=len(dates),
    )


def profile_model(
    provider: Provider,
    artifact: PriorArtifact | None,
    in_sample_pairs: Sequence[tuple[str, Date]],
    out_of_sample_pairs: Sequence[tuple[str, Date]],
    labels: tuple[LabelSet, LabelSet],
    alpha_min: float = DEFAULT_ALPHA_MIN,
    alpha_max: float = DEFAULT_ALPHA_MAX,
    alpha_cap: float = DEFAULT_ALPHA_CAP,
) -> ModelProfile:
    """One-time profiling pass over representative (entity, date) pairs.

    sigma_ref is the population std of the out-of-sample entropy
    distribution (the natural date-variance with no memory available);
    delta_range is the in-sample entropy std. No outcome labels are read.
    """
    if not in_sample_pairs or not out_of_sample_pairs:
        raise UsageError("both pair sets must be non-empty")
    is_entropy = np.array(
        [probe_entropy(provider, artifact, s, t, labels).entropy for s, t in in_sample_pairs]
    )
    oos_entropy = np.array(
        [probe_entropy(provider, artifact, s, t, labels).entropy for s, t in out_of_sample_pairs]
    )
    sigma_ref = float(oos_entropy.std())
    delta_range = float(is_entropy.std())
    if sigma_ref == 0.0:
        raise ProfileError(
            "out-of-sample entropy distribution has zero spread; probe more pairs or check that "
            "the pairs really are post-cutoff"
        )
    if delta_range == 0.0:
        raise ProfileError(
            "in-sample entropy distribution has zero spread; probe a wider set of in-sample pairs"
        )
    return ModelProfile(
        sigma_ref=sigma_ref,
        delta_range=delta_range,
        alpha_min=alpha_min,
        alpha_max=alpha_max,
        alpha_cap=alpha_cap,
    )


def adaptive_alpha(stats: EntityStats, probe: ProbeResult, profile: ModelProfile) -> float:
    """Entity/date-adaptive contrast strength.

    Two multiplicative factors: date-variance scale s_sigma = min(1,
    sigma_s / sigma_ref) and per-date excess confidence s_h = max(0,
    (mean_entropy - entropy) / delta_range); the product is scaled by
    alpha_max and clamped into [alpha_min, alpha_cap].
    """
    s_sigma = min(1.0, stats.std_entropy / profile.sigma_ref)
    s_h = max(0.0, (stats.mean_entropy - probe.entropy) / profile.delta_range)
    return max(profile.alpha_min, min(profile.alpha_max * s_sigma * s_h, profile.alpha_cap))


def write_probe_trace(
    path: str | Path, records: Iterable[tuple[str, Date, ProbeResult, float]]
) -> None:
    """Append-style CSV of probe traces: (ticker,date,l_up,l_down,entropy,alpha)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ticker", "date", "l_up", "l_down", "entropy", "alpha"])
        for ticker, t, probe, alpha in records:
            writer.writerow([ticker, t.isoformat(), probe.l_up, probe.l_down, probe.entropy, alpha])
