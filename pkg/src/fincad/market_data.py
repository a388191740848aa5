"""Daily price ingestion, point-in-time financial summaries, and the
direction-labelled calibration dataset.

Everything here is strictly point-in-time: a summary for date t is computed
from bars dated strictly before t, so downstream consumers can never observe
the price they trade at.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date as Date
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

TRAILING_WINDOWS = {"1m": 21, "3m": 63, "6m": 126, "1y": 252}
SMA_WINDOWS = (20, 50, 200)
EMA_WINDOWS = (12, 26)
VOL_WINDOW = 252
RANGE_WINDOW = 252
POSITIVE_DAYS_WINDOW = 21
DOLLAR_VOLUME_WINDOW = 21
MIN_HISTORY_BARS = 21

DEFAULT_HORIZON = 63
DEFAULT_MIN_ABS_RETURN = 0.05
DEFAULT_CAP = 200
DEFAULT_SPLIT = 0.8


class MissingColumnsError(DataError):
    pass


class RowParseError(DataError):
    pass


class EmptyFileError(DataError):
    pass


class DuplicateDateError(DataError):
    pass


class InsufficientHistoryError(DataError):
    pass


class HorizonError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class PriceBar:
    """One trading day of adjusted prices; volume is optional."""

    date: Date
    open: float
    close: float
    volume: float | None = None

    def __post_init__(self):
        if not (self.open > 0 and math.isfinite(self.open)):
            raise DataError(f"{self.date}: open must be a positive finite number, got {self.open}")
        if not (self.close > 0 and math.isfinite(self.close)):
            raise DataError(f"{self.date}: close must be a positive finite number, got {self.close}")
        if self.volume is not None and not (self.volume >= 0 and math.isfinite(self.volume)):
            raise DataError(f"{self.date}: volume must be non-negative, got {self.volume}")


@dataclass(frozen=True)
class PriceSeries:
    """A ticker's ordered daily bars. Gaps are fine; duplicates are not."""

    ticker: str
    bars: tuple[PriceBar, ...]

    def __post_init__(self):
        object.__setattr__(self, "bars", tuple(sorted(self.bars, key=lambda b: b.date)))
        seen: set[Date] = set()
        for bar in self.bars:
            if bar.date in seen:
                raise DuplicateDateError(f"{self.ticker}: duplicate date {bar.date}")
            seen.add(bar.date)

    @cached_property
    def _index(self) -> dict[Date, int]:
        return {bar.date: i for i, bar in enumerate(self.bars)}

    def index_of(self, t: Date) -> int:
        try:
            return self._index[t]
        except KeyError:
            raise DataError(f"{self.ticker}: {t} is not a trading day in this series") from None

    def bars_before(self, t: Date) -> tuple[PriceBar, ...]:
        """Bars dated strictly before t."""
        lo, hi = 0, len(self.bars)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.bars[mid].date < t:
                lo = mid + 1
            else:
                hi = mid
        return self.bars[:lo]

    def last_trading_day_in(self, start: Date, end: Date) -> Date | None:
        best = None
        for bar in self.bars:
            if start <= bar.date <= end:
                best = bar.date
            elif bar.date > end:
                break
        return best


@dataclass(frozen=True)
class FinancialSummary:
    """Price-derived features as of a date, built from strictly earlier bars."""

    as_of: Date
    latest_close: float
    trailing_returns: dict[str, float]
    sma: dict[int, float]
    ema: dict[int, float]
    realized_vol_annualized: float
    high_52w: float
    low_52w: float
    range_position: float
    positive_days_21: int
    avg_dollar_volume_21: float | None = None


@dataclass(frozen=True)
class CalibrationExample:
    """A (ticker, date) pair with its realized forward-return direction."""

    ticker: str
    date: Date
    label: str  # "up" | "down"
    forward_return: float

    def __post_init__(self):
        if self.label not in ("up", "down"):
            raise DataError(f"label must be 'up' or 'down', got {self.label!r}")
        if (self.forward_return > 0) != (self.label == "up"):
            raise DataError(f"label {self.label!r} inconsistent with forward return {self.forward_return}")
        if abs(self.forward_return) < DEFAULT_MIN_ABS_RETURN:
            raise DataError(f"|forward_return| must be >= {DEFAULT_MIN_ABS_RETURN}, got {self.forward_return}")


def load_price_csv(path: str | Path, ticker: str | None = None) -> PriceSeries:
    """Load a daily price CSV with header date,open,close,volume.

    Extra columns are ignored; a blank or absent volume yields bars without
    volume. Rows are sorted by date; duplicate dates are an error.
    """
    path = Path(path)
    if ticker is None:
        ticker = path.stem.upper()
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not text.strip():
        raise EmptyFileError(f"{path}: file is empty")

    reader = csv.DictReader(text.splitlines())
    fields = [f.strip().lower() for f in (reader.fieldnames or [])]
    reader.fieldnames = fields
    required = {"date", "open", "close"}
    missing = required - set(fields)
    if missing:
        raise MissingColumnsError(f"{path}: missing columns {sorted(missing)}")
    has_volume = "volume" in fields

    bars = []
    for line_no, rec in enumerate(reader, start=2):
        try:
            day = Date.fromisoformat(rec["date"].strip())
        except (ValueError, AttributeError) as exc:
            raise RowParseError(f"{path}:{line_no}: bad date {rec.get('date')!r}: {exc}") from exc
        try:
            open_ = float(rec["open"])
            close = float(rec["close"])
        except (TypeError, ValueError) as exc:
            raise RowParseError(f"{path}:{line_no}: bad price: {exc}") from exc
        volume: float | None = None
        if has_volume:
            raw = (rec.get("volume") or "").strip()
            if raw:
                try:
                    volume = float(raw)
                except ValueError as exc:
                    raise RowParseError(f"{path}:{line_no}: bad volume {raw!r}: {exc}") from exc
        try:
            bars.append(PriceBar(date=day, open=open_, close=close, volume=volume))
        except DataError as exc:
            raise RowParseError(f"{path}:{line_no}: {exc}") from exc
    if not bars:
        raise EmptyFileError(f"{path}: no data rows")
    return PriceSeries(ticker=ticker, bars=tuple(bars))


def _ema(closes: Sequence[float], window: int) -> float:
    alpha = 2.0 / (window + 1.0)
    value = closes[0]
    for c in closes[1:]:
        value = alpha * c + (1.0 - alpha) * value
    return value


def build_summary(series: PriceSeries, as_of: Date) -> FinancialSummary:
    """Summarize the series as of a date using only strictly earlier bars.

    Requires at least 21 prior bars; fields whose window exceeds the
    available history are simply omitted from their mapping.
    """
    prior = series.bars_before(as_of)
    n = len(prior)
    if n < MIN_HISTORY_BARS:
        raise InsufficientHistoryError(
            f"{series.ticker}: need at least {MIN_HISTORY_BARS} bars before {as_of}, have {n}"
        )
    closes = np.array([b.close for b in prior])
    latest = float(closes[-1])

    trailing = {}
    for name, window in TRAILING_WINDOWS.items():
        if n >= window + 1:
            trailing[name] = float(latest / closes[-window - 1] - 1.0)

    sma = {w: float(closes[-w:].mean()) for w in SMA_WINDOWS if n >= w}
    ema = {w: _ema(closes[-w:], w) for w in EMA_WINDOWS if n >= w}

    returns = closes[1:] / closes[:-1] - 1.0
    vol_returns = returns[-VOL_WINDOW:]
    vol = float(vol_returns.std() * math.sqrt(252.0)) if len(vol_returns) >= 2 else 0.0

    window_bars = prior[-RANGE_WINDOW:]
    highs = max(b.close for b in window_bars)
    lows = min(b.close for b in window_bars)
    # Degenerate 52-week range (high == low) sits at 0.5 by convention.
    range_position = 0.5 if highs == lows else (latest - lows) / (highs - lows)

    recent = prior[-POSITIVE_DAYS_WINDOW:]
    positive_days = sum(1 for b in recent if b.close > b.open)

    dollar_bars = prior[-DOLLAR_VOLUME_WINDOW:]
    if all(b.volume is not None for b in dollar_bars):
        avg_dollar_volume = float(np.mean([b.close * b.volume for b in dollar_bars]))
    else:
        avg_dollar_volume = None

    return FinancialSummary(
        as_of=as_of,
        latest_close=latest,
        trailing_returns=trailing,
        sma=sma,
        ema=ema,
        realized_vol_annualized=vol,
        high_52w=float(highs),
        low_52w=float(lows),
        range_position=float(range_position),
        positive_days_21=positive_days,
        avg_dollar_volume_21=avg_dollar_volume,
    )


def forward_return(series: PriceSeries, t: Date, horizon: int = DEFAULT_HORIZON) -> float:
    """Fractional close-to-close return over the next `horizon` trading days."""
    i = series.index_of(t)
    j = i + horizon
    if j >= len(series.bars):
        raise HorizonError(
            f"{series.ticker}: need {horizon} bars after {t}, have {len(series.bars) - 1 - i}"
        )
    p0 = series.bars[i].close
    p1 = series.bars[j].close
    return (p1 - p0) / p0


def quarter_ends(first_year: int, last_year: int) -> list[Date]:
    """Calendar quarter-end dates for the inclusive year range."""
    ends = []
    for year in range(first_year, last_year + 1):
        for month, day in ((3, 31), (6, 30), (9, 30), (12, 31)):
            ends.append(Date(year, month, day))
    return ends


def _quarter_start(q_end: Date) -> Date:
    return Date(q_end.year, q_end.month - 2, 1)


def build_calibration_dataset(
    universe: Sequence[PriceSeries],
    period: tuple[int, int] = (2005, 2015),
    cap: int = DEFAULT_CAP,
    split: float = DEFAULT_SPLIT,
    horizon: int = DEFAULT_HORIZON,
    min_abs_return: float = DEFAULT_MIN_ABS_RETURN,
    seed: int = 42,
) -> tuple[list[CalibrationExample], list[CalibrationExample]]:
    """Sample quarter-end direction examples and split them train/val.

    Dates are the last trading day of each calendar quarter in the period;
    examples with |forward return| below the threshold are discarded, the
    classes are balanced by deterministically downsampling the majority
    (keep the first k in (ticker, date) order), the total is capped, and the
    final list is shuffled with the given seed before the 80/20 split.
    """
    if not universe:
        raise DataError("empty universe")
    candidates: list[CalibrationExample] = []
    for series in universe:
        for q_end in quarter_ends(*period):
            t = series.last_trading_day_in(_quarter_start(q_end), q_end)
            if t is None:
                continue
            try:
                r = forward_return(series, t, horizon)
            except DataError:
                continue
            if abs(r) < min_abs_return:
                continue
            label = "up" if r > 0 else "down"
            candidates.append(CalibrationExample(ticker=series.ticker, date=t, label=label, forward_return=r))

    if not candidates:
        raise EmptyDatasetError("no calibration examples survive the return filter")

    candidates.sort(key=lambda e: (e.ticker, e.date))
    ups = [e for e in candidates if e.label == "up"]
    downs = [e for e in candidates if e.label == "down"]
    per_class = min(len(ups), len(downs), cap // 2)
    if per_class == 0:
        raise EmptyDatasetError("one direction class is empty after filtering")
    balanced = sorted(ups[:per_class] + downs[:per_class], key=lambda e: (e.ticker, e.date))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(balanced))
    shuffled = [balanced[i] for i in order]
    n_train = int(len(shuffled) * split)
    return shuffled[:n_train], shuffled[n_train:]


def write_calibration_jsonl(examples: Iterable[CalibrationExample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "ticker": ex.ticker,
                        "date": ex.date.isoformat(),
                        "label": ex.label,
                        "forward_return": ex.forward_return,
                    }
                )
                + "\n"
            )


def load_calibration_jsonl(path: str | Path) -> list[CalibrationExample]:
    examples = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            examples.append(
                CalibrationExample(
                    ticker=rec["ticker"],
                    date=Date.fromisoformat(rec["date"]),
                    label=rec["label"],
                    forward_return=float(rec["forward_return"]),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{line_no}: bad calibration example: {exc}") from exc
    if not examples:
        raise EmptyDatasetError(f"{path}: no examples")
    return examples
