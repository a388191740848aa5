"""Event-driven single-stock simulation.

Timing discipline: the agent deciding at date t sees only data strictly
before t; its order executes at the NEXT trading day's adjusted open, and
the portfolio is marked to market at each day's adjusted close. Ledger
arithmetic is integer cents so the accounting identity
value = cash + shares * close holds exactly at every step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date as Date
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .decoder import TradeDecision
from .errors import DataError, UsageError
from .market_data import FinancialSummary, PriceSeries, build_summary

INITIAL_CAPITAL_CENTS = 100_000 * 100
COMMISSION_RATE_MILLI = 1  # 10 basis points = 1/1000 of notional
LIQUIDITY_CAP_FRACTION = 0.01
ADV_WINDOW = 20
RF_ANNUAL = 0.03
DAYS_PER_YEAR = 252


class MetricsError(DataError):
    pass


class WindowError(DataError):
    pass


def to_cents(price: float) -> int:
    return int(round(price * 100))


@dataclass(frozen=True)
class DateRange:
    start: Date
    end: Date

    def __post_init__(self):
        if self.start > self.end:
            raise UsageError(f"window start {self.start} is after end {self.end}")

    def __contains__(self, t: Date) -> bool:
        return self.start <= t <= self.end


@dataclass
class PortfolioState:
    """Long-only ledger in integer cents; never negative on either side."""

    cash_cents: int
    shares: int = 0

    def value_cents(self, close_cents: int) -> int:
        return self.cash_cents + self.shares * close_cents


@dataclass(frozen=True)
class PortfolioView:
    """What the agent is told about its own portfolio (dollars)."""

    cash: float
    shares: int
    value: float


@dataclass(frozen=True)
class AgentStep:
    """One decision plus the decode diagnostics the trace log wants."""

    decision: TradeDecision
    alpha: float = 0.0
    final_alpha: float = 0.0
    retries: int = 0
    raw_text: str = ""


class DecisionSource(Protocol):
    def decide(self, t: Date, summary: FinancialSummary, portfolio: PortfolioView) -> AgentStep: ...


@dataclass(frozen=True)
class BacktestConfig:
    initial_capital_cents: int = INITIAL_CAPITAL_CENTS
    rf_annual: float = RF_ANNUAL
    days_per_year: int = DAYS_PER_YEAR
    is_window: DateRange | None = None
    oos_window: DateRange | None = None


@dataclass(frozen=True)
class DecisionTrace:
    ticker: str
    date: Date
    alpha: float
    final_alpha: float
    retries: int
    action: str
    quantity: int
    confidence: int

    def to_dict(self) -> dict:
        return {
            "ticker": self.ticker,
            "date": self.date.isoformat(),
            "alpha": self.alpha,
            "final_alpha": self.final_alpha,
            "retries": self.retries,
            "action": self.action,
            "quantity": self.quantity,
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class LedgerRow:
    date: Date
    cash_cents: int
    shares: int
    close_cents: int
    value_cents: int


@dataclass(frozen=True)
class Metrics:
    total_return: float
    cagr: float
    vol_annualized: float
    sharpe: float
    sortino: float
    max_drawdown: float
    zero_vol: bool


@dataclass
class BacktestReport:
    ticker: str
    mode: str
    window: DateRange
    dates: list[Date]
    daily_values: list[float]
    ending_value: float
    total_return: float
    cagr: float
    vol_annualized: float
    sharpe: float
    sortino: float
    max_drawdown: float
    buy_and_hold_ending: float
    mean_alpha_is: float | None
    mean_alpha_oos: float | None
    zero_vol: bool
    decisions: list[DecisionTrace] = field(default_factory=list)
    ledger: list[LedgerRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ticker": self.ticker,
            "mode": self.mode,
            "window": {"start": self.window.start.isoformat(), "end": self.window.end.isoformat()},
            "ending_value": self.ending_value,
            "total_return": self.total_return,
            "cagr": self.cagr,
            "vol_annualized": self.vol_annualized,
            "sharpe": self.sharpe,
            "sortino": self.sortino,
            "max_drawdown": self.max_drawdown,
            "buy_and_hold_ending": self.buy_and_hold_ending,
            "mean_alpha_is": self.mean_alpha_is,
            "mean_alpha_oos": self.mean_alpha_oos,
            "zero_vol": self.zero_vol,
            "n_decisions": len(self.decisions),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_equity_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("date,value\n")
            for t, v in zip(self.dates, self.daily_values):
                fh.write(f"{t.isoformat()},{v:.2f}\n")

    def write_trace_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for trace in self.decisions:
                fh.write(json.dumps(trace.to_dict()) + "\n")


def apply_commission(notional_cents: int) -> int:
    """One-way fee of 10 bps of trade notional, rounded to the nearest cent.

    Notional-based, so it is invariant under split adjustment of prices.
    """
    if notional_cents < 0:
        raise UsageError("notional must be >= 0")
    return (notional_cents * COMMISSION_RATE_MILLI + 500) // 1000


def apply_liquidity_cap(requested: int, adv20: float | None) -> int:
    """Clip an order to 1% of trailing 20-day average daily volume.

    The clipped remainder is dropped, never carried over; the cap is
    disabled entirely when volume data is unavailable.
    """
    if requested < 0:
        raise UsageError("requested shares must be >= 0")
    if adv20 is None:
        return requested
    return min(requested, int(math.floor(LIQUIDITY_CAP_FRACTION * adv20)))


def fit_to_cash(requested: int, price_cents: int, cash_cents: int) -> int:
    """Largest share count q <= requested whose notional plus commission
    fits the available cash."""
    if price_cents <= 0:
        raise UsageError("price must be positive")
    if requested <= 0 or cash_cents <= 0:
        return 0

    def fits(q: int) -> bool:
        notional = q * price_cents
        return notional + apply_commission(notional) <= cash_cents

    q = min(requested, (cash_cents * 1000) // (price_cents * (1000 + COMMISSION_RATE_MILLI)))
    while q < requested and fits(q + 1):
        q += 1
    while q > 0 and not fits(q):
        q -= 1
    return q


def trailing_adv(series: PriceSeries, execution_date: Date, window: int = ADV_WINDOW) -> float | None:
    """Average daily volume over the `window` bars strictly before the
    execution date; None when any needed volume is missing."""
    prior = series.bars_before(execution_date)
    if len(prior) < window:
        return None
    tail = prior[-window:]
    if any(b.volume is None for b in tail):
        return None
    return float(np.mean([b.volume for b in tail]))


def compute_metrics(
    daily_values: Sequence[float], rf: float = RF_ANNUAL, days_per_year: int = DAYS_PER_YEAR
) -> Metrics:
    """Performance metrics from a mark-to-market series.

    Zero-volatility series report Sharpe/Sortino of 0 with a flag instead of
    NaN so ranking code stays total. Standard deviations use the population
    convention.
    """
    values = np.asarray(daily_values, dtype=float)
    if values.size < 2:
        raise MetricsError("need at least two daily values")
    returns = values[1:] / values[:-1] - 1.0
    rf_daily = rf / days_per_year
    excess = returns - rf_daily

    std = float(returns.std())
    vol = std * math.sqrt(days_per_year)
    zero_vol = std == 0.0
    sharpe = 0.0 if zero_vol else float(excess.mean() * math.sqrt(days_per_year) / std)

    downside = float(np.sqrt(np.mean(np.square(np.minimum(excess, 0.0)))))
    sortino = 0.0 if downside == 0.0 else float(excess.mean() * math.sqrt(days_per_year) / downside)

    years = (values.size - 1) / days_per_year
    cagr = float((values[-1] / values[0]) ** (1.0 / years) - 1.0)

    peaks = np.maximum.accumulate(values)
    max_drawdown = float(np.max(1.0 - values / peaks))

    return Metrics(
        total_return=float(values[-1] / values[0] - 1.0),
        cagr=cagr,
        vol_annualized=vol,
        sharpe=sharpe,
        sortino=sortino,
        max_drawdown=max_drawdown,
        zero_vol=zero_vol,
    )


def _window_bars(series: PriceSeries, window: DateRange) -> list:
    bars = [b for b in series.bars if b.date in window]
    if len(bars) < 2:
        raise WindowError(f"{series.ticker}: window {window.start}..{window.end} has fewer than 2 trading days")
    return bars


def _require_execution_day(series: PriceSeries, window: DateRange, bars: list) -> None:
    last_idx = series.index_of(bars[-1].date)
    if last_idx + 1 >= len(series.bars):
        raise WindowError(
            f"{series.ticker}: series must cover one execution day beyond {window.end}"
        )


def buy_and_hold(series: PriceSeries, window: DateRange, capital_cents: int = INITIAL_CAPITAL_CENTS) -> int:
    """All-in purchase at the first execution open, held to the final close,
    with commission charged on the initial purchase. Returns ending cents."""
    bars = _window_bars(series, window)
    open_cents = to_cents(bars[1].open)
    q = fit_to_cash(capital_cents // max(open_cents, 1) + 1, open_cents, capital_cents)
    notional = q * open_cents
    cash = capital_cents - notional - apply_commission(notional)
    return cash + q * to_cents(bars[-1].close)


def run_backtest(
    series: PriceSeries,
    agent: DecisionSource,
    window: DateRange,
    mode: str,
    config: BacktestConfig = BacktestConfig(),
) -> BacktestReport:
    """Run the event loop over every trading day of the window.

    Each day: execute yesterday's pending order at today's open (commission
    and liquidity cap applied), ask the agent for a new decision built on
    strictly-pre-date data, then mark to market at the close. The final
    day's decision would execute beyond the window, which the series must
    cover even though no mark observes it.
    """
    bars = _window_bars(series, window)
    _require_execution_day(series, window, bars)

    portfolio = PortfolioState(cash_cents=config.initial_capital_cents)
    pending: TradeDecision | None = None
    dates: list[Date] = []
    values: list[float] = []
    ledger: list[LedgerRow] = []
    traces: list[DecisionTrace] = []
    alphas: list[tuple[Date, float]] = []

    for i, bar in enumerate(bars):
        open_cents = to_cents(bar.open)
        if pending is not None and pending.action != "hold" and pending.quantity > 0:
            adv = trailing_adv(series, bar.date)
            if pending.action == "buy":
                q = apply_liquidity_cap(pending.quantity, adv)
                q = fit_to_cash(q, open_cents, portfolio.cash_cents)
                if q > 0:
                    notional = q * open_cents
                    portfolio.cash_cents -= notional + apply_commission(notional)
                    portfolio.shares += q
            else:  # sell, capped at holdings; shorting is disabled
                q = min(pending.quantity, portfolio.shares)
                q = apply_liquidity_cap(q, adv)
                if q > 0:
                    notional = q * open_cents
                    portfolio.cash_cents += notional - apply_commission(notional)
                    portfolio.shares -= q
        pending = None

        summary = build_summary(series, bar.date)
        mark_cents = to_cents(bars[i - 1].close) if i > 0 else None
        view_value_cents = (
            portfolio.value_cents(mark_cents) if mark_cents is not None else portfolio.cash_cents
        )
        view = PortfolioView(
            cash=portfolio.cash_cents / 100.0,
            shares=portfolio.shares,
            value=view_value_cents / 100.0,
        )
        step = agent.decide(bar.date, summary, view)
        pending = step.decision
        alphas.append((bar.date, step.alpha))
        traces.append(
            DecisionTrace(
                ticker=series.ticker,
                date=bar.date,
                alpha=step.alpha,
                final_alpha=step.final_alpha,
                retries=step.retries,
                action=step.decision.action,
                quantity=step.decision.quantity,
                confidence=step.decision.confidence,
            )
        )

        close_cents = to_cents(bar.close)
        value_cents = portfolio.value_cents(close_cents)
        dates.append(bar.date)
        values.append(value_cents / 100.0)
        ledger.append(
            LedgerRow(
                date=bar.date,
                cash_cents=portfolio.cash_cents,
                shares=portfolio.shares,
                close_cents=close_cents,
                value_cents=value_cents,
            )
        )

    metrics = compute_metrics(values, config.rf_annual, config.days_per_year)

    def bucket_mean(bucket: DateRange | None) -> float | None:
        if bucket is None:
            return None
        inside = [a for t, a in alphas if t in bucket]
        return float(np.mean(inside)) if inside else None

    return BacktestReport(
        ticker=series.ticker,
        mode=mode,
        window=window,
        dates=dates,
        daily_values=values,
        ending_value=values[-1],
        total_return=metrics.total_return,
        cagr=metrics.cagr,
        vol_annualized=metrics.vol_annualized,
        sharpe=metrics.sharpe,
        sortino=metrics.sortino,
        max_drawdown=metrics.max_drawdown,
        buy_and_hold_ending=buy_and_hold(series, window, config.initial_capital_cents) / 100.0,
        mean_alpha_is=bucket_mean(config.is_window),
        mean_alpha_oos=bucket_mean(config.oos_window),
        zero_vol=metrics.zero_vol,
        decisions=traces,
        ledger=ledger,
    )
