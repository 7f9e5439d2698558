"""Ranking metrics, top-k daily backtest, portfolio statistics, gate analysis.

All statistics are recomputable from the stored daily series; ratio metrics
with a zero-variance denominator are reported as undefined rather than
silently zeroed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import FeaturePanel, windows_for_targets
from .model import GriffinModel, forward
from .relations import RelationGraph

TRADING_DAYS_PER_YEAR = 252
DEFAULT_TOP_K = 30
EXTREME_FRACTION = 0.05


@dataclass(frozen=True)
class DailyPrediction:
    """One date's aligned (ticker, predicted score, realized return) vectors."""

    date: str
    tickers: tuple[str, ...]
    scores: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        n = len(self.tickers)
        if len(set(self.tickers)) != n:
            raise ValueError(f"{self.date}: duplicate tickers in daily prediction")
        if self.scores.shape != (n,) or self.returns.shape != (n,):
            raise ValueError(f"{self.date}: score/return vectors must both have length {n}")

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        raise ValueError("correlation needs at least 2 observations")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = math.sqrt(float(xd @ xd))
    sy = math.sqrt(float(yd @ yd))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant vector")
    return float(xd @ yd) / (sx * sy)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def ic(day: DailyPrediction) -> float:
    """Pearson correlation between predicted scores and realized returns."""
    return _pearson(day.scores, day.returns)


def rank_ic(day: DailyPrediction) -> float:
    """Spearman correlation: Pearson on average-ranked vectors."""
    return _pearson(average_ranks(day.scores), average_ranks(day.returns))


def icir(daily_values: Sequence[float], window: int | None = None) -> float:
    """Mean of the daily series divided by its sample standard deviation.

    With ``window`` set, the ratio is computed per rolling window and the
    ratios are averaged (any window with zero deviation is an error, as for
    the full-period form).
    """
    arr = np.asarray(daily_values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("icir needs at least 2 daily values")
    if window is None:
        std = arr.std(ddof=1)
        if std == 0.0:
            raise ValueError("icir undefined: zero standard deviation")
        return float(arr.mean() / std)
    if not 2 <= window <= arr.size:
        raise ValueError(f"icir window {window} invalid for {arr.size} values")
    ratios = []
    for start in range(arr.size - window + 1):
        chunk = arr[start : start + window]
        std = chunk.std(ddof=1)
        if std == 0.0:
            raise ValueError(f"icir undefined: zero standard deviation in window starting at {start}")
        ratios.append(chunk.mean() / std)
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BacktestResult:
    """Daily equal-weighted portfolio and benchmark (universe-mean) returns."""

    dates: tuple[str, ...]
    portfolio_returns: np.ndarray
    benchmark_returns: np.ndarray

    def __post_init__(self):
        d = len(self.dates)
        if self.portfolio_returns.shape != (d,) or self.benchmark_returns.shape != (d,):
            raise ValueError("backtest series must align with the date list")

    @property
    def excess_returns(self) -> np.ndarray:
        return self.portfolio_returns - self.benchmark_returns


@dataclass
class PortfolioStats:
    """Annualized summary statistics; ratios undefined at zero variance are
    None with the reason recorded in ``errors``."""

    annualized_excess_return: float
    information_ratio: float | None
    sharpe_ratio: float | None
    cumulative_return: float
    annualized_volatility: float
    errors: dict[str, str] = field(default_factory=dict)


def backtest_topk(days: Sequence[DailyPrediction], k: int = DEFAULT_TOP_K) -> BacktestResult:
    """Daily simulation holding the k highest-scored stocks, equal weighted.

    Score ties break by ticker lexicographic order so selection is
    deterministic under any stock reordering. The benchmark is the
    equal-weighted mean return over all stocks of the day.
    """
    if k < 1:
        raise ValueError(f"backtest_topk: k must be >= 1, got {k}")
    if not days:
        raise ValueError("backtest_topk: no days supplied")
    portfolio = np.empty(len(days))
    benchmark = np.empty(len(days))
    for d, day in enumerate(days):
        if day.n_stocks < k:
            raise ValueError(f"backtest_topk: only {day.n_stocks} stocks on {day.date}, need {k}")
        chosen = sorted(range(day.n_stocks), key=lambda i: (-day.scores[i], day.tickers[i]))[:k]
        portfolio[d] = day.returns[chosen].mean()
        benchmark[d] = day.returns.mean()
    return BacktestResult(
        dates=tuple(day.date for day in days),
        portfolio_returns=portfolio,
        benchmark_returns=benchmark,
    )


def portfolio_stats(
    result: BacktestResult,
    risk_free_daily: float = 0.0,
    periods_per_year: int = TRADING_DAYS_PER_YEAR,
) -> PortfolioStats:
    """Arithmetic-annualized excess return, information ratio, Sharpe ratio,
    cumulative return and annualized volatility of the portfolio series."""
    p = result.portfolio_returns
    if p.size < 2:
        raise ValueError("portfolio_stats needs at least 2 days")
    excess = result.excess_returns
    errors: dict[str, str] = {}

    ar = float(periods_per_year * excess.mean())
    ex_std = excess.std(ddof=1)
    if ex_std == 0.0:
        ir = None
        errors["information_ratio"] = "zero standard deviation of excess returns"
    else:
        ir = float(excess.mean() / ex_std * math.sqrt(periods_per_year))
    net = p - risk_free_daily
    net_std = net.std(ddof=1)
    if net_std == 0.0:
        sharpe = None
        errors["sharpe_ratio"] = "zero standard deviation of portfolio returns"
    else:
        sharpe = float(net.mean() / net_std * math.sqrt(periods_per_year))
    cumulative = float(np.prod(1.0 + p) - 1.0)
    vol = float(p.std(ddof=1) * math.sqrt(periods_per_year))
    return PortfolioStats(
        annualized_excess_return=ar,
        information_ratio=ir,
        sharpe_ratio=sharpe,
        cumulative_return=cumulative,
        annualized_volatility=vol,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# gate analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateTrace:
    """Per-day, per-stock, per-relation gate activations, shape (D, N, 2)
    with relations ordered ("ind", "inst")."""

    dates: tuple[str, ...]
    tickers: tuple[str, ...]
    gates: np.ndarray

    def __post_init__(self):
        if self.gates.shape != (len(self.dates), len(self.tickers), 2):
            raise ValueError(f"gate trace shaped {self.gates.shape}, expected (dates, stocks, 2)")


@dataclass
class GateReport:
    """Per-date mean gates, the extreme-day groups, and per-group means."""

    dates: tuple[str, ...]
    mean_gates: np.ndarray  # (D, 2): columns ind, inst
    up_dates: tuple[str, ...]
    down_dates: tuple[str, ...]
    group_means: dict[tuple[str, str], float]  # (group, relation) -> mean

    def group_of(self, date: str) -> str:
        if date in self.up_dates:
            return "up"
        if date in self.down_dates:
            return "down"
        return "normal"


def gate_analysis(trace: GateTrace, benchmark_returns: Mapping[str, float]) -> GateReport:
    """Split trace dates into extreme-up / extreme-down / normal groups by
    benchmark return and summarize gate levels per group and relation.

    Each extreme group holds ceil(5% of D) dates; ties break toward earlier
    dates, and the down group is drawn from dates not already taken by the
    up group, so the two are disjoint by construction.
    """
    if len(trace.dates) == 0:
        raise ValueError("gate_analysis: empty trace")
    missing = [d for d in trace.dates if d not in benchmark_returns]
    if missing:
        raise ValueError(f"gate_analysis: no benchmark return for date {missing[0]}")
    n_days = len(trace.dates)
    m = math.ceil(EXTREME_FRACTION * n_days)
    if 2 * m > n_days:
        raise ValueError(f"gate_analysis: {n_days} dates cannot supply two disjoint groups of {m}")
    rets = {d: benchmark_returns[d] for d in trace.dates}
    up = sorted(trace.dates, key=lambda d: (-rets[d], d))[:m]
    remaining = [d for d in trace.dates if d not in set(up)]
    down = sorted(remaining, key=lambda d: (rets[d], d))[:m]

    mean_gates = trace.gates.mean(axis=1)  # (D, 2)
    groups = {"up": set(up), "down": set(down)}
    groups["normal"] = set(trace.dates) - groups["up"] - groups["down"]
    group_means: dict[tuple[str, str], float] = {}
    for group, members in groups.items():
        idx = [i for i, d in enumerate(trace.dates) if d in members]
        for r, relation in enumerate(("ind", "inst")):
            if idx:
                group_means[(group, relation)] = float(trace.gates[idx, :, r].mean())
    return GateReport(
        dates=trace.dates,
        mean_gates=mean_gates,
        up_dates=tuple(sorted(up)),
        down_dates=tuple(sorted(down)),
        group_means=group_means,
    )


# ---------------------------------------------------------------------------
# end-to-end evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Mean daily ranking metrics plus annualized portfolio metrics."""

    ic: float | None
    icir: float | None
    rank_ic: float | None
    rank_icir: float | None
    annualized_excess_return: float | None
    information_ratio: float | None
    n_days: int
    n_skipped: int
    daily: list[dict]
    backtest: BacktestResult
    stats: PortfolioStats


def predict_daily(
    panel: FeaturePanel,
    graphs: tuple[RelationGraph, RelationGraph],
    model: GriffinModel,
    dates: Sequence[str],
    window: int,
) -> tuple[list[DailyPrediction], GateTrace]:
    """Eval-mode forward per target date; gate activations are taken at each
    window's final step (the step belonging to that date)."""
    if not dates:
        raise ValueError("predict_daily: empty date list")
    days: list[DailyPrediction] = []
    gate_rows = []
    for batch in windows_for_targets(panel, window, list(dates)):
        out = forward(batch, graphs, model, mode="eval")
        idx = panel.date_index(batch.target_date)
        days.append(
            DailyPrediction(
                date=batch.target_date,
                tickers=batch.tickers,
                scores=out.predictions,
                returns=panel.raw_returns[idx].copy(),
            )
        )
        gate_rows.append(out.gate_trace[:, -1, :])
    trace = GateTrace(dates=tuple(dates), tickers=panel.tickers, gates=np.stack(gate_rows))
    return days, trace


def evaluate(
    panel: FeaturePanel,
    graphs: tuple[RelationGraph, RelationGraph],
    model: GriffinModel,
    dates: Sequence[str],
    window: int,
    top_k: int = DEFAULT_TOP_K,
    risk_free_daily: float = 0.0,
    periods_per_year: int = TRADING_DAYS_PER_YEAR,
) -> MetricsReport:
    """Daily IC/RankIC series with their stability ratios plus the top-k
    backtest metrics over the given dates.

    Days where either correlation is undefined (constant cross-section) are
    skipped for the ranking metrics and counted in the report; the backtest
    always uses every day.
    """
    if not dates:
        raise ValueError("evaluate: empty evaluation split")
    days, _ = predict_daily(panel, graphs, model, dates, window)
    daily_rows: list[dict] = []
    ics: list[float] = []
    rics: list[float] = []
    skipped = 0
    for day in days:
        row: dict = {"date": day.date, "ic": float("nan"), "rank_ic": float("nan")}
        try:
            row["ic"] = ic(day)
            row["rank_ic"] = rank_ic(day)
            ics.append(row["ic"])
            rics.append(row["rank_ic"])
        except ValueError:
            skipped += 1
        daily_rows.append(row)

    bt = backtest_topk(days, k=top_k)
    stats = portfolio_stats(bt, risk_free_daily=risk_free_daily, periods_per_year=periods_per_year)
    for row, p_ret, b_ret in zip(daily_rows, bt.portfolio_returns, bt.benchmark_returns):
        row["portfolio_return"] = float(p_ret)
        row["benchmark_return"] = float(b_ret)

    def ratio_or_none(series: list[float]) -> float | None:
        try:
            return icir(series)
        except ValueError:
            return None

    return MetricsReport(
        ic=float(np.mean(ics)) if ics else None,
        icir=ratio_or_none(ics) if len(ics) >= 2 else None,
        rank_ic=float(np.mean(rics)) if rics else None,
        rank_icir=ratio_or_none(rics) if len(rics) >= 2 else None,
        annualized_excess_return=stats.annualized_excess_return,
        information_ratio=stats.information_ratio,
        n_days=len(days),
        n_skipped=skipped,
        daily=daily_rows,
        backtest=bt,
        stats=stats,
    )


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _fmt(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    return "%.17g" % value


def write_metrics_report(report: MetricsReport, out_dir: str) -> None:
    """metrics_report.csv (metric,value) and daily_metrics.csv per-day rows."""
    with open(os.path.join(out_dir, "metrics_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        for name, value in (
            ("ic", report.ic),
            ("icir", report.icir),
            ("rank_ic", report.rank_ic),
            ("rank_icir", report.rank_icir),
            ("annualized_excess_return", report.annualized_excess_return),
            ("information_ratio", report.information_ratio),
            ("n_days", float(report.n_days)),
            ("n_skipped_days", float(report.n_skipped)),
        ):
            fh.write(f"{name},{_fmt(value)}\n")
    with open(os.path.join(out_dir, "daily_metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("date,ic,rank_ic,portfolio_return,benchmark_return\n")
        for row in report.daily:
            fh.write(
                f"{row['date']},{_fmt(row['ic'])},{_fmt(row['rank_ic'])},"
                f"{_fmt(row['portfolio_return'])},{_fmt(row['benchmark_return'])}\n"
            )


def write_gate_report(report: GateReport, out_dir: str) -> None:
    """gate_report.csv per-date series and gate_groups.csv per-group means."""
    with open(os.path.join(out_dir, "gate_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("date,mean_gate_ind,mean_gate_inst,group\n")
        for i, date in enumerate(report.dates):
            fh.write(
                f"{date},{_fmt(float(report.mean_gates[i, 0]))},"
                f"{_fmt(float(report.mean_gates[i, 1]))},{report.group_of(date)}\n"
            )
    with open(os.path.join(out_dir, "gate_groups.csv"), "w", encoding="utf-8") as fh:
        fh.write("group,relation,mean_gate\n")
        for (group, relation), value in sorted(report.group_means.items()):
            fh.write(f"{group},{relation},{_fmt(value)}\n")


def write_backtest_report(result: BacktestResult, stats: PortfolioStats, out_dir: str) -> None:
    """backtest_daily.csv series and backtest_stats.csv summary."""
    with open(os.path.join(out_dir, "backtest_daily.csv"), "w", encoding="utf-8") as fh:
        fh.write("date,portfolio_return,benchmark_return\n")
        for date, p_ret, b_ret in zip(result.dates, result.portfolio_returns, result.benchmark_returns):
            fh.write(f"{date},{_fmt(float(p_ret))},{_fmt(float(b_ret))}\n")
    with open(os.path.join(out_dir, "backtest_stats.csv"), "w", encoding="utf-8") as fh:
        fh.write("stat,value\n")
        fh.write(f"annualized_excess_return,{_fmt(stats.annualized_excess_return)}\n")
        fh.write(f"information_ratio,{_fmt(stats.information_ratio)}\n")
        fh.write(f"sharpe_ratio,{_fmt(stats.sharpe_ratio)}\n")
        fh.write(f"cumulative_return,{_fmt(stats.cumulative_return)}\n")
        fh.write(f"annualized_volatility,{_fmt(stats.annualized_volatility)}\n")
