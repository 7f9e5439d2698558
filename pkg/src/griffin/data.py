"""Panel data: CSV ingestion, label preprocessing, windowing, synthetic generation.

A :class:`FeaturePanel` holds per-(date, stock) company features, per-date
market features (index-level, broadcast to all stocks), raw next-period
returns, and — after :func:`preprocess_labels` — cross-sectionally normalized
labels. Panels are immutable: preprocessing returns a new panel.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .relations import RelationGraph, build_industry_graph, build_institution_graph
from .seeding import STREAM_DATA, rng_stream

_FMT = "%.17g"


@dataclass(frozen=True)
class FeaturePanel:
    """Aligned (date, stock) panel. Shapes: company (D, N, dc), market (D, dm),
    raw_returns (D, N), labels (D, N) or None before preprocessing."""

    dates: tuple[str, ...]
    tickers: tuple[str, ...]
    company: np.ndarray
    market: np.ndarray
    raw_returns: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        d, n = len(self.dates), len(self.tickers)
        if self.company.shape[:2] != (d, n):
            raise ValueError(f"company features shaped {self.company.shape}, expected ({d}, {n}, ...)")
        if self.market.shape[0] != d:
            raise ValueError(f"market features shaped {self.market.shape}, expected ({d}, ...)")
        if self.raw_returns.shape != (d, n):
            raise ValueError(f"returns shaped {self.raw_returns.shape}, expected ({d}, {n})")
        if self.labels is not None and self.labels.shape != (d, n):
            raise ValueError(f"labels shaped {self.labels.shape}, expected ({d}, {n})")
        for name, arr in (("company", self.company), ("market", self.market), ("returns", self.raw_returns)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite value in {name} features")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def d_company(self) -> int:
        return self.company.shape[2]

    @property
    def d_market(self) -> int:
        return self.market.shape[1]

    def date_index(self, date: str) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise KeyError(f"date {date} not in panel") from None

    def slice_dates(self, start: int, stop: int) -> "FeaturePanel":
        """Sub-panel over dates[start:stop]."""
        return FeaturePanel(
            dates=self.dates[start:stop],
            tickers=self.tickers,
            company=self.company[start:stop],
            market=self.market[start:stop],
            raw_returns=self.raw_returns[start:stop],
            labels=None if self.labels is None else self.labels[start:stop],
        )

    def window_features(self, start: int, stop: int) -> np.ndarray:
        """(N, T, dc+dm) tensor for dates[start:stop], market broadcast per stock."""
        comp = self.company[start:stop].transpose(1, 0, 2)  # (N, T, dc)
        mkt = np.broadcast_to(
            self.market[start:stop][None, :, :], (self.n_stocks, stop - start, self.d_market)
        )
        return np.concatenate([comp, mkt], axis=2)


@dataclass(frozen=True)
class WindowBatch:
    """One sliding window: features (N, T, dc+dm), targets are the labels at
    the window's final date."""

    features: np.ndarray
    targets: np.ndarray
    dates: tuple[str, ...]
    tickers: tuple[str, ...]

    def __post_init__(self):
        n, t, _ = self.features.shape
        if t != len(self.dates) or t < 1:
            raise ValueError("window dates inconsistent with feature tensor")
        if n != len(self.tickers) or self.targets.shape != (n,):
            raise ValueError("window stock axis inconsistent")

    @property
    def n_stocks(self) -> int:
        return self.features.shape[0]

    @property
    def n_steps(self) -> int:
        return self.features.shape[1]

    @property
    def target_date(self) -> str:
        return self.dates[-1]


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_float(text: str, what: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"row {row}: cannot parse {what} value {text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"row {row}: non-finite {what} value {text!r}")
    return value


def load_panel_csv(
    features_path: str,
    returns_path: str,
    d_company: int = 158,
    d_market: int = 63,
) -> FeaturePanel:
    """Assemble a panel from a features CSV and a returns CSV.

    Alignment is strict: both files must cover exactly the same (date, ticker)
    keys, market columns must agree across all tickers of a date, and any
    malformed row fails with its row number. Dates come out sorted ascending
    and tickers sorted lexicographically.
    """
    expected_header = (
        ["date", "ticker"]
        + [f"c{i}" for i in range(1, d_company + 1)]
        + [f"m{i}" for i in range(1, d_market + 1)]
    )
    feat_rows: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
    with open(features_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise ValueError(
                f"{features_path}: header mismatch, expected {len(expected_header)} columns "
                f"date,ticker,c1..c{d_company},m1..m{d_market}"
            )
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise ValueError(
                    f"{features_path} row {row_no}: expected {len(expected_header)} columns, got {len(row)}"
                )
            key = (row[0], row[1])
            if key in feat_rows:
                raise ValueError(f"{features_path} row {row_no}: duplicate (date, ticker) {key}")
            comp = np.array([_parse_float(v, "feature", row_no) for v in row[2 : 2 + d_company]])
            mkt = np.array([_parse_float(v, "feature", row_no) for v in row[2 + d_company :]])
            feat_rows[key] = (comp, mkt)

    ret_rows: dict[tuple[str, str], float] = {}
    with open(returns_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["date", "ticker", "return"]:
            raise ValueError(f"{returns_path}: header mismatch, expected date,ticker,return")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{returns_path} row {row_no}: expected 3 columns, got {len(row)}")
            key = (row[0], row[1])
            if key in ret_rows:
                raise ValueError(f"{returns_path} row {row_no}: duplicate (date, ticker) {key}")
            ret_rows[key] = _parse_float(row[2], "return", row_no)

    only_feat = set(feat_rows) - set(ret_rows)
    only_ret = set(ret_rows) - set(feat_rows)
    if only_feat or only_ret:
        example = sorted(only_feat or only_ret)[0]
        raise ValueError(
            f"panel misaligned: (date, ticker) {example} present in only one file "
            f"({len(only_feat)} feature-only, {len(only_ret)} return-only keys)"
        )
    if not feat_rows:
        raise ValueError("panel is empty")

    dates = tuple(sorted({d for d, _ in feat_rows}))
    tickers = tuple(sorted({t for _, t in feat_rows}))
    for d in dates:
        for t in tickers:
            if (d, t) not in feat_rows:
                raise ValueError(f"panel has a gap: missing (date, ticker) ({d}, {t})")

    company = np.empty((len(dates), len(tickers), d_company))
    market = np.empty((len(dates), d_market))
    returns = np.empty((len(dates), len(tickers)))
    for i, d in enumerate(dates):
        first_mkt: np.ndarray | None = None
        for j, t in enumerate(tickers):
            comp, mkt = feat_rows[(d, t)]
            company[i, j] = comp
            returns[i, j] = ret_rows[(d, t)]
            if first_mkt is None:
                first_mkt = mkt
                market[i] = mkt
            elif not np.array_equal(first_mkt, mkt):
                raise ValueError(f"market features differ across tickers on date {d}")
    return FeaturePanel(dates=dates, tickers=tickers, company=company, market=market, raw_returns=returns)


def write_panel_csv(panel: FeaturePanel, features_path: str, returns_path: str) -> None:
    """Write a panel back to the two-file CSV format (17 significant digits)."""
    dc, dm = panel.d_company, panel.d_market
    header = (
        ["date", "ticker"]
        + [f"c{i}" for i in range(1, dc + 1)]
        + [f"m{i}" for i in range(1, dm + 1)]
    )
    with open(features_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, d in enumerate(panel.dates):
            mkt = [(_FMT % v) for v in panel.market[i]]
            for j, t in enumerate(panel.tickers):
                writer.writerow([d, t] + [(_FMT % v) for v in panel.company[i, j]] + mkt)
    with open(returns_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "ticker", "return"])
        for i, d in enumerate(panel.dates):
            for j, t in enumerate(panel.tickers):
                writer.writerow([d, t, _FMT % panel.raw_returns[i, j]])


# ---------------------------------------------------------------------------
# label preprocessing
# ---------------------------------------------------------------------------


def winsorize_cross_section(values: np.ndarray, p_lo: float, p_hi: float) -> np.ndarray:
    """Clip to the [Q(p_lo), Q(p_hi)] linear-interpolation quantiles of the input."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("winsorize_cross_section: empty vector")
    if not 0.0 <= p_lo < p_hi <= 1.0:
        raise ValueError(f"winsorize_cross_section: need 0 <= p_lo < p_hi <= 1, got {p_lo}, {p_hi}")
    lo = np.quantile(v, p_lo)
    hi = np.quantile(v, p_hi)
    return np.clip(v, lo, hi)


def zscore_cross_section(values: np.ndarray) -> np.ndarray:
    """(v - mean) / population std; all zeros when the cross-section is degenerate."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("zscore_cross_section: empty vector")
    std = v.std()
    if std < 1e-12:
        return np.zeros_like(v)
    return (v - v.mean()) / std


def preprocess_labels(panel: FeaturePanel, p_lo: float = 0.01, p_hi: float = 0.99) -> FeaturePanel:
    """Per-date winsorize + Z-score of raw returns into ranking labels."""
    labels = np.empty_like(panel.raw_returns)
    for i in range(panel.n_dates):
        labels[i] = zscore_cross_section(winsorize_cross_section(panel.raw_returns[i], p_lo, p_hi))
    return dataclasses.replace(panel, labels=labels)


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def make_windows(panel: FeaturePanel, window: int, stride: int = 1) -> list[WindowBatch]:
    """Sliding windows over the date axis; count = floor((D - T)/stride) + 1."""
    if panel.labels is None:
        raise ValueError("make_windows: preprocess labels before windowing")
    if stride < 1:
        raise ValueError(f"make_windows: stride must be >= 1, got {stride}")
    d = panel.n_dates
    if not 1 <= window <= d:
        raise ValueError(f"make_windows: window length {window} invalid for {d} dates")
    out = []
    for start in range(0, d - window + 1, stride):
        stop = start + window
        out.append(
            WindowBatch(
                features=panel.window_features(start, stop),
                targets=panel.labels[stop - 1].copy(),
                dates=panel.dates[start:stop],
                tickers=panel.tickers,
            )
        )
    return out


def windows_for_targets(panel: FeaturePanel, window: int, target_dates: Sequence[str]) -> list[WindowBatch]:
    """One window per requested target date (history taken from the panel)."""
    if panel.labels is None:
        raise ValueError("windows_for_targets: preprocess labels before windowing")
    out = []
    for date in target_dates:
        idx = panel.date_index(date)
        if idx - window + 1 < 0:
            raise ValueError(f"windows_for_targets: not enough history before {date} for window {window}")
        out.append(
            WindowBatch(
                features=panel.window_features(idx - window + 1, idx + 1),
                targets=panel.labels[idx].copy(),
                dates=panel.dates[idx - window + 1 : idx + 1],
                tickers=panel.tickers,
            )
        )
    return out


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthResult:
    panel: FeaturePanel
    graph_industry: RelationGraph
    graph_institution: RelationGraph
    sectors: dict[str, str]
    holdings: dict[str, frozenset[str]]


def neighbor_average(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Graph-weighted mean of values over each stock's neighbors, self excluded."""
    adj = weights - np.diag(np.diag(weights))
    denom = adj.sum(axis=1)
    out = adj @ values
    nonzero = denom > 0
    out[nonzero] /= denom[nonzero]
    out[~nonzero] = 0.0
    return out


def synth_generate(
    n_stocks: int,
    n_dates: int,
    seed: int,
    signal_strength: float = 0.5,
    noise_std: float = 0.1,
    n_sectors: int = 10,
    n_institutions: int = 20,
    d_company: int = 158,
    d_market: int = 63,
    graphs: tuple[RelationGraph, RelationGraph] | None = None,
    start_date: str = "2020-01-01",
) -> SynthResult:
    """Deterministic synthetic panel with a plantable relational signal.

    Features are i.i.d. standard normal except that company feature column 0
    acts as the signal: each stock's next-period return is
    ``signal_strength * (industry-neighbor average of the signal column) +
    noise``. Because the neighbor average excludes the stock itself, the
    relational structure is what carries the predictive content.
    """
    if n_stocks < 2 or n_dates < 2:
        raise ValueError(f"synth_generate: need n_stocks >= 2 and n_dates >= 2, got {n_stocks}, {n_dates}")
    rng = rng_stream(seed, STREAM_DATA)
    tickers = tuple(f"S{i:04d}" for i in range(n_stocks))
    first = datetime.date.fromisoformat(start_date)
    dates = tuple((first + datetime.timedelta(days=i)).isoformat() for i in range(n_dates))

    if graphs is None:
        sector_of = rng.permutation(n_stocks) % max(n_sectors, 1)
        sectors = {t: f"SEC{sector_of[i]:03d}" for i, t in enumerate(tickers)}
        hold_mask = rng.random((n_stocks, n_institutions)) < 0.25
        holdings = {
            t: frozenset(f"INST{k:03d}" for k in range(n_institutions) if hold_mask[i, k])
            for i, t in enumerate(tickers)
        }
        g_ind = build_industry_graph(sectors, tickers)
        g_inst = build_institution_graph(holdings, tickers)
    else:
        g_ind, g_inst = graphs
        if g_ind.tickers != tickers or g_inst.tickers != tickers:
            raise ValueError("synth_generate: supplied graphs must match generated ticker order")
        sectors = {}
        holdings = {}

    company = rng.standard_normal((n_dates, n_stocks, d_company))
    market = rng.standard_normal((n_dates, d_market))
    noise = rng.standard_normal((n_dates, n_stocks))

    returns = np.empty((n_dates, n_stocks))
    for i in range(n_dates):
        navg = neighbor_average(g_ind.weights, company[i, :, 0])
        returns[i] = signal_strength * navg + noise_std * noise[i]

    panel = FeaturePanel(
        dates=dates, tickers=tickers, company=company, market=market, raw_returns=returns
    )
    return SynthResult(panel=panel, graph_industry=g_ind, graph_institution=g_inst, sectors=sectors, holdings=dict(holdings))


def write_membership_csv(sectors: Mapping[str, str], holdings: Mapping[str, frozenset[str]], industry_path: str, holdings_path: str) -> None:
    """Write the membership files backing the two relation graphs."""
    with open(industry_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ticker", "sector"])
        for t in sorted(sectors):
            writer.writerow([t, sectors[t]])
    with open(holdings_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ticker", "institution"])
        for t in sorted(holdings):
            for inst in sorted(holdings[t]):
                writer.writerow([t, inst])
