"""Inter-stock relation graphs: industry co-membership and institutional co-ownership.

Both builders produce symmetric association matrices in [0, 1] with unit
diagonal. Industry weight is a binary same-sector indicator; institutional
weight is the Jaccard similarity of holder sets. Neither is row-normalized:
the learnable attention-bias scale absorbs magnitude.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

_FMT = "%.17g"

KIND_INDUSTRY = "industry"
KIND_INSTITUTION = "institution"
_KINDS = (KIND_INDUSTRY, KIND_INSTITUTION)


@dataclass(frozen=True)
class RelationGraph:
    """Symmetric N x N association-strength matrix over an ordered ticker list."""

    tickers: tuple[str, ...]
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"relation kind must be one of {_KINDS}, got {self.kind!r}")
        n = len(self.tickers)
        if self.weights.shape != (n, n):
            raise ValueError(f"weights shaped {self.weights.shape}, expected ({n}, {n})")
        self.weights.flags.writeable = False

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    def reordered(self, order: np.ndarray) -> "RelationGraph":
        """Graph with rows/columns (and tickers) permuted by ``order``."""
        return RelationGraph(
            tickers=tuple(self.tickers[i] for i in order),
            weights=self.weights[np.ix_(order, order)].copy(),
            kind=self.kind,
        )


def load_membership_csv(path: str, schema: str) -> dict:
    """Read an affiliation file.

    ``industry`` schema (header ``ticker,sector``) maps ticker -> sector id;
    a ticker listed twice is an error. ``holdings`` schema (header
    ``ticker,institution`` with an optional trailing ``weight`` column that is
    ignored) maps ticker -> set of institution ids.
    """
    if schema not in ("industry", "holdings"):
        raise ValueError(f"unknown membership schema {schema!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if schema == "industry":
            if header != ["ticker", "sector"]:
                raise ValueError(f"{path}: expected header ticker,sector, got {header}")
            sectors: dict[str, str] = {}
            for row_no, row in enumerate(reader, start=2):
                if len(row) != 2:
                    raise ValueError(f"{path} row {row_no}: expected 2 columns, got {len(row)}")
                ticker, sector = row
                if ticker in sectors:
                    raise ValueError(f"{path} row {row_no}: duplicate ticker {ticker}")
                sectors[ticker] = sector
            return sectors
        if header not in (["ticker", "institution"], ["ticker", "institution", "weight"]):
            raise ValueError(f"{path}: expected header ticker,institution[,weight], got {header}")
        width = len(header)
        holdings: dict[str, set[str]] = {}
        for row_no, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(f"{path} row {row_no}: expected {width} columns, got {len(row)}")
            holdings.setdefault(row[0], set()).add(row[1])
        return holdings


def build_industry_graph(membership: Mapping[str, str], tickers: Iterable[str]) -> RelationGraph:
    """Binary same-sector indicator; unknown tickers keep only the self-loop."""
    tickers = tuple(tickers)
    if not tickers:
        raise ValueError("build_industry_graph: empty ticker list")
    n = len(tickers)
    sectors = [membership.get(t) for t in tickers]
    weights = np.zeros((n, n))
    for i in range(n):
        weights[i, i] = 1.0
        if sectors[i] is None:
            continue
        for j in range(i + 1, n):
            if sectors[j] == sectors[i]:
                weights[i, j] = weights[j, i] = 1.0
    return RelationGraph(tickers=tickers, weights=weights, kind=KIND_INDUSTRY)


def build_institution_graph(holdings: Mapping[str, Iterable[str]], tickers: Iterable[str]) -> RelationGraph:
    """Jaccard similarity of holder sets; 0 when both sets are empty; unit diagonal."""
    tickers = tuple(tickers)
    if not tickers:
        raise ValueError("build_institution_graph: empty ticker list")
    n = len(tickers)
    sets = [frozenset(holdings.get(t, ())) for t in tickers]
    weights = np.zeros((n, n))
    for i in range(n):
        weights[i, i] = 1.0
        for j in range(i + 1, n):
            union = len(sets[i] | sets[j])
            if union:
                weights[i, j] = weights[j, i] = len(sets[i] & sets[j]) / union
    return RelationGraph(tickers=tickers, weights=weights, kind=KIND_INSTITUTION)


def validate_relation(graph: RelationGraph, tol: float = 1e-12) -> list[str]:
    """Check symmetry, [0, 1] range, unit diagonal, and finiteness.

    Returns one message per violation (empty list = valid).
    """
    w = graph.weights
    violations: list[str] = []
    bad = np.argwhere(~np.isfinite(w))
    for i, j in bad:
        violations.append(f"non-finite entry at ({i}, {j})")
    asym = np.argwhere(np.abs(w - w.T) > tol)
    for i, j in asym:
        if i < j:
            violations.append(f"symmetry violation at ({i}, {j}): {w[i, j]!r} vs {w[j, i]!r}")
    out_of_range = np.argwhere(np.isfinite(w) & ((w < 0.0) | (w > 1.0)))
    for i, j in out_of_range:
        violations.append(f"range violation at ({i}, {j}): {w[i, j]!r} not in [0, 1]")
    for i in range(graph.n_stocks):
        if not np.isfinite(w[i, i]) or w[i, i] != 1.0:
            violations.append(f"diagonal violation at ({i}, {i}): {w[i, i]!r} != 1")
    return violations


def write_graph_csv(graph: RelationGraph, path: str) -> None:
    """Matrix CSV with a ticker header row and column, 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ticker"] + list(graph.tickers))
        for i, t in enumerate(graph.tickers):
            writer.writerow([t] + [(_FMT % v) for v in graph.weights[i]])


def load_graph_csv(path: str, kind: str) -> RelationGraph:
    """Read a matrix CSV written by :func:`write_graph_csv` and validate it."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "ticker":
            raise ValueError(f"{path}: expected a ticker header row")
        tickers = tuple(header[1:])
        n = len(tickers)
        weights = np.empty((n, n))
        for i, row in enumerate(reader):
            if i >= n or len(row) != n + 1 or row[0] != tickers[i]:
                raise ValueError(f"{path} row {i + 2}: malformed matrix row")
            weights[i] = [float(v) for v in row[1:]]
    graph = RelationGraph(tickers=tickers, weights=weights, kind=kind)
    violations = validate_relation(graph)
    if violations:
        raise ValueError(f"{path}: invalid relation graph: {violations[0]} (+{len(violations) - 1} more)")
    return graph
