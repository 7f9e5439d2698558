"""Command-line entry point: reproducible runs driven by flat config files.

Commands: gen-data, build-graphs, train, evaluate, backtest, analyze-gates.
Configuration is line-oriented ``key = value`` with ``#`` comments; repeated
``--set key=value`` flags override file values, and the fully resolved
config is echoed into the output directory for provenance.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass

from .data import (
    load_panel_csv,
    make_windows,
    preprocess_labels,
    synth_generate,
    write_membership_csv,
    write_panel_csv,
)
from .evaluation import (
    evaluate,
    gate_analysis,
    portfolio_stats,
    backtest_topk,
    predict_daily,
    write_backtest_report,
    write_gate_report,
    write_metrics_report,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .relations import (
    build_industry_graph,
    build_institution_graph,
    load_graph_csv,
    load_membership_csv,
    validate_relation,
    write_graph_csv,
)
from .training import TrainConfig, resolve_splits, train, write_training_log

COMMANDS = ("gen-data", "build-graphs", "train", "evaluate", "backtest", "analyze-gates")


@dataclass
class RunConfig:
    """Every tunable of the pipeline, flat. Empty path values resolve to
    default filenames inside the output directory."""

    # data files
    features_path: str = ""
    returns_path: str = ""
    industry_path: str = ""
    holdings_path: str = ""
    graph_industry_path: str = ""
    graph_institution_path: str = ""
    checkpoint_path: str = ""
    # synthetic generation
    n_stocks: int = 50
    n_dates: int = 120
    n_sectors: int = 10
    n_institutions: int = 20
    signal_strength: float = 0.5
    noise_std: float = 0.1
    # feature widths
    d_company: int = 158
    d_market: int = 63
    # label preprocessing
    winsor_lo: float = 0.01
    winsor_hi: float = 0.99
    # model
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 1
    dropout: float = 0.15
    ffn_multiplier: int = 4
    use_gating: bool = True
    use_relation_bias: bool = True
    use_cross_stock_attention: bool = True
    use_temporal_encoder: bool = True
    # optimization
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    l2_lambda: float = 1e-4
    epochs: int = 10
    batch_windows: int = 1
    grad_clip_norm: float = 5.0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    window: int = 8
    stride: int = 1
    # splits
    train_frac: float = 0.7
    val_frac: float = 0.15
    train_start: str = ""
    train_end: str = ""
    val_start: str = ""
    val_end: str = ""
    test_start: str = ""
    test_end: str = ""
    # evaluation
    top_k: int = 30
    risk_free_daily: float = 0.0
    periods_per_year: int = 252
    # reproducibility
    seed: int = 0


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, text: str):
    if key not in _FIELDS:
        raise ValueError(f"unknown config key: {key}")
    kind = _FIELDS[key].type
    text = text.strip()
    try:
        if kind in ("bool", bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"cannot parse value for config key {key}: {text!r}") from None


def parse_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Read ``key = value`` lines (``#`` comments allowed), then apply CLI
    overrides on top. Unknown keys and unparseable values are errors."""
    values: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path} line {line_no}: expected key = value")
                key, text = line.split("=", 1)
                values[key.strip()] = _coerce(key.strip(), text)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, text = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), text)
    return RunConfig(**values)


def write_resolved_config(cfg: RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config_resolved.cfg"), "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(RunConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


def _path(cfg_value: str, out_dir: str, default_name: str) -> str:
    return cfg_value if cfg_value else os.path.join(out_dir, default_name)


def _load_inputs(cfg: RunConfig, out_dir: str):
    panel = load_panel_csv(
        _path(cfg.features_path, out_dir, "features.csv"),
        _path(cfg.returns_path, out_dir, "returns.csv"),
        d_company=cfg.d_company,
        d_market=cfg.d_market,
    )
    panel = preprocess_labels(panel, cfg.winsor_lo, cfg.winsor_hi)
    g_ind = load_graph_csv(_path(cfg.graph_industry_path, out_dir, "graph_industry.csv"), "industry")
    g_inst = load_graph_csv(
        _path(cfg.graph_institution_path, out_dir, "graph_institution.csv"), "institution"
    )
    return panel, (g_ind, g_inst)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        l2_lambda=cfg.l2_lambda,
        epochs=cfg.epochs,
        batch_windows=cfg.batch_windows,
        seed=cfg.seed,
        grad_clip_norm=cfg.grad_clip_norm,
        pct_start=cfg.pct_start,
        div_factor=cfg.div_factor,
        final_div_factor=cfg.final_div_factor,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps_opt=cfg.eps_opt,
        window=cfg.window,
        stride=cfg.stride,
        train_frac=cfg.train_frac,
        val_frac=cfg.val_frac,
        train_start=cfg.train_start,
        train_end=cfg.train_end,
        val_start=cfg.val_start,
        val_end=cfg.val_end,
    )


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        n_layers=cfg.n_layers,
        dropout=cfg.dropout,
        d_company=cfg.d_company,
        d_market=cfg.d_market,
        ffn_multiplier=cfg.ffn_multiplier,
        use_gating=cfg.use_gating,
        use_relation_bias=cfg.use_relation_bias,
        use_cross_stock_attention=cfg.use_cross_stock_attention,
        use_temporal_encoder=cfg.use_temporal_encoder,
    )


def _test_dates(cfg: RunConfig, panel) -> list[str]:
    if cfg.test_start or cfg.test_end:
        if not (cfg.test_start and cfg.test_end):
            raise ValueError("split range incomplete: need both test_start and test_end")
        dates = [d for d in panel.dates if cfg.test_start <= d <= cfg.test_end]
    else:
        _, _, dates = resolve_splits(panel.dates, _train_config(cfg))
    dates = [d for d in dates if panel.date_index(d) >= cfg.window - 1]
    if not dates:
        raise ValueError("no evaluable test dates (check splits and window length)")
    return dates


def cmd_gen_data(cfg: RunConfig, out_dir: str) -> None:
    result = synth_generate(
        n_stocks=cfg.n_stocks,
        n_dates=cfg.n_dates,
        seed=cfg.seed,
        signal_strength=cfg.signal_strength,
        noise_std=cfg.noise_std,
        n_sectors=cfg.n_sectors,
        n_institutions=cfg.n_institutions,
        d_company=cfg.d_company,
        d_market=cfg.d_market,
    )
    write_panel_csv(
        result.panel,
        _path(cfg.features_path, out_dir, "features.csv"),
        _path(cfg.returns_path, out_dir, "returns.csv"),
    )
    write_membership_csv(
        result.sectors,
        result.holdings,
        _path(cfg.industry_path, out_dir, "industry.csv"),
        _path(cfg.holdings_path, out_dir, "holdings.csv"),
    )
    print(f"generated {cfg.n_dates} dates x {cfg.n_stocks} stocks into {out_dir}")


def cmd_build_graphs(cfg: RunConfig, out_dir: str) -> None:
    import csv as _csv

    returns_path = _path(cfg.returns_path, out_dir, "returns.csv")
    tickers = set()
    with open(returns_path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        next(reader, None)
        for row in reader:
            if len(row) >= 2:
                tickers.add(row[1])
    ticker_order = tuple(sorted(tickers))
    sectors = load_membership_csv(_path(cfg.industry_path, out_dir, "industry.csv"), "industry")
    holdings = load_membership_csv(_path(cfg.holdings_path, out_dir, "holdings.csv"), "holdings")
    g_ind = build_industry_graph(sectors, ticker_order)
    g_inst = build_institution_graph(holdings, ticker_order)
    for g in (g_ind, g_inst):
        violations = validate_relation(g)
        if violations:
            raise ValueError(f"{g.kind} graph failed validation: {violations[0]}")
    write_graph_csv(g_ind, _path(cfg.graph_industry_path, out_dir, "graph_industry.csv"))
    write_graph_csv(g_inst, _path(cfg.graph_institution_path, out_dir, "graph_institution.csv"))
    print(f"built relation graphs over {len(ticker_order)} tickers into {out_dir}")


def cmd_train(cfg: RunConfig, out_dir: str) -> None:
    panel, graphs = _load_inputs(cfg, out_dir)
    model, log = train(panel, graphs, _model_config(cfg), _train_config(cfg))
    save_checkpoint(model, _path(cfg.checkpoint_path, out_dir, "checkpoint.bin"))
    write_training_log(log, os.path.join(out_dir, "training_log.csv"))
    best = max((e.val_ic for e in log if e.val_ic == e.val_ic), default=float("nan"))
    print(f"trained {cfg.epochs} epochs; best validation ic {best:.6f}")


def cmd_evaluate(cfg: RunConfig, out_dir: str) -> None:
    panel, graphs = _load_inputs(cfg, out_dir)
    model = load_checkpoint(_path(cfg.checkpoint_path, out_dir, "checkpoint.bin"))
    dates = _test_dates(cfg, panel)
    report = evaluate(
        panel,
        graphs,
        model,
        dates,
        window=cfg.window,
        top_k=cfg.top_k,
        risk_free_daily=cfg.risk_free_daily,
        periods_per_year=cfg.periods_per_year,
    )
    write_metrics_report(report, out_dir)
    shown = "nan" if report.ic is None else f"{report.ic:.6f}"
    print(f"evaluated {report.n_days} days ({report.n_skipped} skipped); mean ic {shown}")


def cmd_backtest(cfg: RunConfig, out_dir: str) -> None:
    panel, graphs = _load_inputs(cfg, out_dir)
    model = load_checkpoint(_path(cfg.checkpoint_path, out_dir, "checkpoint.bin"))
    dates = _test_dates(cfg, panel)
    days, _ = predict_daily(panel, graphs, model, dates, cfg.window)
    result = backtest_topk(days, k=cfg.top_k)
    stats = portfolio_stats(
        result, risk_free_daily=cfg.risk_free_daily, periods_per_year=cfg.periods_per_year
    )
    write_backtest_report(result, stats, out_dir)
    print(
        f"backtested {len(result.dates)} days; cumulative return "
        f"{stats.cumulative_return:.6f}"
    )


def cmd_analyze_gates(cfg: RunConfig, out_dir: str) -> None:
    panel, graphs = _load_inputs(cfg, out_dir)
    model = load_checkpoint(_path(cfg.checkpoint_path, out_dir, "checkpoint.bin"))
    dates = _test_dates(cfg, panel)
    days, trace = predict_daily(panel, graphs, model, dates, cfg.window)
    benchmark = {day.date: float(day.returns.mean()) for day in days}
    report = gate_analysis(trace, benchmark)
    write_gate_report(report, out_dir)
    print(
        f"analyzed gates over {len(report.dates)} days: "
        f"{len(report.up_dates)} up, {len(report.down_dates)} down"
    )


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "analyze-gates": cmd_analyze_gates,
}


def dispatch(command: str, cfg: RunConfig, out_dir: str) -> int:
    """Run one pipeline command; artifacts land under ``out_dir``."""
    if command not in _HANDLERS:
        raise ValueError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    os.makedirs(out_dir, exist_ok=True)
    write_resolved_config(cfg, out_dir)
    _HANDLERS[command](cfg, out_dir)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="griffin",
        description="Relation-biased cross-stock ranking model: data, graphs, training, evaluation.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="path to a key = value config file")
    parser.add_argument("--out", required=True, help="output directory for artifacts")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        dest="overrides",
        help="override one config key (repeatable)",
    )
    args = parser.parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = parse_config(args.config, overrides)
        return dispatch(args.command, cfg, args.out)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
