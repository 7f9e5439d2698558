"""Relation-biased cross-stock attention with gated multi-graph fusion,
temporal transformer encoding, and a ranking/backtest harness."""

from .autodiff import ParamStore, Tape, Tensor, backward, finite_diff_check
from .data import (
    FeaturePanel,
    WindowBatch,
    load_panel_csv,
    make_windows,
    preprocess_labels,
    synth_generate,
    windows_for_targets,
    winsorize_cross_section,
    write_panel_csv,
    zscore_cross_section,
)
from .estimator import GriffinNetRegressor
from .evaluation import (
    BacktestResult,
    DailyPrediction,
    GateReport,
    GateTrace,
    MetricsReport,
    PortfolioStats,
    backtest_topk,
    evaluate,
    gate_analysis,
    ic,
    icir,
    portfolio_stats,
    predict_daily,
    rank_ic,
)
from .model import (
    ForwardOutput,
    GriffinModel,
    ModelConfig,
    embed_features,
    encoder_layer,
    forward,
    gated_fusion,
    load_checkpoint,
    pool_and_predict,
    positional_encoding,
    relation_attention,
    save_checkpoint,
)
from .relations import (
    RelationGraph,
    build_industry_graph,
    build_institution_graph,
    load_graph_csv,
    load_membership_csv,
    validate_relation,
    write_graph_csv,
)
from .training import (
    OptimizerState,
    TrainConfig,
    TrainLogEntry,
    adamw_step,
    clip_gradients,
    loss,
    onecycle_lr,
    resolve_splits,
    train,
)

__version__ = "0.1.0"
