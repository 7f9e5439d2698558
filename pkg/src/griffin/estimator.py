"""scikit-learn style estimator wrapping the train/predict pipeline.

``GriffinNetRegressor`` follows the estimator protocol (constructor stores
hyperparameters verbatim, ``fit`` returns self, fitted state carries a
trailing underscore, ``get_params``/``set_params``/``clone`` work), so the
model slots into the wider ecosystem even though its inputs are a feature
panel plus relation graphs rather than a flat design matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import FeaturePanel, preprocess_labels
from .evaluation import DailyPrediction, ic, predict_daily
from .model import GriffinModel, ModelConfig
from .relations import RelationGraph
from .training import TrainConfig, resolve_splits, train


def check_panel(panel: FeaturePanel) -> FeaturePanel:
    if not isinstance(panel, FeaturePanel):
        raise TypeError(f"expected a FeaturePanel, got {type(panel).__name__}")
    return panel


def check_graphs(
    graphs: tuple[RelationGraph, RelationGraph], panel: FeaturePanel
) -> tuple[RelationGraph, RelationGraph]:
    try:
        g_ind, g_inst = graphs
    except (TypeError, ValueError):
        raise TypeError("graphs must be an (industry, institution) pair") from None
    for g in (g_ind, g_inst):
        if not isinstance(g, RelationGraph):
            raise TypeError(f"expected RelationGraph instances, got {type(g).__name__}")
        if g.tickers != panel.tickers:
            raise ValueError(f"{g.kind} graph ticker order does not match the panel")
    return g_ind, g_inst


class GriffinNetRegressor(BaseEstimator):
    """Cross-sectional return ranker with relation-biased attention.

    Parameters mirror the model and optimizer configuration; see
    :class:`griffin.model.ModelConfig` and :class:`griffin.training.TrainConfig`.
    ``fit`` expects a :class:`FeaturePanel` and the (industry, institution)
    graph pair; ``predict`` scores any panel dates with enough history.
    """

    def __init__(
        self,
        d_model: int = 256,
        n_heads: int = 8,
        n_layers: int = 1,
        dropout: float = 0.15,
        ffn_multiplier: int = 4,
        use_gating: bool = True,
        use_relation_bias: bool = True,
        use_cross_stock_attention: bool = True,
        use_temporal_encoder: bool = True,
        learning_rate: float = 1e-4,
        weight_decay: float = 0.01,
        l2_lambda: float = 1e-4,
        epochs: int = 10,
        batch_windows: int = 1,
        grad_clip_norm: float = 5.0,
        pct_start: float = 0.3,
        div_factor: float = 25.0,
        final_div_factor: float = 1e4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps_opt: float = 1e-8,
        window: int = 8,
        stride: int = 1,
        winsor_lo: float = 0.01,
        winsor_hi: float = 0.99,
        train_frac: float = 0.7,
        val_frac: float = 0.15,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.dropout = dropout
        self.ffn_multiplier = ffn_multiplier
        self.use_gating = use_gating
        self.use_relation_bias = use_relation_bias
        self.use_cross_stock_attention = use_cross_stock_attention
        self.use_temporal_encoder = use_temporal_encoder
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.l2_lambda = l2_lambda
        self.epochs = epochs
        self.batch_windows = batch_windows
        self.grad_clip_norm = grad_clip_norm
        self.pct_start = pct_start
        self.div_factor = div_factor
        self.final_div_factor = final_div_factor
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_opt = eps_opt
        self.window = window
        self.stride = stride
        self.winsor_lo = winsor_lo
        self.winsor_hi = winsor_hi
        self.train_frac = train_frac
        self.val_frac = val_frac
        self.seed = seed

    def _model_config(self, panel: FeaturePanel) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            dropout=self.dropout,
            d_company=panel.d_company,
            d_market=panel.d_market,
            ffn_multiplier=self.ffn_multiplier,
            use_gating=self.use_gating,
            use_relation_bias=self.use_relation_bias,
            use_cross_stock_attention=self.use_cross_stock_attention,
            use_temporal_encoder=self.use_temporal_encoder,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            l2_lambda=self.l2_lambda,
            epochs=self.epochs,
            batch_windows=self.batch_windows,
            seed=self.seed,
            grad_clip_norm=self.grad_clip_norm,
            pct_start=self.pct_start,
            div_factor=self.div_factor,
            final_div_factor=self.final_div_factor,
            beta1=self.beta1,
            beta2=self.beta2,
            eps_opt=self.eps_opt,
            window=self.window,
            stride=self.stride,
            train_frac=self.train_frac,
            val_frac=self.val_frac,
        )

    def fit(self, panel: FeaturePanel, graphs: tuple[RelationGraph, RelationGraph]):
        """Train on the panel's train split; keeps the best-validation model."""
        panel = check_panel(panel)
        graphs = check_graphs(graphs, panel)
        if panel.labels is None:
            panel = preprocess_labels(panel, self.winsor_lo, self.winsor_hi)
        model, log = train(panel, graphs, self._model_config(panel), self._train_config())
        self.model_: GriffinModel = model
        self.graphs_ = graphs
        self.log_ = log
        self.panel_dates_ = panel.dates
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def _prepared(self, panel: FeaturePanel) -> FeaturePanel:
        panel = check_panel(panel)
        if panel.labels is None:
            panel = preprocess_labels(panel, self.winsor_lo, self.winsor_hi)
        return panel

    def predict(self, panel: FeaturePanel, dates: list[str] | None = None) -> np.ndarray:
        """Score matrix of shape (len(dates), n_stocks) in panel ticker order.

        ``dates`` defaults to every panel date with enough window history.
        """
        self._require_fitted()
        panel = self._prepared(panel)
        if dates is None:
            dates = list(panel.dates[self.window - 1 :])
        days, _ = predict_daily(panel, self.graphs_, self.model_, dates, self.window)
        return np.stack([day.scores for day in days])

    def predict_days(self, panel: FeaturePanel, dates: list[str]) -> list[DailyPrediction]:
        """Per-day aligned (ticker, score, realized return) records."""
        self._require_fitted()
        panel = self._prepared(panel)
        days, _ = predict_daily(panel, self.graphs_, self.model_, dates, self.window)
        return days

    def score(self, panel: FeaturePanel, dates: list[str] | None = None) -> float:
        """Mean daily information coefficient over ``dates`` (default: the
        panel's test split under this estimator's split fractions)."""
        self._require_fitted()
        panel = self._prepared(panel)
        if dates is None:
            _, _, dates = resolve_splits(panel.dates, self._train_config())
            dates = [d for d in dates if panel.date_index(d) >= self.window - 1]
        days = self.predict_days(panel, list(dates))
        values = []
        for day in days:
            try:
                values.append(ic(day))
            except ValueError:
                continue
        if not values:
            raise ValueError("score: no day produced a defined correlation")
        return float(np.mean(values))
