"""Forward architecture: feature embedding, relation-biased cross-stock
attention, adaptive dual-gate fusion, temporal encoder stack, prediction head.

Internally a window batch flows through two 2-D layouts:

* time-major ``(T*N, d_model)`` — row ``t*N + i`` is stock ``i`` at step ``t``;
  used for the per-step cross-stock relation attention and the gating fusion
  (blocks of N rows share a time step).
* stock-major ``(N*T, d_model)`` — row ``i*T + t``; used for the per-stock
  temporal encoder and time pooling (blocks of T rows share a stock).

The public ``forward`` canonicalizes stock order (sorts by ticker, computes,
un-permutes the outputs) so results are exactly invariant to the caller's
row order.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import WindowBatch
from .relations import RelationGraph
from .seeding import STREAM_PARAMS, rng_stream

RELATIONS = ("ind", "inst")

_CKPT_MAGIC = "griffin-checkpoint 1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and ablation configuration."""

    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 1
    dropout: float = 0.15
    d_company: int = 158
    d_market: int = 63
    ffn_multiplier: int = 4
    use_gating: bool = True
    use_relation_bias: bool = True
    use_cross_stock_attention: bool = True
    use_temporal_encoder: bool = True

    def __post_init__(self):
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even for sinusoidal encoding, got {self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        if min(self.d_company, self.d_market, self.ffn_multiplier) < 1:
            raise ValueError("d_company, d_market and ffn_multiplier must be positive")


@dataclass
class ForwardOutput:
    """Per-stock predictions plus the gate activations recorded on the way.

    ``gate_trace`` has shape (N, T, 2) holding the mean gate activation per
    (stock, step, relation) with relations ordered ("ind", "inst").
    ``prediction_tensor`` is the (N, 1) graph node, usable for loss building
    when the forward ran under a tape.
    """

    predictions: np.ndarray
    gate_trace: np.ndarray
    prediction_tensor: Tensor


class GriffinModel:
    """Named parameter store for every architecture block plus its config."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore()
        self._init_params(rng_stream(seed, STREAM_PARAMS))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d = cfg.d_model

        def xavier(fan_in: int, fan_out: int) -> np.ndarray:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        p = self.params
        p.add("embed/company", xavier(cfg.d_company, cfg.d_company))
        p.add("embed/market", xavier(cfg.d_market, cfg.d_market))
        p.add("embed/input_proj", xavier(cfg.d_company + cfg.d_market, d))
        for r in RELATIONS:
            if cfg.use_cross_stock_attention:
                p.add(f"rel/{r}/wq", xavier(d, d))
                p.add(f"rel/{r}/wk", xavier(d, d))
            p.add(f"rel/{r}/wv", xavier(d, d))
            p.add(f"rel/{r}/wo", xavier(d, d))
            if cfg.use_cross_stock_attention and cfg.use_relation_bias:
                p.add(f"rel/{r}/alpha", np.array([[1.0]]), decay=False)
            if cfg.use_gating:
                p.add(f"gate/{r}/w", np.zeros((d, d)))
                p.add(f"gate/{r}/b", np.zeros((1, d)), decay=False)
        p.add("fuse/proj", xavier(d, d))
        if cfg.use_temporal_encoder:
            hidden = cfg.ffn_multiplier * d
            for layer in range(cfg.n_layers):
                pre = f"enc/{layer}/"
                p.add(pre + "ln1/gamma", np.ones((1, d)), decay=False)
                p.add(pre + "ln1/beta", np.zeros((1, d)), decay=False)
                p.add(pre + "attn/wq", xavier(d, d))
                p.add(pre + "attn/wk", xavier(d, d))
                p.add(pre + "attn/wv", xavier(d, d))
                p.add(pre + "attn/wo", xavier(d, d))
                p.add(pre + "ln2/gamma", np.ones((1, d)), decay=False)
                p.add(pre + "ln2/beta", np.zeros((1, d)), decay=False)
                p.add(pre + "ffn/w1", xavier(d, hidden))
                p.add(pre + "ffn/b1", np.zeros((1, hidden)), decay=False)
                p.add(pre + "ffn/w2", xavier(hidden, d))
                p.add(pre + "ffn/b2", np.zeros((1, d)), decay=False)
        p.add("head/hidden_w", xavier(d, d))
        p.add("head/hidden_b", np.zeros((1, d)), decay=False)
        p.add("head/out_w", xavier(d, 1))
        p.add("head/out_b", np.zeros((1, 1)), decay=False)

    @property
    def param_count(self) -> int:
        return self.params.num_values()


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def positional_encoding(n_steps: int, d_model: int) -> np.ndarray:
    """Sinusoidal position matrix (n_steps, d_model): sin on even columns,
    cos on odd columns, wavelengths 10000^(2i/d_model)."""
    if d_model % 2 != 0:
        raise ValueError(f"positional_encoding: d_model must be even, got {d_model}")
    if n_steps < 1:
        raise ValueError(f"positional_encoding: need n_steps >= 1, got {n_steps}")
    pos = np.arange(n_steps, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i2 / d_model)
    pe = np.empty((n_steps, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def embed_features(batch: WindowBatch, model: GriffinModel) -> Tensor:
    """Split-and-project feature embedding plus positional encoding.

    Company and market blocks pass through their own width-preserving linear
    maps, are concatenated, projected to d_model, and offset by the position
    row of their time step. Returns the time-major (T*N, d_model) tensor.
    """
    cfg = model.config
    n, t, width = batch.features.shape
    if width != cfg.d_company + cfg.d_market:
        raise ValueError(
            f"feature width {width} does not match configured "
            f"{cfg.d_company} company + {cfg.d_market} market dims"
        )
    flat = batch.features.transpose(1, 0, 2).reshape(t * n, width)
    p = model.params
    x_company = ad.matmul(ad.constant(flat[:, : cfg.d_company]), p["embed/company"])
    x_market = ad.matmul(ad.constant(flat[:, cfg.d_company :]), p["embed/market"])
    x = ad.matmul(ad.hstack([x_company, x_market]), p["embed/input_proj"])
    pe = np.repeat(positional_encoding(t, cfg.d_model), n, axis=0)
    return ad.add(x, ad.constant(pe))


def _multi_head_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    block: int,
    n_heads: int,
    bias_const: np.ndarray | None = None,
    alpha: Tensor | None = None,
    weight_dropout: tuple[float, str, np.random.Generator | None] | None = None,
    probe: list | None = None,
) -> Tensor:
    """Multi-head attention within consecutive row blocks of size ``block``."""
    d_model = wq.cols
    d_k = d_model // n_heads
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    heads = []
    for h in range(n_heads):
        c0, c1 = h * d_k, (h + 1) * d_k
        logits = ad.scale(
            ad.block_matmul_nt(ad.col_slice(q, c0, c1), ad.col_slice(k, c0, c1), block, block),
            1.0 / np.sqrt(d_k),
        )
        if bias_const is not None:
            logits = ad.add(logits, ad.scalar_mul(alpha, bias_const))
        attn = ad.softmax_rows(logits)
        if probe is not None:
            probe.append(attn.value)
        if weight_dropout is not None:
            rate, mode, rng = weight_dropout
            attn = ad.dropout(attn, rate, mode, rng)
        heads.append(ad.block_matmul_nn(attn, ad.col_slice(v, c0, c1), block))
    return ad.matmul(ad.hstack(heads), wo)


def relation_attention(
    x: Tensor,
    graph: RelationGraph,
    model: GriffinModel,
    relation: str,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    probe: list | None = None,
) -> Tensor:
    """Cross-stock attention at each time step, biased by the relation graph.

    ``x`` is time-major with row blocks of N stocks; logits per head are
    Q K^T / sqrt(d_k) plus the relation's learnable scalar times the graph
    weights (one scalar shared across heads). Attention weights get dropout
    in train mode.
    """
    if relation not in RELATIONS:
        raise ValueError(f"unknown relation {relation!r}")
    cfg = model.config
    n = graph.n_stocks
    if x.rows % n != 0:
        raise ValueError(f"relation_attention: {x.rows} rows not divisible by {n} stocks")
    steps = x.rows // n
    bias_const = None
    alpha = None
    if cfg.use_relation_bias:
        alpha = model.params[f"rel/{relation}/alpha"]
        bias_const = np.tile(np.asarray(graph.weights), (steps, 1))
    p = model.params
    return _multi_head_attention(
        x,
        p[f"rel/{relation}/wq"],
        p[f"rel/{relation}/wk"],
        p[f"rel/{relation}/wv"],
        p[f"rel/{relation}/wo"],
        block=n,
        n_heads=cfg.n_heads,
        bias_const=bias_const,
        alpha=alpha,
        weight_dropout=(cfg.dropout, mode, rng),
        probe=probe,
    )


def graph_propagation(x: Tensor, graph: RelationGraph, model: GriffinModel, relation: str) -> Tensor:
    """Attention-ablated relation mixing: row-normalized graph propagation of
    the value projection, then the output mix."""
    n = graph.n_stocks
    if x.rows % n != 0:
        raise ValueError(f"graph_propagation: {x.rows} rows not divisible by {n} stocks")
    steps = x.rows // n
    w = np.asarray(graph.weights)
    row_norm = w / w.sum(axis=1, keepdims=True)
    v = ad.matmul(x, model.params[f"rel/{relation}/wv"])
    mixed = ad.block_matmul_nn(ad.constant(np.tile(row_norm, (steps, 1))), v, n)
    return ad.matmul(mixed, model.params[f"rel/{relation}/wo"])


def gated_fusion(
    x: Tensor, x_ind: Tensor, x_inst: Tensor, model: GriffinModel
) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Blend the two relation outputs under input-dependent sigmoid gates.

    Gates are d_model-wide vectors computed from the pre-attention embedding;
    the halved gated sum is projected and added back to ``x`` residually.
    Returns the fused tensor and the raw gate activations per relation
    (all-ones when gating is ablated).
    """
    if x.shape != x_ind.shape or x.shape != x_inst.shape:
        raise ValueError(
            f"gated_fusion: mismatched shapes {x.shape}, {x_ind.shape}, {x_inst.shape}"
        )
    cfg = model.config
    p = model.params
    gates: dict[str, np.ndarray] = {}
    if cfg.use_gating:
        parts = []
        for relation, x_r in (("ind", x_ind), ("inst", x_inst)):
            g = ad.sigmoid(ad.add(ad.matmul(x, p[f"gate/{relation}/w"]), p[f"gate/{relation}/b"]))
            gates[relation] = g.value
            parts.append(ad.mul(g, x_r))
        fused = ad.scale(ad.add(parts[0], parts[1]), 0.5)
    else:
        for relation in RELATIONS:
            gates[relation] = np.ones(x.shape)
        fused = ad.scale(ad.add(x_ind, x_inst), 0.5)
    return ad.add(ad.matmul(fused, p["fuse/proj"]), x), gates


def encoder_layer(
    x: Tensor,
    model: GriffinModel,
    layer: int,
    seq_len: int,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    probe: list | None = None,
) -> Tensor:
    """Pre-norm transformer block over the time axis of each stock.

    ``x`` is stock-major with row blocks of ``seq_len`` steps:
    x += MHA(LayerNorm(x)); x += FFN(LayerNorm(x)); dropout after the
    attention and feed-forward branches in train mode.
    """
    cfg = model.config
    p = model.params
    pre = f"enc/{layer}/"
    normed = ad.layer_norm(x, p[pre + "ln1/gamma"], p[pre + "ln1/beta"])
    attn = _multi_head_attention(
        normed,
        p[pre + "attn/wq"],
        p[pre + "attn/wk"],
        p[pre + "attn/wv"],
        p[pre + "attn/wo"],
        block=seq_len,
        n_heads=cfg.n_heads,
        probe=probe,
    )
    x = ad.add(x, ad.dropout(attn, cfg.dropout, mode, rng))
    normed = ad.layer_norm(x, p[pre + "ln2/gamma"], p[pre + "ln2/beta"])
    ffn = ad.add(
        ad.matmul(
            ad.relu(ad.add(ad.matmul(normed, p[pre + "ffn/w1"]), p[pre + "ffn/b1"])),
            p[pre + "ffn/w2"],
        ),
        p[pre + "ffn/b2"],
    )
    return ad.add(x, ad.dropout(ffn, cfg.dropout, mode, rng))


def pool_and_predict(x: Tensor, model: GriffinModel, seq_len: int) -> Tensor:
    """Mean-pool each stock's steps, then the two-layer prediction head."""
    p = model.params
    pooled = ad.block_mean_rows(x, seq_len)
    hidden = ad.relu(ad.add(ad.matmul(pooled, p["head/hidden_w"]), p["head/hidden_b"]))
    return ad.add(ad.matmul(hidden, p["head/out_w"]), p["head/out_b"])


def forward(
    batch: WindowBatch,
    graphs: tuple[RelationGraph, RelationGraph],
    model: GriffinModel,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Full pipeline: embed -> per-step relation attention (both graphs) ->
    gated fusion -> per-stock temporal encoder -> pool and predict.

    Eval mode disables dropout and is deterministic. Stock order is
    canonicalized internally, so consistently permuting the batch and both
    graphs permutes the outputs exactly.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"forward: mode must be 'train' or 'eval', got {mode!r}")
    g_ind, g_inst = graphs
    for g in (g_ind, g_inst):
        if g.tickers != batch.tickers:
            raise ValueError(
                f"forward: {g.kind} graph ticker order does not match the batch"
            )
    cfg = model.config
    n, t = batch.n_stocks, batch.n_steps

    order = np.argsort(np.asarray(batch.tickers))
    canonical = bool(np.all(order == np.arange(n)))
    if not canonical:
        inv = np.argsort(order)
        batch = WindowBatch(
            features=batch.features[order],
            targets=batch.targets[order],
            dates=batch.dates,
            tickers=tuple(batch.tickers[i] for i in order),
        )
        g_ind = g_ind.reordered(order)
        g_inst = g_inst.reordered(order)

    x = embed_features(batch, model)
    if cfg.use_cross_stock_attention:
        x_ind = relation_attention(x, g_ind, model, "ind", mode, rng)
        x_inst = relation_attention(x, g_inst, model, "inst", mode, rng)
    else:
        x_ind = graph_propagation(x, g_ind, model, "ind")
        x_inst = graph_propagation(x, g_inst, model, "inst")
    fused, gates = gated_fusion(x, x_ind, x_inst, model)

    to_stock_major = (np.arange(t)[None, :] * n + np.arange(n)[:, None]).reshape(-1)
    h = ad.permute_rows(fused, to_stock_major)
    if cfg.use_temporal_encoder:
        for layer in range(cfg.n_layers):
            h = encoder_layer(h, model, layer, seq_len=t, mode=mode, rng=rng)
    pred = pool_and_predict(h, model, seq_len=t)

    trace = np.stack(
        [gates[r].mean(axis=1).reshape(t, n).T for r in RELATIONS], axis=2
    )
    if not canonical:
        pred = ad.permute_rows(pred, inv)
        trace = trace[inv]
    return ForwardOutput(predictions=pred.value[:, 0].copy(), gate_trace=trace, prediction_tensor=pred)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(model: GriffinModel, path: str) -> None:
    """Single-file checkpoint: text manifest (version, config, parameter
    name/shape/offset table) followed by little-endian float64 blocks."""
    lines = [_CKPT_MAGIC]
    for field in dataclasses.fields(ModelConfig):
        lines.append(f"config {field.name} {getattr(model.config, field.name)}")
    offset = 0
    blocks = []
    for name, tensor in model.params.items():
        rows, cols = tensor.shape
        lines.append(f"param {name} {rows} {cols} {offset}")
        blocks.append(tensor.value.astype("<f8").tobytes(order="C"))
        offset += rows * cols
    lines.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for block in blocks:
            fh.write(block)


def _parse_config_value(name: str, text: str):
    for field in dataclasses.fields(ModelConfig):
        if field.name == name:
            if field.type in ("bool", bool):
                if text not in ("True", "False"):
                    raise ValueError(f"checkpoint: bad boolean for config {name}: {text!r}")
                return text == "True"
            if field.type in ("int", int):
                return int(text)
            return float(text)
    raise ValueError(f"checkpoint: unknown config field {name!r}")


def load_checkpoint(path: str) -> GriffinModel:
    """Rebuild a model from a checkpoint, validating every shape against the
    stored config."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.find(b"data\n")
    if not raw.startswith(_CKPT_MAGIC.encode()) or header_end < 0:
        raise ValueError(f"{path}: not a griffin checkpoint")
    manifest = raw[: header_end].decode("utf-8").splitlines()[1:]
    payload = raw[header_end + len(b"data\n") :]

    config_kwargs = {}
    table: list[tuple[str, int, int, int]] = []
    for line in manifest:
        kind, rest = line.split(" ", 1)
        if kind == "config":
            name, text = rest.split(" ", 1)
            config_kwargs[name] = _parse_config_value(name, text)
        elif kind == "param":
            name, rows, cols, offset = rest.rsplit(" ", 3)
            table.append((name, int(rows), int(cols), int(offset)))
        else:
            raise ValueError(f"{path}: malformed manifest line {line!r}")
    config = ModelConfig(**config_kwargs)
    model = GriffinModel(config, seed=0)

    expected = {name: t.shape for name, t in model.params.items()}
    listed = {name for name, *_ in table}
    if listed != set(expected):
        raise ValueError(f"{path}: checkpoint parameters do not match the stored config")
    values = {}
    for name, rows, cols, offset in table:
        if expected[name] != (rows, cols):
            raise ValueError(
                f"{path}: shape mismatch for {name}: checkpoint ({rows}, {cols}), "
                f"config implies {expected[name]}"
            )
        start = offset * 8
        stop = start + rows * cols * 8
        if stop > len(payload):
            raise ValueError(f"{path}: truncated parameter block for {name}")
        values[name] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(rows, cols)
    model.params.load_values(values)
    return model
