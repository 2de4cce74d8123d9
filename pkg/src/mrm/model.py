"""The multi-level sequence model and the plain-LSTM baseline.

Pipeline per sequence: encode each event into a model_dim vector, enrich
it with multi-head attention restricted to events within window_hours
(keeping only the topk strongest scores per query), compress the sequence
with the minimax-span partition and per-group max pooling, then run an
LSTM over the group vectors and squash the last hidden state into an
outcome probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .events import EventSequence
from .partition import Partition, optimal_partition


class ConfigError(ValueError):
    """Inconsistent model hyperparameters."""


@dataclass(frozen=True)
class MrmConfig:
    """Model hyperparameters plus the dataset vocabulary sizes.

    head_dim * n_heads must equal model_dim so the concatenated heads
    reproduce the model dimension.
    """

    n_codes: int
    n_features: int
    max_features: int
    model_dim: int = 64
    n_heads: int = 8
    head_dim: int = 8
    topk: int = 4
    window_hours: float = 0.5
    max_groups: int = 64
    max_group_len: int = 32

    def __post_init__(self):
        if self.head_dim * self.n_heads != self.model_dim:
            raise ConfigError(
                f"head_dim * n_heads must equal model_dim: "
                f"{self.head_dim} * {self.n_heads} != {self.model_dim}")
        if self.topk < 1:
            raise ConfigError(f"topk must be >= 1, got {self.topk}")
        if self.window_hours <= 0:
            raise ConfigError(f"window_hours must be positive, got {self.window_hours}")
        if self.max_groups < 1 or self.max_group_len < 1:
            raise ConfigError("max_groups and max_group_len must be >= 1")
        if self.n_codes < 1:
            raise ConfigError(f"n_codes must be >= 1, got {self.n_codes}")

    def capacity(self) -> int:
        return self.max_groups * self.max_group_len


def _glorot(rng, out_dim: int, in_dim: int) -> np.ndarray:
    a = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-a, a, size=(out_dim, in_dim))


class MrmParams:
    """All learnable weights, addressable by flat name for the optimizer
    and checkpointing. kind is "mrm" or "plain_lstm" (no attention heads)."""

    def __init__(self, kind, code_embedding, cat_embedding, num_projection,
                 query_weights, key_weights, value_weights,
                 lstm_w_input, lstm_w_hidden, lstm_bias, out_weight, out_bias):
        self.kind = kind
        self.code_embedding = code_embedding
        self.cat_embedding = cat_embedding
        self.num_projection = num_projection
        self.query_weights = query_weights    # per head, (head_dim, model_dim)
        self.key_weights = key_weights
        self.value_weights = value_weights
        self.lstm_w_input = lstm_w_input      # (4H, model_dim), gate order i,f,g,o
        self.lstm_w_hidden = lstm_w_hidden    # (4H, H)
        self.lstm_bias = lstm_bias            # (4H,), forget slice starts at 1.0
        self.out_weight = out_weight          # (model_dim,)
        self.out_bias = out_bias              # scalar

    @classmethod
    def init(cls, config: MrmConfig, seed: int = 0, kind: str = "mrm"):
        if kind not in ("mrm", "plain_lstm"):
            raise ConfigError(f"unknown model kind {kind!r}")
        rng = np.random.default_rng(seed)
        d, h = config.model_dim, config.model_dim
        emb_scale = 1.0 / math.sqrt(d)

        def emb(n):
            return dc.Tensor(rng.normal(0.0, emb_scale, size=(n, d)),
                             requires_grad=True)

        code_embedding = emb(config.n_codes)
        cat_embedding = emb(config.n_features)
        num_projection = emb(config.n_features)
        queries, keys, values = [], [], []
        if kind == "mrm":
            for _ in range(config.n_heads):
                queries.append(dc.Tensor(_glorot(rng, config.head_dim, d), requires_grad=True))
                keys.append(dc.Tensor(_glorot(rng, config.head_dim, d), requires_grad=True))
                values.append(dc.Tensor(_glorot(rng, config.head_dim, d), requires_grad=True))
        lstm_w_input = dc.Tensor(_glorot(rng, 4 * h, d), requires_grad=True)
        lstm_w_hidden = dc.Tensor(_glorot(rng, 4 * h, h), requires_grad=True)
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget gate starts open
        lstm_bias = dc.Tensor(bias, requires_grad=True)
        out_weight = dc.Tensor(rng.uniform(-1, 1, size=d) * math.sqrt(6.0 / (d + 1)),
                               requires_grad=True)
        out_bias = dc.Tensor(0.0, requires_grad=True)
        return cls(kind, code_embedding, cat_embedding, num_projection,
                   queries, keys, values, lstm_w_input, lstm_w_hidden,
                   lstm_bias, out_weight, out_bias)

    def named(self) -> dict:
        out = {
            "code_embedding": self.code_embedding,
            "cat_embedding": self.cat_embedding,
            "num_projection": self.num_projection,
        }
        for i in range(len(self.query_weights)):
            out[f"head{i}.query_weight"] = self.query_weights[i]
            out[f"head{i}.key_weight"] = self.key_weights[i]
            out[f"head{i}.value_weight"] = self.value_weights[i]
        out["lstm.w_input"] = self.lstm_w_input
        out["lstm.w_hidden"] = self.lstm_w_hidden
        out["lstm.bias"] = self.lstm_bias
        out["output.weight"] = self.out_weight
        out["output.bias"] = self.out_bias
        return out

    def arrays(self) -> dict:
        return {name: t.data for name, t in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays: dict, config: MrmConfig, kind: str = "mrm"):
        fresh = cls.init(config, seed=0, kind=kind)
        named = fresh.named()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise ConfigError(f"checkpoint does not match config: "
                              f"missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in named.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != "
                                  f"expected {t.data.shape}")
            t.data = arr.copy()
        return fresh


# ---------------------------------------------------------------------------
# event encoding


def encode_events(seq: EventSequence, params: MrmParams, config: MrmConfig) -> dc.Tensor:
    """Per-event vectors as an (L, model_dim) tensor.

    Each row is the code embedding plus the categorical-feature embeddings
    plus the value-scaled numerical-feature projections of that event.
    """
    codes = np.array([e.code for e in seq.events], dtype=np.intp)
    if codes.size == 0:
        raise ValueError("cannot encode an empty sequence")
    if codes.min() < 0 or codes.max() >= config.n_codes:
        raise ValueError(f"event code outside [0, {config.n_codes})")
    n = codes.size
    x = dc.gather_rows(params.code_embedding, codes)

    cat_ids, cat_seg = [], []
    num_ids, num_vals, num_seg = [], [], []
    for i, ev in enumerate(seq.events):
        for fid in ev.cat_features:
            cat_ids.append(fid)
            cat_seg.append(i)
        for fid, v in ev.num_features:
            num_ids.append(fid)
            num_vals.append(v)
            num_seg.append(i)
    if cat_ids and max(cat_ids) >= config.n_features:
        raise ValueError(f"categorical feature id outside [0, {config.n_features})")
    if num_ids and max(num_ids) >= config.n_features:
        raise ValueError(f"numerical feature id outside [0, {config.n_features})")
    if cat_ids:
        x = dc.add(x, dc.segment_sum(dc.gather_rows(params.cat_embedding, cat_ids),
                                     cat_seg, n))
    if num_ids:
        scaled = dc.scale_rows(dc.gather_rows(params.num_projection, num_ids), num_vals)
        x = dc.add(x, dc.segment_sum(scaled, num_seg, n))
    return x


# ---------------------------------------------------------------------------
# windowed sparse attention


def neighborhood_bounds(times, window_hours: float):
    """For every i, the contiguous [lo, hi) of indices with
    |t_j - t_i| <= window_hours (inclusive, self included)."""
    t = np.asarray(times, dtype=np.float64)
    lo = np.searchsorted(t, t - window_hours, side="left")
    hi = np.searchsorted(t, t + window_hours, side="right")
    return lo, hi


def neighborhood(i: int, times, window_hours: float) -> range:
    """Index range of events within window_hours of event i."""
    lo, hi = neighborhood_bounds(times, window_hours)
    return range(int(lo[i]), int(hi[i]))


def topk_mask(scores, topk: int) -> np.ndarray:
    """Boolean mask keeping the min(topk, n) largest scores.

    Ties at the threshold resolve to the lowest index: sort by
    (score descending, index ascending) and keep the first topk.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError(f"topk_mask: need a non-empty vector, got shape {s.shape}")
    mask = np.zeros(s.size, dtype=bool)
    keep = np.argsort(-s, kind="stable")[:min(topk, s.size)]
    mask[keep] = True
    return mask


def _attention_mask(score_values: np.ndarray, lo, hi, topk: int) -> np.ndarray:
    n = score_values.shape[0]
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        a, b = lo[i], hi[i]
        if b - a <= topk:
            mask[i, a:b] = True
        else:
            mask[i, a:b] = topk_mask(score_values[i, a:b], topk)
    return mask


def sparse_attention(x: dc.Tensor, times, params: MrmParams, config: MrmConfig,
                     return_weights: bool = False):
    """Multi-head attention over time-windowed, top-k-masked neighbors.

    Scores are plain query-key dot products; per query only the topk
    largest in-window scores survive, the rest are masked before the
    softmax. Head outputs are concatenated back to model_dim. The top-k
    selection is treated as locally constant in backward.
    """
    n = x.shape[0]
    if len(times) != n:
        raise ValueError(f"{n} event vectors but {len(times)} times")
    lo, hi = neighborhood_bounds(times, config.window_hours)
    heads = []
    weights = []
    for h in range(config.n_heads):
        q = dc.matmul(x, dc.transpose(params.query_weights[h]))
        k = dc.matmul(x, dc.transpose(params.key_weights[h]))
        v = dc.matmul(x, dc.transpose(params.value_weights[h]))
        scores = dc.matmul(q, dc.transpose(k))
        mask = _attention_mask(scores.data, lo, hi, config.topk)
        attn = dc.masked_softmax_rows(scores, mask)
        heads.append(dc.matmul(attn, v))
        if return_weights:
            weights.append(attn.data.copy())
    out = dc.concat(heads, axis=1)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# LSTM and the full pipeline


def lstm_step(x_t: dc.Tensor, h: dc.Tensor, c: dc.Tensor, params: MrmParams):
    """One LSTM iteration; gate order in the fused projection is i,f,g,o."""
    hidden = h.shape[0]
    pre = dc.add(dc.add(dc.matmul(params.lstm_w_input, x_t),
                        dc.matmul(params.lstm_w_hidden, h)),
                 params.lstm_bias)
    i_gate = dc.sigmoid(dc.slice_vec(pre, 0, hidden))
    f_gate = dc.sigmoid(dc.slice_vec(pre, hidden, 2 * hidden))
    g_cand = dc.tanh(dc.slice_vec(pre, 2 * hidden, 3 * hidden))
    o_gate = dc.sigmoid(dc.slice_vec(pre, 3 * hidden, 4 * hidden))
    c_next = dc.add(dc.mul(f_gate, c), dc.mul(i_gate, g_cand))
    h_next = dc.mul(o_gate, dc.tanh(c_next))
    return h_next, c_next


def _truncate(seq: EventSequence, config: MrmConfig):
    cap = config.capacity()
    if len(seq.events) <= cap:
        return seq, False
    # keep the most recent events: they carry the most outcome signal
    return EventSequence(seq.patient_id, seq.label, seq.events[-cap:]), True


def sequence_partition(seq: EventSequence, config: MrmConfig) -> Partition:
    """The partition forward() will use (after its truncation policy)."""
    used, _ = _truncate(seq, config)
    return optimal_partition(used.times(), config.max_groups, config.max_group_len)


def _head(params: MrmParams, h_last: dc.Tensor) -> dc.Tensor:
    return dc.sigmoid(dc.add(dc.matmul(params.out_weight, h_last), params.out_bias))


def forward(seq: EventSequence, params: MrmParams, config: MrmConfig,
            partition: Partition | None = None):
    """Full pipeline -> (probability tensor, diagnostics dict).

    Sequences longer than max_groups * max_group_len are truncated to
    their most recent events first. A precomputed partition may be passed
    in (it must describe the post-truncation times).
    """
    if params.kind != "mrm":
        raise ConfigError(f"forward() needs mrm params, got kind {params.kind!r}")
    used, truncated = _truncate(seq, config)
    times = used.times()
    x = encode_events(used, params, config)
    v = sparse_attention(x, times, params, config)
    if partition is None:
        partition = optimal_partition(times, config.max_groups, config.max_group_len)
    hidden = config.model_dim
    h = dc.Tensor(np.zeros(hidden))
    c = dc.Tensor(np.zeros(hidden))
    for start, end in partition.groups:
        g = dc.maxpool_rows(dc.slice_rows(v, start, end))
        h, c = lstm_step(g, h, c, params)
    y_hat = _head(params, h)
    diagnostics = {
        "n_events": len(used.events),
        "truncated": truncated,
        "partition": partition,
        "n_groups": len(partition.groups),
    }
    return y_hat, diagnostics


def plain_lstm_forward(seq: EventSequence, params: MrmParams,
                       config: MrmConfig) -> dc.Tensor:
    """Baseline: the LSTM consumes every event vector directly (no
    attention, no pooling), then the same sigmoid head."""
    used, _ = _truncate(seq, config)
    x = encode_events(used, params, config)
    hidden = config.model_dim
    h = dc.Tensor(np.zeros(hidden))
    c = dc.Tensor(np.zeros(hidden))
    for i in range(x.shape[0]):
        h, c = lstm_step(dc.row(x, i), h, c, params)
    return _head(params, h)


_CLAMP = 1e-7


def loss(y_hat: dc.Tensor, y: int) -> dc.Tensor:
    """Cross entropy -(y ln p + (1-y) ln(1-p)) with p clamped away from
    {0, 1} for stability."""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    p = dc.clip(y_hat, _CLAMP, 1.0 - _CLAMP)
    if y == 1:
        return dc.neg(dc.log(p))
    return dc.neg(dc.log(dc.sub(dc.Tensor(1.0), p)))
