"""Temporal multi-head attention per granularity stream, plus stream fusion.

Each granularity window holds a node-major time series sampled at its own
stride. Attention scores compare a time position with its earlier positions
through a shared scoring layer; per head, the value projection is aggregated
with those coefficients and squashed. The fusion layer aligns every stream to
a common temporal length with a learned averaging map, concatenates channels,
and mixes them with one fully connected layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .params import ParameterStore, glorot_init
from .tensor import NEG_MASK, Tensor

GRANULARITY_TAGS = ("m", "h", "d", "w")
SCORE_MODES = ("pernode", "shared")
DILATION_STRIDES = (1, 2, 4, 8)


@dataclass
class GranularityWindow:
    """One stream's slice stack: `data` is time-major (t, N, C)."""

    tag: str
    stride: int
    data: Tensor

    def __post_init__(self):
        if self.tag not in GRANULARITY_TAGS:
            raise ValidationError(
                f"tag must be one of {GRANULARITY_TAGS}, got {self.tag!r}")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")
        if self.data.data.ndim != 3:
            raise DimensionError(
                f"window data must be (t, N, C), got {self.data.data.shape}")
        if self.data.data.shape[0] < 1:
            raise ValidationError("window needs at least one time position")

    @property
    def t_count(self):
        return self.data.data.shape[0]

    @property
    def n_nodes(self):
        return self.data.data.shape[1]

    @property
    def channels(self):
        return self.data.data.shape[2]


@dataclass
class AttentionParams:
    """Scoring layer split into query/key halves, plus per-head projections."""

    score_w1: Tensor
    score_w2: Tensor
    score_b: Tensor
    heads: list[Tensor] = field(default_factory=list)

    @property
    def k_heads(self):
        return len(self.heads)

    @property
    def c_head(self):
        return self.heads[0].data.shape[1]


@dataclass
class FusionParams:
    """Per-stream time-alignment maps and the channel-mixing layer."""

    aligns: list  # one (T_align, t_i) Tensor per stream slot, None if masked
    widths: list  # channel width contributed by each slot
    fc_w: Tensor
    fc_b: Tensor
    t_align: int


def make_attention_params(store: ParameterStore, prefix, c_in, c_head,
                          k_heads, rng):
    """Register one attention layer's parameters and return handles."""
    if k_heads < 1:
        raise ValidationError(f"k_heads must be >= 1, got {k_heads}")
    if c_in < 1 or c_head < 1:
        raise ValidationError("channel counts must be positive")
    w1 = store.add(f"{prefix}/score_w1",
                   glorot_init(rng, 2 * c_in, 1, (c_in, 1)))
    w2 = store.add(f"{prefix}/score_w2",
                   glorot_init(rng, 2 * c_in, 1, (c_in, 1)))
    b = store.add(f"{prefix}/score_b", np.zeros(1))
    heads = [
        store.add(f"{prefix}/head{k}/w",
                  glorot_init(rng, c_in, c_head, (c_in, c_head)))
        for k in range(k_heads)
    ]
    return AttentionParams(score_w1=w1, score_w2=w2, score_b=b, heads=heads)


def _causal_mask(t):
    mask = np.where(np.tril(np.ones((t, t))) > 0, 0.0, NEG_MASK)
    return Tensor(mask.reshape(t, t, 1))


def attention_coeffs(window: GranularityWindow, params: AttentionParams,
                     score_mode="pernode", slope=0.2):
    """Causal attention coefficients over a window's time positions.

    Scores come from a shared scoring layer applied to the (query, key)
    channel pair at every node. `pernode` keeps one coefficient matrix per
    node, shape (t, t, N); `shared` averages scores across nodes first,
    shape (t, t). Rows are probability distributions over the allowed
    (non-future) positions.
    """
    if score_mode not in SCORE_MODES:
        raise ValidationError(
            f"score_mode must be one of {SCORE_MODES}, got {score_mode!r}")
    t, n, c = window.data.data.shape
    if t < 1:
        raise ValidationError("window needs at least one time position")
    flat = T.reshape(window.data, (t * n, c))
    a = T.reshape(T.matmul(flat, params.score_w1), (t, 1, n))
    b = T.reshape(T.matmul(flat, params.score_w2), (1, t, n))
    scores = T.leaky_relu(a + b + params.score_b, slope)
    if score_mode == "shared":
        scores = T.tmean(scores, axis=2, keepdims=True)
    masked = scores + _causal_mask(t)
    alpha = T.softmax(masked, axis=1)
    if score_mode == "shared":
        alpha = T.reshape(alpha, (t, t))
    return alpha


def temporal_ma(window: GranularityWindow, params: AttentionParams,
                score_mode="pernode", alpha_override=None,
                activation="sigmoid", slope=0.2):
    """Multi-head temporal attention over one granularity stream.

    Per head, project the window's channels, aggregate past positions with
    the attention coefficients, and squash; heads are concatenated along
    the channel axis. Output shape (t, N, K * C_head). `alpha_override` and
    `activation="identity"` exist for verification paths.
    """
    if activation not in ("sigmoid", "identity"):
        raise ValidationError(f"unknown activation {activation!r}")
    t, n, c = window.data.data.shape
    if params.heads[0].data.shape[0] != c:
        raise DimensionError(
            f"head projection expects {params.heads[0].data.shape[0]} "
            f"channels, window has {c}")
    alpha = alpha_override
    if alpha is None:
        alpha = attention_coeffs(window, params, score_mode=score_mode,
                                 slope=slope)
    per_node = alpha.data.ndim == 3

    flat = T.reshape(window.data, (t * n, c))
    outputs = []
    for head_w in params.heads:
        c_head = head_w.data.shape[1]
        values = T.reshape(T.matmul(flat, head_w), (t, n, c_head))
        if per_node:
            # (N, t, t) @ (N, t, C_head) aggregates each node with its own
            # coefficients.
            alpha_nm = T.transpose(alpha, (2, 0, 1))
            values_nm = T.transpose(values, (1, 0, 2))
            agg = T.transpose(T.matmul(alpha_nm, values_nm), (1, 0, 2))
        else:
            agg = T.reshape(T.matmul(alpha, T.reshape(values, (t, n * c_head))),
                            (t, n, c_head))
        outputs.append(T.sigmoid(agg) if activation == "sigmoid" else agg)
    return outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=2)


def make_fusion_params(store: ParameterStore, prefix, t_lens, widths, c_out,
                       t_align, rng):
    """Register fusion parameters for a fixed set of stream slots.

    `t_lens[i]` is stream i's temporal length (None for a masked slot whose
    channels are zero-padded); `widths[i]` its channel contribution. The
    alignment maps start as uniform averages over the stream's positions, so
    an untrained fusion preserves constant-in-time signals.
    """
    if len(t_lens) != len(widths):
        raise ValidationError("t_lens and widths must have equal length")
    if c_out < 1:
        raise ValidationError(f"c_out must be >= 1, got {c_out}")
    if all(t is None for t in t_lens):
        raise ValidationError("at least one stream slot must be active")
    aligns = []
    for i, t_len in enumerate(t_lens):
        if t_len is None:
            aligns.append(None)
            continue
        if t_len < 1:
            raise ValidationError(f"stream {i} has no time positions")
        aligns.append(store.add(
            f"{prefix}/align{i}", np.full((t_align, t_len), 1.0 / t_len)))
    total = int(sum(widths))
    fc_w = store.add(f"{prefix}/fc_w", glorot_init(rng, total, c_out,
                                                   (total, c_out)))
    fc_b = store.add(f"{prefix}/fc_b", np.zeros(c_out))
    return FusionParams(aligns=aligns, widths=list(widths), fc_w=fc_w,
                        fc_b=fc_b, t_align=t_align)


def fuse(streams, params: FusionParams, pre_activation=False, slope=0.2):
    """Fuse granularity streams into one (T_align, N, C_out) map.

    Each active stream is aligned over time with its learned map, masked
    slots contribute zeros at their declared width, channels are
    concatenated, and a single fully connected layer mixes them.
    `pre_activation` skips the final nonlinearity for linearity checks.
    """
    if not streams or all(s is None for s in streams):
        raise ValidationError("fuse requires at least one active stream")
    if len(streams) != len(params.aligns):
        raise ValidationError(
            f"expected {len(params.aligns)} stream slots, got {len(streams)}")
    n = next(s.data.shape[1] for s in streams if s is not None)
    parts = []
    for i, stream in enumerate(streams):
        width = params.widths[i]
        if stream is None:
            parts.append(Tensor(np.zeros((params.t_align, n, width))))
            continue
        t_i, n_i, c_i = stream.data.shape
        if c_i != width:
            raise DimensionError(
                f"stream {i} has {c_i} channels, slot expects {width}")
        if n_i != n:
            raise DimensionError("streams disagree on node count")
        align = params.aligns[i]
        if align is None or align.data.shape[1] != t_i:
            raise DimensionError(
                f"stream {i} length {t_i} does not match its alignment map")
        flat = T.reshape(stream, (t_i, n * c_i))
        parts.append(T.reshape(T.matmul(align, flat),
                               (params.t_align, n, c_i)))
    joined = parts[0] if len(parts) == 1 else T.concat(parts, axis=2)
    total = int(sum(params.widths))
    flat = T.reshape(joined, (params.t_align * n, total))
    out = T.linear(flat, params.fc_w, params.fc_b)
    if not pre_activation:
        out = T.leaky_relu(out, slope)
    c_out = params.fc_w.data.shape[1]
    return T.reshape(out, (params.t_align, n, c_out))


def dilation_plan(t_len, strides=DILATION_STRIDES):
    """Backward-sampled index sets used to re-derive streams from a map.

    For each stride, walk back from the newest position and keep every
    stride-th index, then restore chronological order. Strides longer than
    the map still yield the newest position.
    """
    if t_len < 1:
        raise ValidationError(f"t_len must be >= 1, got {t_len}")
    plans = []
    for stride in strides:
        idx = list(range(t_len - 1, -1, -stride))
        idx.reverse()
        plans.append(idx)
    return plans


def derive_streams(fused: Tensor, strides=DILATION_STRIDES):
    """Split a fused map back into granularity windows by dilated sampling."""
    t_len = fused.data.shape[0]
    windows = []
    for tag, stride, idx in zip(GRANULARITY_TAGS, strides,
                                dilation_plan(t_len, strides)):
        windows.append(GranularityWindow(
            tag=tag, stride=stride, data=T.take(fused, idx, axis=0)))
    return windows
