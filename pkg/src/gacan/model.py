"""Full network assembly: stacked attention-convolution blocks plus the
prediction head.

Each block runs one multi-head temporal attention set per granularity
stream, fuses the streams into a single feature map, mixes nodes with a
Chebyshev spectral convolution applied independently at every time
position, then runs a second attention set on streams re-derived from the
map by dilated re-sampling, fuses again, and finishes with a fully
connected layer and layer normalization. The head applies one single-head
temporal attention and a per-node fully connected readout to the horizon.
"""

import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import (
    GRANULARITY_TAGS,
    SCORE_MODES,
    AttentionParams,
    FusionParams,
    GranularityWindow,
    derive_streams,
    dilation_plan,
    fuse,
    make_attention_params,
    make_fusion_params,
    temporal_ma,
)
from .data import GranularitySpec, WindowedSample, granularity_strides
from .errors import ContractError, DimensionError, ValidationError
from .graph import SpectralOperator, cheb_conv
from .params import ParameterStore, glorot_init
from .tensor import Tensor


def _name_rng(seed, name):
    """Generator owned by one parameter group.

    Seeding by (seed, name) rather than drawing sequentially from a shared
    generator keeps a tensor's initial values independent of which other
    tensors exist, so models that differ only in granularity mask agree
    bit-for-bit on every parameter they share.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _glorot(rng, fan_in, fan_out):
    return glorot_init(rng, fan_in, fan_out, (fan_in, fan_out))

SECOND_MA_MODES = ("fused-dilated", "single")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; geometry must match the data windows."""

    n_nodes: int
    p: int
    q: int
    h: int
    k_heads: int = 4
    cheb_order: int = 3
    n_blocks: int = 2
    channels: tuple = (16, 16)
    t_align: int | None = None
    mask: frozenset = frozenset(GRANULARITY_TAGS)
    window_style: str = "block"
    second_ma: str = "fused-dilated"
    score_mode: str = "pernode"
    head_channels: int | None = None
    attn_positions: int = 24
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "mask", frozenset(self.mask))
        if self.t_align is None:
            object.__setattr__(self, "t_align", self.h)
        problems = []
        for name in ("n_nodes", "p", "q", "h", "k_heads", "cheb_order",
                     "n_blocks", "t_align", "attn_positions"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if len(self.channels) != self.n_blocks:
            problems.append(
                f"channels lists {len(self.channels)} widths for "
                f"{self.n_blocks} blocks")
        elif any(c < 1 for c in self.channels):
            problems.append("channel widths must be >= 1")
        if not self.mask:
            problems.append("granularity mask must be nonempty")
        unknown = set(self.mask) - set(GRANULARITY_TAGS)
        if unknown:
            problems.append(f"unknown granularities {sorted(unknown)}")
        if self.second_ma not in SECOND_MA_MODES:
            problems.append(f"second_ma must be one of {SECOND_MA_MODES}")
        if self.score_mode not in SCORE_MODES:
            problems.append(f"score_mode must be one of {SCORE_MODES}")
        if self.head_channels is not None and self.head_channels < 1:
            problems.append("head_channels must be >= 1 when set")
        if not 0.0 < self.leaky_slope < 1.0:
            problems.append("leaky_slope must lie in (0, 1)")
        if problems:
            raise ValidationError("invalid model config: "
                                  + "; ".join(problems))
        # delegate window-geometry checks (divisibility, block causality)
        self.granularity_spec()

    def granularity_spec(self):
        """The window geometry this model expects its samples to follow."""
        return GranularitySpec(p=self.p, q=self.q, h=self.h,
                               mask=self.mask - {"m"},
                               window_style=self.window_style)

    def stream_channels(self):
        """Raw per-stream channel width keyed by granularity tag."""
        periodic = self.h if self.window_style == "block" else 1
        return {tag: 1 if tag == "m" else periodic
                for tag in GRANULARITY_TAGS}

    def stream_length(self, tag):
        """Time positions of a raw stream after the attention-window cap."""
        if tag == "m":
            full = self.q
        else:
            strides = dict(zip(("h", "d", "w"), granularity_strides(self.p)))
            full = self.q // strides[tag]
            if self.window_style == "stride":
                full += 1
        return min(full, self.attn_positions)

    def head_width(self, c_in):
        return self.head_channels if self.head_channels is not None else c_in

    def to_dict(self):
        """Flat string map for embedding in checkpoint headers."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "channels":
                out[f.name] = ",".join(str(c) for c in value)
            elif f.name == "mask":
                out[f.name] = "".join(t for t in GRANULARITY_TAGS
                                      if t in value)
            elif f.name == "head_channels":
                out[f.name] = "none" if value is None else str(value)
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_dict(cls, raw):
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        missing = names - set(raw)
        if missing:
            raise ValidationError(f"missing config keys {sorted(missing)}")
        kwargs = {}
        for f in fields(cls):
            value = raw[f.name]
            if f.name == "channels":
                kwargs[f.name] = tuple(int(c) for c in value.split(","))
            elif f.name == "mask":
                kwargs[f.name] = frozenset(value)
            elif f.name == "head_channels":
                kwargs[f.name] = None if value == "none" else int(value)
            elif f.name == "leaky_slope":
                kwargs[f.name] = float(value)
            elif f.name in ("window_style", "second_ma", "score_mode"):
                kwargs[f.name] = value
            else:
                kwargs[f.name] = int(value)
        return cls(**kwargs)


@dataclass
class ACABlockParams:
    """Parameter handles for one attention-convolution-attention block."""

    att1: list          # AttentionParams | None per input stream slot
    fuse1: FusionParams
    theta: list         # cheb_order coefficient tensors, each (C, C)
    att2: list
    fuse2: FusionParams
    fc_w: Tensor
    fc_b: Tensor
    gain: Tensor
    bias: Tensor


@dataclass
class GacanModel:
    """Parameter store plus the structured handles into it."""

    config: ModelConfig
    store: ParameterStore
    blocks: list = field(default_factory=list)
    head_att: AttentionParams = None
    head_fc_w: Tensor = None
    head_fc_b: Tensor = None

    @property
    def n_params(self):
        return self.store.n_entries()


def _derived_lengths(t_len):
    return [len(idx) for idx in dilation_plan(t_len)]


def _block_slots(config, block_index):
    """(tags, channel widths, active flags) for a block's first attention set.

    The first block consumes the raw granularity streams, where the config
    mask decides which slots are live; masked slots keep their declared
    width so fusion zero-pads them. Later blocks consume streams re-derived
    from the previous block's map, so every slot is live and carries the
    previous block's channel width.
    """
    if block_index == 0:
        chans = config.stream_channels()
        tags = list(GRANULARITY_TAGS)
        widths = [chans[tag] for tag in tags]
        active = [tag in config.mask for tag in tags]
        lengths = [config.stream_length(tag) for tag in tags]
        return tags, widths, active, lengths
    c_prev = config.channels[block_index - 1]
    if config.second_ma == "single":
        return ["map"], [c_prev], [True], [config.t_align]
    lengths = _derived_lengths(config.t_align)
    tags = list(GRANULARITY_TAGS)
    return tags, [c_prev] * 4, [True] * 4, lengths


def _second_slots(config, c_block):
    if config.second_ma == "single":
        return ["map"], [c_block], [config.t_align]
    return list(GRANULARITY_TAGS), [c_block] * 4, _derived_lengths(
        config.t_align)


def _make_attention_set(store, prefix, tags, chans, active, lengths, config,
                        seed):
    params = []
    t_lens = []
    widths = []
    for tag, c_in, live, t_len in zip(tags, chans, active, lengths):
        widths.append(config.k_heads * config.head_width(c_in))
        if live:
            name = f"{prefix}/{tag}"
            params.append(make_attention_params(
                store, name, c_in, config.head_width(c_in),
                config.k_heads, _name_rng(seed, name)))
            t_lens.append(t_len)
        else:
            params.append(None)
            t_lens.append(None)
    return params, t_lens, widths


def init_model(config: ModelConfig, seed=None) -> GacanModel:
    """Build a model with deterministic, seed-reproducible parameters."""
    seed = config.seed if seed is None else seed
    store = ParameterStore()
    blocks = []
    for b in range(config.n_blocks):
        c_out = config.channels[b]
        tags, chans, active, lengths = _block_slots(config, b)
        att1, t_lens, widths = _make_attention_set(
            store, f"block{b}/att1", tags, chans, active, lengths, config,
            seed)
        fuse1 = make_fusion_params(
            store, f"block{b}/fuse1", t_lens, widths, c_out, config.t_align,
            _name_rng(seed, f"block{b}/fuse1"))
        theta = [store.add(f"block{b}/theta{k}",
                           _glorot(_name_rng(seed, f"block{b}/theta{k}"),
                                   c_out, c_out))
                 for k in range(config.cheb_order)]
        tags2, chans2, lengths2 = _second_slots(config, c_out)
        att2, t_lens2, widths2 = _make_attention_set(
            store, f"block{b}/att2", tags2, chans2, [True] * len(tags2),
            lengths2, config, seed)
        fuse2 = make_fusion_params(
            store, f"block{b}/fuse2", t_lens2, widths2, c_out,
            config.t_align, _name_rng(seed, f"block{b}/fuse2"))
        fc_w = store.add(f"block{b}/fc_w",
                         _glorot(_name_rng(seed, f"block{b}/fc_w"),
                                 c_out, c_out))
        fc_b = store.add(f"block{b}/fc_b", np.zeros(c_out))
        gain = store.add(f"block{b}/gain", np.ones(c_out))
        bias = store.add(f"block{b}/bias", np.zeros(c_out))
        blocks.append(ACABlockParams(att1=att1, fuse1=fuse1, theta=theta,
                                     att2=att2, fuse2=fuse2, fc_w=fc_w,
                                     fc_b=fc_b, gain=gain, bias=bias))
    c_last = config.channels[-1]
    c_head = config.head_width(c_last)
    head_att = make_attention_params(store, "head/att", c_last, c_head, 1,
                                     _name_rng(seed, "head/att"))
    head_fc_w = store.add("head/fc_w",
                          _glorot(_name_rng(seed, "head/fc_w"),
                                  config.t_align * c_head, config.h))
    head_fc_b = store.add("head/fc_b", np.zeros(config.h))
    return GacanModel(config=config, store=store, blocks=blocks,
                      head_att=head_att, head_fc_w=head_fc_w,
                      head_fc_b=head_fc_b)


def sample_streams(sample: WindowedSample, config: ModelConfig):
    """Adapt one windowed sample into the first block's stream slots.

    Raw arrays are time-major with the horizon slices of periodic streams
    packed as channels; each stream keeps only its most recent
    `attn_positions` time positions to bound the attention cost. Masked-out
    streams become empty slots that fusion zero-pads.
    """
    slots = []
    for tag in GRANULARITY_TAGS:
        if tag not in config.mask:
            slots.append(None)
            continue
        raw = sample.stream(tag)
        if raw is None:
            raise ValidationError(
                f"sample lacks the {tag!r} stream required by the mask")
        if tag == "m":
            data = np.asarray(raw, dtype=np.float64)[:, None, :]
        else:
            data = np.asarray(raw, dtype=np.float64)
        if data.shape[2] != config.n_nodes:
            raise DimensionError(
                f"stream {tag!r} has {data.shape[2]} nodes, config expects "
                f"{config.n_nodes}")
        data = np.transpose(data, (0, 2, 1))
        data = data[-config.attn_positions:]
        stride = 1 if tag == "m" else config.granularity_spec().strides[tag]
        slots.append(GranularityWindow(tag=tag, stride=stride,
                                       data=Tensor(data)))
    return slots


def _policy_streams(fused, config):
    """Stream slots for attention sets that consume a fused map."""
    if config.second_ma == "single":
        return [GranularityWindow(tag="m", stride=1, data=fused)]
    return derive_streams(fused)


def _attention_set(streams, params_list, fusion, config):
    outputs = []
    for window, params in zip(streams, params_list):
        if (window is None) != (params is None):
            raise ContractError(
                "stream slots and attention parameters disagree on masking")
        if window is None:
            outputs.append(None)
            continue
        outputs.append(temporal_ma(window, params,
                                   score_mode=config.score_mode,
                                   slope=config.leaky_slope))
    return fuse(outputs, fusion, slope=config.leaky_slope)


def aca_forward(streams, block: ACABlockParams, graph: SpectralOperator,
                config: ModelConfig):
    """One block: attention-fuse, per-position spatial conv, attention-fuse,
    fully connected, layer norm. Output (t_align, N, C_block)."""
    if len(streams) != len(block.att1):
        raise DimensionError(
            f"block expects {len(block.att1)} stream slots, got "
            f"{len(streams)}")
    fused = _attention_set(streams, block.att1, block.fuse1, config)
    t_len, n, c = fused.data.shape
    conv_slices = []
    for t in range(t_len):
        xt = T.reshape(T.take(fused, [t], axis=0), (n, c))
        yt = cheb_conv(graph.scaled_laplacian, xt, block.theta)
        conv_slices.append(T.reshape(yt, (1, n, c)))
    conv = (conv_slices[0] if t_len == 1
            else T.concat(conv_slices, axis=0))
    conv = T.relu(conv)
    fused2 = _attention_set(_policy_streams(conv, config), block.att2,
                            block.fuse2, config)
    flat = T.reshape(fused2, (t_len * n, c))
    mixed = T.fully_connected(flat, block.fc_w, block.fc_b,
                              config.leaky_slope)
    return T.layer_norm(T.reshape(mixed, (t_len, n, c)), block.gain,
                        block.bias)


def model_forward(sample: WindowedSample, model: GacanModel,
                  graph: SpectralOperator):
    """Predict the horizon from one sample; output shape (H, N)."""
    config = model.config
    if graph.laplacian.shape[0] != config.n_nodes:
        raise DimensionError(
            f"graph has {graph.laplacian.shape[0]} nodes, config expects "
            f"{config.n_nodes}")
    streams = sample_streams(sample, config)
    x = aca_forward(streams, model.blocks[0], graph, config)
    for block in model.blocks[1:]:
        x = aca_forward(_policy_streams(x, config), block, graph, config)
    window = GranularityWindow(tag="m", stride=1, data=x)
    attended = temporal_ma(window, model.head_att,
                           score_mode=config.score_mode,
                           slope=config.leaky_slope)
    t_len, n, c = attended.data.shape
    per_node = T.reshape(T.transpose(attended, (1, 0, 2)), (n, t_len * c))
    out = T.linear(per_node, model.head_fc_w, model.head_fc_b)
    return T.transpose(out, (1, 0))
