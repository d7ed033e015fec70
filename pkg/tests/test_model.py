"""Network assembly: init determinism, forward contracts, gradient checks."""

import numpy as np
import pytest

from gacan import tensor as T
from gacan.data import WindowedSample, synth_distances
from gacan.errors import DimensionError, ValidationError
from gacan.graph import TrafficGraph
from gacan.model import (
    ModelConfig,
    aca_forward,
    init_model,
    model_forward,
    sample_streams,
)
from gacan.params import grad_check, save_checkpoint
from gacan.tensor import Tensor


def toy_config(**overrides):
    base = dict(n_nodes=4, p=30, q=6, h=2, k_heads=2, cheb_order=2,
                n_blocks=1, channels=(3,), mask=frozenset({"m", "h"}),
                seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def toy_sample(rng, n=4, q=6, h=2, t_h=3, c_h=None, scale=1.0):
    return WindowedSample(
        t0=0,
        x_m=scale * rng.normal(size=(q, n)),
        x_h=scale * rng.normal(size=(t_h, h if c_h is None else c_h, n)),
        x_d=None, x_w=None,
        target=rng.normal(size=(h, n)))


def toy_graph(rng, n=4):
    return TrafficGraph.from_distances(synth_distances(n, rng)).spectral


def no_edge_graph(n):
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    return TrafficGraph.from_distances(dist).spectral


# -- config ----------------------------------------------------------------------

def test_config_rejects_zero_blocks():
    with pytest.raises(ValidationError, match="n_blocks"):
        toy_config(n_blocks=0, channels=())


def test_config_lists_all_offending_fields():
    with pytest.raises(ValidationError) as err:
        toy_config(k_heads=0, mask=frozenset(), n_blocks=1, channels=(4, 4))
    message = str(err.value)
    assert "k_heads" in message and "mask" in message and "channels" in message


def test_config_rejects_indivisible_history():
    with pytest.raises(ValidationError):
        toy_config(q=7)


def test_config_round_trips_through_strings():
    for cfg in (toy_config(),
                ModelConfig(n_nodes=5, p=5, q=2 * 2016, h=12,
                            second_ma="single", head_channels=2,
                            window_style="stride", score_mode="shared",
                            mask=frozenset({"m", "h", "d"}), seed=9)):
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_config_from_dict_rejects_unknown_keys():
    raw = toy_config().to_dict()
    raw["momentum"] = "0.9"
    with pytest.raises(ValidationError, match="momentum"):
        ModelConfig.from_dict(raw)


def test_t_align_defaults_to_horizon():
    assert toy_config(h=2).t_align == 2
    assert toy_config(h=2, t_align=5).t_align == 5


# -- init ---------------------------------------------------------------------------

def test_init_is_deterministic(tmp_path):
    cfg = toy_config()
    a, b = init_model(cfg), init_model(cfg)
    path_a, path_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(path_a, a.store, config=cfg.to_dict())
    save_checkpoint(path_b, b.store, config=cfg.to_dict())
    assert path_a.read_bytes() == path_b.read_bytes()
    c = init_model(cfg, seed=1)
    assert not all(np.array_equal(a.store[n].data, c.store[n].data)
                   for n in a.store.names())


def attention_entries(c_in, c_head, k):
    return 2 * c_in + 1 + k * c_in * c_head


def test_default_config_parameter_count_closed_form():
    cfg = ModelConfig(n_nodes=8, p=5, q=2 * 2016, h=12)
    model = init_model(cfg)
    k, r, t_align, cap = cfg.k_heads, cfg.cheb_order, cfg.t_align, 24
    # Dilated re-sampling of a 12-position map at strides 1, 2, 4, 8.
    derived = [12, 6, 3, 2]

    def fusion_entries(t_lens, widths, c_out):
        return sum(t_align * t for t in t_lens) + sum(widths) * c_out + c_out

    # A stream's fused width is k heads times the head width (= channels).
    def derived_set_entries(c_in, c_out):
        return (4 * attention_entries(c_in, c_in, k)
                + fusion_entries(derived, [k * c_in] * 4, c_out))

    expected = 0
    # Block 0 first set: raw streams, m carries 1 channel, the rest carry
    # one channel per horizon slice; lengths capped at 24 positions.
    raw = ((1, 4032), (12, 336), (12, 14), (12, 2))
    expected += sum(attention_entries(c, c, k) for c, _ in raw)
    expected += fusion_entries([min(t, cap) for _, t in raw],
                               [k * c for c, _ in raw], 16)
    # Block 0 tail and all of block 1.
    expected += r * 16 * 16 + derived_set_entries(16, 16)   # theta, att2
    expected += 16 * 16 + 16 + 2 * 16                       # fc, norm
    expected += derived_set_entries(16, 16)                 # block 1 att1
    expected += r * 16 * 16 + derived_set_entries(16, 16)
    expected += 16 * 16 + 16 + 2 * 16
    # Head: single-head attention plus per-node readout to the horizon.
    expected += attention_entries(16, 16, 1)
    expected += t_align * 16 * cfg.h + cfg.h
    assert model.n_params == expected


def test_masked_streams_have_no_parameters():
    cfg = toy_config(mask=frozenset({"m"}), q=6)
    model = init_model(cfg)
    names = model.store.names()
    assert not any("att1/h" in n or "att1/d" in n or "att1/w" in n
                   for n in names)
    assert any("att1/m" in n for n in names)


# -- forward ---------------------------------------------------------------------

def test_forward_output_shape_and_finiteness():
    rng = np.random.default_rng(1)
    graph = toy_graph(rng)
    for cfg in (toy_config(),
                toy_config(n_blocks=2, channels=(3, 5)),
                toy_config(second_ma="single"),
                toy_config(score_mode="shared"),
                toy_config(window_style="stride", h=2)):
        if cfg.window_style == "block":
            sample = toy_sample(rng, t_h=3, h=2)
        else:
            sample = toy_sample(rng, t_h=4, h=2, c_h=1)
        out = model_forward(sample, init_model(cfg), graph)
        assert out.data.shape == (2, 4)
        assert np.all(np.isfinite(out.data))


def test_forward_is_deterministic():
    rng = np.random.default_rng(2)
    cfg = toy_config()
    model, graph, sample = init_model(cfg), toy_graph(rng), toy_sample(rng)
    a = model_forward(sample, model, graph).data
    b = model_forward(sample, model, graph).data
    assert np.array_equal(a, b)


def test_zero_input_gives_time_constant_block_output():
    cfg = toy_config()
    model = init_model(cfg)
    graph = toy_graph(np.random.default_rng(3))
    streams = sample_streams(
        WindowedSample(t0=0, x_m=np.zeros((6, 4)), x_h=np.zeros((3, 2, 4)),
                       x_d=None, x_w=None, target=np.zeros((2, 4))), cfg)
    out = aca_forward(streams, model.blocks[0], graph, cfg).data
    assert np.max(np.abs(out - out[0])) <= 1e-12


def test_no_edges_means_no_cross_node_flow():
    rng = np.random.default_rng(4)
    cfg = toy_config()
    model = init_model(cfg)
    graph = no_edge_graph(4)
    base = toy_sample(rng)
    ref = model_forward(base, model, graph).data
    for src in range(4):
        x_m = base.x_m.copy()
        x_h = base.x_h.copy()
        x_m[:, src] += 1.0
        x_h[:, :, src] -= 0.5
        bumped = WindowedSample(t0=0, x_m=x_m, x_h=x_h, x_d=None, x_w=None,
                                target=base.target)
        out = model_forward(bumped, model, graph).data
        others = [j for j in range(4) if j != src]
        assert np.max(np.abs(out[:, others] - ref[:, others])) <= 1e-9
        assert np.max(np.abs(out[:, src] - ref[:, src])) > 1e-6


def test_edges_do_mix_nodes():
    rng = np.random.default_rng(5)
    cfg = toy_config()
    model = init_model(cfg)
    graph = toy_graph(rng)
    base = toy_sample(rng)
    x_m = base.x_m.copy()
    x_m[:, 0] += 1.0
    bumped = WindowedSample(t0=0, x_m=x_m, x_h=base.x_h, x_d=None,
                            x_w=None, target=base.target)
    diff = np.abs(model_forward(bumped, model, graph).data
                  - model_forward(base, model, graph).data)
    assert diff[:, 1:].max() > 1e-8


def test_mask_m_only_ignores_other_streams():
    rng = np.random.default_rng(6)
    cfg = toy_config(mask=frozenset({"m"}))
    model = init_model(cfg)
    graph = toy_graph(rng)
    sample = toy_sample(rng)
    swapped = WindowedSample(t0=0, x_m=sample.x_m,
                             x_h=rng.normal(size=(3, 2, 4)), x_d=None,
                             x_w=None, target=sample.target)
    a = model_forward(sample, model, graph).data
    b = model_forward(swapped, model, graph).data
    assert np.array_equal(a, b)


def test_missing_masked_stream_is_an_error():
    rng = np.random.default_rng(7)
    cfg = toy_config(mask=frozenset({"m", "h", "d"}), q=96)
    sample = toy_sample(rng, q=96, t_h=48)
    with pytest.raises(ValidationError, match="'d'"):
        model_forward(sample, init_model(cfg), toy_graph(rng))


def test_wrong_window_length_is_an_error():
    rng = np.random.default_rng(8)
    cfg = toy_config()
    sample = toy_sample(rng, q=4)
    with pytest.raises(DimensionError):
        model_forward(sample, init_model(cfg), toy_graph(rng))


def test_attention_position_cap_keeps_most_recent():
    rng = np.random.default_rng(9)
    cfg = toy_config(attn_positions=4)
    streams = sample_streams(toy_sample(rng), cfg)
    assert streams[0].data.data.shape == (4, 4, 1)
    assert streams[1].data.data.shape == (3, 4, 2)


# -- gradients --------------------------------------------------------------------

# Composite checks run on a pinned instance with its finite-difference
# step raised to 3e-5: several scoring gradients are ~1e-7 at init, and
# at h=1e-6 the subtraction roundoff (|loss| * eps / h ~ 1e-9) would
# dominate them. Seed 17 keeps every pre-activation away from the leaky
# and relu kinks at this step size; margins were verified at h=1e-5 too.

def test_gradients_through_one_block():
    rng = np.random.default_rng(17)
    cfg = toy_config()
    model = init_model(cfg)
    graph = toy_graph(rng)
    streams = sample_streams(toy_sample(rng, scale=0.7), cfg)
    weights = Tensor(rng.normal(size=(cfg.t_align, 4, cfg.channels[0])))

    def forward():
        out = aca_forward(streams, model.blocks[0], graph, cfg)
        return T.tsum(T.mul(out, weights))

    names = [n for n in model.store.names() if n.startswith("block0/")]
    report = grad_check(forward, model.store, h=3e-5, tol=1e-4, names=names)
    bad = [(n, e) for n, e, ok in report if not ok]
    assert not bad, bad


def test_gradients_end_to_end():
    rng = np.random.default_rng(17)
    cfg = toy_config()
    model = init_model(cfg)
    graph = toy_graph(rng)
    sample = toy_sample(rng, scale=0.7)
    weights = Tensor(rng.normal(size=(cfg.h, cfg.n_nodes)))

    def forward():
        out = model_forward(sample, model, graph)
        return T.tsum(T.mul(out, weights))

    report = grad_check(forward, model.store, h=3e-5, tol=1e-3)
    bad = [(n, e) for n, e, ok in report if not ok]
    assert not bad, bad
