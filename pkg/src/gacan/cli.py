"""Batch command-line surface wiring every module together.

Commands: synth, preprocess, train, eval, predict, gradcheck, ablate.
Each reads one flat `key = value` config file, applies documented
defaults for absent keys, rejects unknown keys, and stamps every output
with a hash of the effective configuration so artifacts trace back to
the exact settings that produced them. Runs are deterministic given the
config and seed. Exit codes are a stable contract: 0 success, 1 check
failure, 2 config error, 3 data error, 4 numeric divergence.
"""

import argparse
import hashlib
import json
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    GRANULARITIES,
    WINDOW_STYLES,
    NormStats,
    WindowedSample,
    extract_windows,
    granularity_strides,
    interpolate_missing,
    load_speeds,
    synth_distances,
    synth_generate,
    write_distances,
    write_speeds,
    zero_mean,
)
from .errors import ConfigError, DataError, GacanError, NumericError
from .graph import TrafficGraph, load_distances
from .model import (
    SECOND_MA_MODES,
    ModelConfig,
    aca_forward,
    init_model,
    model_forward,
    sample_streams,
)
from .attention import SCORE_MODES
from .params import (
    ParameterStore,
    grad_check,
    grad_check_summary,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor
from .training import (
    LOSS_KINDS,
    MODE_MASKS,
    TrainConfig,
    ablate,
    evaluate,
    prepare_dataset,
    train,
    write_history,
)

STREAM_TAGS = ("m",) + GRANULARITIES


# -- run-config files ---------------------------------------------------------------


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_mask(text):
    tags = text.strip()
    if not tags:
        raise ValueError("granularity mask is empty")
    unknown = sorted(set(tags) - set(STREAM_TAGS))
    if unknown:
        raise ValueError(f"unknown granularity tags {unknown}")
    return frozenset(tags)


def _parse_ints(text):
    return tuple(int(part) for part in text.split(","))


def _parse_floats(text):
    return tuple(float(part) for part in text.split(","))


def _parse_auto_int(text):
    return None if text.strip().lower() == "auto" else int(text)


def _parse_auto_ints(text):
    return None if text.strip().lower() == "auto" else _parse_ints(text)


def _parse_opt_int(text):
    return None if text.strip().lower() == "none" else int(text)


def _parse_modes(text):
    parts = tuple(part.strip() for part in text.split(",") if part.strip())
    if not parts:
        raise ValueError("modes list is empty")
    unknown = sorted(set(parts) - set(MODE_MASKS))
    if unknown:
        raise ValueError(f"unknown ablation modes {unknown}")
    return parts


def _parse_choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


# Every legal config key: parser, default (as written in a file), doc.
CONFIG_KEYS = {
    "speeds": (str, "", "path to the speeds CSV"),
    "distances": (str, "", "path to the from,to,distance CSV"),
    "p": (int, "5", "minutes per time slice"),
    "q": (_parse_auto_int, "auto",
          "history slices; auto = two weeks when 'w' enabled, else two days"),
    "h": (int, "12", "forecast horizon in slices"),
    "mask": (_parse_mask, "mhdw", "granularity streams, subset of mhdw"),
    "window_style": (_parse_choice(*WINDOW_STYLES), "block",
                     "periodic windows: h-slice blocks or stride samples"),
    "k_heads": (int, "4", "attention heads per stream"),
    "cheb_order": (int, "3", "spectral filter polynomial order"),
    "n_blocks": (int, "2", "stacked attention-convolution blocks"),
    "channels": (_parse_ints, "16,16", "feature width per block"),
    "t_align": (_parse_auto_int, "auto",
                "attention output length; auto = horizon"),
    "second_ma": (_parse_choice(*SECOND_MA_MODES), "fused-dilated",
                  "second attention input: dilated re-samples or one stream"),
    "score_mode": (_parse_choice(*SCORE_MODES), "pernode",
                   "attention scores per node or shared across nodes"),
    "head_channels": (_parse_opt_int, "none",
                      "attention value width override, or none"),
    "attn_positions": (int, "24", "most recent positions any attention sees"),
    "leaky_slope": (float, "0.2", "negative slope of leaky activations"),
    "step_size": (float, "0.001", "optimizer step size"),
    "beta1": (float, "0.9", "first-moment decay"),
    "beta2": (float, "0.999", "second-moment decay"),
    "eps": (float, "1e-8", "optimizer denominator floor"),
    "batch_size": (int, "8", "samples per step"),
    "max_steps": (int, "2000", "optimization steps"),
    "eval_every": (int, "50", "steps between validation evaluations"),
    "patience": (int, "10", "evaluations without improvement before stopping"),
    "loss": (_parse_choice(*LOSS_KINDS), "rmse", "training loss"),
    "standardize": (_parse_bool, "false",
                    "divide by per-node std in addition to centering"),
    "ratios": (_parse_floats, "0.7,0.1,0.2",
               "chronological train/val/test fractions"),
    "seed": (int, "0", "seed for init, batching, and synthesis"),
    "split": (_parse_choice("train", "val", "test"), "test",
              "which split eval scores"),
    "buckets": (_parse_auto_ints, "auto",
                "horizon steps eval reports; auto = all 1..h"),
    "modes": (_parse_modes, "a,b,c,d", "granularity subsets ablate trains"),
    "nodes": (int, "8", "synthetic sensor count"),
    "days": (int, "21", "synthetic day count"),
    "daily_amp": (float, "14.0", "synthetic daily sinusoid amplitude"),
    "weekly_amp": (float, "7.0", "synthetic weekday/weekend offset"),
    "noise_std": (float, "1.0", "synthetic noise level"),
    "spatial_coupling": (float, "0.3", "synthetic noise smoothing weight"),
    "base_speed": (float, "60.0", "synthetic mean speed"),
}

# Model-architecture keys; when eval or predict receives one of these in
# its config file it must agree with the checkpoint's record.
STRUCTURAL_KEYS = (
    "p", "q", "h", "mask", "window_style", "k_heads", "cheb_order",
    "n_blocks", "channels", "t_align", "second_ma", "score_mode",
    "head_channels", "attn_positions", "leaky_slope",
)


def parse_config_text(text, source="<config>"):
    """Flat `key = value` lines; '#' comments; unknown keys rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def typed_values(cfg):
    """Parse every value once so bad entries fail with the key named."""
    typed = {}
    for key, (parse, _default, _doc) in CONFIG_KEYS.items():
        try:
            typed[key] = parse(cfg[key])
        except ValueError as err:
            raise ConfigError(f"config key '{key}': {err}") from None
    return typed


def config_hash(cfg):
    """Short digest of the effective config, stamped on every output."""
    canon = "\n".join(f"{key} = {cfg[key]}" for key in sorted(cfg))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _load_config(args, flag_keys=()):
    """File values + defaults + flag overrides -> (file, strings, typed, hash)."""
    file_values = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise CliError(2, f"config file not found: {args.config}") from None
        except OSError as err:
            raise CliError(2, f"cannot read config {args.config}: {err}") from None
        file_values = parse_config_text(text, source=args.config)
    cfg = {key: default for key, (_p, default, _d) in CONFIG_KEYS.items()}
    cfg.update(file_values)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = str(args.seed)
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = str(value)
    return file_values, cfg, typed_values(cfg), config_hash(cfg)


def _resolved_q(typed):
    if typed["q"] is not None:
        return typed["q"]
    _s_h, s_d, s_w = granularity_strides(typed["p"])
    return 2 * (s_w if "w" in typed["mask"] else s_d)


def _model_config(typed, n_nodes):
    return ModelConfig(
        n_nodes=n_nodes, p=typed["p"], q=_resolved_q(typed), h=typed["h"],
        k_heads=typed["k_heads"], cheb_order=typed["cheb_order"],
        n_blocks=typed["n_blocks"], channels=typed["channels"],
        t_align=typed["t_align"], mask=typed["mask"],
        window_style=typed["window_style"], second_ma=typed["second_ma"],
        score_mode=typed["score_mode"], head_channels=typed["head_channels"],
        attn_positions=typed["attn_positions"],
        leaky_slope=typed["leaky_slope"], seed=typed["seed"])


def _train_config(typed):
    return TrainConfig(
        step_size=typed["step_size"], beta1=typed["beta1"],
        beta2=typed["beta2"], eps=typed["eps"],
        batch_size=typed["batch_size"], max_steps=typed["max_steps"],
        eval_every=typed["eval_every"], patience=typed["patience"],
        loss=typed["loss"], seed=typed["seed"])


def _require(typed, *keys):
    for key in keys:
        if not typed[key]:
            raise ConfigError(f"config key '{key}' is required for this command")


# -- exit-code plumbing ---------------------------------------------------------------


class CliError(Exception):
    """Command failure carrying its exit code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


@contextmanager
def _phase(code):
    """Map errors raised inside one command phase onto the exit contract."""
    try:
        yield
    except CliError:
        raise
    except NumericError as err:
        raise CliError(4, str(err)) from err
    except FileNotFoundError as err:
        raise CliError(3, f"file not found: {err.filename or err}") from err
    except (GacanError, OSError, ValueError) as err:
        raise CliError(code, str(err)) from err


def _ensure_out(args):
    out = Path(getattr(args, "out", None) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(3, f"cannot create output dir {out}: {err}") from err
    return out


def _write_text(path, text):
    with _phase(3):
        Path(path).write_text(text, encoding="utf-8")
    return str(path)


def _write_json(path, payload):
    return _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_echo(out, cfg, chash):
    lines = [f"# config {chash}"]
    lines += [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    return _write_text(out / "effective-config.txt", "\n".join(lines) + "\n")


# -- checkpoint plumbing ---------------------------------------------------------------


def _save_model_checkpoint(path, model, stats, chash):
    config = dict(sorted(model.config.to_dict().items()))
    config["config_hash"] = chash
    extras = {"norm/mean": stats.mean}
    if stats.std is not None:
        extras["norm/std"] = stats.std
    save_checkpoint(path, model.store, config=config, extras=extras)
    return str(path)


def _load_model_checkpoint(path):
    """Checkpoint file -> (parameter arrays, NormStats, ModelConfig, hash)."""
    arrays, config = load_checkpoint(path)
    mean = arrays.pop("norm/mean", None)
    std = arrays.pop("norm/std", None)
    if mean is None:
        raise ConfigError(f"{path}: checkpoint lacks normalization stats")
    ckpt_hash = config.pop("config_hash", "")
    model_config = ModelConfig.from_dict(config)
    return arrays, NormStats(mean=mean, std=std), model_config, ckpt_hash


def _restore_model(model_config, params):
    model = init_model(model_config)
    missing = sorted(set(model.store.names()) - set(params))
    if missing:
        raise ConfigError(
            f"checkpoint is missing parameters for this architecture, "
            f"first: {missing[0]!r}")
    model.store.load_values(params)
    return model


def _check_structural(file_values, model_config):
    """Structural keys supplied alongside a checkpoint must match it."""
    for key in STRUCTURAL_KEYS:
        if key not in file_values:
            continue
        supplied = CONFIG_KEYS[key][0](file_values[key])
        if supplied is None:
            continue  # auto / none defers to the checkpoint
        if supplied != getattr(model_config, key):
            raise ConfigError(
                f"config key '{key}' = {file_values[key]} conflicts with the "
                f"checkpoint's {getattr(model_config, key)}")


def _check_node_count(series, model_config):
    if series.n_nodes != model_config.n_nodes:
        raise CliError(2, f"checkpoint expects {model_config.n_nodes} nodes, "
                          f"data has {series.n_nodes}")


def _buckets(typed, horizon):
    buckets = typed["buckets"]
    if buckets is None:
        return tuple(range(1, horizon + 1))
    bad = [b for b in buckets if not 1 <= b <= horizon]
    if bad:
        raise ConfigError(f"buckets {bad} outside the horizon 1..{horizon}")
    return tuple(buckets)


# -- commands ---------------------------------------------------------------


def cmd_synth(args):
    with _phase(2):
        _, cfg, typed, chash = _load_config(
            args, flag_keys=("nodes", "days", "p"))
        series, distances = synth_generate(
            typed["nodes"], typed["days"], typed["p"], seed=typed["seed"],
            daily_amp=typed["daily_amp"], weekly_amp=typed["weekly_amp"],
            noise_std=typed["noise_std"],
            spatial_coupling=typed["spatial_coupling"],
            base_speed=typed["base_speed"])
    out = _ensure_out(args)
    with _phase(3):
        write_speeds(out / "speeds.csv", series,
                     comments=(f"config {chash}",))
        write_distances(out / "distances.csv", distances,
                        comments=(f"config {chash}",))
    truth = {"config_hash": chash, "n_slices": series.n_slices}
    for key in ("nodes", "days", "p", "seed", "daily_amp", "weekly_amp",
                "noise_std", "spatial_coupling", "base_speed"):
        truth[key] = typed[key]
    _write_json(out / "truth.json", truth)
    _write_echo(out, cfg, chash)
    print(f"synthesized {series.n_slices} slices x {series.n_nodes} nodes "
          f"(config {chash})")
    for name in ("speeds.csv", "distances.csv", "truth.json"):
        print(f"wrote {out / name}")
    return 0


def cmd_preprocess(args):
    with _phase(2):
        _, cfg, typed, chash = _load_config(args)
        _require(typed, "speeds")
    out = _ensure_out(args)
    with _phase(3):
        series = load_speeds(typed["speeds"])
        gaps = int(series.missing.sum())
        cleaned = interpolate_missing(series) if gaps else series
        write_speeds(out / "cleaned.csv", cleaned,
                     comments=(f"config {chash}",))
    _write_json(out / "preprocess.json", {
        "config_hash": chash,
        "source": typed["speeds"],
        "n_slices": series.n_slices,
        "n_nodes": series.n_nodes,
        "missing_cells": gaps,
        "missing_per_node": [int(c) for c in series.missing.sum(axis=0)],
    })
    _write_echo(out, cfg, chash)
    print(f"interpolated {gaps} missing cells (config {chash})")
    print(f"wrote {out / 'cleaned.csv'}")
    return 0


def cmd_train(args):
    with _phase(2):
        _, cfg, typed, chash = _load_config(args)
        _require(typed, "speeds", "distances")
        train_config = _train_config(typed)
    with _phase(3):
        series = load_speeds(typed["speeds"])
        dist = load_distances(typed["distances"], n_nodes=series.n_nodes)
    with _phase(2):
        model_config = _model_config(typed, series.n_nodes)
    with _phase(3):
        graph = TrafficGraph.from_distances(dist)
        data = prepare_dataset(series, model_config.granularity_spec(),
                               ratios=typed["ratios"],
                               standardize=typed["standardize"])
    out = _ensure_out(args)
    model = init_model(model_config)
    # non-finite values surface as NumericError, so the raw numpy
    # warnings behind them are noise here
    with _phase(4), np.errstate(over="ignore", invalid="ignore"):
        model, history = train(model, data, graph.spectral, train_config)
    _save_model_checkpoint(out / "checkpoint.txt", model, data.stats, chash)
    with _phase(3):
        write_history(out / "history.csv", history,
                      comments=(f"config {chash}",))
    _write_echo(out, cfg, chash)
    if not args.no_figures:
        from . import report
        with _phase(3):
            report.history_figure(out / "history.png", history)
    best = min(row[2] for row in history)
    print(f"trained {history[-1][0]} steps; best validation RMSE "
          f"{best:.6f} normalized (config {chash})")
    print(f"wrote {out / 'checkpoint.txt'}")
    print(f"wrote {out / 'history.csv'}")
    return 0


def cmd_eval(args):
    with _phase(2):
        file_values, cfg, typed, chash = _load_config(args)
        _require(typed, "speeds", "distances")
    with _phase(2):
        params, stats, model_config, _ = _load_model_checkpoint(args.checkpoint)
        _check_structural(file_values, model_config)
        buckets = _buckets(typed, model_config.h)
    with _phase(3):
        series = load_speeds(typed["speeds"])
    _check_node_count(series, model_config)
    with _phase(3):
        dist = load_distances(typed["distances"], n_nodes=series.n_nodes)
        graph = TrafficGraph.from_distances(dist)
        data = prepare_dataset(series, model_config.granularity_spec(),
                               ratios=typed["ratios"], stats=stats)
    with _phase(2):
        model = _restore_model(model_config, params)
    t0s = getattr(data, typed["split"])
    with _phase(3):
        if not t0s:
            raise DataError(f"split '{typed['split']}' has no complete windows")
    out = _ensure_out(args)
    with _phase(4), np.errstate(over="ignore", invalid="ignore"):
        cache = {}
        for t0 in t0s:
            sample = extract_windows(data.series, t0, data.spec)
            cache[t0] = (sample, model_forward(sample, model,
                                               graph.spectral).data)
    meta = {"config_hash": chash, "checkpoint": str(args.checkpoint),
            "split": typed["split"], "samples": len(t0s)}
    metrics = evaluate(lambda s: cache[s.t0][1], data, t0s, buckets, meta=meta)
    rows = []
    for t0 in t0s:
        sample, pred = cache[t0]
        pred_d = data.stats.invert(pred)
        truth_d = data.stats.invert(sample.target)
        for step in range(1, model_config.h + 1):
            for node in range(model_config.n_nodes):
                rows.append((t0, step, node,
                             float(pred_d[step - 1, node]),
                             float(truth_d[step - 1, node])))
    lines = [f"# config {chash}", "t0,horizon,node,pred,truth"]
    lines += [f"{t0},{step},{node},{p!r},{t!r}"
              for t0, step, node, p, t in rows]
    _write_text(out / "predictions.csv", "\n".join(lines) + "\n")
    payload = metrics.to_json_dict()
    _write_json(out / "metrics.json", payload)
    _write_echo(out, cfg, chash)
    if not args.no_figures:
        from . import report
        with _phase(3):
            report.predictions_figure(out / "predictions.png", rows)
            report.metrics_figure(out / "metrics.png", payload)
    for bucket in metrics.buckets:
        print(f"h={bucket.horizon_minutes:>4} min  MAE {bucket.mae:.4f}  "
              f"RMSE {bucket.rmse:.4f}")
    print(f"wrote {out / 'metrics.json'}")
    print(f"wrote {out / 'predictions.csv'}")
    return 0


def cmd_predict(args):
    with _phase(2):
        file_values, cfg, typed, chash = _load_config(args)
        _require(typed, "speeds", "distances")
        params, stats, model_config, _ = _load_model_checkpoint(args.checkpoint)
        _check_structural(file_values, model_config)
    with _phase(3):
        series = load_speeds(typed["speeds"])
    _check_node_count(series, model_config)
    with _phase(3):
        dist = load_distances(typed["distances"], n_nodes=series.n_nodes)
        graph = TrafficGraph.from_distances(dist)
        if series.missing.any():
            series = interpolate_missing(series)
        normalized = zero_mean(series, stats)
        sample = extract_windows(normalized, args.t0,
                                 model_config.granularity_spec())
        if sample is None:
            raise DataError(
                f"anchor {args.t0} lacks the history or future slices the "
                f"configured windows need")
    with _phase(2):
        model = _restore_model(model_config, params)
    with _phase(4), np.errstate(over="ignore", invalid="ignore"):
        pred = stats.invert(model_forward(sample, model, graph.spectral).data)
    out = _ensure_out(args)
    header = "horizon," + ",".join(f"node_{i}"
                                   for i in range(model_config.n_nodes))
    lines = [f"# config {chash}", header]
    for step in range(1, model_config.h + 1):
        lines.append(f"{step}," + ",".join(repr(float(v))
                                           for v in pred[step - 1]))
    _write_text(out / "prediction.csv", "\n".join(lines) + "\n")
    _write_echo(out, cfg, chash)
    print(f"predicted {model_config.h} steps from anchor {args.t0} "
          f"(config {chash})")
    print(f"wrote {out / 'prediction.csv'}")
    return 0


def cmd_ablate(args):
    with _phase(2):
        _, cfg, typed, chash = _load_config(args)
        _require(typed, "speeds", "distances")
        train_config = _train_config(typed)
        modes = typed["modes"]
    with _phase(3):
        series = load_speeds(typed["speeds"])
        dist = load_distances(typed["distances"], n_nodes=series.n_nodes)
        graph = TrafficGraph.from_distances(dist)
    with _phase(2):
        model_config = _model_config(typed, series.n_nodes)
        # surface per-mode geometry problems before any training happens
        for mode in modes:
            replace(model_config, mask=MODE_MASKS[mode])
        buckets = _buckets(typed, model_config.h)
    out = _ensure_out(args)
    with _phase(4), np.errstate(over="ignore", invalid="ignore"):
        runs = ablate(series, graph.spectral, model_config, train_config,
                      modes=modes, buckets=buckets, ratios=typed["ratios"],
                      standardize=typed["standardize"],
                      meta={"config_hash": chash})
    rows = []
    for mode in sorted(runs):
        for bucket in runs[mode].report.buckets:
            rows.append((mode, bucket.horizon_minutes, bucket.mae,
                         bucket.rmse))
    lines = [f"# config {chash}", "mode,horizon_minutes,mae,rmse"]
    lines += [f"{mode},{minutes},{mae_v!r},{rmse_v!r}"
              for mode, minutes, mae_v, rmse_v in rows]
    _write_text(out / "ablation.csv", "\n".join(lines) + "\n")
    _write_echo(out, cfg, chash)
    if not args.no_figures:
        from . import report
        with _phase(3):
            report.ablation_figure(out / "ablation.png", rows)
    for mode, minutes, _mae_v, rmse_v in rows:
        mask = "".join(t for t in STREAM_TAGS if t in MODE_MASKS[mode])
        print(f"mode {mode} ({mask}): RMSE {rmse_v:.4f} at {minutes} min")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


# -- gradient-check batteries ---------------------------------------------------------------

# Primitive inputs are drawn uniformly in [-2, 2], kept a margin away
# from activation kinks (relu-like ops) and from zero (sqrt, reciprocal)
# so the h=1e-6 central difference never straddles a non-smooth point.


def _uniform(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _away_from_zero(rng, shape, margin=0.2):
    x = _uniform(rng, shape)
    return x + np.where(x >= 0, margin, -margin)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _projected(value, proj):
    return T.tsum(T.mul(value, Tensor(proj)))


def _primitive_cases():
    # Readout projections are positive so a parameter's gradient never
    # cancels to a magnitude where finite-difference roundoff dominates
    # the relative error.
    def pair(op, out_shape):
        def build(rng, store):
            x = store.add("x", _uniform(rng, (2, 3)))
            y = store.add("y", _uniform(rng, (2, 3)))
            proj = _positive(rng, out_shape)
            return lambda: _projected(op(x, y), proj)
        return build

    def unary(op, make_input, in_shape, out_shape=None):
        def build(rng, store):
            x = store.add("x", make_input(rng, in_shape))
            proj = _positive(rng, out_shape or in_shape)
            return lambda: _projected(op(x), proj)
        return build

    def matmul_case(rng, store):
        x = store.add("x", _positive(rng, (2, 3)))
        y = store.add("y", _positive(rng, (3, 4)))
        proj = _positive(rng, (2, 4))
        return lambda: _projected(T.matmul(x, y), proj)

    def concat_case(rng, store):
        x = store.add("x", _uniform(rng, (2, 3)))
        y = store.add("y", _uniform(rng, (1, 3)))
        proj = _positive(rng, (3, 3))
        return lambda: _projected(T.concat([x, y], axis=0), proj)

    def split_case(rng, store):
        x = store.add("x", _uniform(rng, (2, 5)))
        proj_a = _positive(rng, (2, 2))
        proj_b = _positive(rng, (2, 3))

        def forward():
            a, b = T.split(x, (2, 3), axis=1)
            return T.add(_projected(a, proj_a), _projected(b, proj_b))
        return forward

    def take_case(rng, store):
        x = store.add("x", _uniform(rng, (4, 3)))
        proj = _positive(rng, (3, 3))
        return lambda: _projected(T.take(x, np.array([2, 0, 3]), axis=0), proj)

    def fully_connected_case(rng, store):
        x = store.add("x", _positive(rng, (3, 4)))
        w = store.add("w", _positive(rng, (4, 2)))
        b = store.add("b", _positive(rng, (2,)))
        proj = _positive(rng, (3, 2))
        return lambda: _projected(T.fully_connected(x, w, b), proj)

    def linear_case(rng, store):
        x = store.add("x", _positive(rng, (3, 4)))
        w = store.add("w", _positive(rng, (4, 2)))
        b = store.add("b", _uniform(rng, (2,)))
        proj = _positive(rng, (3, 2))
        return lambda: _projected(T.linear(x, w, b), proj)

    def layer_norm_case(rng, store):
        x = store.add("x", _uniform(rng, (3, 4)))
        gain = store.add("gain", _positive(rng, (4,)))
        bias = store.add("bias", _uniform(rng, (4,)))
        proj = _positive(rng, (3, 4))
        return lambda: _projected(T.layer_norm(x, gain, bias), proj)

    return [
        ("add", pair(T.add, (2, 3))),
        ("sub", pair(T.sub, (2, 3))),
        ("mul", pair(T.mul, (2, 3))),
        ("matmul", matmul_case),
        ("tsum", unary(lambda x: T.tsum(x, axis=1), _uniform, (2, 3), (2,))),
        ("tmean", unary(lambda x: T.tmean(x, axis=0), _uniform, (2, 3),
                        (3,))),
        ("sqrt", unary(T.sqrt, _positive, (2, 3))),
        ("relu", unary(T.relu, _away_from_zero, (2, 3))),
        ("leaky_relu", unary(T.leaky_relu, _away_from_zero, (2, 3))),
        ("sigmoid", unary(T.sigmoid, _uniform, (2, 3))),
        ("softmax", unary(lambda x: T.softmax(x, axis=1), _uniform, (2, 4))),
        ("reciprocal", unary(T.reciprocal, _positive, (2, 3))),
        ("reshape", unary(lambda x: T.reshape(x, (3, 4)), _uniform,
                          (2, 6), (3, 4))),
        ("transpose", unary(lambda x: T.transpose(x, (1, 0, 2)), _uniform,
                            (2, 3, 4), (3, 2, 4))),
        ("concat", concat_case),
        ("split", split_case),
        ("take", take_case),
        ("fully_connected", fully_connected_case),
        ("linear", linear_case),
        ("layer_norm", layer_norm_case),
    ]


def primitive_checks(seed=13, trials=100, h=1e-6, tol=1e-5):
    """FD-check every differentiable primitive on `trials` random inputs.

    The seed is pinned: softmax and layer_norm gradients are invariant to
    constant shifts, so a component can cancel below the h=1e-6 noise
    floor on unlucky draws; the pinned draws keep every checked
    component well above it. Returns (name, worst error, passed) rows.
    """
    rng = np.random.default_rng(seed)
    report = []
    for name, build in _primitive_cases():
        worst = 0.0
        for _ in range(trials):
            store = ParameterStore()
            forward = build(rng, store)
            rows = grad_check(forward, store, h=h, tol=tol)
            worst = max(worst, max(err for _n, err, _ok in rows))
        report.append((name, worst, worst <= tol))
    return report


def _composite_fixture(seed):
    """Pinned toy instance for the block and end-to-end checks.

    Composite scores carry gradients near 1e-7, so the step is raised to
    3e-5 to keep subtraction roundoff below them; seed 17 keeps every
    pre-activation away from the relu and leaky kinks at that step.
    """
    rng = np.random.default_rng(seed)
    config = ModelConfig(n_nodes=4, p=30, q=6, h=2, k_heads=2, cheb_order=2,
                         n_blocks=1, channels=(3,),
                         mask=frozenset({"m", "h"}), seed=0)
    model = init_model(config)
    graph = TrafficGraph.from_distances(synth_distances(4, rng)).spectral
    sample = WindowedSample(
        t0=0,
        x_m=0.7 * rng.normal(size=(config.q, config.n_nodes)),
        x_h=0.7 * rng.normal(size=(3, config.h, config.n_nodes)),
        x_d=None, x_w=None,
        target=rng.normal(size=(config.h, config.n_nodes)))
    return rng, config, model, graph, sample


def _corrupt_first(model):
    first = model.store.names()[0]
    model.store[first].data.reshape(-1)[0] = np.inf


def block_checks(seed=17, h=3e-5, tol=1e-4, corrupt=False):
    """FD-check one attention-convolution block's parameters."""
    rng, config, model, graph, sample = _composite_fixture(seed)
    streams = sample_streams(sample, config)
    proj = rng.normal(size=(config.t_align, config.n_nodes,
                            config.channels[0]))
    if corrupt:
        _corrupt_first(model)

    def forward():
        out = aca_forward(streams, model.blocks[0], graph, config)
        return _projected(out, proj)

    names = [n for n in model.store.names() if n.startswith("block0/")]
    return grad_check(forward, model.store, h=h, tol=tol, names=names)


def model_checks(seed=17, h=3e-5, tol=1e-3, corrupt=False):
    """FD-check the full toy network end to end."""
    rng, config, model, graph, sample = _composite_fixture(seed)
    proj = rng.normal(size=(config.h, config.n_nodes))
    if corrupt:
        _corrupt_first(model)

    def forward():
        out = model_forward(sample, model, graph)
        return _projected(out, proj)

    return grad_check(forward, model.store, h=h, tol=tol)


def cmd_gradcheck(args):
    with _phase(2):
        _, _cfg, _typed, chash = _load_config(args)
        if args.self_test_corrupt and args.scope == "primitives":
            raise ConfigError(
                "the corruption flag applies to block and model scopes")
    # check inputs are pinned internally for finite-difference conditioning
    print(f"scope {args.scope} (config {chash})")
    try:
        if args.scope == "primitives":
            rows = primitive_checks()
        elif args.scope == "block":
            rows = block_checks(corrupt=args.self_test_corrupt)
        else:
            rows = model_checks(corrupt=args.self_test_corrupt)
    except NumericError as err:
        print(f"FAIL  non-finite forward pass: {err}")
        return 1
    for line in grad_check_summary(rows):
        print(line)
    failed = sum(1 for _name, _err, ok in rows if not ok)
    if failed:
        print(f"{failed} of {len(rows)} checks failed")
        return 1
    print(f"all {len(rows)} checks passed")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gacan",
        description="Multi-granularity attention traffic forecasting: "
                    "synthesis, training, evaluation, and verification.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="flat 'key = value' run config")
    common.add_argument("--seed", type=int, metavar="INT",
                        help="override the config seed")
    common.add_argument("--out", metavar="DIR",
                        help="output directory (default: current)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="write a deterministic synthetic dataset")
    p.add_argument("--nodes", type=int, help="override the nodes key")
    p.add_argument("--days", type=int, help="override the days key")
    p.add_argument("--p", type=int, help="override the p key")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common],
                       help="interpolate gaps and write a cleaned speeds CSV")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common],
                       help="train a model; writes checkpoint and history")
    p.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint; writes metrics and "
                            "predictions")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common],
                       help="forecast the horizon from one anchor slice")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--t0", type=int, required=True, metavar="INT",
                   help="anchor slice index")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient verification")
    p.add_argument("scope", choices=("primitives", "block", "model"))
    p.add_argument("--self-test-corrupt", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common],
                       help="train granularity subsets and compare errors")
    p.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
