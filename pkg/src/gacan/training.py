"""Loss, optimizer, training loop, evaluation metrics, and baselines.

Training minimizes the batch-mean root mean square error with an
adaptive-moment optimizer, evaluates on the validation split at a fixed
cadence, stops early when validation stops improving, and always returns
the parameters that scored the best validation RMSE. Every run is
deterministic given its seed: sample order comes from one seeded
generator and all reductions are single-threaded.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import (
    GranularitySpec,
    NormStats,
    SpeedSeries,
    chronological_split,
    extract_windows,
    fit_norm_stats,
    interpolate_missing,
    split_bounds,
    zero_mean,
)
from .errors import (
    DimensionError,
    NumericError,
    TrainingDivergenceError,
    ValidationError,
)
from .model import GacanModel, init_model, model_forward
from .tensor import Tensor

HA_SLICES = 9
LOSS_KINDS = ("rmse", "mse")

# Granularity subsets trained by the ablation protocol, smallest first.
MODE_MASKS = {
    "a": frozenset({"m"}),
    "b": frozenset({"m", "h"}),
    "c": frozenset({"m", "h", "d"}),
    "d": frozenset({"m", "h", "d", "w"}),
}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings."""

    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 2000
    eval_every: int = 50
    patience: int = 10
    loss: str = "rmse"
    seed: int = 0

    def __post_init__(self):
        problems = []
        # step size 0 is legal: it must leave parameters bit-identical
        if self.step_size < 0:
            problems.append("step_size must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if self.eps <= 0:
            problems.append("eps must be positive")
        for name in ("batch_size", "max_steps", "eval_every", "patience"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.loss not in LOSS_KINDS:
            problems.append(f"loss must be one of {LOSS_KINDS}")
        if problems:
            raise ValidationError("invalid train config: "
                                  + "; ".join(problems))


# -- losses and metrics ------------------------------------------------------


def _check_shapes(pred, truth):
    p = pred.data.shape if isinstance(pred, Tensor) else np.shape(pred)
    t = truth.data.shape if isinstance(truth, Tensor) else np.shape(truth)
    if p != t:
        raise DimensionError(f"prediction shape {p} != truth shape {t}")


def rmse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """sqrt(mean((pred - truth)^2)) with a defined gradient at zero.

    The square root has no derivative at 0; when the residual vanishes
    identically the loss is exactly 0 and its gradient is defined as 0.
    """
    _check_shapes(pred, truth)
    diff = T.sub(pred, truth)
    mse = T.tmean(T.mul(diff, diff))
    if mse.data == 0.0:
        return mse * 0.0
    return T.sqrt(mse)


def mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    _check_shapes(pred, truth)
    diff = T.sub(pred, truth)
    return T.tmean(T.mul(diff, diff))


def mae(pred, truth) -> float:
    _check_shapes(pred, truth)
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(truth))))


def rmse(pred, truth) -> float:
    _check_shapes(pred, truth)
    diff = np.asarray(pred) - np.asarray(truth)
    return float(np.sqrt(np.mean(diff * diff)))


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, store, config: TrainConfig):
        self.store = store
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self):
        cfg = self.config
        self.t += 1
        correction1 = 1.0 - cfg.beta1 ** self.t
        correction2 = 1.0 - cfg.beta2 ** self.t
        for name, tensor in self.store.items():
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            m = self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * (g * g)
            update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
            tensor.data = tensor.data - cfg.step_size * update


# -- dataset bundle -----------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplits:
    """Normalized series plus the anchor lists of each chronological split."""

    series: SpeedSeries
    spec: GranularitySpec
    stats: NormStats
    train: tuple
    val: tuple
    test: tuple


def prepare_dataset(series: SpeedSeries, spec: GranularitySpec,
                    ratios=(0.7, 0.1, 0.2), standardize=False, stats=None):
    """Interpolate gaps, fit normalization on the training span, split.

    Passing `stats` skips the fit and reuses an earlier run's
    normalization, as when scoring fresh data against a trained model.
    """
    if series.missing.any():
        series = interpolate_missing(series)
    if stats is None:
        train_span = slice(0, split_bounds(series.n_slices, ratios)[0][1])
        stats = fit_norm_stats(series, train_span, standardize=standardize)
    normalized = zero_mean(series, stats)
    train, val, test = chronological_split(normalized, spec, ratios)
    return DatasetSplits(series=normalized, spec=spec, stats=stats,
                         train=tuple(train), val=tuple(val),
                         test=tuple(test))


def _sample_at(data: DatasetSplits, t0):
    sample = extract_windows(data.series, t0, data.spec)
    if sample is None:
        raise ValidationError(f"anchor {t0} has no complete window")
    return sample


# -- training loop -------------------------------------------------------------


def _val_rmse(model, data, graph):
    """Pooled RMSE over every validation sample, in normalized units."""
    total, count = 0.0, 0
    for t0 in data.val:
        sample = _sample_at(data, t0)
        pred = model_forward(sample, model, graph).data
        diff = pred - sample.target
        total += float(np.sum(diff * diff))
        count += diff.size
    return float(np.sqrt(total / count))


def train(model: GacanModel, data: DatasetSplits, graph,
          config: TrainConfig):
    """Optimize in place; return (model at best validation, history rows).

    History rows are (step, train batch loss, validation RMSE), one per
    evaluation point. Divergence (a non-finite loss or intermediate)
    raises with the best parameters seen so far and the partial history.
    """
    if not data.train or not data.val:
        raise ValidationError("training needs nonempty train and val splits")
    loss_fn = rmse_loss if config.loss == "rmse" else mse_loss
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.store, config)
    history = []
    best_val = np.inf
    best_values = model.store.clone_values()
    stale_evals = 0

    def diverged(step):
        model.store.load_values(best_values)
        return TrainingDivergenceError(
            f"non-finite loss at step {step}",
            last_good=best_values, history=list(history))

    order = []
    for step in range(1, config.max_steps + 1):
        batch = []
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(data.train)))
            batch.append(data.train[order.pop()])
        try:
            losses = []
            for t0 in batch:
                sample = _sample_at(data, t0)
                pred = model_forward(sample, model, graph)
                losses.append(loss_fn(pred, Tensor(sample.target)))
            total = losses[0]
            for item in losses[1:]:
                total = T.add(total, item)
            loss = total * (1.0 / len(losses))
        except NumericError:
            raise diverged(step) from None
        if not np.isfinite(loss.data):
            raise diverged(step)
        try:
            model.store.zero_grads()
            T.backward(loss)
            optimizer.step()
        except NumericError:
            raise diverged(step) from None
        if step % config.eval_every == 0 or step == config.max_steps:
            try:
                val = _val_rmse(model, data, graph)
            except NumericError:
                raise diverged(step) from None
            if not np.isfinite(val):
                raise diverged(step)
            history.append((step, float(loss.data), val))
            if val < best_val:
                best_val = val
                best_values = model.store.clone_values()
                stale_evals = 0
            else:
                stale_evals += 1
            if stale_evals >= config.patience:
                break
    model.store.load_values(best_values)
    return model, history


def write_history(path, history, comments=()):
    """History CSV with full-precision floats for byte-stable reruns."""
    lines = [f"# {comment}" for comment in comments]
    lines.append("step,train_loss,val_rmse")
    for step, train_loss, val in history:
        lines.append(f"{step},{train_loss!r},{val!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# -- baselines and evaluation ---------------------------------------------------


def ha_baseline(series: SpeedSeries, t0, horizon) -> np.ndarray:
    """Historical average: every horizon step predicts the mean of the
    last 9 slices up to and including t0."""
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    if t0 < HA_SLICES - 1:
        raise ValidationError(
            f"historical average needs {HA_SLICES} slices, anchor {t0} has "
            f"{t0 + 1}")
    if t0 >= series.n_slices:
        raise ValidationError(f"anchor {t0} outside series")
    mean = series.values[t0 - HA_SLICES + 1:t0 + 1].mean(axis=0)
    return np.tile(mean, (horizon, 1))


def model_predictor(model: GacanModel, graph):
    """Adapter: a trained model as a plain sample -> array function."""
    def predict(sample):
        return model_forward(sample, model, graph).data
    return predict


def ha_predictor(series: SpeedSeries, horizon):
    def predict(sample):
        return ha_baseline(series, sample.t0, horizon)
    return predict


@dataclass(frozen=True)
class BucketMetrics:
    horizon_slices: int
    horizon_minutes: int
    mae: float
    rmse: float


@dataclass(frozen=True)
class MetricsReport:
    buckets: tuple
    meta: dict = field(default_factory=dict)

    def bucket(self, horizon_slices):
        for row in self.buckets:
            if row.horizon_slices == horizon_slices:
                return row
        raise ValidationError(f"no bucket at {horizon_slices} slices")

    def to_json_dict(self):
        return {
            "horizon_minutes": [b.horizon_minutes for b in self.buckets],
            "mae": [b.mae for b in self.buckets],
            "rmse": [b.rmse for b in self.buckets],
            "meta": dict(self.meta),
        }


def evaluate(predict_fn, data: DatasetSplits, t0s, buckets,
             meta=None) -> MetricsReport:
    """Per-horizon-bucket MAE/RMSE in original speed units.

    `predict_fn` maps a windowed sample to an (H, N) array in normalized
    units; predictions and targets are both denormalized before scoring.
    The bucket at horizon step h scores prediction row h alone.
    """
    t0s = list(t0s)
    if not t0s:
        raise ValidationError("evaluation split is empty")
    if not buckets:
        raise ValidationError("no horizon buckets requested")
    h = data.spec.h
    for b in buckets:
        if not 1 <= b <= h:
            raise ValidationError(
                f"bucket {b} outside the model horizon 1..{h}")
    preds, truths = [], []
    for t0 in t0s:
        sample = _sample_at(data, t0)
        pred = np.asarray(predict_fn(sample), dtype=np.float64)
        if pred.shape != sample.target.shape:
            raise DimensionError(
                f"predictor returned {pred.shape}, expected "
                f"{sample.target.shape}")
        preds.append(data.stats.invert(pred))
        truths.append(data.stats.invert(sample.target))
    preds = np.stack(preds)
    truths = np.stack(truths)
    rows = []
    for b in sorted(buckets):
        p, t = preds[:, b - 1, :], truths[:, b - 1, :]
        rows.append(BucketMetrics(
            horizon_slices=b, horizon_minutes=b * data.spec.p,
            mae=mae(p, t), rmse=rmse(p, t)))
    return MetricsReport(buckets=tuple(rows), meta=dict(meta or {}))


# -- granularity ablation --------------------------------------------------------


@dataclass(frozen=True)
class AblationRun:
    mode: str
    mask: frozenset
    report: MetricsReport
    history: tuple


def ablate(series: SpeedSeries, graph, model_config, train_config,
           modes=("a", "b", "c", "d"), buckets=(1,), ratios=(0.7, 0.1, 0.2),
           standardize=False, meta=None):
    """Train one model per granularity subset under identical settings.

    Every mode shares the window length, seeds, and optimizer settings;
    only the granularity mask changes, so parameters common to two modes
    start from identical values. Returns runs keyed by mode.
    """
    unknown = set(modes) - set(MODE_MASKS)
    if unknown:
        raise ValidationError(f"unknown ablation modes {sorted(unknown)}")
    runs = {}
    for mode in modes:
        mask = MODE_MASKS[mode]
        spec = GranularitySpec(
            p=model_config.p, q=model_config.q, h=model_config.h,
            mask=mask - {"m"}, window_style=model_config.window_style)
        data = prepare_dataset(series, spec, ratios=ratios,
                               standardize=standardize)
        config = replace(model_config, mask=mask)
        model, history = train(init_model(config), data, graph,
                               train_config)
        run_meta = dict(meta or {})
        run_meta["mode"] = mode
        run_meta["mask"] = "".join(sorted(mask))
        report = evaluate(model_predictor(model, graph), data, data.test,
                          buckets, meta=run_meta)
        runs[mode] = AblationRun(mode=mode, mask=mask, report=report,
                                 history=tuple(history))
    return runs
