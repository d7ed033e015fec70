"""Named parameter storage, checkpoint I/O, and gradient verification."""

import math

import numpy as np

from .errors import ContractError, ValidationError
from .tensor import Tensor, backward

CHECKPOINT_HEADER = "gacan-checkpoint v1"


class ParameterStore:
    """Ordered map from path-like names to trainable tensors.

    Registration order is the iteration order everywhere (optimizer,
    checkpointing, gradient checks), which keeps seeded runs bit-for-bit
    reproducible.
    """

    def __init__(self):
        self._params = {}

    def add(self, name, values):
        if name in self._params:
            raise ValidationError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def n_entries(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grads(self):
        """Gradient arrays by name; unreached parameters report zeros."""
        out = {}
        for name, t in self._params.items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def clone_values(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values):
        for name, arr in values.items():
            if name not in self._params:
                raise ValidationError(f"unknown parameter '{name}' in values")
            if self._params[name].data.shape != arr.shape:
                raise ValidationError(
                    f"shape mismatch for '{name}': store {self._params[name].data.shape} "
                    f"vs loaded {arr.shape}")
            self._params[name].data = arr.astype(np.float64).copy()


def glorot_init(rng, fan_in, fan_out, shape):
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# -- checkpoint format -------------------------------------------------------
#
# Line 1:       gacan-checkpoint v1
# Config lines: key=value          (flat, no spaces in key)
# Param lines:  name shape_csv value_csv
#
# Values use repr(float), the shortest decimal that round-trips float64
# exactly, so save -> load is bit-identical.


def _fmt_array(arr):
    return ",".join(repr(float(v)) for v in arr.reshape(-1))


def save_checkpoint(path, store, config=None, extras=None):
    """Write the store (and optional flat config / named float arrays)."""
    lines = [CHECKPOINT_HEADER]
    for key, value in (config or {}).items():
        lines.append(f"{key}={value}")
    for name, arr in (extras or {}).items():
        a = np.asarray(arr, dtype=np.float64)
        lines.append(f"{name} {','.join(str(d) for d in a.shape)} {_fmt_array(a)}")
    for name, t in store.items():
        shape_csv = ",".join(str(d) for d in t.data.shape)
        lines.append(f"{name} {shape_csv} {_fmt_array(t.data)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays_by_name, config_dict).

    Reserved "extra" arrays (names starting with an underscore or
    'norm/') land in the same dict; callers split them off by name.
    """
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValidationError(f"{path}: not a checkpoint file (bad header)")
    config = {}
    arrays = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if " " not in ln:
            if "=" not in ln:
                raise ValidationError(f"{path}: unparseable checkpoint line: {ln!r}")
            key, _, value = ln.partition("=")
            config[key] = value
            continue
        parts = ln.split(" ")
        if len(parts) != 3:
            raise ValidationError(f"{path}: malformed parameter line: {ln!r}")
        name, shape_csv, value_csv = parts
        shape = tuple(int(s) for s in shape_csv.split(",")) if shape_csv else ()
        values = np.array([float(v) for v in value_csv.split(",")], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise ValidationError(f"{path}: value count does not match shape for '{name}'")
        arrays[name] = values.reshape(shape)
    return arrays, config


# -- finite-difference gradient checking -------------------------------------


def grad_check(forward, store, h=1e-6, tol=1e-5, names=None):
    """Compare analytic gradients against central finite differences.

    `forward` must be a deterministic closure over `store` returning a
    scalar Tensor. For every parameter entry the relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Failures are
    reported, never thrown.

    Returns a list of (name, max_relative_error, passed) tuples.
    """
    store.zero_grads()
    loss = forward()
    backward(loss)
    analytic = {name: g.copy() for name, g in store.grads().items()}

    report = []
    check_names = names if names is not None else store.names()
    for name in check_names:
        t = store[name]
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = forward().item()
            flat[i] = keep - h
            f_minus = forward().item()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.append((name, worst, worst <= tol))
    return report


def grad_check_summary(report):
    """Worst offenders first, as display rows."""
    ordered = sorted(report, key=lambda r: r[1], reverse=True)
    return [f"{'PASS' if ok else 'FAIL'}  {err:.3e}  {name}" for name, err, ok in ordered]
