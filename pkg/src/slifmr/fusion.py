"""Item-level fusion of the interaction, feature-graph and KG representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slifmr import autodiff as ad
from slifmr.errors import ConfigError

FUSION_MODES = ("ailf", "concat", "sum", "attention")


@dataclass
class FusionParams:
    W: ad.Node  # 3d x 3
    b: ad.Node  # 3
    proj: ad.Node | None = None  # 3d x d, concat baseline only

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, with_projection=False) -> "FusionParams":
        lim = np.sqrt(6.0 / (3 * d + 3))
        W = ad.parameter(rng.uniform(-lim, lim, (3 * d, 3)), "fusion_W")
        b = ad.parameter(np.zeros(3), "fusion_b")
        proj = None
        if with_projection:
            lim = np.sqrt(6.0 / (4 * d))
            proj = ad.parameter(rng.uniform(-lim, lim, (3 * d, d)), "fusion_proj")
        return cls(W, b, proj)

    def parameters(self):
        out = {"fusion_W": self.W, "fusion_b": self.b}
        if self.proj is not None:
            out["fusion_proj"] = self.proj
        return out


def _branches(x_b, x_m, x_k):
    ref = next(x for x in (x_b, x_m, x_k) if x is not None)
    zero = ad.constant(np.zeros(ref.shape, dtype=ref.dtype))
    return [zero if x is None else ad.constant(x) for x in (x_b, x_m, x_k)]


def ailf_weights(x_b, x_m, x_k, params: FusionParams, scaled: bool = True) -> ad.Node:
    """Per-item softmax weights over the three branches, shape (|I|, 3).

    A branch passed as ``None`` is ablated: its input counts as zeros in the
    concatenation and the softmax runs over the remaining branches only.
    """
    active = [x is not None for x in (x_b, x_m, x_k)]
    xs = _branches(x_b, x_m, x_k)
    d = xs[0].shape[1]
    logits = ad.matmul(ad.concat(xs, axis=1), params.W) + params.b
    if scaled:
        logits = logits * (1.0 / np.sqrt(d))
    if all(active):
        return ad.softmax(logits, axis=1)
    cols = np.flatnonzero(active)
    part = ad.softmax(ad.take(logits, cols, axis=1), axis=1)
    # scatter back to three columns so downstream indexing stays fixed
    scatter = np.zeros((len(cols), 3), dtype=part.dtype)
    scatter[np.arange(len(cols)), cols] = 1.0
    return ad.matmul(part, scatter)


def fuse(x_b, x_m, x_k, alpha) -> ad.Node:
    """Convex combination sum_c alpha[:, c] * x_c."""
    out = None
    for c, x in enumerate((x_b, x_m, x_k)):
        if x is None:
            continue
        term = ad.take(alpha, [c], axis=1) * x
        out = term if out is None else out + term
    return out


def baseline_aggregate(mode: str, x_b, x_m, x_k, params: FusionParams | None = None) -> ad.Node:
    """Aggregators used for comparison against AILF."""
    if mode == "sum":
        out = None
        for x in (x_b, x_m, x_k):
            if x is not None:
                out = ad.constant(x) if out is None else out + x
        return out
    if mode == "concat":
        if params is None or params.proj is None:
            raise ConfigError("concat aggregation needs a projection matrix")
        return ad.matmul(ad.concat(_branches(x_b, x_m, x_k), axis=1), params.proj)
    if mode == "attention":
        if params is None:
            raise ConfigError("attention aggregation needs fusion parameters")
        return fuse(x_b, x_m, x_k, ailf_weights(x_b, x_m, x_k, params, scaled=False))
    raise ConfigError(f"unknown fusion mode {mode!r}")


def aggregate(mode: str, x_b, x_m, x_k, params: FusionParams):
    """Dispatch on ``fusion_mode``. Returns (unified items, alpha or None)."""
    if mode == "ailf":
        alpha = ailf_weights(x_b, x_m, x_k, params)
        return fuse(x_b, x_m, x_k, alpha), alpha
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    return baseline_aggregate(mode, x_b, x_m, x_k, params), None
