"""Layer-wise relevance propagation over recorded forward traces.

Two rules redistribute relevance through parameterized layers:

* epsilon rule: ``rel_in[i] = sum_j rel_out[j] * z_ij / (y_j + eps*sign(y_j))``
  with ``z_ij = x_i * w_ij`` and ``sign(0) := +1``;
* alpha rule: ``rel_in[i] = sum_j rel_out[j] * (alpha * z_ij^+ / y_j^+
  - (alpha-1) * z_ij^- / y_j^-)`` where ``(.)^+ = max(., 0)``,
  ``(.)^- = min(., 0)`` and ``y_j`` is the recorded pre-activation.
  Any term whose denominator is zero contributes zero.

Bias terms sit inside ``y_j`` but never receive an input share: bias
relevance is absorbed.  Conservation is therefore exact only on
bias-free stacks.  Parameter-free layers pass relevance through: relu
and flatten keep it unchanged under the index mapping, max pooling
routes each window's relevance to the recorded winner (lowest flat
index on ties), average pooling splits proportionally to each input's
contribution, falling back to an equal split when a window sums to
exactly zero.

Relevance shapes always mirror the activation shapes of the trace, so
conv layers run the same unrolled-window machinery as the gradient
pass instead of materializing a dense matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .tensornet import (AvgPool2d, Conv2d, Flatten, ForwardTrace, Linear,
                        MaxPool2d, Network, ReLU, _unpool_windows)

Array = np.ndarray

_PARAM_RULES = ("epsilon", "alpha")
_AVGPOOL_RULES = ("proportional", "equal")


def default_rule_map() -> dict[str, str]:
    return {"linear": "epsilon", "conv2d": "alpha"}


@dataclass
class LrpConfig:
    """Rule assignment and rule constants for one relevance pass."""

    epsilon: float = 0.001
    alpha: float = 1.0
    rule_map: dict[str, str] = field(default_factory=default_rule_map)
    avgpool_rule: str = "proportional"

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        for kind, rule in self.rule_map.items():
            if kind not in ("linear", "conv2d"):
                raise ConfigError(f"rule_map keys must be linear/conv2d, got {kind!r}")
            if rule not in _PARAM_RULES:
                raise ConfigError(f"unknown relevance rule {rule!r} for {kind!r}")
        if self.avgpool_rule not in _AVGPOOL_RULES:
            raise ConfigError(f"unknown avgpool rule {self.avgpool_rule!r}")

    def rule_for(self, kind: str) -> str:
        try:
            return self.rule_map[kind]
        except KeyError:
            raise ConfigError(f"no relevance rule configured for layer kind {kind!r}") from None


@dataclass
class RelevanceTrace:
    """Relevance at every activation of a recorded pass.

    ``relevances[i]`` aligns with the input of layer ``i``;
    ``relevances[-1]`` is the output relevance the pass started from.
    Arrays are stored batched, like the forward trace.
    """

    relevances: list[Array]
    batched: bool

    @property
    def input_relevance(self) -> Array:
        r = self.relevances[0]
        return r if self.batched else r[0]

    @property
    def output_relevance(self) -> Array:
        r = self.relevances[-1]
        return r if self.batched else r[0]


def _with_batch(arr: Array, unbatched_rank: int) -> tuple[Array, bool]:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == unbatched_rank:
        return arr[None], False
    return arr, True


def _safe_div(num: Array, denom: Array, keep) -> Array:
    """Elementwise num/denom where ``keep`` holds, zero elsewhere."""
    return np.divide(num, denom, out=np.zeros_like(num), where=keep)


def lrp_epsilon(layer: Linear | Conv2d, x: Array, y: Array, rel_out: Array,
                epsilon: float) -> Array:
    """Epsilon rule for a linear map (dense or convolutional)."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    rank = 1 if isinstance(layer, Linear) else 3
    x, batched = _with_batch(x, rank)
    y, _ = _with_batch(y, rank)
    rel_out, _ = _with_batch(rel_out, rank)
    denom = y + epsilon * np.where(y >= 0, 1.0, -1.0)
    s = _safe_div(rel_out, denom, denom != 0)
    if isinstance(layer, Linear):
        rel_in = x * (s @ layer.weight)
    else:
        rel_in = x * layer.grad_input(s, x.shape[1:])
    return rel_in if batched else rel_in[0]


def lrp_alpha(layer: Linear | Conv2d, x: Array, y: Array, rel_out: Array,
              alpha: float) -> Array:
    """Alpha rule with sign-split contributions and recorded denominators."""
    if alpha < 1:
        raise ConfigError(f"alpha must be >= 1, got {alpha}")
    rank = 1 if isinstance(layer, Linear) else 3
    x, batched = _with_batch(x, rank)
    y, _ = _with_batch(y, rank)
    rel_out, _ = _with_batch(rel_out, rank)
    xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
    sp = _safe_div(rel_out, y, y > 0)
    sn = _safe_div(rel_out, y, y < 0)
    if isinstance(layer, Linear):
        wp, wn = np.maximum(layer.weight, 0.0), np.minimum(layer.weight, 0.0)
        pos = xp * (sp @ wp) + xn * (sp @ wn)
        neg = xp * (sn @ wn) + xn * (sn @ wp)
    else:
        wp, wn = np.maximum(layer.weight, 0.0), np.minimum(layer.weight, 0.0)
        in_shape = x.shape[1:]
        pos = xp * layer.grad_input(sp, in_shape, weight=wp) \
            + xn * layer.grad_input(sp, in_shape, weight=wn)
        neg = xp * layer.grad_input(sn, in_shape, weight=wn) \
            + xn * layer.grad_input(sn, in_shape, weight=wp)
    rel_in = alpha * pos - (alpha - 1.0) * neg
    return rel_in if batched else rel_in[0]


def lrp_passthrough(layer, x: Array, rel_out: Array, *,
                    avgpool_rule: str = "proportional") -> Array:
    """Relevance through parameter-free layers."""
    if isinstance(layer, ReLU):
        return np.asarray(rel_out, dtype=np.float64).copy()
    if isinstance(layer, Flatten):
        return np.asarray(rel_out, dtype=np.float64).reshape(np.asarray(x).shape)
    if not isinstance(layer, (MaxPool2d, AvgPool2d)):
        raise ConfigError(f"layer kind {layer.kind!r} has no pass-through rule")

    x, batched = _with_batch(x, 3)
    rel_out, _ = _with_batch(rel_out, 3)
    if isinstance(layer, MaxPool2d):
        win = np.zeros_like(layer.windows(x))
        idx = layer.winner_index(x)
        np.put_along_axis(win, idx[:, :, None], rel_out[:, :, None], axis=2)
    else:
        if avgpool_rule not in _AVGPOOL_RULES:
            raise ConfigError(f"unknown avgpool rule {avgpool_rule!r}")
        k2 = layer.kernel * layer.kernel
        win_x = layer.windows(x)
        if avgpool_rule == "equal":
            ratio = np.full_like(win_x, 1.0 / k2)
        else:
            sums = win_x.sum(axis=2, keepdims=True)
            ratio = _safe_div(win_x, sums, sums != 0)
            ratio += (sums == 0) * (1.0 / k2)
        win = ratio * rel_out[:, :, None]
    rel_in = _unpool_windows(win, layer.kernel, layer.stride, x.shape[1:])
    return rel_in if batched else rel_in[0]


def lrp_backward(net: Network, trace: ForwardTrace, output_relevance: Array,
                 cfg: LrpConfig | None = None) -> RelevanceTrace:
    """Propagate relevance from the network output down to its input."""
    cfg = cfg or LrpConfig()
    r = np.asarray(output_relevance, dtype=np.float64)
    if not trace.batched:
        r = r[None]
    if r.shape != trace.entries[-1].output.shape:
        raise ContractError(
            f"output relevance shape {r.shape} does not match traced output "
            f"{trace.entries[-1].output.shape}")
    relevances: list[Array] = [None] * (len(net.layers) + 1)  # type: ignore[list-item]
    relevances[-1] = r
    for i in reversed(range(len(net.layers))):
        layer, entry = net.layers[i], trace.entries[i]
        if isinstance(layer, (Linear, Conv2d)):
            rule = cfg.rule_for(layer.kind)
            if rule == "epsilon":
                r = lrp_epsilon(layer, entry.input, entry.output, r, cfg.epsilon)
            else:
                r = lrp_alpha(layer, entry.input, entry.output, r, cfg.alpha)
        else:
            r = lrp_passthrough(layer, entry.input, r, avgpool_rule=cfg.avgpool_rule)
        relevances[i] = r
    if not np.isfinite(r).all():
        raise NumericError("relevance pass produced non-finite values")
    return RelevanceTrace(relevances, trace.batched)


def normalize_relevance(rel: Array) -> Array:
    """Scale relevance into [-1, 1] by its max magnitude; zero stays zero."""
    rel = np.asarray(rel, dtype=np.float64)
    peak = np.abs(rel).max()
    if peak == 0.0:
        return rel.copy()
    return rel / peak
