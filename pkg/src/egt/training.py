"""Episodic training with explanation-guided feature re-weighting.

Each episode runs four stages: (1) a plain prediction for every query,
(2) an explanation of the winning class whose normalized relevance
becomes a per-feature weight w = 1 + R/max|R| in [0, 2], (3) a second
prediction from the re-weighted features, and (4) a combined loss
xi * CE(plain) + lambda * CE(re-weighted).  Features that argued for
the predicted class are amplified, contradicting ones are damped, so
the gradient pressure concentrates on evidence the classifier itself
considers relevant.

The explanation weights are treated as constants during the backward
pass by default (stop-gradient); the exact derivative through the
weights is available for the cosine head via
``stop_gradient_through_weights=False``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError
from .heads import (
    CosineHead,
    RelationHead,
    class_prototypes,
    cosine_explain,
    cosine_scores,
    relevance_init_nonparametric,
    relevance_init_parametric,
    scaled_softmax,
)
from .lrp import LrpConfig, lrp_backward, normalize_relevance
from .model import FewShotModel, save_model
from .tensornet import sgd_step

Array = np.ndarray

CE_CLAMP = 1e-12

PROB_CLAMP_HIGH = 1.0 - 1e-7
PROB_CLAMP_LOW = 1e-12


def default_loss_weights(head_kind: str, shot: int, baseline: bool) -> tuple[float, float]:
    """Loss mix defaults: baseline drops the re-weighted term entirely."""
    if baseline:
        return 1.0, 0.0
    if head_kind == "cosine":
        return 0.0, 1.0
    if head_kind == "relation":
        return (1.0, 0.5) if shot == 1 else (1.0, 1.0)
    raise ConfigError(f"unknown head kind {head_kind!r}")


@dataclass
class TrainConfig:
    way: int = 5
    shot: int = 5
    n_query: int = 16
    xi: float = 1.0
    lam: float = 1.0
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 100
    episodes_per_epoch: int = 100
    lr_decay: float = 0.5
    lr_decay_every: int = 40
    seed: int = 0
    stop_gradient_through_weights: bool = True
    lrp: LrpConfig = field(default_factory=LrpConfig)

    def __post_init__(self) -> None:
        if self.way < 2 or self.shot < 1 or self.n_query < 1:
            raise ConfigError(
                f"episode shape way={self.way} shot={self.shot} "
                f"n_query={self.n_query} is invalid")
        if self.xi < 0 or self.lam < 0 or self.xi + self.lam <= 0:
            raise ConfigError(
                f"loss weights xi={self.xi} lam={self.lam} must be nonnegative "
                "with a positive sum")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"bad optimizer settings lr={self.lr} momentum={self.momentum}")
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 0:
            raise ConfigError("bad learning-rate decay settings")


@dataclass
class EpisodeResult:
    loss_plain: float
    loss_lrp: float
    loss_total: float
    probs: Array
    probs_lrp: Array
    accuracy: float


def cross_entropy(label: int, probs: Array) -> float:
    """Negative log probability of the true class, clamped away from 0."""
    return -math.log(max(float(probs[label]), CE_CLAMP))


def egt_loss(label: int, probs: Array, probs_lrp: Array, xi: float, lam: float) -> float:
    """Combined objective: xi * CE(plain) + lam * CE(re-weighted)."""
    return xi * cross_entropy(label, probs) + lam * cross_entropy(label, probs_lrp)


def lrp_weights(rel_norm: Array) -> Array:
    """Feature weights 1 + R for normalized relevance R in [-1, 1]."""
    r = np.asarray(rel_norm, dtype=np.float64)
    peak = np.abs(r).max() if r.size else 0.0
    if peak > 1.0 + 1e-12:
        raise ContractError(
            f"normalized relevance must lie in [-1, 1], got peak {peak}")
    return 1.0 + r


def weighted_features(features: Array, weights: Array) -> Array:
    """Element-wise feature re-weighting; shapes must match exactly."""
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if f.shape != w.shape:
        raise ContractError(
            f"feature shape {f.shape} does not match weight shape {w.shape}")
    return f * w


def _softmax_ce_grads(probs: Array, labels: Array, beta: float, coef: float) -> Array:
    """d(coef * sum_i CE_i)/d(scores): beta * (p - onehot), clamp-aware.

    Rows whose true-class probability sits at the CE clamp contribute a
    locally constant loss, hence a zero gradient.
    """
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g *= beta * coef
    g[probs[np.arange(n), labels] <= CE_CLAMP] = 0.0
    return g


def _cosine_branch(v: Array, protos: Array, grads: Array, scores: Array,
                   ) -> tuple[Array, Array]:
    """Gradients of sum(grads * scores) through cosine similarity.

    v: [n, D] query-side rows, protos: [K, D], grads: [n, K] upstream
    dLoss/dscore, scores: [n, K] the cosine values.  Returns the
    gradient wrt v rows and wrt the prototype rows.
    """
    vn = np.linalg.norm(v, axis=1)
    pn = np.linalg.norm(protos, axis=1)
    gu = grads * scores
    dv = ((grads / pn[None, :]) @ protos) / vn[:, None]
    dv -= (gu.sum(axis=1) / vn ** 2)[:, None] * v
    dp = ((grads / vn[:, None]).T @ v) / pn[:, None]
    dp -= (gu.sum(axis=0) / pn ** 2)[:, None] * protos
    return dv, dp


def _log_odds_slope(p: float, num_classes: int) -> float:
    """d/dp of log(p / (1 - p) * (K - 1)) inside the clamp window, else 0."""
    if p <= PROB_CLAMP_LOW or p >= PROB_CLAMP_HIGH:
        return 0.0
    return 1.0 / (p * (1.0 - p))


def _cosine_weight_path(q: Array, protos: Array, pn: Array, u: Array, pr: Array,
                        c: int, rel: Array, g_qw: Array, epsilon: float,
                        beta: float) -> tuple[Array, Array]:
    """Exact gradient contribution through the explanation weights.

    Adds the terms that the stop-gradient treatment drops: the loss also
    depends on q and the prototypes through w = 1 + rel/max|rel|, where
    rel is the epsilon-rule explanation of the winning cosine score.
    ``g_qw`` is dLoss/d(q * w).  Returns extra gradients for q and for
    the prototype matrix.
    """
    dq = np.zeros_like(q)
    dp = np.zeros_like(protos)
    if not np.any(rel):
        return dq, dp
    phat = protos[c] / pn[c]
    z = q * phat
    total = z.sum()
    denom = total + epsilon * (1.0 if total >= 0 else -1.0)
    if denom == 0.0:
        return dq, dp
    j = int(np.argmax(np.abs(rel)))
    peak = abs(rel[j])
    sgn = 1.0 if rel[j] >= 0 else -1.0
    h = g_qw * q
    t = h.copy()
    t[j] -= (h @ rel) * sgn / peak
    t /= peak
    # rel = R_c * z / denom with denom = sum(z) + eps*sign
    d_rc = (t @ z) / denom
    prc = float(np.clip(pr[c], PROB_CLAMP_LOW, PROB_CLAMP_HIGH))
    rc = np.log(prc / (1.0 - prc) * (pr.shape[0] - 1))
    dz = rc * (t / denom - (t @ z) / denom ** 2)
    dq += dz * phat
    dphat = dz * q
    dp[c] += dphat / pn[c] - ((dphat @ protos[c]) / pn[c] ** 3) * protos[c]
    # R_c path: relevance init is the log odds of the winning probability.
    d_prc = d_rc * _log_odds_slope(float(pr[c]), pr.shape[0])
    du = d_prc * beta * pr[c] * (np.eye(pr.shape[0])[c] - pr)
    gq_u, gp_u = _cosine_branch(q[None], protos, du[None], u[None])
    dq += gq_u[0]
    dp += gp_u
    return dq, dp


def _merge_param_grads(a, b):
    if a is None:
        return b
    if b is None:
        return a
    merged = []
    for ga, gb in zip(a, b):
        if ga is None and gb is None:
            merged.append(None)
        else:
            merged.append({k: ga[k] + gb[k] for k in ga})
    return merged


def _episode_arrays(model: FewShotModel, episode) -> tuple:
    images = np.concatenate([episode.support_images, episode.query_images], axis=0)
    maps, trace = model.encode_recorded(images)
    n_support = episode.support_images.shape[0]
    return maps[:n_support], maps[n_support:], trace, n_support


def _cosine_episode(model: FewShotModel, episode, cfg: TrainConfig,
                    enable_lrp: bool):
    head = model.head
    smaps, qmaps, trace, n_support = _episode_arrays(model, episode)
    way = episode.way
    n = qmaps.shape[0]
    s_local = episode.support_local
    y = episode.query_local

    feats_s = smaps.reshape(n_support, -1)
    feats_q = qmaps.reshape(n, -1)
    protos = class_prototypes(feats_s, s_local, way)
    counts = np.bincount(s_local, minlength=way)

    scores = cosine_scores(feats_q, protos)
    probs = scaled_softmax(scores, head.beta)
    ce_plain = np.array([cross_entropy(y[i], probs[i]) for i in range(n)])
    accuracy = float(np.mean(np.argmax(probs, axis=1) == y))

    d_fq = np.zeros_like(feats_q)
    d_protos = np.zeros_like(protos)
    if cfg.xi != 0.0:
        g1 = _softmax_ce_grads(probs, y, head.beta, cfg.xi / n)
        gq, gp = _cosine_branch(feats_q, protos, g1, scores)
        d_fq += gq
        d_protos += gp

    if enable_lrp:
        rel_init = relevance_init_nonparametric(probs)
        winners = np.argmax(probs, axis=1)
        weights = np.empty_like(feats_q)
        rels = np.empty_like(feats_q)
        reweighted = np.empty_like(feats_q)
        for i in range(n):
            c = int(winners[i])
            rel = cosine_explain(feats_q[i], protos[c], rel_init[i, c],
                                 cfg.lrp.epsilon, head.explain_variant)
            rels[i] = rel
            weights[i] = lrp_weights(normalize_relevance(rel))
            reweighted[i] = weighted_features(feats_q[i], weights[i])
        scores_lrp = cosine_scores(reweighted, protos)
        probs_lrp = scaled_softmax(scores_lrp, head.beta)
        ce_lrp = np.array([cross_entropy(y[i], probs_lrp[i]) for i in range(n)])
        if cfg.lam != 0.0:
            g2 = _softmax_ce_grads(probs_lrp, y, head.beta, cfg.lam / n)
            gq2, gp2 = _cosine_branch(reweighted, protos, g2, scores_lrp)
            d_fq += weights * gq2
            d_protos += gp2
            if not cfg.stop_gradient_through_weights:
                if head.explain_variant != "query":
                    raise ConfigError(
                        "exact weight gradients are only implemented for the "
                        "'query' explain variant")
                pn = np.linalg.norm(protos, axis=1)
                for i in range(n):
                    dq_x, dp_x = _cosine_weight_path(
                        feats_q[i], protos, pn, scores[i], probs[i],
                        int(winners[i]), rels[i], gq2[i], cfg.lrp.epsilon,
                        head.beta)
                    d_fq[i] += dq_x
                    d_protos += dp_x
    else:
        probs_lrp = probs
        ce_lrp = np.zeros(n)

    d_fs = d_protos[s_local] / counts[s_local][:, None]
    d_maps = np.concatenate([d_fs, d_fq], axis=0).reshape(
        (n_support + n,) + model.feature_map_shape)
    _, enc_grads = model.encoder.backward_grad(trace, d_maps)

    loss_plain = float(ce_plain.mean())
    loss_lrp = float(ce_lrp.mean())
    result = EpisodeResult(
        loss_plain=loss_plain, loss_lrp=loss_lrp,
        loss_total=cfg.xi * loss_plain + cfg.lam * loss_lrp,
        probs=probs, probs_lrp=probs_lrp, accuracy=accuracy)
    return result, enc_grads, None


def _relation_episode(model: FewShotModel, episode, cfg: TrainConfig,
                      enable_lrp: bool):
    head = model.head
    rnet = head.net
    smaps, qmaps, trace, n_support = _episode_arrays(model, episode)
    way = episode.way
    n = qmaps.shape[0]
    s_local = episode.support_local
    y = episode.query_local

    protos = class_prototypes(smaps, s_local, way)
    counts = np.bincount(s_local, minlength=way)
    channels = protos.shape[1]

    pairs = np.concatenate(
        [np.broadcast_to(protos[None], (n,) + protos.shape),
         np.broadcast_to(qmaps[:, None], (n, way) + qmaps.shape[1:])], axis=2)
    flat = pairs.reshape((n * way,) + pairs.shape[2:])
    logits_flat, rtrace = rnet.forward_recorded(flat)
    scores = logits_flat[:, 0].reshape(n, way)
    probs = scaled_softmax(scores, head.beta)
    ce_plain = np.array([cross_entropy(y[i], probs[i]) for i in range(n)])
    accuracy = float(np.mean(np.argmax(probs, axis=1) == y))

    d_flat = np.zeros_like(flat)
    rel_grads = None
    if cfg.xi != 0.0:
        g1 = _softmax_ce_grads(probs, y, head.beta, cfg.xi / n)
        gin, pg = rnet.backward_grad(rtrace, g1.reshape(n * way, 1))
        d_flat += gin
        rel_grads = pg

    if enable_lrp:
        rel_init = relevance_init_parametric(scores)
        winners = np.argmax(probs, axis=1)
        init = np.zeros((n * way, 1))
        rows = np.arange(n) * way + winners
        init[rows, 0] = rel_init[np.arange(n), winners]
        rel_pairs = lrp_backward(rnet, rtrace, init, cfg.lrp).relevances[0]
        weights = np.empty((n,) + flat.shape[1:])
        for i in range(n):
            weights[i] = lrp_weights(normalize_relevance(rel_pairs[rows[i]]))
        flat2 = (pairs * weights[:, None]).reshape(flat.shape)
        logits2, rtrace2 = rnet.forward_recorded(flat2)
        scores_lrp = logits2[:, 0].reshape(n, way)
        probs_lrp = scaled_softmax(scores_lrp, head.beta)
        ce_lrp = np.array([cross_entropy(y[i], probs_lrp[i]) for i in range(n)])
        if cfg.lam != 0.0:
            if not cfg.stop_gradient_through_weights:
                raise ConfigError(
                    "exact weight gradients are not implemented for the "
                    "relation head; keep stop_gradient_through_weights=True")
            g2 = _softmax_ce_grads(probs_lrp, y, head.beta, cfg.lam / n)
            gin2, pg2 = rnet.backward_grad(rtrace2, g2.reshape(n * way, 1))
            d_flat += (gin2.reshape(pairs.shape) * weights[:, None]).reshape(flat.shape)
            rel_grads = _merge_param_grads(rel_grads, pg2)
    else:
        probs_lrp = probs
        ce_lrp = np.zeros(n)

    d_pairs = d_flat.reshape(pairs.shape)
    d_protos = d_pairs[:, :, :channels].sum(axis=0)
    d_q = d_pairs[:, :, channels:].sum(axis=1)
    d_s = d_protos[s_local] / counts[s_local][:, None, None, None]
    d_maps = np.concatenate([d_s, d_q], axis=0)
    _, enc_grads = model.encoder.backward_grad(trace, d_maps)

    loss_plain = float(ce_plain.mean())
    loss_lrp = float(ce_lrp.mean())
    result = EpisodeResult(
        loss_plain=loss_plain, loss_lrp=loss_lrp,
        loss_total=cfg.xi * loss_plain + cfg.lam * loss_lrp,
        probs=probs, probs_lrp=probs_lrp, accuracy=accuracy)
    return result, enc_grads, rel_grads


def _episode_step(model: FewShotModel, episode, cfg: TrainConfig,
                  enable_lrp: bool):
    if episode.way != cfg.way:
        raise ContractError(
            f"episode way {episode.way} does not match config way {cfg.way}")
    if isinstance(model.head, CosineHead):
        return _cosine_episode(model, episode, cfg, enable_lrp)
    if isinstance(model.head, RelationHead):
        return _relation_episode(model, episode, cfg, enable_lrp)
    raise ConfigError(f"unknown head {type(model.head).__name__!r}")


def episode_gradients(model: FewShotModel, episode, cfg: TrainConfig,
                      enable_lrp: bool = True):
    """Loss report plus parameter gradients, without applying an update."""
    return _episode_step(model, episode, cfg, enable_lrp)


def _apply(model: FewShotModel, enc_grads, rel_grads, lr: float, momentum: float) -> None:
    sgd_step(model.encoder, enc_grads, lr, momentum)
    if rel_grads is not None:
        sgd_step(model.head.net, rel_grads, lr, momentum)


def train_episode(model: FewShotModel, episode, cfg: TrainConfig,
                  lr: float | None = None) -> EpisodeResult:
    """One full explanation-guided episode: predict, explain, re-weight,
    combine losses, and apply a momentum SGD step."""
    result, enc_grads, rel_grads = _episode_step(model, episode, cfg, enable_lrp=True)
    _apply(model, enc_grads, rel_grads, cfg.lr if lr is None else lr, cfg.momentum)
    return result


def train_episode_plain(model: FewShotModel, episode, cfg: TrainConfig,
                        lr: float | None = None) -> EpisodeResult:
    """Ordinary episodic step with the explanation branch disabled."""
    result, enc_grads, rel_grads = _episode_step(model, episode, cfg, enable_lrp=False)
    _apply(model, enc_grads, rel_grads, cfg.lr if lr is None else lr, cfg.momentum)
    return result


LOG_HEADER = "epoch,step,loss_plain,loss_lrp,loss_total,acc"


def train(model: FewShotModel, episodes: Iterator, cfg: TrainConfig,
          log_path: str | None = None, checkpoint_path: str | None = None,
          plain: bool = False) -> list[dict]:
    """Run the episodic schedule, logging one CSV row per episode.

    The learning rate is multiplied by ``cfg.lr_decay`` every
    ``cfg.lr_decay_every`` epochs.  The checkpoint is rewritten after
    each epoch so an interrupted run keeps its last completed epoch.
    """
    step_fn = train_episode_plain if plain else train_episode
    rows: list[dict] = []
    log = open(log_path, "w") if log_path else None
    try:
        if log:
            log.write(LOG_HEADER + "\n")
        lr = cfg.lr
        for epoch in range(1, cfg.epochs + 1):
            if epoch > 1 and cfg.lr_decay_every > 0 and (epoch - 1) % cfg.lr_decay_every == 0:
                lr *= cfg.lr_decay
            for step in range(1, cfg.episodes_per_epoch + 1):
                episode = next(episodes)
                res = step_fn(model, episode, cfg, lr=lr)
                row = {"epoch": epoch, "step": step,
                       "loss_plain": res.loss_plain, "loss_lrp": res.loss_lrp,
                       "loss_total": res.loss_total, "acc": res.accuracy}
                rows.append(row)
                if log:
                    log.write(f"{epoch},{step},{res.loss_plain!r},{res.loss_lrp!r},"
                              f"{res.loss_total!r},{res.accuracy!r}\n")
            if checkpoint_path:
                save_model(model, checkpoint_path)
        if checkpoint_path and cfg.epochs == 0:
            save_model(model, checkpoint_path)
    finally:
        if log:
            log.close()
    return rows
