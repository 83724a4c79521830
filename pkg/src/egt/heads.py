"""Metric-based few-shot classifier heads and relevance initialization.

Two heads share one protocol: build class prototypes by averaging
support embeddings, score a query against every prototype, turn scores
into probabilities, and provide a per-class relevance initialization
for the explanation pass.

* cosine head: scores are cosine similarities, probabilities come from
  a beta-scaled softmax, and relevance starts from the log-odds ratio
  against chance level (a non-parametric classifier has no logits).
* relation head: a small trained network scores each channel-wise
  concatenated (prototype, query) pair; its raw logits double as the
  relevance initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .lrp import LrpConfig, lrp_backward
from .tensornet import ForwardTrace, Network

Array = np.ndarray

PROB_CLAMP_HIGH = 1.0 - 1e-7
PROB_CLAMP_LOW = 1e-12

COSINE_EXPLAIN_VARIANTS = ("query", "both-normalized")


@dataclass
class HeadOutput:
    """Per-query head evaluation: scores, probabilities, relevance init."""
    scores: Array
    probabilities: Array
    relevance_init: Array


def class_prototypes(features: Array, labels: Array, num_classes: int) -> Array:
    """Mean support embedding per class; labels are episode-local 0..K-1."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    protos = np.empty((num_classes,) + features.shape[1:])
    for k in range(num_classes):
        members = features[labels == k]
        if members.shape[0] == 0:
            raise ContractError(f"class {k} has no support members")
        protos[k] = members.mean(axis=0)
    return protos


def cosine_scores(query_feat: Array, protos: Array) -> Array:
    """Cosine similarity of each query row against each prototype row."""
    q = np.asarray(query_feat, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None]
    if q.shape[1] != p.shape[1]:
        raise ContractError(
            f"feature dim {q.shape[1]} does not match prototype dim {p.shape[1]}")
    qn = np.linalg.norm(q, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if (qn == 0).any() or (pn == 0).any():
        raise NumericError("zero-norm vector in cosine similarity (degenerate embedding)")
    scores = (q @ p.T) / np.outer(qn, pn)
    return scores[0] if single else scores


def scaled_softmax(scores: Array, beta: float) -> Array:
    """Softmax of beta-scaled scores along the last axis, max-shifted."""
    if not beta > 0:
        raise ContractError(f"beta must be positive, got {beta}")
    z = beta * np.asarray(scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def relevance_init_nonparametric(probs: Array) -> Array:
    """Log-odds against chance: R_c = log(P_c / (1 - P_c) * (K - 1)).

    Positive exactly when P_c beats the uniform guess 1/K.  Probabilities
    are clamped away from 0 and 1 so the result stays finite.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ContractError("need at least 2 classes for relevance initialization")
    p = np.clip(p, PROB_CLAMP_LOW, PROB_CLAMP_HIGH)
    return np.log(p / (1.0 - p) * (p.shape[-1] - 1))


def relevance_init_parametric(logits: Array) -> Array:
    """Logits pass through unchanged as per-class relevance."""
    return np.array(logits, dtype=np.float64)


def relation_head(query_map: Array, protos: Array, relation_net: Network,
                  ) -> tuple[Array, ForwardTrace]:
    """Logits of one query against K prototype maps, forward recorded.

    Each pair is the channel-wise concatenation (prototype, query) fed
    through the relation network, whose output is a single logit.
    """
    protos = np.asarray(protos, dtype=np.float64)
    q = np.asarray(query_map, dtype=np.float64)
    if protos.shape[1:] != q.shape:
        raise ContractError(
            f"prototype shape {protos.shape[1:]} does not match query {q.shape}")
    pairs = np.concatenate(
        [protos, np.broadcast_to(q, protos.shape)], axis=1)
    logits, trace = relation_net.forward_recorded(pairs)
    if logits.shape[1:] != (1,):
        raise ContractError(
            f"relation net must emit one logit per pair, got shape {logits.shape[1:]}")
    return logits[:, 0], trace


def cosine_explain(query_feat: Array, proto: Array, relevance: float,
                   epsilon: float, variant: str = "query") -> Array:
    """Epsilon rule over one cosine similarity's contribution terms.

    The target-class similarity is treated as a linear form over the
    contributions q_i * phat_i (prototype normalized, the query-norm
    factor held constant).  ``variant="both-normalized"`` instead uses
    contributions of the fully normalized product qhat_i * phat_i; it
    is exposed for experimentation without a correctness claim.
    """
    if variant not in COSINE_EXPLAIN_VARIANTS:
        raise ConfigError(f"unknown cosine explain variant {variant!r}")
    q = np.asarray(query_feat, dtype=np.float64)
    p = np.asarray(proto, dtype=np.float64)
    if q.shape != p.shape:
        raise ContractError(f"query shape {q.shape} does not match prototype {p.shape}")
    pn = np.linalg.norm(p)
    if pn == 0:
        raise NumericError("zero-norm prototype in cosine explanation")
    phat = p / pn
    if variant == "both-normalized":
        qn = np.linalg.norm(q)
        if qn == 0:
            raise NumericError("zero-norm query in cosine explanation")
        contrib = (q / qn) * phat
    else:
        contrib = q * phat
    total = contrib.sum()
    denom = total + epsilon * (1.0 if total >= 0 else -1.0)
    if denom == 0.0:
        return np.zeros_like(q)
    return float(relevance) * contrib / denom


@dataclass
class CosineHead:
    """Non-parametric prototype head: cosine scores, beta-scaled softmax."""

    beta: float = 7.0
    explain_variant: str = "query"
    kind: str = "cosine"

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.explain_variant not in COSINE_EXPLAIN_VARIANTS:
            raise ConfigError(f"unknown cosine explain variant {self.explain_variant!r}")

    def output(self, query_feat: Array, protos: Array) -> HeadOutput:
        scores = cosine_scores(query_feat, protos)
        probs = scaled_softmax(scores, self.beta)
        return HeadOutput(scores, probs, relevance_init_nonparametric(probs))


@dataclass
class RelationHead:
    """Parametric pair-scoring head around a small relation network."""

    net: Network
    beta: float = 1.0
    kind: str = "relation"

    def output(self, query_map: Array, protos: Array) -> tuple[HeadOutput, ForwardTrace]:
        logits, trace = relation_head(query_map, protos, self.net)
        probs = scaled_softmax(logits, self.beta)
        return HeadOutput(logits, probs, relevance_init_parametric(logits)), trace


def lrp_through_head(head, recorded, relevance_init: Array, target_class: int,
                     cfg: LrpConfig) -> Array:
    """Relevance of the processed classifier input f_p for one target class.

    * cosine head: ``recorded`` is the (query_feat, protos) pair; the
      result is relevance over the query feature vector.
    * relation head: ``recorded`` is the trace of the K concatenated
      pairs; relevance is propagated through the relation network onto
      the target class's pair, covering both the prototype half and the
      query half.
    """
    relevance_init = np.asarray(relevance_init, dtype=np.float64)
    if not 0 <= target_class < relevance_init.shape[0]:
        raise ContractError(f"target class {target_class} out of range")
    if isinstance(head, CosineHead):
        query_feat, protos = recorded
        return cosine_explain(query_feat, protos[target_class],
                              relevance_init[target_class], cfg.epsilon,
                              head.explain_variant)
    if isinstance(head, RelationHead):
        trace = recorded
        init = np.zeros(trace.entries[-1].output.shape)
        init[target_class, 0] = relevance_init[target_class]
        rtrace = lrp_backward(head.net, trace, init, cfg)
        return rtrace.relevances[0][target_class]
    raise ConfigError(f"unknown head kind {type(head).__name__!r}")
