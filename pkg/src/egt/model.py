"""Encoder/head assembly and the EGT1 binary checkpoint format.

A model is a convolutional encoder that ends at a spatial feature map
plus one of the two few-shot heads.  The cosine head flattens the map
into a vector; the relation head keeps the map and scores concatenated
(prototype, query) pairs with its own small network.

Checkpoint layout (EGT1):

    EGT1\n
    head kind=<cosine|relation> beta=<float> [variant=<name>]\n
    encoder input=<CxHxW>\n
    layer <description>\n          (one per encoder layer)
    relation input=<CxHxW>\n       (relation head only)
    layer <description>\n          (one per relation layer)
    end\n
    <raw little-endian float32 parameter blocks>

Parameter blocks follow header order: encoder layers first, then
relation layers, weight before bias within a layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError
from .heads import (
    COSINE_EXPLAIN_VARIANTS,
    CosineHead,
    RelationHead,
    class_prototypes,
    cosine_scores,
    lrp_through_head,
    scaled_softmax,
)
from .lrp import LrpConfig, lrp_backward
from .tensornet import (
    AvgPool2d,
    Conv2d,
    Flatten,
    ForwardTrace,
    Layer,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    describe_layer,
    layer_from_description,
)

Array = np.ndarray

CHECKPOINT_MAGIC = b"EGT1\n"

DEFAULT_WIDTHS = (8, 16, 32)


@dataclass
class FewShotModel:
    """Convolutional encoder paired with a few-shot classifier head."""

    encoder: Network
    head: CosineHead | RelationHead

    @property
    def head_kind(self) -> str:
        return self.head.kind

    @property
    def feature_map_shape(self) -> tuple[int, ...]:
        return self.encoder.output_shape

    def encode(self, images: Array) -> Array:
        return self.encoder.forward(np.asarray(images, dtype=np.float64))

    def encode_recorded(self, images: Array) -> tuple[Array, ForwardTrace]:
        return self.encoder.forward_recorded(np.asarray(images, dtype=np.float64))

    def networks(self) -> list[Network]:
        nets = [self.encoder]
        if isinstance(self.head, RelationHead):
            nets.append(self.head.net)
        return nets


def build_encoder(in_shape: tuple[int, int, int], rng: np.random.Generator,
                  widths: tuple[int, ...] = DEFAULT_WIDTHS) -> Network:
    """Stack of conv+relu+pool blocks ending at a spatial map.

    All blocks but the last pool with max, the last with average; each
    pool halves the spatial side, so the input sides must be divisible
    by 2**len(widths).
    """
    c, h, w = in_shape
    if len(widths) < 1:
        raise ConfigError("encoder needs at least one block")
    factor = 2 ** len(widths)
    if h % factor or w % factor:
        raise ConfigError(
            f"input sides {h}x{w} must be divisible by {factor} "
            f"for {len(widths)} pooling stages")
    layers: list[Layer] = []
    prev = c
    for i, width in enumerate(widths):
        layers.append(Conv2d.he_init(prev, width, 3, rng, stride=1, padding=1))
        layers.append(ReLU())
        pool = AvgPool2d(2, 2) if i == len(widths) - 1 else MaxPool2d(2, 2)
        layers.append(pool)
        prev = width
    return Network(in_shape, layers)


def build_relation_net(pair_shape: tuple[int, int, int], rng: np.random.Generator,
                       hidden: int = 64) -> Network:
    """Pair scorer: conv block, pooled, then a two-layer dense tail to one logit."""
    c2, h, w = pair_shape
    if c2 % 2:
        raise ConfigError(f"pair channels must be even, got {c2}")
    mid = c2 // 2
    layers: list[Layer] = [Conv2d.he_init(c2, mid, 3, rng, stride=1, padding=1), ReLU()]
    if h >= 2 and w >= 2:
        layers.append(AvgPool2d(2, 2))
        h, w = h // 2, w // 2
    layers += [Flatten(),
               Linear.he_init(mid * h * w, hidden, rng), ReLU(),
               Linear.he_init(hidden, 1, rng)]
    return Network(pair_shape, layers)


def build_model(head_kind: str, in_shape: tuple[int, int, int],
                rng: np.random.Generator, widths: tuple[int, ...] = DEFAULT_WIDTHS,
                beta: float | None = None, explain_variant: str = "query",
                hidden: int = 64) -> FewShotModel:
    encoder = build_encoder(in_shape, rng, widths)
    c, h, w = encoder.output_shape
    if head_kind == "cosine":
        head = CosineHead(beta=7.0 if beta is None else beta,
                          explain_variant=explain_variant)
    elif head_kind == "relation":
        net = build_relation_net((2 * c, h, w), rng, hidden=hidden)
        head = RelationHead(net, beta=1.0 if beta is None else beta)
    else:
        raise ConfigError(f"unknown head kind {head_kind!r}")
    return FewShotModel(encoder, head)


def proto_maps_from_support(model: FewShotModel, support_maps: Array,
                            support_local: Array, way: int) -> Array:
    return class_prototypes(support_maps, support_local, way)


def probs_from_maps(model: FewShotModel, proto_maps: Array, query_maps: Array) -> Array:
    """Class probabilities for each query map given prototype maps."""
    proto_maps = np.asarray(proto_maps, dtype=np.float64)
    query_maps = np.asarray(query_maps, dtype=np.float64)
    way = proto_maps.shape[0]
    n = query_maps.shape[0]
    if isinstance(model.head, CosineHead):
        scores = cosine_scores(query_maps.reshape(n, -1),
                               proto_maps.reshape(way, -1))
        return scaled_softmax(scores, model.head.beta)
    pairs = np.concatenate(
        [np.broadcast_to(proto_maps[None], (n,) + proto_maps.shape),
         np.broadcast_to(query_maps[:, None], (n, way) + query_maps.shape[1:])],
        axis=2)
    logits = model.head.net.forward(pairs.reshape((n * way,) + pairs.shape[2:]))
    return scaled_softmax(logits.reshape(n, way), model.head.beta)


def episode_probs(model: FewShotModel, support_images: Array, support_local: Array,
                  way: int, query_images: Array) -> Array:
    """End-to-end class probabilities for a batch of query images."""
    smaps = model.encode(support_images)
    qmaps = model.encode(query_images)
    protos = class_prototypes(smaps, support_local, way)
    return probs_from_maps(model, protos, qmaps)


@dataclass
class ExplainResult:
    """One query's explanation: head outputs plus per-class relevance."""

    scores: Array
    probabilities: Array
    relevance_init: Array
    feature_relevance: dict[int, Array]
    input_relevance: dict[int, Array]


def explain_input(model: FewShotModel, support_images: Array, support_local: Array,
                  way: int, query_image: Array, lrp_cfg=None,
                  targets=None) -> ExplainResult:
    """Propagate class relevance from the head down to query pixels.

    For the cosine head the feature relevance lives on the flattened
    query embedding; for the relation head it covers the (prototype,
    query) pair and the query half is what continues into the encoder.
    ``targets`` defaults to every class.
    """
    lrp_cfg = LrpConfig() if lrp_cfg is None else lrp_cfg
    smaps = model.encode(support_images)
    qmap, qtrace = model.encode_recorded(np.asarray(query_image))
    protos = class_prototypes(smaps, support_local, way)
    if targets is None:
        targets = range(way)

    channels = protos.shape[1]
    if isinstance(model.head, CosineHead):
        out = model.head.output(qmap.reshape(-1), protos.reshape(way, -1))
        recorded = (qmap.reshape(-1), protos.reshape(way, -1))
    else:
        out, rtrace = model.head.output(qmap, protos)
        recorded = rtrace

    feature_rel: dict[int, Array] = {}
    input_rel: dict[int, Array] = {}
    for target in targets:
        rel = lrp_through_head(model.head, recorded, out.relevance_init,
                               int(target), lrp_cfg)
        feature_rel[int(target)] = rel
        if isinstance(model.head, CosineHead):
            map_rel = rel.reshape(model.feature_map_shape)
        else:
            map_rel = rel[channels:]
        rtrace_full = lrp_backward(model.encoder, qtrace, map_rel, lrp_cfg)
        input_rel[int(target)] = rtrace_full.input_relevance
    return ExplainResult(scores=out.scores, probabilities=out.probabilities,
                         relevance_init=out.relevance_init,
                         feature_relevance=feature_rel, input_relevance=input_rel)


def _shape_token(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape)


def _parse_shape(token: str) -> tuple[int, ...]:
    return tuple(int(d) for d in token.split("x"))


def save_model(model: FewShotModel, path: str) -> None:
    lines = []
    head = model.head
    if isinstance(head, CosineHead):
        lines.append(f"head kind=cosine beta={head.beta!r} variant={head.explain_variant}")
    elif isinstance(head, RelationHead):
        lines.append(f"head kind=relation beta={head.beta!r}")
    else:
        raise ConfigError(f"cannot save head {type(head).__name__!r}")
    lines.append(f"encoder input={_shape_token(model.encoder.input_shape)}")
    lines += [f"layer {describe_layer(layer)}" for layer in model.encoder.layers]
    if isinstance(head, RelationHead):
        lines.append(f"relation input={_shape_token(head.net.input_shape)}")
        lines += [f"layer {describe_layer(layer)}" for layer in head.net.layers]
    lines.append("end")
    blocks = []
    for net in model.networks():
        for _, layer in net.param_layers():
            blocks.append(layer.weight.astype("<f4").tobytes())
            blocks.append(layer.bias.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for block in blocks:
            fh.write(block)


def _parse_head_line(line: str):
    parts = line.split()
    if not parts or parts[0] != "head":
        raise DataFormatError(f"expected head line, got {line!r}")
    kv = dict(p.split("=", 1) for p in parts[1:])
    kind = kv.get("kind")
    if kind == "cosine":
        variant = kv.get("variant", "query")
        if variant not in COSINE_EXPLAIN_VARIANTS:
            raise DataFormatError(f"unknown cosine explain variant {variant!r}")
        return kind, float(kv["beta"]), variant
    if kind == "relation":
        return kind, float(kv["beta"]), None
    raise DataFormatError(f"unknown head kind {kind!r}")


def load_model(path: str) -> FewShotModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataFormatError("not an EGT1 checkpoint (bad magic)", offset=0)
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise DataFormatError("checkpoint header is missing its end line",
                              offset=len(raw))
    try:
        header = raw[len(CHECKPOINT_MAGIC):cut + 1].decode("ascii")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"checkpoint header is not ascii: {exc}") from exc
    payload = raw[cut + len(marker):]

    lines = header.splitlines()
    if not lines:
        raise DataFormatError("checkpoint header is empty")
    kind, beta, variant = _parse_head_line(lines[0])

    sections: list[tuple[str, tuple[int, ...], list[Layer]]] = []
    current: list[Layer] | None = None
    for line in lines[1:]:
        parts = line.split(None, 1)
        tag = parts[0]
        if tag in ("encoder", "relation"):
            kv = dict(p.split("=", 1) for p in parts[1].split())
            current = []
            sections.append((tag, _parse_shape(kv["input"]), current))
        elif tag == "layer":
            if current is None:
                raise DataFormatError(f"layer line before any network section: {line!r}")
            current.append(layer_from_description(parts[1]))
        else:
            raise DataFormatError(f"unknown checkpoint header line {line!r}")
    if not sections or sections[0][0] != "encoder":
        raise DataFormatError("checkpoint header is missing the encoder section")
    if kind == "relation" and (len(sections) != 2 or sections[1][0] != "relation"):
        raise DataFormatError("relation checkpoint needs a relation section")
    if kind == "cosine" and len(sections) != 1:
        raise DataFormatError("cosine checkpoint must not carry extra sections")

    nets = []
    for _, in_shape, layers in sections:
        try:
            nets.append(Network(in_shape, layers))
        except ContractError as exc:
            raise DataFormatError(f"checkpoint layer chain is inconsistent: {exc}") from exc

    values = np.frombuffer(payload, dtype="<f4")
    pos = 0
    for net in nets:
        for _, layer in net.param_layers():
            for name, arr in (("weight", layer.weight), ("bias", layer.bias)):
                n = arr.size
                if pos + n > values.size:
                    raise DataFormatError(
                        "checkpoint payload is truncated",
                        offset=cut + len(marker) + values.size * 4)
                arr[...] = values[pos:pos + n].reshape(arr.shape)
                pos += n
    if pos != values.size:
        raise DataFormatError("checkpoint payload has trailing bytes",
                              offset=cut + len(marker) + pos * 4)

    if kind == "cosine":
        head: CosineHead | RelationHead = CosineHead(beta=beta, explain_variant=variant)
    else:
        head = RelationHead(nets[1], beta=beta)
    return FewShotModel(nets[0], head)
