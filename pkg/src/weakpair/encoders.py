"""Two-tower embedding encoders and the pair-scoring fusion head.

Each modality gets its own two-layer tower (affine, tanh, affine) whose
output rows are L2-normalized, so downstream cosine scores are plain dot
products.  The fusion head maps a pair of embeddings, together with their
elementwise product, through a hidden tanh layer to a single logit; its
sigmoid is the match probability.  The product term gives the head the
second-order interaction needed to separate hard negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autograd import Array, Graph, Node
from .data import DatasetManifest


@dataclass
class EncoderParams:
    """One tower: hidden affine + tanh, then output affine."""

    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass
class FusionHeadParams:
    """Pair scorer over (f_a, f_b, f_a*f_b); affine maps stored blockwise.

    The logit is the sum of a tanh hidden path (w_*, b_hidden, w_out) and a
    direct affine path (v_*) from the same concatenation.  The direct
    product-block path matters: through it, match supervision acts on the
    embedding dot products themselves, not only on head internals.
    """

    w_img: Array
    w_txt: Array
    w_prod: Array
    b_hidden: Array
    w_out: Array
    v_img: Array
    v_txt: Array
    v_prod: Array
    b_out: Array


@dataclass(frozen=True)
class ModelDims:
    raw_dim_image: int
    raw_dim_text: int
    hidden_dim: int
    embed_dim: int


@dataclass
class ModelParams:
    image_tower: EncoderParams
    text_tower: EncoderParams
    head: FusionHeadParams
    log_tau: Array   # temperature, tau = exp(log_tau)
    log_gamma: Array  # uncertainty scale, gamma = exp(log_gamma)


# Parameter dicts use dotted keys so optimizers and checkpoints can treat
# the model as a flat name -> array mapping.
_TOWER_KEYS = ("w1", "b1", "w2", "b2")
_HEAD_KEYS = ("w_img", "w_txt", "w_prod", "b_hidden", "w_out",
              "v_img", "v_txt", "v_prod", "b_out")


def params_to_dict(model: ModelParams) -> dict[str, Array]:
    out: dict[str, Array] = {}
    for prefix, tower in (("img", model.image_tower), ("txt", model.text_tower)):
        for key in _TOWER_KEYS:
            out[f"{prefix}.{key}"] = getattr(tower, key)
    for key in _HEAD_KEYS:
        out[f"head.{key}"] = getattr(model.head, key)
    out["log_tau"] = model.log_tau
    out["log_gamma"] = model.log_gamma
    return out


def dict_to_params(d: Mapping[str, Array]) -> ModelParams:
    img = EncoderParams(*(d[f"img.{k}"] for k in _TOWER_KEYS))
    txt = EncoderParams(*(d[f"txt.{k}"] for k in _TOWER_KEYS))
    head = FusionHeadParams(*(d[f"head.{k}"] for k in _HEAD_KEYS))
    return ModelParams(img, txt, head, d["log_tau"], d["log_gamma"])


def leaf_group(leaves: Mapping[str, Node], prefix: str) -> dict[str, Node]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in leaves.items() if k.startswith(prefix + ".")}


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed: int, dims: ModelDims
                ) -> tuple[EncoderParams, EncoderParams, FusionHeadParams]:
    """Symmetric 1/sqrt(fan_in) weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))

    def tower(raw_dim: int) -> EncoderParams:
        return EncoderParams(
            w1=_uniform(rng, raw_dim, (raw_dim, dims.hidden_dim)),
            b1=np.zeros(dims.hidden_dim),
            w2=_uniform(rng, dims.hidden_dim, (dims.hidden_dim, dims.embed_dim)),
            b2=np.zeros(dims.embed_dim),
        )

    image_tower = tower(dims.raw_dim_image)
    text_tower = tower(dims.raw_dim_text)
    fan_concat = 3 * dims.embed_dim
    head = FusionHeadParams(
        w_img=_uniform(rng, fan_concat, (dims.embed_dim, dims.hidden_dim)),
        w_txt=_uniform(rng, fan_concat, (dims.embed_dim, dims.hidden_dim)),
        w_prod=_uniform(rng, fan_concat, (dims.embed_dim, dims.hidden_dim)),
        b_hidden=np.zeros(dims.hidden_dim),
        w_out=_uniform(rng, dims.hidden_dim, (dims.hidden_dim, 1)),
        v_img=_uniform(rng, fan_concat, (dims.embed_dim, 1)),
        v_txt=_uniform(rng, fan_concat, (dims.embed_dim, 1)),
        v_prod=_uniform(rng, fan_concat, (dims.embed_dim, 1)),
        b_out=np.zeros(1),
    )
    return image_tower, text_tower, head


def init_model(seed: int, dims: ModelDims, tau_init: float = 0.07) -> ModelParams:
    image_tower, text_tower, head = init_params(seed, dims)
    return ModelParams(image_tower, text_tower, head,
                       log_tau=np.asarray(np.log(tau_init)),
                       log_gamma=np.asarray(0.0))


def encode(g: Graph, tower: Mapping[str, Node], raw: Node) -> Node:
    """Unit-norm embedding rows: l2_normalize(affine2(tanh(affine1(raw))))."""
    hidden = g.tanh(g.affine(raw, tower["w1"], tower["b1"]))
    return g.l2_normalize(g.affine(hidden, tower["w2"], tower["b2"]))


def match_probability(g: Graph, head: Mapping[str, Node],
                      f_img: Node, f_txt: Node) -> Node:
    """Match probability per row, in (0, 1); order of arguments matters."""
    prod = g.mul(f_img, f_txt)
    pre = g.add(g.add(g.affine(f_img, head["w_img"], head["b_hidden"]),
                      g.affine(f_txt, head["w_txt"])),
                g.affine(prod, head["w_prod"]))
    hidden = g.affine(g.tanh(pre), head["w_out"], head["b_out"])
    direct = g.add(g.add(g.affine(f_img, head["v_img"]),
                         g.affine(f_txt, head["v_txt"])),
                   g.affine(prod, head["v_prod"]))
    return g.sigmoid(g.add(hidden, direct))


@dataclass
class EmbeddingBatch:
    """Unit-norm embedding values for one mini-batch.

    Row i of every matrix refers to anchor i; the weak matrices hold each
    anchor's same-identity other-view counterpart.
    """

    image: Array
    text: Array
    weak_image: Array
    weak_text: Array
    identities: np.ndarray

    def __post_init__(self):
        n = self.image.shape[0]
        shapes = (self.text.shape[0], self.weak_image.shape[0],
                  self.weak_text.shape[0], self.identities.shape[0])
        if any(s != n for s in shapes):
            raise ValueError("embedding batch row counts disagree")
        for matrix in (self.image, self.text, self.weak_image, self.weak_text):
            norms = np.linalg.norm(matrix, axis=1)
            if not np.all((np.abs(norms - 1.0) <= 1e-6) | (norms == 0.0)):
                raise ValueError("embedding rows must be unit-norm (or flagged zero)")


def embed_manifest(params: ModelParams, manifest: DatasetManifest
                   ) -> tuple[Array, Array, np.ndarray, np.ndarray, int]:
    """Embed every record; returns (image, text, identities, views, zero_rows)."""
    g = Graph()
    leaves = {k: g.constant(v, name=k) for k, v in params_to_dict(params).items()}
    raw_img = np.stack([r.image_raw for r in manifest.records])
    raw_txt = np.stack([r.text_raw for r in manifest.records])
    f_img = encode(g, leaf_group(leaves, "img"), g.constant(raw_img))
    f_txt = encode(g, leaf_group(leaves, "txt"), g.constant(raw_txt))
    identities = np.array([r.identity for r in manifest.records])
    views = np.array([r.view for r in manifest.records])
    zero_rows = sum(len(rows) for _, rows in g.zero_norm_rows)
    return f_img.value, f_txt.value, identities, views, zero_rows
