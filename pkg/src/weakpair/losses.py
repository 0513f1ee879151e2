"""Training objectives: contrastive, uncertainty-regularized, and matching.

All losses are assembled on an autograd Graph from unit-norm embedding rows
and are minimized.

itc_loss       temperature-scaled softmax cross-entropy over in-batch
               cosines, both retrieval directions, positives on the diagonal.
consistency_uncertainty
               per-anchor consistency s_w = (cos(f_I, f_Iw) + cos(f_T, f_Tw)) / 2
               and its uncertainty u_w under a selectable monotone mapping.
uitc_loss      weak-pair contrastive loss regularized by uncertainty:
               L / (gamma * u_w) + gamma * u_w, with u_w detached so the
               model cannot game the weighting path, and gamma = exp(log_gamma)
               kept positive structurally.
itm_loss       binary match/non-match classification of the strong pair plus
               its two directional hard negatives.
gitm_loss      group-wise matching: each weak branch averages its
               weak-positive term with K mined negatives, weights 1/(1+K).
total_loss     itc + itm + alpha * uitc + beta * (gitm_txt + gitm_img).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Array, Graph, Node
from .encoders import match_probability
from .mining import PairGroup

MAPPINGS = ("exponential", "linear", "power")

# Match probabilities are clamped away from {0, 1} before the logarithm; the
# counter records how often that actually happened.
CLAMP_LO = 1e-12
CLAMP_HI = 1.0 - 1e-12

# u_w value ranges implied by s_w in [-1, 1], per mapping.
U_BOUNDS = {
    "exponential": (math.exp(-1.0), math.e),
    "linear": (0.5, 2.5),
    "power": (0.25, 6.25),
}


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.1


@dataclass
class UncertaintyScore:
    """Consistency and uncertainty nodes for a batch of weak pairs."""

    s_w: Node
    u_w: Node


@dataclass
class ClampCounter:
    count: int = 0


@dataclass
class LossReport:
    itc: float
    uitc: float
    itm: float
    gitm_txt: float
    gitm_img: float
    total: float
    mean_s_w: float
    mean_u_w: float

    def recomputed_total(self, weights: LossWeights) -> float:
        return (self.itc + self.itm + weights.alpha * self.uitc
                + weights.beta * (self.gitm_txt + self.gitm_img))


def mapping_value(s, mapping: str):
    """Numpy twin of the in-graph uncertainty mappings."""
    s = np.asarray(s, dtype=np.float64)
    if mapping == "exponential":
        return np.exp(-s)
    if mapping == "linear":
        return 1.5 - s
    if mapping == "power":
        return (1.5 - s) ** 2
    raise ValueError(f"unknown uncertainty mapping {mapping!r}")


def matching_scores(g: Graph, f_img: Node, f_txt: Node, log_tau: Node) -> Node:
    """Row-normalized match scores: softmax over cosines divided by tau.

    Row i gives the distribution of image i over the batch of texts; call
    with arguments swapped for the text-to-image direction.
    """
    if f_img.shape[0] == 0:
        raise ValueError("matching_scores needs a nonempty batch")
    inv_tau = g.exp(g.mul(log_tau, -1.0))
    return g.softmax_rows(g.mul(g.cosine_matrix(f_img, f_txt), inv_tau))


def itc_loss(g: Graph, f_img: Node, f_txt: Node, log_tau: Node) -> Node:
    """Contrastive loss with diagonal positives, both directions, batch mean."""
    n = f_img.shape[0]
    eye = g.constant(np.eye(n))
    scores_it = matching_scores(g, f_img, f_txt, log_tau)
    scores_ti = matching_scores(g, f_txt, f_img, log_tau)
    log_it = g.log(g.sum_rows(g.mul(scores_it, eye)))
    log_ti = g.log(g.sum_rows(g.mul(scores_ti, eye)))
    return g.mul(g.add(g.mean(log_it), g.mean(log_ti)), -1.0)


def consistency_uncertainty(g: Graph, f_img: Node, f_txt: Node,
                            f_img_w: Node, f_txt_w: Node,
                            mapping: str = "exponential") -> UncertaintyScore:
    """Per-anchor weak-pair consistency and its mapped uncertainty."""
    sim_img = g.sum_rows(g.mul(f_img, f_img_w))
    sim_txt = g.sum_rows(g.mul(f_txt, f_txt_w))
    s_w = g.mul(g.add(sim_img, sim_txt), 0.5)
    if mapping == "exponential":
        u_w = g.exp(g.mul(s_w, -1.0))
    elif mapping == "linear":
        u_w = 1.5 - s_w
    elif mapping == "power":
        diff = 1.5 - s_w
        u_w = g.mul(diff, diff)
    else:
        raise ValueError(f"unknown uncertainty mapping {mapping!r}")
    return UncertaintyScore(s_w=s_w, u_w=u_w)


def uitc_loss(g: Graph, itc_weak: Node, u_w: Node, log_gamma: Node) -> Node:
    """itc_weak / (gamma * u_w) + gamma * u_w with u_w detached.

    The division is composed as exp(-log(.)) so the op set stays closed;
    gamma is structurally positive and u_w must be (all three mappings
    guarantee it; anything else is a caller bug, not a numeric accident).
    """
    if np.any(u_w.value <= 0.0):
        raise ValueError("uncertainty must be positive")
    u_const = g.detach(u_w)
    inv_gamma = g.exp(g.mul(log_gamma, -1.0))
    inv_u = g.exp(g.mul(g.log(u_const), -1.0))
    gamma = g.exp(log_gamma)
    return g.add(g.mul(g.mul(itc_weak, inv_gamma), inv_u),
                 g.mul(gamma, u_const))


def itm_term(g: Graph, p_hat: Node, labels, clamps: ClampCounter | None = None) -> Node:
    """Negated log-likelihood -(p log p_hat + (1-p) log(1-p_hat)), elementwise.

    Probabilities outside [1e-12, 1 - 1e-12] are clamped by adding the
    detachable constant offset (clip(v) - v); the offset is zero whenever no
    clamping occurs, so the graph is exact in the common case.
    """
    y = np.asarray(labels, dtype=np.float64)
    v = p_hat.value
    clipped = np.clip(v, CLAMP_LO, CLAMP_HI)
    if not np.array_equal(clipped, v):
        if clamps is not None:
            clamps.count += int(np.count_nonzero(clipped != v))
        p_hat = g.add(p_hat, g.constant(clipped - v))
    log_p = g.log(p_hat)
    log_1mp = g.log(g.add(g.constant(1.0), g.mul(p_hat, -1.0)))
    ll = g.add(g.mul(g.constant(y), log_p),
               g.mul(g.constant(1.0 - y), log_1mp))
    return g.mul(ll, -1.0)


def _selector(rows: list[int], n: int) -> Array:
    sel = np.zeros((len(rows), n))
    for r, j in enumerate(rows):
        if j >= 0:
            sel[r, j] = 1.0
    return sel


def _gather(g: Graph, picks: list[tuple[str, int]], strong: Node, weak: Node) -> Node:
    """Stack embedding rows drawn from the batch ("batch") or weak ("weak") set."""
    n = strong.shape[0]
    sel_strong = _selector([j if src == "batch" else -1 for src, j in picks], n)
    sel_weak = _selector([j if src == "weak" else -1 for src, j in picks], n)
    if not sel_weak.any():
        return g.affine(g.constant(sel_strong), strong)
    if not sel_strong.any():
        return g.affine(g.constant(sel_weak), weak)
    return g.add(g.affine(g.constant(sel_strong), strong),
                 g.affine(g.constant(sel_weak), weak))


def _pair_term(g: Graph, head, pairs: list[tuple[str, int, str, int, int]],
               f_img: Node, f_txt: Node, f_img_w: Node, f_txt_w: Node,
               clamps: ClampCounter | None) -> Node:
    img_rows = _gather(g, [(src, j) for src, j, _, _, _ in pairs], f_img, f_img_w)
    txt_rows = _gather(g, [(src, j) for _, _, src, j, _ in pairs], f_txt, f_txt_w)
    labels = np.array([[float(lbl)] for *_, lbl in pairs])
    p_hat = match_probability(g, head, img_rows, txt_rows)
    return itm_term(g, p_hat, labels, clamps)


def itm_loss(g: Graph, head, f_img: Node, f_txt: Node, groups: list[PairGroup],
             clamps: ClampCounter | None = None) -> Node:
    """Mean matching loss over every strong pair and its two mined negatives."""
    pairs = []
    for grp in groups:
        i = grp.anchor
        pairs += [("batch", i, "batch", i, 1),
                  ("batch", i, "batch", grp.itm_neg_text, 0),
                  ("batch", grp.itm_neg_image, "batch", i, 0)]
    return g.mean(_pair_term(g, head, pairs, f_img, f_txt, f_img, f_txt, clamps))


def gitm_loss(g: Graph, head, f_img: Node, f_txt: Node, f_img_w: Node,
              f_txt_w: Node, group: PairGroup,
              clamps: ClampCounter | None = None) -> tuple[Node, Node]:
    """One group's two branch losses, each a 1/(1+K)-weighted mean.

    The text branch scores (anchor image, weak text) against the anchor
    image's mined texts; the image branch mirrors it.
    """
    if not group.neg_texts or not group.neg_images:
        raise ValueError("group has an empty negative set")
    i = group.anchor
    txt_pairs = [("batch", i, "weak", i, 1)]
    txt_pairs += [("batch", i, "batch", j, 0) for j in group.neg_texts]
    img_pairs = [("weak", i, "batch", i, 1)]
    img_pairs += [("batch", j, "batch", i, 0) for j in group.neg_images]
    branch_txt = g.mean(_pair_term(g, head, txt_pairs, f_img, f_txt, f_img_w, f_txt_w, clamps))
    branch_img = g.mean(_pair_term(g, head, img_pairs, f_img, f_txt, f_img_w, f_txt_w, clamps))
    return branch_txt, branch_img


def gitm_batch_loss(g: Graph, head, f_img: Node, f_txt: Node, f_img_w: Node,
                    f_txt_w: Node, groups: list[PairGroup],
                    clamps: ClampCounter | None = None) -> tuple[Node, Node]:
    """Both branch losses averaged over all groups in one head evaluation.

    Every group contributes 1+K equally weighted terms per branch, so the
    flat mean equals the mean of per-group means.
    """
    txt_pairs, img_pairs = [], []
    for grp in groups:
        if not grp.neg_texts or not grp.neg_images:
            raise ValueError("group has an empty negative set")
        i = grp.anchor
        txt_pairs.append(("batch", i, "weak", i, 1))
        txt_pairs += [("batch", i, "batch", j, 0) for j in grp.neg_texts]
        img_pairs.append(("weak", i, "batch", i, 1))
        img_pairs += [("batch", j, "batch", i, 0) for j in grp.neg_images]
    branch_txt = g.mean(_pair_term(g, head, txt_pairs, f_img, f_txt, f_img_w, f_txt_w, clamps))
    branch_img = g.mean(_pair_term(g, head, img_pairs, f_img, f_txt, f_img_w, f_txt_w, clamps))
    return branch_txt, branch_img


def total_loss(g: Graph, itc: Node, itm: Node, uitc: Node | None,
               gitm_txt: Node | None, gitm_img: Node | None,
               weights: LossWeights) -> Node:
    """Weighted sum of the enabled objectives (absent terms contribute zero)."""
    total = g.add(itc, itm)
    if uitc is not None:
        total = g.add(total, g.mul(uitc, weights.alpha))
    if gitm_txt is not None:
        total = g.add(total, g.mul(g.add(gitm_txt, gitm_img), weights.beta))
    return total
