"""Weak-positive sampling, in-batch hard-negative mining, group assembly.

A group for anchor i bundles the strong pair (I_i, T_i), the two weak pairs
(I_i, T_i_w) and (I_i_w, T_i), the two directional hard negatives used by
plain pair matching, and the top-K mined negatives attached to each weak
branch: 3 matched pairs versus 2 + 2K negatives in total.

Mining only ever considers candidates whose identity differs from the
anchor's, scores them with the current cross-modal cosines, and breaks ties
by preferring the lower batch index so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PairRecord
from .encoders import EmbeddingBatch

MODES = ("neg3v4", "neg3v6", "custom")


class MiningStarvationError(RuntimeError):
    """Batch has too few different-identity candidates to mine."""


@dataclass(frozen=True)
class MiningConfig:
    mode: str = "neg3v6"
    k: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mining mode {self.mode!r}")
        expected = {"neg3v4": 1, "neg3v6": 2}.get(self.mode)
        if expected is not None and self.k != expected:
            raise ValueError(f"mode {self.mode} requires k={expected}, got {self.k}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    @classmethod
    def from_mode(cls, mode: str, k: int | None = None) -> "MiningConfig":
        if mode == "neg3v4":
            return cls("neg3v4", 1)
        if mode == "neg3v6":
            return cls("neg3v6", 2)
        if k is None:
            raise ValueError("custom mining mode needs an explicit k")
        return cls("custom", k)


@dataclass
class WeakSelection:
    """An anchor record paired with a same-identity counterpart.

    degenerate is set when the identity has no other record and the anchor
    had to stand in for itself.
    """

    anchor: PairRecord
    weak: PairRecord
    degenerate: bool

    def __post_init__(self):
        if self.anchor.identity != self.weak.identity:
            raise ValueError("weak selection crossed identities")


def sample_weak(anchor: PairRecord, pool: dict[int, list[PairRecord]],
                rng: np.random.Generator) -> WeakSelection:
    """Uniform draw among the anchor identity's other records."""
    try:
        candidates = pool[anchor.identity]
    except KeyError:
        raise KeyError(f"identity {anchor.identity} not in pool") from None
    others = [r for r in candidates
              if (r.identity, r.view) != (anchor.identity, anchor.view)]
    if not others:
        return WeakSelection(anchor, anchor, degenerate=True)
    return WeakSelection(anchor, others[int(rng.integers(len(others)))], False)


def mine_hard_negatives(batch: EmbeddingBatch, anchor: int, direction: str,
                        k: int) -> list[int]:
    """Top-k most similar different-identity candidates, ties by lower index.

    direction "image_to_text" scores candidate texts against the anchor
    image; "text_to_image" scores candidate images against the anchor text.
    """
    if direction == "image_to_text":
        scores = batch.text @ batch.image[anchor]
    elif direction == "text_to_image":
        scores = batch.image @ batch.text[anchor]
    else:
        raise ValueError(f"unknown mining direction {direction!r}")
    eligible = np.nonzero(batch.identities != batch.identities[anchor])[0]
    if eligible.shape[0] < k:
        ids = np.unique(batch.identities)
        raise MiningStarvationError(
            f"anchor {anchor} needs {k} negatives but only {eligible.shape[0]} "
            f"eligible candidates exist (batch of {batch.identities.shape[0]} "
            f"records over {ids.shape[0]} identities)")
    # lexsort is stable over its keys: primary descending score, then index.
    order = np.lexsort((eligible, -scores[eligible]))
    return [int(eligible[i]) for i in order[:k]]


@dataclass
class PairGroup:
    """Index structure of one anchor's matched pairs and mined negatives."""

    anchor: int
    itm_neg_text: int
    itm_neg_image: int
    neg_texts: list[int]
    neg_images: list[int]

    def matched_pairs(self) -> list[tuple[str, int, str, int, int]]:
        """(image source, image index, text source, text index, label)."""
        i = self.anchor
        return [("batch", i, "batch", i, 1),
                ("batch", i, "weak", i, 1),
                ("weak", i, "batch", i, 1)]

    def negative_pairs(self) -> list[tuple[str, int, str, int, int]]:
        i = self.anchor
        pairs = [("batch", i, "batch", self.itm_neg_text, 0),
                 ("batch", self.itm_neg_image, "batch", i, 0)]
        pairs += [("batch", i, "batch", j, 0) for j in self.neg_texts]
        pairs += [("batch", j, "batch", i, 0) for j in self.neg_images]
        return pairs

    def validate(self, identities: np.ndarray, k: int) -> None:
        matched, negatives = self.matched_pairs(), self.negative_pairs()
        if len(matched) != 3:
            raise ValueError(f"group must hold 3 matched pairs, has {len(matched)}")
        if len(negatives) != 2 + 2 * k:
            raise ValueError(f"group must hold {2 + 2 * k} negatives, has {len(negatives)}")
        anchor_id = identities[self.anchor]
        for _, img, _, txt, _ in negatives:
            other = txt if img == self.anchor else img
            if identities[other] == anchor_id:
                raise ValueError(f"negative {other} shares anchor identity {anchor_id}")


def build_group(anchor: int, batch: EmbeddingBatch, cfg: MiningConfig) -> PairGroup:
    """Assemble one anchor's group from the current embeddings.

    The pair-matching negatives are the top-1 mined candidates, so they
    coincide with the first entries of the weak-branch top-k lists.
    """
    neg_texts = mine_hard_negatives(batch, anchor, "image_to_text", cfg.k)
    neg_images = mine_hard_negatives(batch, anchor, "text_to_image", cfg.k)
    group = PairGroup(anchor, itm_neg_text=neg_texts[0], itm_neg_image=neg_images[0],
                      neg_texts=neg_texts, neg_images=neg_images)
    group.validate(batch.identities, cfg.k)
    return group


def build_groups(batch: EmbeddingBatch, cfg: MiningConfig) -> list[PairGroup]:
    return [build_group(i, batch, cfg) for i in range(batch.identities.shape[0])]
