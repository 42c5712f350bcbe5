"""Mining of positive/negative phrase-region training pairs and minibatch
assembly.

Positives are proposals with IOU >= 0.6 against the phrase's ground-truth
union box. Negatives are drawn uniformly without replacement from proposals
with IOU < 0.3, twice as many as there are positives; when that pool is too
small the threshold relaxes to 0.4, and failing that every sub-0.4 proposal
is taken. Phrases with no qualifying positive are skipped, not errored.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .geometry import BBox, boxes_to_array, iou_matrix, union_box

POSITIVE_IOU = 0.6
NEGATIVE_IOU = 0.3
RELAXED_NEGATIVE_IOU = 0.4
NEGATIVES_PER_POSITIVE = 2


@dataclass
class PhraseSample:
    """One phrase with its ground truth, as mined against an image's proposals."""

    phrase_id: str
    image_id: str
    gt_boxes: list[BBox]
    feature_row: int
    gt_union: BBox = None  # type: ignore[assignment]
    phrase_text: str = ""
    category: Optional[str] = None
    concept_label: Optional[int] = None  # synthetic data only

    def __post_init__(self):
        if not self.gt_boxes:
            raise ValidationError(f"phrase {self.phrase_id} has no ground-truth boxes")
        if self.gt_union is None:
            self.gt_union = union_box(self.gt_boxes)


@dataclass
class MinedPairs:
    """Proposal indices mined for one phrase."""

    positives: list[int] = field(default_factory=list)
    negatives: list[int] = field(default_factory=list)
    neg_threshold_used: float = NEGATIVE_IOU
    skipped: bool = False


def _phrase_rng(seed: int, phrase_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(str(phrase_id).encode("utf-8"))])


def mine_pairs(sample: PhraseSample, proposals, seed: int = 0) -> MinedPairs:
    """Mine positive and negative proposal indices for one phrase.

    `proposals` is a sequence of BBox or an (n, 4) array. Deterministic given
    (sample, proposals, seed) and independent of mining order across phrases.
    """
    if isinstance(proposals, np.ndarray):
        boxes = np.asarray(proposals, dtype=np.float64)
    else:
        boxes = boxes_to_array(proposals)
    if boxes.shape[0] == 0:
        raise ValidationError(f"phrase {sample.phrase_id}: empty proposal list")

    ious = iou_matrix(sample.gt_union.as_array()[None, :], boxes)[0]
    positives = np.flatnonzero(ious >= POSITIVE_IOU)
    if positives.size == 0:
        return MinedPairs(skipped=True)

    desired = NEGATIVES_PER_POSITIVE * positives.size
    pool = np.flatnonzero(ious < NEGATIVE_IOU)
    threshold = NEGATIVE_IOU
    if pool.size < desired:
        pool = np.flatnonzero(ious < RELAXED_NEGATIVE_IOU)
        threshold = RELAXED_NEGATIVE_IOU
    if pool.size > desired:
        rng = _phrase_rng(seed, sample.phrase_id)
        chosen = rng.choice(pool, size=desired, replace=False)
        negatives = np.sort(chosen)
    else:
        negatives = pool
    return MinedPairs(
        positives=[int(i) for i in positives],
        negatives=[int(i) for i in negatives],
        neg_threshold_used=threshold,
    )


def pair_triples(mined: Sequence[tuple[int, MinedPairs]]) -> np.ndarray:
    """Flatten mined pairs into (phrase index, proposal index, label) rows."""
    rows = []
    for phrase_idx, pairs in mined:
        if pairs.skipped:
            continue
        for j in pairs.positives:
            rows.append((phrase_idx, j, 1))
        for j in pairs.negatives:
            rows.append((phrase_idx, j, -1))
    if not rows:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)


def build_minibatch(mined: Sequence[tuple[int, MinedPairs]], batch_size: int,
                    seed: int = 0) -> list[np.ndarray]:
    """One epoch of minibatches: a seeded shuffle of all (phrase, region,
    label) triples, chunked to batch_size with the last partial batch kept."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    triples = pair_triples(mined)
    if triples.shape[0] == 0:
        raise ValidationError("no training pairs: every phrase was skipped")
    rng = np.random.default_rng(seed)
    order = rng.permutation(triples.shape[0])
    shuffled = triples[order]
    return [shuffled[i:i + batch_size] for i in range(0, shuffled.shape[0], batch_size)]
