import numpy as np
import pytest

from cite.errors import ValidationError
from cite.geometry import BBox, boxes_to_array, iou
from cite.sampling import (
    MinedPairs,
    PhraseSample,
    build_minibatch,
    mine_pairs,
    pair_triples,
)


def sample_for(gt_boxes, pid="p0"):
    return PhraseSample(phrase_id=pid, image_id="im0", gt_boxes=gt_boxes,
                        feature_row=0)


SPEC_PROPOSALS = [
    BBox(0, 0, 10, 10),    # iou 1.0   -> positive
    BBox(0, 0, 9, 10),     # iou 0.9   -> positive
    BBox(50, 50, 60, 60),  # iou 0     -> negative pool
    BBox(52, 50, 62, 60),  # iou 0     -> negative pool
    BBox(49, 50, 59, 60),  # iou 0     -> negative pool
    BBox(40, 40, 60, 60),  # iou 0     -> negative pool
    BBox(0, 0, 5, 10),     # iou 0.5   -> dead zone
]


def test_mine_pairs_spec_example():
    sample = sample_for([BBox(0, 0, 10, 10)])
    gt = sample.gt_union
    ious = [iou(gt, b) for b in SPEC_PROPOSALS]
    np.testing.assert_allclose(ious, [1.0, 0.9, 0, 0, 0, 0, 0.5])
    mined = mine_pairs(sample, SPEC_PROPOSALS, seed=0)
    assert mined.positives == [0, 1]
    assert sorted(mined.negatives) == [2, 3, 4, 5]
    assert mined.neg_threshold_used == 0.3
    assert not mined.skipped


def test_mine_pairs_no_positive_is_skipped():
    sample = sample_for([BBox(0, 0, 10, 10)])
    mined = mine_pairs(sample, [BBox(30, 30, 40, 40)], seed=0)
    assert mined.skipped
    assert mined.positives == [] and mined.negatives == []


def test_mine_pairs_threshold_relaxes_to_04():
    # 2 positives, 3 boxes under 0.3 and one at IOU 0.35 -> relaxed pool of 4
    sample = sample_for([BBox(0, 0, 10, 10)])
    proposals = [
        BBox(0, 0, 10, 10), BBox(0, 0, 10, 9.0),   # positives (1.0, 0.9)
        BBox(20, 20, 30, 30), BBox(40, 0, 50, 10), BBox(0, 40, 10, 50),
        BBox(0, 0, 10, 3.5),                        # iou 0.35
    ]
    assert abs(iou(sample.gt_union, proposals[-1]) - 0.35) < 1e-12
    mined = mine_pairs(sample, proposals, seed=1)
    assert mined.positives == [0, 1]
    assert mined.neg_threshold_used == 0.4
    assert sorted(mined.negatives) == [2, 3, 4, 5]


def test_mine_pairs_takes_all_when_still_short():
    sample = sample_for([BBox(0, 0, 10, 10)])
    proposals = [BBox(0, 0, 10, 10), BBox(0, 0, 9, 10), BBox(30, 30, 40, 40)]
    mined = mine_pairs(sample, proposals, seed=0)
    assert mined.positives == [0, 1]
    assert mined.negatives == [2]
    assert mined.neg_threshold_used == 0.4


def test_mine_pairs_empty_proposals_rejected():
    with pytest.raises(ValidationError):
        mine_pairs(sample_for([BBox(0, 0, 1, 1)]), [], seed=0)


def test_mine_pairs_deterministic_given_seed():
    gt = [BBox(0, 0, 10, 10)]
    proposals = [BBox(0, 0, 10, 10)] + [
        BBox(20 + i, 20, 30 + i, 30) for i in range(10)
    ]
    a = mine_pairs(sample_for(gt), proposals, seed=5)
    b = mine_pairs(sample_for(gt), proposals, seed=5)
    assert a.negatives == b.negatives
    c = mine_pairs(sample_for(gt), proposals, seed=6)
    assert len(c.negatives) == len(a.negatives) == 2


def _random_fixture(g):
    x1, x2 = np.sort(g.uniform(0, 60, 2))
    y1, y2 = np.sort(g.uniform(0, 60, 2))
    gt = BBox(x1, y1, x2 + 1.0, y2 + 1.0)
    n = int(g.integers(1, 30))
    proposals = []
    for _ in range(n):
        if g.uniform() < 0.4:
            # near-copy of gt with random perturbation spanning all IOU bands
            s = g.uniform(0, 0.8)
            cx = gt.x_center + s * g.uniform(-1, 1) * gt.w
            cy = gt.y_center + s * g.uniform(-1, 1) * gt.h
            w = gt.w * (1.0 + s * g.uniform(-1, 1))
            h = gt.h * (1.0 + s * g.uniform(-1, 1))
            proposals.append(BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
        else:
            px1, px2 = np.sort(g.uniform(0, 90, 2))
            py1, py2 = np.sort(g.uniform(0, 90, 2))
            proposals.append(BBox(px1, py1, px2, py2))
    return gt, proposals


def check_mined_invariants(gt, proposals, mined):
    if mined.skipped:
        assert all(iou(gt, b) < 0.6 for b in proposals)
        return
    arr_ious = [iou(gt, b) for b in proposals]
    assert mined.positives == [i for i, v in enumerate(arr_ious) if v >= 0.6]
    for j in mined.negatives:
        assert arr_ious[j] < mined.neg_threshold_used
    assert mined.neg_threshold_used in (0.3, 0.4)
    assert not set(mined.positives) & set(mined.negatives)
    assert len(set(mined.negatives)) == len(mined.negatives)
    desired = 2 * len(mined.positives)
    assert len(mined.negatives) <= desired
    pool04 = sum(1 for v in arr_ious if v < 0.4)
    pool03 = sum(1 for v in arr_ious if v < 0.3)
    if pool03 >= desired:
        assert mined.neg_threshold_used == 0.3 and len(mined.negatives) == desired
    elif pool04 >= desired:
        assert mined.neg_threshold_used == 0.4 and len(mined.negatives) == desired
    else:
        assert len(mined.negatives) == pool04


def test_mining_invariants_random_fixtures():
    g = np.random.default_rng(123)
    for trial in range(300):
        gt, proposals = _random_fixture(g)
        sample = sample_for([gt], pid=f"p{trial}")
        mined = mine_pairs(sample, proposals, seed=trial)
        check_mined_invariants(gt, proposals, mined)


# ---------------------------------------------------------------------------
# minibatches
# ---------------------------------------------------------------------------

def _mined_pool():
    return [
        (0, MinedPairs(positives=[0], negatives=[1, 2])),
        (1, MinedPairs(positives=[3], negatives=[4])),
    ]


def test_build_minibatch_chunking():
    batches = build_minibatch(_mined_pool(), batch_size=2, seed=0)
    assert [len(b) for b in batches] == [2, 2, 1]


def test_build_minibatch_deterministic():
    a = build_minibatch(_mined_pool(), 2, seed=3)
    b = build_minibatch(_mined_pool(), 2, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_build_minibatch_no_duplicate_pairs():
    batches = build_minibatch(_mined_pool(), 2, seed=1)
    seen = set()
    for batch in batches:
        for phrase, region, label in batch:
            assert (phrase, region) not in seen
            seen.add((phrase, region))
            assert label in (-1, 1)
    assert len(seen) == 5


def test_build_minibatch_label_ratio():
    # with no shortage, labels are 1 positive : 2 negatives
    g = np.random.default_rng(0)
    mined = []
    for i in range(50):
        n_pos = int(g.integers(1, 4))
        mined.append((i, MinedPairs(
            positives=list(range(n_pos)),
            negatives=list(range(100, 100 + 2 * n_pos)))))
    triples = pair_triples(mined)
    pos = int(np.sum(triples[:, 2] == 1))
    neg = int(np.sum(triples[:, 2] == -1))
    assert neg == 2 * pos


def test_build_minibatch_empty_pool_rejected():
    with pytest.raises(ValidationError):
        build_minibatch([(0, MinedPairs(skipped=True))], 4, seed=0)
