"""Localization accuracy, oracle proposal analysis, K-sweeps, and
concept-weight introspection.

A phrase counts as localized when the best-scoring proposal box reaches
0.5 IOU with the union of its ground-truth boxes. Score ties break to the
lowest proposal index; phrases whose image has no proposals count as
failures and are tallied separately.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import GroundingDataset, phrase_rows, region_inputs
from .errors import DataError, ModeError, ValidationError
from .geometry import iou_matrix
from .network import ModelParams, concept_weights, score
from .tensor import Tensor

LOCALIZATION_IOU = 0.5


@dataclass
class CategoryStats:
    correct: int = 0
    count: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


@dataclass
class EvalReport:
    overall: float
    per_category: dict[str, CategoryStats]
    phrase_count: int
    correct_count: int
    skipped_count: int


def localize(params: ModelParams, phrase_feat: np.ndarray,
             proposal_inputs: np.ndarray,
             u: Optional[np.ndarray] = None) -> int:
    """Best proposal index for one phrase; ties go to the lowest index."""
    proposal_inputs = np.asarray(proposal_inputs, dtype=np.float64)
    if proposal_inputs.ndim != 2 or proposal_inputs.shape[0] < 1:
        raise ValidationError("localize needs at least one proposal")
    u_ext = None if u is None else np.asarray(u, dtype=np.float64)[None, :]
    scores, _ = score(proposal_inputs, np.asarray(phrase_feat)[None, :],
                      u_ext, params, mode="infer")
    return int(np.argmax(scores[0]))


def accuracy(params: ModelParams, dataset: GroundingDataset, split: str,
             provider=None, spatial: str = "flickr") -> EvalReport:
    """Localization accuracy over one split, batched per image.

    `provider` supplies external concept weights (its u_for returns None for
    learned-assignment models). Inference never touches batch statistics.
    """
    samples = dataset.split_phrases(split)
    if not samples:
        raise DataError(f"split {split!r} has no phrases")
    per_category: dict[str, CategoryStats] = {}
    correct = 0
    skipped = 0

    by_image: dict[str, list] = {}
    for s in samples:
        by_image.setdefault(s.image_id, []).append(s)

    for image_id in sorted(by_image):
        subset = by_image[image_id]
        rec = dataset.images[image_id]
        cats = [s.category or "uncategorized" for s in subset]
        for cat in cats:
            per_category.setdefault(cat, CategoryStats()).count += 1
        if rec.n_proposals == 0:
            skipped += len(subset)
            continue
        txt = phrase_rows(dataset, subset)
        u = provider.u_for(dataset, subset) if provider is not None else None
        inputs = region_inputs(dataset, image_id, spatial)
        scores, _ = score(inputs, txt, u, params, mode="infer")
        best = np.argmax(scores, axis=1)
        gt = np.stack([s.gt_union.as_array() for s in subset])
        ious = iou_matrix(gt, rec.boxes)
        for row, (s, cat) in enumerate(zip(subset, cats)):
            if ious[row, best[row]] >= LOCALIZATION_IOU:
                correct += 1
                per_category[cat].correct += 1

    return EvalReport(
        overall=correct / len(samples),
        per_category=per_category,
        phrase_count=len(samples),
        correct_count=correct,
        skipped_count=skipped,
    )


def oracle_upper_bound(dataset: GroundingDataset, split: str) -> float:
    """Fraction of phrases for which any proposal reaches the localization
    IOU -- the proposal-quality ceiling on accuracy."""
    samples = dataset.split_phrases(split)
    if not samples:
        raise DataError(f"split {split!r} has no phrases")
    reachable = 0
    for s in samples:
        rec = dataset.images[s.image_id]
        if rec.n_proposals == 0:
            continue
        ious = iou_matrix(s.gt_union.as_array()[None, :], rec.boxes)[0]
        if float(ious.max()) >= LOCALIZATION_IOU:
            reachable += 1
    return reachable / len(samples)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def k_sweep(dataset: GroundingDataset, exp_cfg, ks: list[int],
            modes: list[str], seeds: Optional[list[int]] = None,
            progress=None) -> list[dict]:
    """Train and evaluate one model per (K, assignment mode, seed).

    Failures are recorded per cell and the sweep continues. Returns one row
    dict per cell with val/test accuracies.
    """
    from . import training  # local import; training already imports this module
    from .errors import CiteError

    if seeds is None:
        seeds = [exp_cfg.train.seed]
    rows: list[dict] = []
    for mode in modes:
        for k in ks:
            for seed in seeds:
                row = {"K": k, "mode": mode, "seed": seed,
                       "val_accuracy": "", "test_accuracy": "", "error": ""}
                try:
                    model_cfg = dataclasses.replace(
                        exp_cfg.model, K=k, seed=seed,
                        assignment_mode="learned" if mode == "learned" else "external",
                    )
                    train_cfg = dataclasses.replace(
                        exp_cfg.train, assignment=mode, seed=seed)
                    result = training.train(
                        dataset, model_cfg, train_cfg, spatial=exp_cfg.spatial)
                    test = accuracy(result.params, dataset, "test",
                                    result.provider, exp_cfg.spatial)
                    row["val_accuracy"] = result.best_val
                    row["test_accuracy"] = test.overall
                except CiteError as exc:
                    row["error"] = str(exc)
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("K,mode,seed,val_accuracy,test_accuracy,error\n")
        for r in rows:
            val = repr(r["val_accuracy"]) if r["val_accuracy"] != "" else ""
            test = repr(r["test_accuracy"]) if r["test_accuracy"] != "" else ""
            err = str(r["error"]).replace("\n", " ").replace(",", ";")
            fh.write(f"{r['K']},{r['mode']},{r['seed']},{val},{test},{err}\n")


# ---------------------------------------------------------------------------
# concept introspection
# ---------------------------------------------------------------------------

@dataclass
class ConceptReport:
    """Mean/std of learned weights per (embedding, category) plus the
    top-weighted phrases per embedding."""

    k: int
    categories: list[str]
    mean_weight: dict[str, list[float]]  # category -> K means
    std_weight: dict[str, list[float]]
    top_phrases: list[list[tuple[str, str, float]]]  # per k: (phrase_id, text, weight)

    def to_json(self) -> dict:
        return {
            "K": self.k,
            "categories": self.categories,
            "mean_weight": self.mean_weight,
            "std_weight": self.std_weight,
            "top_phrases": [
                [{"phrase_id": pid, "phrase_text": text, "weight": w}
                 for pid, text, w in rows]
                for rows in self.top_phrases
            ],
        }


def phrase_concept_weights(params: ModelParams, dataset: GroundingDataset,
                           split: str) -> tuple[np.ndarray, np.ndarray, list]:
    """Learned U and phi for every phrase of a split (infer mode)."""
    if params.cfg.assignment_mode != "learned":
        raise ModeError("concept weights require a learned-assignment model")
    samples = dataset.split_phrases(split)
    if not samples:
        raise DataError(f"split {split!r} has no phrases")
    txt = Tensor(phrase_rows(dataset, samples))
    u, phi = concept_weights(None, txt, params, "infer")
    return u.data, phi.data, samples


def concept_report(params: ModelParams, dataset: GroundingDataset,
                   split: str = "test", top: int = 10) -> ConceptReport:
    """Summarize what each embedding attends to: per-category weight
    statistics and the highest-weighted phrases per embedding (ties broken
    by phrase id)."""
    u, _, samples = phrase_concept_weights(params, dataset, split)
    k = u.shape[1]
    cats = sorted({s.category or "uncategorized" for s in samples})
    mean_weight: dict[str, list[float]] = {}
    std_weight: dict[str, list[float]] = {}
    for cat in cats:
        rows = np.array([
            i for i, s in enumerate(samples)
            if (s.category or "uncategorized") == cat
        ])
        mean_weight[cat] = [float(m) for m in u[rows].mean(axis=0)]
        std_weight[cat] = [float(m) for m in u[rows].std(axis=0)]
    top_phrases = []
    for col in range(k):
        order = sorted(
            range(len(samples)),
            key=lambda i: (-u[i, col], samples[i].phrase_id),
        )[:top]
        top_phrases.append([
            (samples[i].phrase_id, samples[i].phrase_text, float(u[i, col]))
            for i in order
        ])
    return ConceptReport(k=k, categories=cats, mean_weight=mean_weight,
                         std_weight=std_weight, top_phrases=top_phrases)


def mean_phi_l1(params: ModelParams, dataset: GroundingDataset,
                split: str = "val") -> float:
    """Mean L1 norm of the concept logits over a split's phrases."""
    _, phi, _ = phrase_concept_weights(params, dataset, split)
    return float(np.mean(np.sum(np.abs(phi), axis=1)))


def concept_purity(params: ModelParams, dataset: GroundingDataset,
                   split: str = "test") -> float:
    """Majority-vote purity of argmax-U assignments against the synthetic
    latent concept labels."""
    u, _, samples = phrase_concept_weights(params, dataset, split)
    labels = [s.concept_label for s in samples]
    if any(lbl is None for lbl in labels):
        raise DataError("concept purity needs latent concept labels (synthetic data)")
    assign = np.argmax(u, axis=1)
    total = 0
    for k in range(u.shape[1]):
        members = [labels[i] for i in range(len(samples)) if assign[i] == k]
        if members:
            total += int(np.max(np.bincount(members)))
    return total / len(samples)


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def write_eval_report(report: EvalReport, path) -> None:
    """CSV: one 'overall' row then one row per category."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("category,correct,count,accuracy\n")
        fh.write(f"overall,{report.correct_count},{report.phrase_count},"
                 f"{report.overall!r}\n")
        for cat in sorted(report.per_category):
            stats = report.per_category[cat]
            fh.write(f"{cat},{stats.correct},{stats.count},{stats.accuracy!r}\n")


def write_concept_report(report: ConceptReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1)
