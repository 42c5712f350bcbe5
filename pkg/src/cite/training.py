"""Optimizers, the combined objective, and the Adam-to-SGD early-stopping
training loop with best-on-validation checkpointing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import evaluation
from .assignment import (
    COARSE_CATEGORIES,
    CoarseDictionary,
    KMeansModel,
    coarse_assign,
    kmeans_assign_matrix,
    kmeans_fit,
    random_assign,
)
from .config import TrainConfig  # noqa: F401  (re-export: TrainConfig is owned here)
from .data import GroundingDataset, model_input_dims, phrase_rows, region_inputs
from .errors import ConfigError, DataError, NumericError, StateError, ValidationError
from .network import ModelConfig, ModelParams, init_model, score_pairs
from .sampling import build_minibatch, mine_pairs
from .tensor import Tape, Tensor, add, l1_norm, logistic_loss, scale


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def cite_loss(tape: Optional[Tape], scores: Tensor, labels: np.ndarray,
              phi: Optional[Tensor], l1_weight: float,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """Logistic pair loss plus l1_weight * ||phi||_1 over the concept logits.

    phi is None in external assignment mode, which drops the penalty term
    entirely; l1_weight = 0 reduces to the plain logistic loss exactly.
    """
    if l1_weight < 0:
        raise ValidationError("l1_weight must be non-negative")
    base = logistic_loss(tape, scores, labels, mask)
    if phi is None or l1_weight == 0.0:
        return base
    return add(tape, base, scale(tape, l1_norm(tape, phi), l1_weight))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators keyed by tensor name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _grad_of(tensor) -> np.ndarray:
    g = tensor.grad
    if g is None:
        return np.zeros_like(tensor.data)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for tensor {tensor.name!r}")
    return g


def adam_step(tensors, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for tensor in tensors:
        g = _grad_of(tensor)
        m = state.m.setdefault(tensor.name, np.zeros_like(tensor.data))
        v = state.v.setdefault(tensor.name, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(tensors, lr: float) -> None:
    """Plain gradient descent, no momentum."""
    for tensor in tensors:
        tensor.data -= lr * _grad_of(tensor)


# ---------------------------------------------------------------------------
# early-stopping schedule
# ---------------------------------------------------------------------------

@dataclass
class ScheduleState:
    """Two-phase schedule: Adam until validation accuracy stalls for
    `patience` epochs, then SGD from the best checkpoint at a reduced rate,
    then stop after another stall."""

    patience: int = 5
    phase: str = "adam"  # adam | sgd | stopped
    best_val: float = float("-inf")
    epochs_since_improve: int = 0
    best_checkpoint: Optional[ModelParams] = None
    last_improved: bool = False


def schedule_tick(state: ScheduleState, val_metric: float) -> str:
    """Advance the schedule by one epoch; returns one of
    'continue' | 'switch_to_sgd' | 'stop'. Improvement means a strict
    increase of the validation metric."""
    if state.phase == "stopped":
        raise StateError("schedule_tick called after the schedule stopped")
    if val_metric > state.best_val:
        state.best_val = val_metric
        state.epochs_since_improve = 0
        state.last_improved = True
        return "continue"
    state.last_improved = False
    state.epochs_since_improve += 1
    if state.epochs_since_improve < state.patience:
        return "continue"
    state.epochs_since_improve = 0
    if state.phase == "adam":
        state.phase = "sgd"
        return "switch_to_sgd"
    state.phase = "stopped"
    return "stop"


# ---------------------------------------------------------------------------
# external concept-weight providers
# ---------------------------------------------------------------------------

class AssignmentProvider:
    """Produces the per-phrase U matrix for external assignment modes.

    For the learned mode u_for returns None and the network's own concept
    weight branch takes over.
    """

    def __init__(self, mode: str, k: int, seed: int = 0,
                 kmeans_model: Optional[KMeansModel] = None,
                 dictionary: Optional[CoarseDictionary] = None,
                 table: Optional[dict] = None):
        self.mode = mode
        self.k = k
        self.seed = seed
        self.kmeans_model = kmeans_model
        self.dictionary = dictionary
        self.table = {} if table is None else table

    def u_for(self, dataset: GroundingDataset, samples) -> Optional[np.ndarray]:
        if self.mode == "learned":
            return None
        if self.mode == "kmeans":
            return kmeans_assign_matrix(phrase_rows(dataset, samples), self.kmeans_model)
        if self.mode == "coarse":
            return np.stack([
                coarse_assign(s.phrase_text, self.dictionary).u for s in samples
            ])
        if self.mode == "random":
            return np.stack([
                random_assign(s.phrase_id, self.k, self.seed, self.table).u
                for s in samples
            ])
        raise ConfigError(f"unknown assignment mode {self.mode!r}")

    def to_json(self) -> dict:
        out = {"mode": self.mode, "k": self.k, "seed": self.seed}
        if self.mode == "kmeans":
            out["kmeans"] = self.kmeans_model.to_json()
        elif self.mode == "random":
            out["table"] = {str(k): v for k, v in self.table.items()}
        return out

    @classmethod
    def from_json(cls, obj: dict, dictionary: Optional[CoarseDictionary] = None):
        mode = obj["mode"]
        kmeans_model = None
        table = None
        if mode == "kmeans":
            kmeans_model = KMeansModel.from_json(obj["kmeans"])
        if mode == "random":
            table = {k: int(v) for k, v in obj.get("table", {}).items()}
        return cls(mode, int(obj["k"]), seed=int(obj.get("seed", 0)),
                   kmeans_model=kmeans_model, dictionary=dictionary, table=table)


def build_assignment_provider(dataset: GroundingDataset, train_cfg: TrainConfig,
                              k: int,
                              dictionary: Optional[CoarseDictionary] = None,
                              ) -> AssignmentProvider:
    """Set up the concept-weight source before training starts."""
    mode = train_cfg.assignment
    if mode == "learned":
        return AssignmentProvider("learned", k)
    if mode == "kmeans":
        fit_samples = dataset.split_phrases(train_cfg.kmeans_fit_split)
        if len(fit_samples) < k:
            raise DataError(
                f"k-means needs at least K={k} phrases in the "
                f"{train_cfg.kmeans_fit_split!r} split, found {len(fit_samples)}"
            )
        model = kmeans_fit(phrase_rows(dataset, fit_samples), k, seed=train_cfg.seed)
        return AssignmentProvider("kmeans", k, seed=train_cfg.seed, kmeans_model=model)
    if mode == "coarse":
        if k != len(COARSE_CATEGORIES):
            raise ConfigError(
                f"coarse assignment requires K={len(COARSE_CATEGORIES)}, got K={k}"
            )
        if dictionary is None:
            if dataset.coarse_vocab is None:
                raise DataError("coarse assignment needs a coarse dictionary")
            dictionary = CoarseDictionary(dataset.coarse_vocab)
        return AssignmentProvider("coarse", k, dictionary=dictionary)
    if mode == "random":
        return AssignmentProvider("random", k, seed=train_cfg.seed)
    raise ConfigError(f"unknown assignment mode {mode!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams  # best-on-validation
    log_rows: list[dict]
    provider: AssignmentProvider
    best_val: float
    best_epoch: int


LOG_HEADER = "epoch,phase,lr,train_loss,val_accuracy"


def format_log_row(row: dict) -> str:
    return (f"{row['epoch']},{row['phase']},{row['lr']!r},"
            f"{row['train_loss']!r},{row['val_accuracy']!r}")


def write_train_log(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in rows:
            fh.write(format_log_row(row) + "\n")


def _epoch_seed(seed: int, epoch: int, stream: int) -> int:
    return (seed * 1_000_003 + epoch * 97 + stream) & 0x7FFFFFFF


def resolve_model_config(model_cfg: ModelConfig, dataset: GroundingDataset,
                         spatial: str, assignment: str) -> ModelConfig:
    """Fill dataset-dependent dims and the assignment mode into a copy of
    the model config, validating any explicit values against the data."""
    d_v, d_t = model_input_dims(dataset, spatial)
    cfg = ModelConfig(
        d_v=model_cfg.d_v or d_v,
        d_t=model_cfg.d_t or d_t,
        M=model_cfg.M,
        K=model_cfg.K,
        assignment_mode="learned" if assignment == "learned" else "external",
        hidden_mult=model_cfg.hidden_mult,
        seed=model_cfg.seed,
    )
    if cfg.d_v != d_v or cfg.d_t != d_t:
        raise ConfigError(
            f"model dims (d_v={cfg.d_v}, d_t={cfg.d_t}) disagree with the dataset "
            f"plus {spatial!r} spatial encoding (d_v={d_v}, d_t={d_t})"
        )
    cfg.validate()
    return cfg


def train(dataset: GroundingDataset, model_cfg: ModelConfig,
          train_cfg: TrainConfig, spatial: str = "flickr",
          dictionary: Optional[CoarseDictionary] = None,
          progress=None) -> TrainResult:
    """Full training run: per epoch, mine pairs, optimize the combined loss
    over minibatches, evaluate validation accuracy, and drive the
    Adam-to-SGD schedule. Deterministic given the config seeds."""
    train_cfg.validate()
    cfg = resolve_model_config(model_cfg, dataset, spatial, train_cfg.assignment)
    provider = build_assignment_provider(dataset, train_cfg, cfg.K, dictionary)

    samples = dataset.split_phrases("train")
    if not samples:
        raise DataError("dataset has no train split phrases")
    if not dataset.split_phrases("val"):
        raise DataError("dataset has no val split phrases")

    txt_all = phrase_rows(dataset, samples)
    input_cache = {
        image_id: region_inputs(dataset, image_id, spatial)
        for image_id in sorted({s.image_id for s in samples})
    }
    u_all = provider.u_for(dataset, samples)

    params = init_model(cfg)
    state = ScheduleState(patience=train_cfg.patience)
    adam = AdamState()
    lr = train_cfg.learning_rate
    log_rows: list[dict] = []
    best_params = params.clone()
    best_epoch = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        phase = state.phase
        mined = [
            (i, mine_pairs(s, dataset.images[s.image_id].boxes,
                           seed=_epoch_seed(train_cfg.seed, epoch, 1)))
            for i, s in enumerate(samples)
        ]
        batches = build_minibatch(mined, train_cfg.batch_size,
                                  seed=_epoch_seed(train_cfg.seed, epoch, 2))
        loss_sum = 0.0
        pair_count = 0
        for batch in batches:
            pidx = batch[:, 0]
            ridx = batch[:, 1]
            labels = batch[:, 2].astype(np.float64)[:, None]
            txt = Tensor(txt_all[pidx], name="batch_txt")
            img = Tensor(
                np.stack([
                    input_cache[samples[i].image_id][j]
                    for i, j in zip(pidx, ridx)
                ]),
                name="batch_img",
            )
            u_ext = None if u_all is None else Tensor(u_all[pidx], name="batch_u")
            tape = Tape()
            try:
                scores, _, phi = score_pairs(tape, params, txt, img, u_ext, "train")
                loss = cite_loss(tape, scores, labels, phi, train_cfg.l1_weight)
                params.zero_grads()
                tape.backward(loss)
                if phase == "adam":
                    adam_step(params.trainables(), adam, lr)
                else:
                    sgd_step(params.trainables(), lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            loss_sum += float(loss.data)
            pair_count += batch.shape[0]

        train_loss = loss_sum / pair_count
        val_report = evaluation.accuracy(params, dataset, "val", provider, spatial)
        action = schedule_tick(state, val_report.overall)
        log_rows.append({
            "epoch": epoch,
            "phase": phase,
            "lr": lr,
            "train_loss": train_loss,
            "val_accuracy": val_report.overall,
        })
        if progress is not None:
            progress(log_rows[-1])
        if state.last_improved:
            best_params = params.clone()
            best_epoch = epoch
        if action == "switch_to_sgd":
            params = best_params.clone()
            adam = AdamState()
            lr = lr * train_cfg.sgd_lr_factor
        elif action == "stop":
            break

    return TrainResult(
        params=best_params,
        log_rows=log_rows,
        provider=provider,
        best_val=state.best_val,
        best_epoch=best_epoch,
    )
