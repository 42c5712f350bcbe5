"""The conditional image-text scoring network.

Two feature branches (affine -> batch norm -> relu, twice, then row L2
normalization) meet in an elementwise product. The joint vector passes
through a reducing stage (P1), then K parallel conditional embedding stages
whose outputs are fused by per-phrase concept weights U (F = C U), and a
final affine classifier produces one score per phrase-region pair. With
K = 1 this is exactly the baseline two-branch similarity network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .assignment import ConceptWeights
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    ModeError,
    ValidationError,
)
from .tensor import BatchNormState, Tape, Tensor

CHECKPOINT_MAGIC = b"CITEMODL"
CHECKPOINT_VERSION = 1
_MODE_CODES = {"external": 0, "learned": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


@dataclass
class ModelConfig:
    """Dimensions and mode flags for the scoring network.

    d_v counts any appended spatial dims; every layer other than P1, the
    conditional stages, and the classifier is hidden_mult times wider than
    the embedding size M.
    """

    d_v: int
    d_t: int
    M: int = 256
    K: int = 4
    assignment_mode: str = "learned"  # learned | external
    hidden_mult: int = 4
    seed: int = 0

    def validate(self):
        if min(self.d_v, self.d_t, self.M, self.K, self.hidden_mult) < 1:
            raise ConfigError(
                f"model dimensions must be >= 1 "
                f"(d_v={self.d_v}, d_t={self.d_t}, M={self.M}, K={self.K})"
            )
        if self.assignment_mode not in _MODE_CODES:
            raise ConfigError(
                f"assignment_mode must be 'learned' or 'external', got "
                f"{self.assignment_mode!r}"
            )

    @property
    def hidden(self) -> int:
        return self.hidden_mult * self.M


def similarity_network_config(d_v: int, d_t: int, m: int = 256, seed: int = 0) -> ModelConfig:
    """The K=1 baseline: a single conditional embedding, no weight branch."""
    return ModelConfig(d_v=d_v, d_t=d_t, M=m, K=1, assignment_mode="external", seed=seed)


@dataclass
class AffineParams:
    w: Tensor
    b: Tensor


class ModelParams:
    """Every trainable tensor of the network, in a fixed creation order that
    doubles as the checkpoint record order."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        hid = cfg.hidden

        def zeros_affine(name, d_in, d_out):
            return AffineParams(
                Tensor(np.zeros((d_in, d_out)), name=f"{name}.W", trainable=True),
                Tensor(np.zeros(d_out), name=f"{name}.b", trainable=True),
            )

        self.img_fc1 = zeros_affine("img_fc1", cfg.d_v, hid)
        self.img_bn1 = BatchNormState(hid, name="img_bn1")
        self.img_fc2 = zeros_affine("img_fc2", hid, hid)
        self.img_bn2 = BatchNormState(hid, name="img_bn2")
        self.txt_fc1 = zeros_affine("txt_fc1", cfg.d_t, hid)
        self.txt_bn1 = BatchNormState(hid, name="txt_bn1")
        self.txt_fc2 = zeros_affine("txt_fc2", hid, hid)
        self.txt_bn2 = BatchNormState(hid, name="txt_bn2")
        self.p1_fc = zeros_affine("p1_fc", hid, cfg.M)
        self.p1_bn = BatchNormState(cfg.M, name="p1_bn")
        self.cond_fc = [zeros_affine(f"cond_fc{k}", cfg.M, cfg.M) for k in range(cfg.K)]
        self.cond_bn = [BatchNormState(cfg.M, name=f"cond_bn{k}") for k in range(cfg.K)]
        if cfg.assignment_mode == "learned":
            self.cw_fc1 = zeros_affine("cw_fc1", cfg.d_t, hid)
            self.cw_bn = BatchNormState(hid, name="cw_bn")
            self.cw_fc2 = zeros_affine("cw_fc2", hid, cfg.K)
        else:
            self.cw_fc1 = None
            self.cw_bn = None
            self.cw_fc2 = None
        self.cls_fc = zeros_affine("cls_fc", cfg.M, 1)

    def _affines(self) -> list[tuple[str, AffineParams]]:
        pairs = [
            ("img_fc1", self.img_fc1), ("img_fc2", self.img_fc2),
            ("txt_fc1", self.txt_fc1), ("txt_fc2", self.txt_fc2),
            ("p1_fc", self.p1_fc),
        ]
        pairs += [(f"cond_fc{k}", a) for k, a in enumerate(self.cond_fc)]
        if self.cw_fc1 is not None:
            pairs += [("cw_fc1", self.cw_fc1), ("cw_fc2", self.cw_fc2)]
        pairs.append(("cls_fc", self.cls_fc))
        return pairs

    def _bns(self) -> list[BatchNormState]:
        states = [self.img_bn1, self.img_bn2, self.txt_bn1, self.txt_bn2, self.p1_bn]
        states += self.cond_bn
        if self.cw_bn is not None:
            states.append(self.cw_bn)
        return states

    def trainables(self) -> list[Tensor]:
        """All trainable tensors, each exactly once, in a stable order."""
        out: list[Tensor] = []
        for _, aff in self._affines():
            out += [aff.w, aff.b]
        for bn in self._bns():
            out += [bn.gamma, bn.beta]
        return out

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) for every tensor the checkpoint must carry,
        running statistics included."""
        out: list[tuple[str, np.ndarray]] = []
        for name, aff in self._affines():
            out.append((f"{name}.W", aff.w.data))
            out.append((f"{name}.b", aff.b.data))
        for bn in self._bns():
            out.append((f"{bn.name}.gamma", bn.gamma.data))
            out.append((f"{bn.name}.beta", bn.beta.data))
            out.append((f"{bn.name}.running_mean", bn.running_mean))
            out.append((f"{bn.name}.running_var", bn.running_var))
        return out

    def set_array(self, name: str, value: np.ndarray):
        for existing_name, arr in self.arrays():
            if existing_name == name:
                if arr.shape != value.shape:
                    raise CheckpointError(
                        f"tensor {name}: shape {value.shape} does not match "
                        f"expected {arr.shape}"
                    )
                arr[...] = value
                return
        raise CheckpointError(f"unknown tensor {name!r}")

    def param_count(self) -> int:
        return sum(t.data.size for t in self.trainables())

    def zero_grads(self):
        for t in self.trainables():
            t.zero_grad()

    def clone(self) -> "ModelParams":
        other = ModelParams(self.cfg)
        for (_, src), (_, dst) in zip(self.arrays(), other.arrays()):
            dst[...] = src
        return other


def init_model(cfg: ModelConfig) -> ModelParams:
    """Fan-scaled uniform init of all affine weights, zero biases, identity
    batch norm. Deterministic per cfg.seed."""
    params = ModelParams(cfg)
    rng = np.random.default_rng(cfg.seed)
    for _, aff in params._affines():
        fan_in, fan_out = aff.w.data.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        aff.w.data[...] = rng.uniform(-limit, limit, size=aff.w.data.shape)
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Every intermediate activation of one scoring pass, batched over
    (phrase, region) pairs."""

    img_branch_raw: np.ndarray
    img_branch: np.ndarray
    txt_branch_raw: np.ndarray
    txt_branch: np.ndarray
    joint: np.ndarray
    p1: np.ndarray
    cond: np.ndarray  # (pairs, M, K)
    phi: Optional[np.ndarray]
    u: np.ndarray
    u_pairs: np.ndarray
    fused: np.ndarray
    scores: np.ndarray


def _stage(tape, x, fc: AffineParams, bn: BatchNormState, mode: str):
    return T.relu(tape, T.batch_norm(tape, T.affine(tape, x, fc.w, fc.b), bn, mode))


def _branch(tape, x, fc1, bn1, fc2, bn2, mode):
    raw = _stage(tape, _stage(tape, x, fc1, bn1, mode), fc2, bn2, mode)
    return T.l2_normalize_rows(tape, raw), raw


def concept_weights(tape: Optional[Tape], phrases: Tensor, params: ModelParams,
                    mode: str) -> tuple[Tensor, Tensor]:
    """Concept weight branch: logits phi from two affine layers with batch
    norm and relu between, then a row softmax. Learned assignment only."""
    if params.cfg.assignment_mode != "learned":
        raise ModeError("concept_weights requires a learned-assignment model")
    hidden = T.relu(tape, T.batch_norm(
        tape, T.affine(tape, phrases, params.cw_fc1.w, params.cw_fc1.b),
        params.cw_bn, mode))
    phi = T.affine(tape, hidden, params.cw_fc2.w, params.cw_fc2.b)
    u = T.softmax_rows(tape, phi)
    return u, phi


def u_matrix(weights: Sequence[ConceptWeights] | np.ndarray, k: int) -> np.ndarray:
    """Stack external concept weights into a (p, K) matrix."""
    if isinstance(weights, np.ndarray):
        mat = np.asarray(weights, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != k:
            raise DimensionError(f"external U must be (p, {k}), got {mat.shape}")
        return mat
    rows = []
    for cw in weights:
        if cw.u.shape[0] != k:
            raise DimensionError(
                f"external concept weights have K={cw.u.shape[0]}, model has K={k}"
            )
        rows.append(cw.u)
    if not rows:
        raise ValidationError("external U is empty")
    return np.stack(rows)


def _joint_to_scores(tape, joint: Tensor, u: Tensor, params: ModelParams, mode: str):
    p1 = _stage(tape, joint, params.p1_fc, params.p1_bn, mode)
    conds = [
        _stage(tape, p1, params.cond_fc[k], params.cond_bn[k], mode)
        for k in range(params.cfg.K)
    ]
    fused = T.fuse(tape, conds, u)
    scores = T.affine(tape, fused, params.cls_fc.w, params.cls_fc.b)
    return scores, p1, conds, fused


def score_pairs(tape: Optional[Tape], params: ModelParams, txt_rows: Tensor,
                img_rows: Tensor, u_ext: Optional[Tensor], mode: str):
    """Score explicit (phrase, region) pairs given as aligned feature rows.

    Returns (scores (B,1), u, phi) as tensors; phi is None in external mode.
    This is the training path: batch norm statistics are taken over the B
    pair rows when mode == 'train'.
    """
    img_out, _ = _branch(tape, img_rows, params.img_fc1, params.img_bn1,
                         params.img_fc2, params.img_bn2, mode)
    txt_out, _ = _branch(tape, txt_rows, params.txt_fc1, params.txt_bn1,
                         params.txt_fc2, params.txt_bn2, mode)
    joint = T.hadamard(tape, txt_out, img_out)
    if params.cfg.assignment_mode == "learned":
        u, phi = concept_weights(tape, txt_rows, params, mode)
    else:
        if u_ext is None:
            raise ValidationError("external assignment mode requires concept weights")
        u, phi = u_ext, None
    scores, _, _, _ = _joint_to_scores(tape, joint, u, params, mode)
    return scores, u, phi


def score_all_pairs(tape: Optional[Tape], params: ModelParams, img_in: Tensor,
                    txt_in: Tensor, u_ext: Optional[np.ndarray],
                    mode: str) -> dict:
    """Tensor-level all-pairs scoring; returns every intermediate tensor.

    Output row i*r+j of 'scores' pairs phrase i with region j.
    """
    p = txt_in.data.shape[0]
    r = img_in.data.shape[0]
    img_out, img_raw = _branch(tape, img_in, params.img_fc1, params.img_bn1,
                               params.img_fc2, params.img_bn2, mode)
    txt_out, txt_raw = _branch(tape, txt_in, params.txt_fc1, params.txt_bn1,
                               params.txt_fc2, params.txt_bn2, mode)
    joint = T.pairwise_hadamard(tape, txt_out, img_out)

    if params.cfg.assignment_mode == "learned":
        if u_ext is not None:
            raise ModeError("learned-assignment model does not take external U")
        u, phi = concept_weights(tape, txt_in, params, mode)
    else:
        if u_ext is None:
            raise ValidationError("external assignment mode requires concept weights")
        if u_ext.shape[0] != p:
            raise DimensionError(
                f"external U has {u_ext.shape[0]} rows for {p} phrases"
            )
        u, phi = Tensor(u_ext, name="u_ext"), None
    u_pairs = T.repeat_rows(tape, u, r)
    scores, p1, conds, fused = _joint_to_scores(tape, joint, u_pairs, params, mode)
    return {
        "img_raw": img_raw, "img_out": img_out,
        "txt_raw": txt_raw, "txt_out": txt_out,
        "joint": joint, "p1": p1, "conds": conds,
        "u": u, "u_pairs": u_pairs, "phi": phi,
        "fused": fused, "scores": scores,
    }


def score(regions: np.ndarray, phrases: np.ndarray,
          u_ext: Optional[Sequence[ConceptWeights] | np.ndarray],
          params: ModelParams, mode: str = "infer",
          tape: Optional[Tape] = None) -> tuple[np.ndarray, ForwardTrace]:
    """Score every phrase against every region.

    Returns the (p, r) score matrix and the full forward trace. In external
    assignment mode `u_ext` must supply one weight vector per phrase; in
    learned mode it must be omitted.
    """
    regions = np.asarray(regions, dtype=np.float64)
    phrases = np.asarray(phrases, dtype=np.float64)
    if regions.ndim != 2 or regions.shape[1] != params.cfg.d_v:
        raise DimensionError(
            f"regions must be (r, {params.cfg.d_v}), got {regions.shape}"
        )
    if phrases.ndim != 2 or phrases.shape[1] != params.cfg.d_t:
        raise DimensionError(
            f"phrases must be (p, {params.cfg.d_t}), got {phrases.shape}"
        )
    p, r = phrases.shape[0], regions.shape[0]
    u_mat = None if u_ext is None else u_matrix(u_ext, params.cfg.K)
    out = score_all_pairs(tape, params, Tensor(regions, name="regions"),
                          Tensor(phrases, name="phrases"), u_mat, mode)
    trace = ForwardTrace(
        img_branch_raw=out["img_raw"].data,
        img_branch=out["img_out"].data,
        txt_branch_raw=out["txt_raw"].data,
        txt_branch=out["txt_out"].data,
        joint=out["joint"].data,
        p1=out["p1"].data,
        cond=np.stack([c.data for c in out["conds"]], axis=2),
        phi=None if out["phi"] is None else out["phi"].data,
        u=out["u"].data,
        u_pairs=out["u_pairs"].data,
        fused=out["fused"].data,
        scores=out["scores"].data.reshape(p, r),
    )
    return trace.scores, trace


def truncate_to_embedding(params: ModelParams, k: int) -> ModelParams:
    """A K=1 copy of the model keeping only conditional embedding k (used to
    verify that one-hot fusion is pure column selection)."""
    if not 0 <= k < params.cfg.K:
        raise ValidationError(f"embedding index {k} out of range for K={params.cfg.K}")
    cfg = ModelConfig(
        d_v=params.cfg.d_v, d_t=params.cfg.d_t, M=params.cfg.M, K=1,
        assignment_mode="external", hidden_mult=params.cfg.hidden_mult,
        seed=params.cfg.seed,
    )
    out = ModelParams(cfg)
    src = dict(params.arrays())
    for name, arr in out.arrays():
        source_name = name.replace("cond_fc0", f"cond_fc{k}").replace(
            "cond_bn0", f"cond_bn{k}")
        arr[...] = src[source_name]
    return out


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def _expected_layout(cfg: ModelConfig) -> list[str]:
    return [name for name, _ in ModelParams(cfg).arrays()]

def save_model(params: ModelParams, path) -> None:
    """Write the checkpoint: magic, version, config block, then one record
    per tensor (name, rank, dims, float64 payload), all little-endian."""
    cfg = params.cfg
    records = params.arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<IIIIB", cfg.d_v, cfg.d_t, cfg.M, cfg.K,
                             _MODE_CODES[cfg.assignment_mode]))
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(
            f"truncated checkpoint while reading {what}: wanted {n} bytes, got {len(data)}"
        )
    return data


def load_model(path, expect: Optional[ModelConfig] = None) -> ModelParams:
    """Read a checkpoint back; bit-exact inverse of save_model.

    When `expect` is given, the stored layout is checked against the
    expected configuration tensor-by-tensor and the first disagreement is
    reported by tensor name.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}; not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        d_v, d_t, m, k, mode_code = struct.unpack(
            "<IIIIB", _read_exact(fh, 17, "config block"))
        if mode_code not in _MODE_NAMES:
            raise CheckpointError(f"unknown assignment mode code {mode_code}")
        cfg = ModelConfig(d_v=d_v, d_t=d_t, M=m, K=k,
                          assignment_mode=_MODE_NAMES[mode_code])
        cfg.validate()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))

        expected_names = _expected_layout(cfg)
        check_names = _expected_layout(expect) if expect is not None else expected_names
        if count != len(expected_names):
            raise CheckpointError(
                f"checkpoint holds {count} tensors, config implies {len(expected_names)}"
            )

        params = ModelParams(cfg)
        expected_shapes = dict(
            (name, arr.shape) for name, arr in params.arrays()
        )
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if i < len(check_names) and name != check_names[i]:
                raise CheckpointError(
                    f"tensor #{i} is {name!r} but the run expects {check_names[i]!r}"
                )
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(
                "<" + "Q" * rank, _read_exact(fh, 8 * rank, f"dims of {name}"))
            if name not in expected_shapes:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            if tuple(dims) != expected_shapes[name]:
                raise CheckpointError(
                    f"tensor {name}: stored shape {tuple(dims)} disagrees with "
                    f"header-implied shape {expected_shapes[name]}"
                )
            n_elem = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 8 * n_elem, f"payload of {name}")
            value = np.frombuffer(payload, dtype="<f8").reshape(dims)
            params.set_array(name, value.astype(np.float64))
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("checkpoint has trailing bytes after the last tensor")
    if expect is not None:
        for attr in ("d_v", "d_t", "M", "K", "assignment_mode"):
            got, want = getattr(cfg, attr), getattr(expect, attr)
            if got != want:
                raise CheckpointError(
                    f"checkpoint config {attr}={got} incompatible with run {attr}={want}"
                )
    return params
