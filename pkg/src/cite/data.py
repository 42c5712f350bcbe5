"""Dataset ingestion and the synthetic grounding-data generator.

File formats (all integers little-endian):

* Feature store: magic ``CITEFEAT``, u32 version=1, u64 rows, u64 cols,
  then row-major float32 payload. Row ids live in a JSON array sidecar at
  ``<path>.ids.json``.
* Annotations: JSON lines ``{image_id, W, H, phrase_id, phrase_text,
  category?, concept?, feature_row, gt_boxes: [[x1,y1,x2,y2], ...]}``,
  one file per split. ``concept`` carries the latent concept label of
  synthetic phrases.
* Proposals: JSON lines ``{image_id, boxes: [[x1,y1,x2,y2], ...],
  feature_rows: [...]}``.

A dataset directory holds ``region_features.bin``, ``phrase_features.bin``
(with id sidecars), ``annotations_{train,val,test}.jsonl``,
``proposals.jsonl``, and optionally ``coarse_dict.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .assignment import COARSE_CATEGORIES
from .config import SynthConfig, load_config  # noqa: F401  (re-exported data-io op)
from .errors import DataError, ValidationError
from .geometry import BBox, ImageSize, boxes_to_array, encode_spatial, SPATIAL_DIMS
from .sampling import PhraseSample

FEATURE_MAGIC = b"CITEFEAT"
FEATURE_VERSION = 1

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# feature store
# ---------------------------------------------------------------------------

class FeatureStore:
    """Dense feature rows addressed by string id."""

    def __init__(self, matrix: np.ndarray, ids: list[str]):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise ValidationError("feature matrix must be 2-d")
        if matrix.shape[1] < 1:
            raise DataError("feature dimensionality must be >= 1")
        if len(ids) != matrix.shape[0]:
            raise DataError(
                f"feature store has {matrix.shape[0]} rows but {len(ids)} ids"
            )
        self.matrix = matrix
        self.ids = list(ids)
        self.id_to_row = {pid: i for i, pid in enumerate(self.ids)}
        if len(self.id_to_row) != len(self.ids):
            raise DataError("feature store ids must be unique")

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, index: int) -> np.ndarray:
        return self.matrix[index].astype(np.float64)


def _ids_path(path) -> Path:
    return Path(str(path) + ".ids.json")


def save_features(store: FeatureStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FEATURE_VERSION))
        fh.write(struct.pack("<QQ", store.rows, store.dim))
        fh.write(np.ascontiguousarray(store.matrix, dtype="<f4").tobytes())
    with open(_ids_path(path), "w", encoding="utf-8") as fh:
        json.dump(store.ids, fh)


def load_features(path) -> FeatureStore:
    """Parse the binary feature format, validating header against payload."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    header = len(FEATURE_MAGIC) + 4 + 16
    if len(blob) < header:
        raise DataError(f"feature file {path} too short for its header")
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataError(f"feature file {path} has bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, len(FEATURE_MAGIC))
    if version != FEATURE_VERSION:
        raise DataError(
            f"feature file {path}: version {version} unsupported (expected {FEATURE_VERSION})"
        )
    rows, cols = struct.unpack_from("<QQ", blob, len(FEATURE_MAGIC) + 4)
    if cols == 0:
        raise DataError(f"feature file {path} declares dimension 0")
    expected = header + 4 * rows * cols
    if len(blob) != expected:
        raise DataError(
            f"feature file {path} is corrupt: expected {expected} bytes, found {len(blob)}"
        )
    matrix = np.frombuffer(blob, dtype="<f4", offset=header).reshape(rows, cols)
    ids_file = _ids_path(path)
    try:
        with open(ids_file, "r", encoding="utf-8") as fh:
            ids = json.load(fh)
    except OSError as exc:
        raise DataError(f"missing feature id sidecar {ids_file}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"id sidecar {ids_file} is not valid JSON: {exc}") from exc
    if not isinstance(ids, list) or not all(isinstance(s, str) for s in ids):
        raise DataError(f"id sidecar {ids_file} must be a JSON array of strings")
    return FeatureStore(matrix.copy(), ids)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class ImageRecord:
    image_id: str
    size: ImageSize
    boxes: np.ndarray  # (n, 4) proposal boxes
    feature_rows: list[int]
    split: str

    @property
    def n_proposals(self) -> int:
        return self.boxes.shape[0]


@dataclass
class GroundingDataset:
    region_features: FeatureStore
    phrase_features: FeatureStore
    images: dict[str, ImageRecord]
    phrases: list[PhraseSample]
    coarse_vocab: Optional[dict[str, list[str]]] = None
    _by_image: dict[str, list[PhraseSample]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_image = {}
        for sample in self.phrases:
            self._by_image.setdefault(sample.image_id, []).append(sample)

    def split_phrases(self, split: str) -> list[PhraseSample]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [s for s in self.phrases if self.images[s.image_id].split == split]

    def phrases_of_image(self, image_id: str) -> list[PhraseSample]:
        return list(self._by_image.get(image_id, []))

    def split_images(self, split: str) -> list[ImageRecord]:
        return [rec for rec in self.images.values() if rec.split == split]

    def validate(self) -> None:
        """Referential integrity: every id resolves, every row is in bounds."""
        for rec in self.images.values():
            if rec.split not in SPLITS:
                raise DataError(f"image {rec.image_id}: unknown split {rec.split!r}")
            if len(rec.feature_rows) != rec.n_proposals:
                raise DataError(
                    f"image {rec.image_id}: {rec.n_proposals} boxes but "
                    f"{len(rec.feature_rows)} feature rows"
                )
            for row in rec.feature_rows:
                if not 0 <= row < self.region_features.rows:
                    raise DataError(
                        f"image {rec.image_id}: region feature row {row} out of bounds"
                    )
        seen = set()
        for sample in self.phrases:
            if sample.phrase_id in seen:
                raise DataError(f"duplicate phrase id {sample.phrase_id}")
            seen.add(sample.phrase_id)
            if sample.image_id not in self.images:
                raise DataError(
                    f"phrase {sample.phrase_id} references unknown image {sample.image_id}"
                )
            if not 0 <= sample.feature_row < self.phrase_features.rows:
                raise DataError(
                    f"phrase {sample.phrase_id}: feature row {sample.feature_row} "
                    f"out of bounds"
                )


def region_inputs(dataset: GroundingDataset, image_id: str, spatial: str) -> np.ndarray:
    """Model inputs for one image's proposals: raw region features with the
    spatial location encoding appended."""
    rec = dataset.images[image_id]
    feats = dataset.region_features.matrix[rec.feature_rows].astype(np.float64)
    extra = SPATIAL_DIMS[spatial]
    if extra == 0:
        return feats
    out = np.empty((rec.n_proposals, feats.shape[1] + extra), dtype=np.float64)
    out[:, : feats.shape[1]] = feats
    for j in range(rec.n_proposals):
        out[j, feats.shape[1]:] = encode_spatial(
            spatial, BBox.from_array(rec.boxes[j]), rec.size
        )
    return out


def phrase_rows(dataset: GroundingDataset, samples: list[PhraseSample]) -> np.ndarray:
    """Stack phrase feature rows for a list of samples."""
    rows = [s.feature_row for s in samples]
    return dataset.phrase_features.matrix[rows].astype(np.float64)


def model_input_dims(dataset: GroundingDataset, spatial: str) -> tuple[int, int]:
    """(d_v, d_t) as the model sees them, spatial dims included."""
    return dataset.region_features.dim + SPATIAL_DIMS[spatial], dataset.phrase_features.dim


# ---------------------------------------------------------------------------
# annotation / proposal files
# ---------------------------------------------------------------------------

def _parse_boxes(raw, where: str) -> list[BBox]:
    if not isinstance(raw, list) or not raw:
        raise DataError(f"{where}: gt_boxes must be a non-empty list")
    boxes = []
    for entry in raw:
        if not isinstance(entry, list) or len(entry) != 4:
            raise DataError(f"{where}: each box must be [x1, y1, x2, y2]")
        try:
            boxes.append(BBox(*(float(v) for v in entry)))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{where}: {exc}") from exc
        except ValidationError as exc:
            raise DataError(f"{where}: {exc}") from exc
    return boxes


def load_annotations(path) -> list[dict]:
    """One parsed record per JSON line; errors carry the line number."""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed JSON: {exc}") from exc
        required = ("image_id", "W", "H", "phrase_id", "phrase_text", "feature_row",
                    "gt_boxes")
        for key in required:
            if key not in obj:
                raise DataError(f"{where}: missing key {key!r}")
        try:
            size = ImageSize(float(obj["W"]), float(obj["H"]))
        except ValidationError as exc:
            raise DataError(f"{where}: {exc}") from exc
        records.append({
            "image_id": str(obj["image_id"]),
            "size": size,
            "phrase_id": str(obj["phrase_id"]),
            "phrase_text": str(obj["phrase_text"]),
            "category": None if obj.get("category") is None else str(obj["category"]),
            "concept": None if obj.get("concept") is None else int(obj["concept"]),
            "feature_row": int(obj["feature_row"]),
            "gt_boxes": _parse_boxes(obj["gt_boxes"], where),
        })
    return records


def load_proposals(path) -> list[dict]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read proposals {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed JSON: {exc}") from exc
        for key in ("image_id", "boxes", "feature_rows"):
            if key not in obj:
                raise DataError(f"{where}: missing key {key!r}")
        boxes = _parse_boxes(obj["boxes"], where)
        rows = obj["feature_rows"]
        if not isinstance(rows, list) or len(rows) != len(boxes):
            raise DataError(f"{where}: feature_rows must align with boxes")
        records.append({
            "image_id": str(obj["image_id"]),
            "boxes": boxes,
            "feature_rows": [int(r) for r in rows],
        })
    return records


def save_dataset(dataset: GroundingDataset, out_dir) -> None:
    """Write the full dataset directory layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_features(dataset.region_features, out / "region_features.bin")
    save_features(dataset.phrase_features, out / "phrase_features.bin")
    handles = {
        split: open(out / f"annotations_{split}.jsonl", "w", encoding="utf-8")
        for split in SPLITS
    }
    try:
        for sample in dataset.phrases:
            rec = dataset.images[sample.image_id]
            line = {
                "image_id": sample.image_id,
                "W": rec.size.W,
                "H": rec.size.H,
                "phrase_id": sample.phrase_id,
                "phrase_text": sample.phrase_text,
                "category": sample.category,
                "concept": sample.concept_label,
                "feature_row": sample.feature_row,
                "gt_boxes": [
                    [b.x_min, b.y_min, b.x_max, b.y_max] for b in sample.gt_boxes
                ],
            }
            handles[rec.split].write(json.dumps(line) + "\n")
    finally:
        for fh in handles.values():
            fh.close()
    with open(out / "proposals.jsonl", "w", encoding="utf-8") as fh:
        for rec in dataset.images.values():
            line = {
                "image_id": rec.image_id,
                "boxes": rec.boxes.tolist(),
                "feature_rows": rec.feature_rows,
            }
            fh.write(json.dumps(line) + "\n")
    if dataset.coarse_vocab is not None:
        with open(out / "coarse_dict.json", "w", encoding="utf-8") as fh:
            json.dump(dataset.coarse_vocab, fh, indent=1)


def load_dataset(data_dir) -> GroundingDataset:
    """Assemble a dataset from a directory written by save_dataset (or by
    any producer of the documented formats)."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    region_features = load_features(root / "region_features.bin")
    phrase_features = load_features(root / "phrase_features.bin")

    sizes: dict[str, ImageSize] = {}
    image_split: dict[str, str] = {}
    phrases: list[PhraseSample] = []
    for split in SPLITS:
        path = root / f"annotations_{split}.jsonl"
        if not path.exists():
            raise DataError(f"dataset is missing {path}")
        for rec in load_annotations(path):
            image_id = rec["image_id"]
            if image_id in image_split and image_split[image_id] != split:
                raise DataError(
                    f"image {image_id} appears in both "
                    f"{image_split[image_id]!r} and {split!r} splits"
                )
            image_split[image_id] = split
            sizes[image_id] = rec["size"]
            phrases.append(PhraseSample(
                phrase_id=rec["phrase_id"],
                image_id=image_id,
                gt_boxes=rec["gt_boxes"],
                feature_row=rec["feature_row"],
                phrase_text=rec["phrase_text"],
                category=rec["category"],
                concept_label=rec["concept"],
            ))

    images: dict[str, ImageRecord] = {}
    for rec in load_proposals(root / "proposals.jsonl"):
        image_id = rec["image_id"]
        if image_id not in image_split:
            raise DataError(
                f"proposals reference image {image_id} absent from all annotations"
            )
        images[image_id] = ImageRecord(
            image_id=image_id,
            size=sizes[image_id],
            boxes=boxes_to_array(rec["boxes"]),
            feature_rows=rec["feature_rows"],
            split=image_split[image_id],
        )
    for image_id in image_split:
        if image_id not in images:
            raise DataError(f"image {image_id} has annotations but no proposals entry")

    coarse_vocab = None
    vocab_path = root / "coarse_dict.json"
    if vocab_path.exists():
        with open(vocab_path, "r", encoding="utf-8") as fh:
            coarse_vocab = json.load(fh)

    dataset = GroundingDataset(
        region_features=region_features,
        phrase_features=phrase_features,
        images=images,
        phrases=phrases,
        coarse_vocab=coarse_vocab,
    )
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _split_counts(total: int) -> dict[str, int]:
    train = int(round(total * 0.75))
    val = int(round(total * 0.125))
    test = total - train - val
    if min(train, val, test) < 1:
        raise ValidationError(f"{total} images cannot cover train/val/test")
    return {"train": train, "val": val, "test": test}


def _sample_box(rng: np.random.Generator, w: float, h: float,
                zone: Optional[tuple[float, float, float, float]]) -> BBox:
    if zone is None:
        zone = (0.0, 0.0, 1.0, 1.0)
    zx1, zy1, zx2, zy2 = zone
    zw, zh = (zx2 - zx1) * w, (zy2 - zy1) * h
    bw = rng.uniform(0.25, 0.8) * zw
    bh = rng.uniform(0.25, 0.8) * zh
    x = zx1 * w + rng.uniform(0.0, zw - bw)
    y = zy1 * h + rng.uniform(0.0, zh - bh)
    return BBox(x, y, x + bw, y + bh)


def _jitter_box(rng: np.random.Generator, box: BBox, jitter: float,
                size: ImageSize) -> BBox:
    if jitter <= 0:
        return box
    dx = rng.uniform(-jitter, jitter) * box.w
    dy = rng.uniform(-jitter, jitter) * box.h
    dw = rng.uniform(-jitter, jitter) * box.w
    dh = rng.uniform(-jitter, jitter) * box.h
    x1 = min(box.x_min + dx, box.x_max + dx + dw)
    x2 = max(box.x_min + dx, box.x_max + dx + dw)
    y1 = min(box.y_min + dy, box.y_max + dy + dh)
    y2 = max(box.y_min + dy, box.y_max + dy + dh)
    x1 = float(np.clip(x1, 0.0, size.W))
    x2 = float(np.clip(x2, 0.0, size.W))
    y1 = float(np.clip(y1, 0.0, size.H))
    y2 = float(np.clip(y2, 0.0, size.H))
    return BBox(x1, y1, x2, y2)


def _concept_zones(g: int) -> list[tuple[float, float, float, float]]:
    """Tile the unit square into per-concept zones (row-major grid)."""
    cols = int(np.ceil(np.sqrt(g)))
    rows = int(np.ceil(g / cols))
    zones = []
    for c in range(g):
        r, col = divmod(c, cols)
        zones.append((col / cols, r / rows, (col + 1) / cols, (r + 1) / rows))
    return zones


def gen_synthetic(cfg: SynthConfig) -> GroundingDataset:
    """Generate a grounding dataset whose phrase-region compatibility is
    conditional on a latent concept.

    Concept g owns a +-1 sign pattern over the region feature dims and a
    set of scattered text prototype modes. A phrase and its true region
    share a latent positive instance magnitude vector; the text feature
    carries it additively on top of one of the concept's modes, while the
    region feature is the concept's sign pattern applied to it elementwise.
    The ideal scorer for concept g is a linear functional of the joint
    representation carrying g's sign pattern, and the per-concept scorers
    conflict (the balanced patterns cancel on average). Each phrase
    additionally gets a trap distractor in its image: the same magnitude
    vector under a different concept's sign pattern, so concept-blind
    magnitude matching ties between the true region and the trap.

    Because a concept's modes are arbitrary scattered clusters, mapping a
    phrase to its concept is a mode-membership lookup rather than a linear
    cut. The dedicated concept weight branch can spend all its capacity on
    that lookup, whereas a single-embedding model's text branch must fit it
    alongside the instance features it needs for matching; this is what
    makes the conditional-embedding advantage structural at desk scale.
    Remaining distractors draw fresh concepts and magnitudes. Proposals are
    the region boxes plus jittered copies.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    g = cfg.concepts
    size = ImageSize(float(cfg.image_w), float(cfg.image_h))

    tau = rng.normal(size=(g, cfg.text_modes, cfg.d_t))
    tau = cfg.concept_scale * tau / np.linalg.norm(tau, axis=2, keepdims=True)
    # balanced sign patterns: per dim the concepts split as evenly as
    # possible between +1 and -1, so no single averaged scorer fits all
    signs = np.empty((g, cfg.d_v))
    half_signs = np.array([1.0, -1.0] * ((g + 1) // 2))[:g]
    for d in range(cfg.d_v):
        signs[:, d] = rng.permutation(half_signs)
    zones = _concept_zones(g) if cfg.spatial_bias else [None] * g

    # Map concepts onto coarse category names cyclically and give each a
    # one-word vocabulary so dictionary lookup works end to end.
    categories = [COARSE_CATEGORIES[c % len(COARSE_CATEGORIES)] for c in range(g)]
    nouns = [f"{categories[c].replace(' ', '')}{c}" for c in range(g)]
    coarse_vocab = {cat: [] for cat in COARSE_CATEGORIES}
    for c in range(g):
        coarse_vocab[categories[c]].append(nouns[c])

    counts = _split_counts(cfg.images)
    split_of_image = (["train"] * counts["train"] + ["val"] * counts["val"]
                      + ["test"] * counts["test"])

    region_rows: list[np.ndarray] = []
    region_ids: list[str] = []
    phrase_rows_list: list[np.ndarray] = []
    phrase_ids: list[str] = []
    images: dict[str, ImageRecord] = {}
    phrases: list[PhraseSample] = []

    def draw_instance() -> np.ndarray:
        # positive magnitudes, mean 1: {0.5, 1.5} per dim
        return 0.5 + rng.choice(np.array([0.0, 1.0]), size=cfg.d_v)

    def region_feature(concept: int, instance: np.ndarray) -> np.ndarray:
        base = signs[concept] * instance
        return base + cfg.noise_sigma * rng.normal(size=cfg.d_v)

    def text_instance_term(instance: np.ndarray) -> np.ndarray:
        term = np.zeros(cfg.d_t)
        n = min(cfg.d_t, cfg.d_v)
        term[:n] = cfg.instance_scale * instance[:n]
        return term

    phrase_counter = 0
    for img_idx in range(cfg.images):
        image_id = f"im{img_idx:05d}"
        split = split_of_image[img_idx]

        # Phrase concepts tile seeded permutations so labels stay balanced.
        concept_seq: list[int] = []
        while len(concept_seq) < cfg.phrases_per_image:
            concept_seq.extend(rng.permutation(g).tolist())
        concept_seq = concept_seq[: cfg.phrases_per_image]

        region_concepts = np.empty(cfg.regions_per_image, dtype=np.int64)
        region_instances = np.empty((cfg.regions_per_image, cfg.d_v))
        boxes: list[BBox] = []
        rows_for_image: list[int] = []
        p_per = cfg.phrases_per_image
        for r_idx in range(cfg.regions_per_image):
            if r_idx < p_per:
                # ground-truth region of phrase r_idx
                concept = concept_seq[r_idx]
                instance = draw_instance()
            elif r_idx < 2 * p_per and g > 1:
                # trap for phrase r_idx - p_per: same magnitude vector under
                # a different concept's sign pattern
                src_idx = r_idx - p_per
                concept = int((concept_seq[src_idx] + 1 + rng.integers(g - 1)) % g)
                instance = region_instances[src_idx]
            else:
                concept = int(rng.integers(g))
                instance = draw_instance()
            region_concepts[r_idx] = concept
            region_instances[r_idx] = instance
            boxes.append(_sample_box(rng, size.W, size.H, zones[concept]))
            region_ids.append(f"{image_id}#{r_idx}")
            region_rows.append(region_feature(concept, instance))
            rows_for_image.append(len(region_rows) - 1)

        # Jittered copies inherit the source region's concept and instance
        # code with fresh noise, cycling over regions.
        extra = cfg.proposals_per_image - cfg.regions_per_image
        for e_idx in range(extra):
            src = e_idx % cfg.regions_per_image
            boxes.append(_jitter_box(rng, boxes[src], cfg.jitter, size))
            region_ids.append(f"{image_id}#{cfg.regions_per_image + e_idx}")
            region_rows.append(
                region_feature(int(region_concepts[src]), region_instances[src]))
            rows_for_image.append(len(region_rows) - 1)

        images[image_id] = ImageRecord(
            image_id=image_id,
            size=size,
            boxes=np.stack([b.as_array() for b in boxes]),
            feature_rows=rows_for_image,
            split=split,
        )

        for p_idx in range(cfg.phrases_per_image):
            concept = concept_seq[p_idx]
            mode = int(rng.integers(cfg.text_modes))
            text_feat = (tau[concept, mode]
                         + text_instance_term(region_instances[p_idx])
                         + cfg.noise_sigma * rng.normal(size=cfg.d_t))
            phrase_id = f"p{phrase_counter:06d}"
            phrase_counter += 1
            phrase_ids.append(phrase_id)
            phrase_rows_list.append(text_feat)
            phrases.append(PhraseSample(
                phrase_id=phrase_id,
                image_id=image_id,
                gt_boxes=[boxes[p_idx]],
                feature_row=len(phrase_rows_list) - 1,
                phrase_text=f"{nouns[concept]} {phrase_counter:05d}",
                category=categories[concept],
                concept_label=concept,
            ))

    dataset = GroundingDataset(
        region_features=FeatureStore(np.stack(region_rows), region_ids),
        phrase_features=FeatureStore(np.stack(phrase_rows_list), phrase_ids),
        images=images,
        phrases=phrases,
        coarse_vocab=coarse_vocab,
    )
    dataset.validate()
    return dataset
