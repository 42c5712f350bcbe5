"""Command-line entry point: train / eval / predict / cluster / synth /
gradcheck / sweep.

Human-readable progress goes to stderr; machine outputs go to files under
--out and to stdout. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation, training
from .assignment import CoarseDictionary, kmeans_fit
from .config import ExperimentConfig, apply_set_override, build_config, load_config
from .data import (
    gen_synthetic,
    load_dataset,
    model_input_dims,
    phrase_rows,
    region_inputs,
    save_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    ModeError,
    NumericError,
    StateError,
    ValidationError,
)
from .gradcheck import GRADCHECK_TOLERANCE, full_model_gradcheck
from .network import load_model, save_model, score
from .training import AssignmentProvider

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _info(msg: str):
    print(msg, file=sys.stderr)


def _resolve_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = build_config(getattr(args, "preset", None) or "synth")
    for expr in getattr(args, "set", None) or []:
        apply_set_override(cfg, expr)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.model.seed = args.seed
        cfg.synth.seed = args.seed
    if getattr(args, "k", None) is not None:
        cfg.model.K = args.k
    if getattr(args, "assignment", None):
        cfg.train.assignment = args.assignment
    if getattr(args, "proposals_per_image", None) is not None:
        cfg.synth.proposals_per_image = args.proposals_per_image
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_provider(checkpoint_path: Path, params, dataset) -> AssignmentProvider | None:
    """External-assignment sidecar written by cmd_train, if present."""
    sidecar = checkpoint_path.parent / "assignments.json"
    if params.cfg.assignment_mode == "learned":
        return None
    if not sidecar.exists():
        raise DataError(
            f"checkpoint uses external assignment but {sidecar} is missing"
        )
    with open(sidecar, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    dictionary = None
    if obj.get("mode") == "coarse":
        if dataset.coarse_vocab is None:
            raise DataError("coarse assignment needs a dataset coarse dictionary")
        dictionary = CoarseDictionary(dataset.coarse_vocab)
    return AssignmentProvider.from_json(obj, dictionary)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    dictionary = None
    if args.dict:
        dictionary = CoarseDictionary.from_json(args.dict)

    def progress(row):
        _info(
            f"epoch {row['epoch']:3d} [{row['phase']}] lr={row['lr']:g} "
            f"loss={row['train_loss']:.5f} val={row['val_accuracy']:.4f}"
        )

    result = training.train(dataset, cfg.model, cfg.train, spatial=cfg.spatial,
                            dictionary=dictionary, progress=progress)
    save_model(result.params, out / "checkpoint.cite")
    training.write_train_log(result.log_rows, out / "train_log.csv")
    report = evaluation.accuracy(result.params, dataset, "val",
                                 result.provider, cfg.spatial)
    evaluation.write_eval_report(report, out / "val_report.csv")
    if result.provider.mode != "learned":
        with open(out / "assignments.json", "w", encoding="utf-8") as fh:
            json.dump(result.provider.to_json(), fh)
    _info(f"best epoch {result.best_epoch}, checkpoint and logs in {out}")
    print(repr(result.best_val))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    checkpoint = Path(args.checkpoint)
    params = load_model(checkpoint)
    d_v, d_t = model_input_dims(dataset, cfg.spatial)
    if (params.cfg.d_v, params.cfg.d_t) != (d_v, d_t):
        raise ConfigError(
            f"checkpoint dims (d_v={params.cfg.d_v}, d_t={params.cfg.d_t}) do not "
            f"match dataset plus {cfg.spatial!r} encoding (d_v={d_v}, d_t={d_t})"
        )
    provider = _load_provider(checkpoint, params, dataset)
    report = evaluation.accuracy(params, dataset, args.split, provider, cfg.spatial)
    evaluation.write_eval_report(report, out / "eval_report.csv")
    print(repr(report.overall))
    if args.oracle:
        print(repr(evaluation.oracle_upper_bound(dataset, args.split)))
    if args.concept_report:
        creport = evaluation.concept_report(params, dataset, args.split)
        evaluation.write_concept_report(creport, out / "concept_report.json")
    _info(f"evaluated {report.phrase_count} phrases "
          f"({report.skipped_count} without proposals); report in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(args.data)
    checkpoint = Path(args.checkpoint)
    params = load_model(checkpoint)
    if args.image not in dataset.images:
        raise DataError(f"unknown image id {args.image!r}")
    rec = dataset.images[args.image]
    if rec.n_proposals == 0:
        raise DataError(f"image {args.image!r} has no proposals")
    if not 0 <= args.phrase_row < dataset.phrase_features.rows:
        raise DataError(f"phrase feature row {args.phrase_row} out of bounds")

    u = None
    if params.cfg.assignment_mode != "learned":
        provider = _load_provider(checkpoint, params, dataset)
        sample = next(
            (s for s in dataset.phrases if s.feature_row == args.phrase_row), None)
        if sample is None:
            raise DataError(
                f"phrase row {args.phrase_row} matches no annotated phrase; "
                f"external assignment needs the phrase identity"
            )
        u = provider.u_for(dataset, [sample])

    txt = dataset.phrase_features.row(args.phrase_row)[None, :]
    inputs = region_inputs(dataset, args.image, cfg.spatial)
    scores, _ = score(inputs, txt, u, params, mode="infer")
    row = scores[0]
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    ranked = [
        {"proposal": int(j), "box": [float(v) for v in rec.boxes[j]],
         "score": float(row[j])}
        for j in order
    ]
    print(json.dumps(ranked, indent=1))
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    samples = dataset.split_phrases(args.split)
    if len(samples) < cfg.model.K:
        raise DataError(
            f"split {args.split!r} has {len(samples)} phrases, need >= K={cfg.model.K}"
        )
    model = kmeans_fit(phrase_rows(dataset, samples), cfg.model.K,
                       seed=cfg.train.seed)
    with open(out / "kmeans.json", "w", encoding="utf-8") as fh:
        json.dump(model.to_json(), fh)
    _info(f"k-means: K={cfg.model.K}, {model.iterations_run} iterations")
    print(repr(model.inertia_history[-1] if model.inertia_history else 0.0))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    dataset = gen_synthetic(cfg.synth)
    save_dataset(dataset, out)
    _info(
        f"synthetic dataset: {len(dataset.images)} images, "
        f"{len(dataset.phrases)} phrases -> {out}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    err = full_model_gradcheck(seed=cfg.model.seed, h=args.h)
    print(repr(err))
    if not err < GRADCHECK_TOLERANCE:
        _info(f"gradient check FAILED: {err!r} >= {GRADCHECK_TOLERANCE!r}")
        return EXIT_NUMERIC
    _info(f"gradient check passed: {err!r} < {GRADCHECK_TOLERANCE!r}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    ks = [int(v) for v in args.ks.split(",") if v.strip()]
    modes = [v.strip() for v in args.assignments.split(",") if v.strip()]
    seeds = [int(v) for v in args.seeds.split(",") if v.strip()]
    if not ks or not modes or not seeds:
        raise ConfigError("sweep needs non-empty --ks, --assignments, --seeds")

    def progress(row):
        _info(f"sweep K={row['K']} mode={row['mode']} seed={row['seed']} "
              f"test={row['test_accuracy']} {row['error']}")

    rows = evaluation.k_sweep(dataset, cfg, ks, modes, seeds, progress=progress)
    evaluation.write_sweep_csv(rows, out / "sweep.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, with_out: bool = True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", help="config preset name",
                   choices=["flickr30k", "referit", "vgenome", "synth"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--seed", type=int, help="master seed for model/train/synth")
    if with_out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cite",
        description="Conditional image-text embedding networks: phrase "
                    "grounding training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--k", type=int, help="number of conditional embeddings")
    p.add_argument("--assignment",
                   choices=["learned", "kmeans", "coarse", "random"])
    p.add_argument("--dict", help="coarse dictionary JSON (overrides dataset's)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--oracle", action="store_true",
                   help="also print the proposal oracle upper bound")
    p.add_argument("--concept-report", action="store_true",
                   help="write concept_report.json (learned models)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank one image's proposals for a phrase")
    _add_common(p, with_out=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="image id")
    p.add_argument("--phrase-row", type=int, required=True,
                   help="row in the phrase feature store")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cluster", help="fit k-means on phrase features")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--proposals-per-image", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients against finite differences")
    _add_common(p, with_out=False)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train/evaluate over K and assignment modes")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ks", default="1,2,4", help="comma-separated K values")
    p.add_argument("--assignments", default="learned",
                   help="comma-separated assignment modes")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _info(f"config error: {exc}")
        return EXIT_CONFIG
    except (ValidationError, ModeError, StateError) as exc:
        _info(f"invalid request: {exc}")
        return EXIT_CONFIG
    except DataError as exc:
        _info(f"data error: {exc}")
        return EXIT_DATA
    except NumericError as exc:
        _info(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
