"""Command-line surface: synth, localize, evaluate, train, gradcheck.

Exit codes: 0 success, 2 file-format error, 3 dimension mismatch,
4 missing evaluation case, 5 infeasible synthesis config, 1 anything else.
The SSL_THREADS environment variable caps the per-sample worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_pipeline_config
from .errors import (
    ConfigError,
    DimensionMismatchError,
    FileFormatError,
    MixlocError,
    NumericalInstabilityError,
)
from .fileio import read_audio_embedding, read_feature_grid, write_pgm
from .grids import AudioEmbedding, FeatureGrid
from .losses import LossValue, avc_loss, grad_check, osc_loss
from .metrics import EvalCase, evaluate_cases
from .pipeline import localize_batch
from .synth import (
    SynthConfig,
    generate_scene,
    rle_decode,
    rle_encode,
    save_scene,
    scene_seed,
)
from .training import (
    LossSettings,
    ProjectionParams,
    TrainConfig,
    composed_loss,
    stack_scenes,
    train_run,
)

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_DIMENSION = 3
EXIT_MISSING_CASE = 4
EXIT_INFEASIBLE = 5


class MissingCaseError(MixlocError):
    pass


def _worker_count(n_items: int) -> int:
    cap = os.environ.get("SSL_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_items))


def _parse_upsample(text: str) -> int:
    kind, _, factor = text.partition(":")
    if kind != "nearest" or not factor.isdigit() or int(factor) < 1:
        raise argparse.ArgumentTypeError(
            f"expected nearest:<positive int>, got {text!r}"
        )
    return int(factor)


def _load_config(path) -> PipelineConfig:
    if path is not None and not Path(path).exists():
        raise FileFormatError(f"config file not found: {path}")
    return load_pipeline_config(path)


def _dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def build(index: int):
        seed = scene_seed(args.seed, index)
        features, audio, truth = generate_scene(cfg.synth, seed)
        name = f"scene_{index:05d}"
        save_scene(out / name, features, audio, truth)
        return name, truth.count

    names_counts = []
    if args.n > 0:
        with ThreadPoolExecutor(max_workers=_worker_count(args.n)) as pool:
            names_counts = list(pool.map(build, range(args.n)))
    histogram: dict[str, int] = {}
    for _, count in names_counts:
        histogram[str(count)] = histogram.get(str(count), 0) + 1
    _dump_json(
        out / "manifest.json",
        {
            "scenes": [name for name, _ in names_counts],
            "count_histogram": histogram,
            "n": args.n,
            "seed": args.seed,
        },
    )
    print(f"wrote {args.n} scene(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# localize
# ---------------------------------------------------------------------------


def _grouping_doc(result, sample: int) -> dict:
    bank = result.banks[sample]
    grouping = result.groupings[sample]
    scores = result.object_score_maps(sample)
    objects = []
    for k, obj in enumerate(grouping.objects):
        anchor = bank.records[obj.anchor_record]
        objects.append(
            {
                "object": k,
                "anchor": {
                    "step": anchor.step,
                    "row": anchor.cell.row,
                    "col": anchor.cell.col,
                    "peak": anchor.peak_value,
                },
                "member_records": obj.member_records,
                "records": [
                    {
                        "step": bank.records[t].step,
                        "row": bank.records[t].cell.row,
                        "col": bank.records[t].cell.col,
                        "peak": bank.records[t].peak_value,
                    }
                    for t in obj.member_records
                ],
                "fused_map": rle_encode(obj.fused_map),
                "scores": scores[k].tolist(),
            }
        )
    return {
        "sample": sample,
        "count": grouping.count,
        "objects": objects,
        "discarded": grouping.discarded,
    }


def cmd_localize(args) -> int:
    cfg = _load_config(args.config)
    features = read_feature_grid(args.features)
    audio = read_audio_embedding(args.audio)
    if features.batch != audio.batch or features.channels != audio.channels:
        raise DimensionMismatchError(
            f"grid ({features.batch} samples, {features.channels} ch) does not match "
            f"audio ({audio.batch} samples, {audio.channels} ch)"
        )
    result = localize_batch(features, audio, cfg.sarl, cfg.extraction, cfg.group)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def write_sample(sample: int) -> None:
        for k, obj in enumerate(result.groupings[sample].objects):
            write_pgm(
                out / f"sample_{sample:03d}_object_{k:02d}.pgm",
                obj.fused_map,
                upsample=args.upsample,
            )

    with ThreadPoolExecutor(max_workers=_worker_count(features.batch)) as pool:
        list(pool.map(write_sample, range(features.batch)))
    _dump_json(
        out / "objects.json",
        {
            "height": features.height,
            "width": features.width,
            "samples": [_grouping_doc(result, b) for b in range(features.batch)],
        },
    )
    total = sum(g.count for g in result.groupings)
    print(f"localized {total} object(s) across {features.batch} sample(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _load_case(pred_dir: Path, truth_dir: Path) -> EvalCase:
    truth_doc = json.loads((truth_dir / "truth.json").read_text())
    pred_path = pred_dir / "objects.json"
    if not pred_path.exists():
        raise MissingCaseError(f"missing prediction {pred_path}")
    pred_doc = json.loads(pred_path.read_text())
    width = int(truth_doc["width"])
    true_masks = [rle_decode(rows, width) for rows in truth_doc["masks"]]
    sample = pred_doc["samples"][0]
    pred_maps = [rle_decode(obj["fused_map"], width) for obj in sample["objects"]]
    pred_scores = [np.asarray(obj["scores"], dtype=np.float64) for obj in sample["objects"]]
    return EvalCase(pred_maps=pred_maps, true_masks=true_masks, pred_scores=pred_scores)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    truth_root = Path(args.truth)
    pred_root = Path(args.pred)
    manifest = truth_root / "manifest.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["scenes"]
    else:
        names = sorted(d.name for d in truth_root.iterdir() if (d / "truth.json").exists())
    cases = [_load_case(pred_root / name, truth_root / name) for name in names]
    report = evaluate_cases(
        cases,
        iou_thresholds=cfg.iou_thresholds,
        auc_thresholds=cfg.auc_thresholds,
    )
    _dump_json(args.out, report.to_json_dict())
    print(f"evaluated {len(cases)} case(s) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = TrainConfig(
            learning_rate=train_cfg.learning_rate,
            momentum=train_cfg.momentum,
            steps=args.steps,
            batch_size=train_cfg.batch_size,
            seed=train_cfg.seed if args.seed is None else args.seed,
        )
    elif args.seed is not None:
        train_cfg = TrainConfig(
            learning_rate=train_cfg.learning_rate,
            momentum=train_cfg.momentum,
            steps=train_cfg.steps,
            batch_size=train_cfg.batch_size,
            seed=args.seed,
        )
    settings = cfg.loss_settings()
    scenes = [
        generate_scene(cfg.synth, scene_seed(train_cfg.seed, i))
        for i in range(args.train_scenes + args.holdout_scenes)
    ]
    train_scenes = scenes[: args.train_scenes]
    holdout_scenes = scenes[args.train_scenes :]
    c_raw = cfg.synth.channels
    proj = cfg.proj_channels or max(2, c_raw // 2)
    init = ProjectionParams.initialize(c_raw, proj, train_cfg.seed)
    result = train_run(train_scenes, holdout_scenes, train_cfg, settings, init_params=init)
    result.params.save(args.out)
    for point in result.metric_curve:
        print(
            f"step {point['step']:>5}: counting_accuracy={point['counting_accuracy']:.3f} "
            f"ciou@0.3={point['ciou@0.3']:.3f}"
        )
    print(f"checkpoint -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _gradcheck_instance(index: int, seed: int, step: float, tolerance: float) -> list:
    from .losses import OscBatchStructure, OscGroup
    from .similarity import SarlConfig

    rng = np.random.default_rng(seed + index)
    reports = []

    batch, h, w, c = 2, 3, 3, 4
    visual = rng.standard_normal((batch, h, w, c))
    audio = rng.standard_normal((batch, c))
    cfg = SarlConfig(alpha=0.3, omega=0.1)

    def avc_fn(params):
        return avc_loss(
            FeatureGrid(params["visual"]), AudioEmbedding(params["audio"]), cfg, True
        )

    reports.append(
        ("avc", grad_check(avc_fn, {"visual": visual, "audio": audio}, step, tolerance))
    )

    def osc_fn(params):
        structure = OscBatchStructure(
            groups=[
                [
                    OscGroup(
                        anchor=params["anchor"],
                        positives=params["positives"],
                        negatives=params["negatives"],
                    )
                ]
            ]
        )
        return osc_loss(structure, compute_grad=True)

    osc_params = {
        "anchor": rng.standard_normal(c),
        "positives": rng.standard_normal((2, c)),
        "negatives": rng.standard_normal((3, c)),
    }

    def osc_named(params):
        value = osc_fn(params)
        grads = {
            "anchor": value.gradients["sample0/group0/anchor"],
            "positives": value.gradients["sample0/group0/positives"],
            "negatives": value.gradients["sample0/group0/negatives"],
        }
        return LossValue(value.value, gradients=grads)

    reports.append(("osc", grad_check(osc_named, osc_params, step, tolerance)))

    c_raw = 6
    raw_visual = FeatureGrid(rng.standard_normal((batch, h, w, c_raw)))
    raw_audio = AudioEmbedding(rng.standard_normal((batch, c_raw)))
    settings = LossSettings(sarl=cfg)
    init = ProjectionParams.initialize(c_raw, c, seed=seed + index)
    frozen = composed_loss(init, raw_visual, raw_audio, settings).structure

    def composed_fn(params):
        result = composed_loss(
            ProjectionParams(params["w_visual"], params["w_audio"]),
            raw_visual,
            raw_audio,
            settings,
            structure=frozen,
            compute_grad=True,
        )
        return result.total

    reports.append(
        (
            "composed",
            grad_check(
                composed_fn,
                {"w_visual": init.w_visual, "w_audio": init.w_audio},
                step,
                tolerance,
            ),
        )
    )
    return reports


def cmd_gradcheck(args) -> int:
    all_passed = True
    for index in range(args.instances):
        for name, report in _gradcheck_instance(index, args.seed, args.step, args.tolerance):
            status = "pass" if report.passed else "FAIL"
            print(
                f"instance {index:02d} {name:<9} max_rel_error={report.max_rel_error:.3e} "
                f"[{status}]"
            )
            all_passed &= report.passed
    return EXIT_OK if all_passed else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixloc",
        description="Localize multiple sound-making objects on feature grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("localize", help="run the pipeline on a feature grid")
    p.add_argument("--features", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--upsample", type=_parse_upsample, default=1, metavar="nearest:F")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train", help="fit the projections on synthetic scenes")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-scenes", type=int, default=64)
    p.add_argument("--holdout-scenes", type=int, default=32)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DimensionMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except MissingCaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CASE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalInstabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
