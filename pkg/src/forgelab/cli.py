"""Command line entry points. One verb per experiment family:

    train                 run one training job
    eval                  score a dataset with a checkpoint (frame/video AUC)
    synthesize            write self-blended fakes plus a manifest
    visualize             correlation heatmap, patch activation, localization maps
    report-activations    per-layer activation stats split by class
    robustness            AUC under the degradation sweep
    convergence-compare   steps-to-threshold ratio between two metrics logs

Every verb accepts ``--config`` (flat key=value file) and ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import load_checkpoint
from .config import TrainingConfig, parse_config_file, run_directory
from .evaluation import (
    auc,
    evaluate_samples,
    export_pca_csv,
    layerwise_activation_report,
    pca_features,
    robustness_sweep,
    video_level_record,
)
from .synthesis import (
    BlendRecipe,
    DegenerateRecipeError,
    load_manifest_dataset,
    load_real_dataset,
    self_blend,
    toy_face_dataset,
    write_manifest_dataset,
)
from .training import convergence_report, train
from .visualize import (
    export_correlation_viz,
    export_localization_maps,
    save_activation_report_plot,
    save_pca_scatter,
    save_robustness_plot,
)


def _load_config(args) -> TrainingConfig:
    config = parse_config_file(args.config) if args.config else TrainingConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _load_reals(spec: str, image_size: int, seed: int):
    if spec.startswith("toy:"):
        n = int(spec.split(":", 1)[1])
        return toy_face_dataset(n, np.random.default_rng(seed), image_size=image_size)
    path = Path(spec)
    if path.is_file():
        return load_manifest_dataset(path)
    return load_real_dataset(path)


def _with_fakes(samples, seed: int):
    """Pair every real with one synthesized fake; manifests may already mix."""
    if any(s.label == 1 for s in samples):
        return samples
    rng = np.random.default_rng((seed, 0xB1ED))
    out = list(samples)
    for real in samples:
        for _ in range(10):
            try:
                out.append(self_blend(real, BlendRecipe.sample(
                    rng, has_landmarks=real.landmarks is not None)))
                break
            except DegenerateRecipeError:
                continue
    return out


def _cmd_train(args) -> int:
    config = _load_config(args)
    reals = _load_reals(args.data, config.backbone.image_size, config.seed)
    run_dir = run_directory(args.out, config)
    result = train(config, reals, run_dir=run_dir, verbose=not args.quiet)
    final = result.log[-1] if result.log else {}
    print(f"run dir: {result.run_dir}")
    print(f"epochs: {result.stopped_epoch}  diverged: {result.diverged}")
    if final:
        print(f"final total loss: {final['total']:.4f}  val AUC: {final.get('val_auc')}")
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args)
    bundle = load_checkpoint(args.checkpoint)
    samples = _with_fakes(
        _load_reals(args.data, bundle.model.config.image_size, config.seed), config.seed
    )
    record = evaluate_samples(bundle.model, samples, mode=args.mode)
    frame_auc = auc(record)
    print(f"frame AUC: {frame_auc:.4f} over {len(record.entries)} samples")
    aggregated = video_level_record(record, k=args.frames_per_video,
                                    rng=np.random.default_rng(config.seed))
    if aggregated.aggregation == "video":
        print(f"video AUC: {auc(aggregated):.4f} over {len(aggregated.entries)} groups")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "scores.jsonl").open("w") as fh:
            for e in record.entries:
                fh.write(json.dumps(dataclasses.asdict(e)) + "\n")
        print(f"scores written to {out / 'scores.jsonl'}")
    return 0


def _cmd_synthesize(args) -> int:
    config = _load_config(args)
    reals = _load_reals(args.data, config.backbone.image_size, config.seed)
    rng = np.random.default_rng(config.seed)
    samples = list(reals)
    for real in reals:
        made = 0
        attempts = 0
        while made < args.per_real and attempts < 10 * args.per_real:
            attempts += 1
            try:
                samples.append(self_blend(real, BlendRecipe.sample(
                    rng, has_landmarks=real.landmarks is not None)))
                made += 1
            except DegenerateRecipeError:
                continue
    manifest = write_manifest_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples, manifest at {manifest}")
    return 0


def _cmd_visualize(args) -> int:
    config = _load_config(args)
    bundle = load_checkpoint(args.checkpoint)
    samples = _with_fakes(
        _load_reals(args.data, bundle.model.config.image_size, config.seed), config.seed
    )
    sample = samples[args.index]
    layer = args.layer if args.layer >= 0 else bundle.model.config.num_layers - 1
    paths = export_correlation_viz(bundle.model, sample.pixels, layer, args.out,
                                   stat=args.activation_stat)
    print(f"correlation viz for {sample.sample_id}: {paths['heatmap']}, {paths['activation']}")
    if bundle.model.localization is not None:
        maps = export_localization_maps(bundle.model, samples[: args.max_maps], args.out)
        print(f"{len(maps)} localization maps under {args.out}")
    coords = pca_features(bundle.model, samples, dims=2)
    csv_path = export_pca_csv(Path(args.out) / "pca.csv", samples, coords)
    save_pca_scatter(coords, [s.label for s in samples], Path(args.out) / "pca.png")
    print(f"PCA coordinates at {csv_path}")
    return 0


def _cmd_report_activations(args) -> int:
    config = _load_config(args)
    bundle = load_checkpoint(args.checkpoint)
    samples = _with_fakes(
        _load_reals(args.data, bundle.model.config.image_size, config.seed), config.seed
    )
    report = layerwise_activation_report(bundle.model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for l in range(report.layer_count):
        rows.append({
            "layer": l,
            "real_mean": float(report.real_mean[l]),
            "real_std": float(report.real_std[l]),
            "fake_mean": float(report.fake_mean[l]),
            "fake_std": float(report.fake_std[l]),
        })
        print(f"layer {l}: real {report.real_mean[l]:.5f} +- {report.real_std[l]:.5f}  "
              f"fake {report.fake_mean[l]:.5f} +- {report.fake_std[l]:.5f}")
    with (out / "activations.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    save_activation_report_plot(report, out / "activations.png")
    return 0


def _cmd_robustness(args) -> int:
    config = _load_config(args)
    bundle = load_checkpoint(args.checkpoint)
    samples = _with_fakes(
        _load_reals(args.data, bundle.model.config.image_size, config.seed), config.seed
    )
    table = robustness_sweep(bundle.model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = table.to_csv(out / "robustness.csv")
    save_robustness_plot(table, out / "robustness.png")
    for kind in table.kinds:
        cells = "  ".join(f"{v:.3f}" for v in table.row(kind))
        print(f"{kind:>14}: {cells}")
    print(f"table at {csv_path}")
    return 0


def _cmd_convergence_compare(args) -> int:
    report = convergence_report(args.injected_log, args.full_log,
                                args.threshold, component=args.component)
    if report.unreachable:
        print(f"threshold {args.threshold} unreachable "
              f"(injected: {report.steps_injected}, full: {report.steps_full})")
    else:
        print(f"steps to {args.component} <= {args.threshold}: "
              f"injected {report.steps_injected}, full {report.steps_full}, "
              f"ratio {report.ratio:.2f}x")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgelab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_common(p)
    p.add_argument("--data", default="toy:200", help="toy:<n>, dataset root, or manifest")
    p.add_argument("--out", default="runs", help="base directory for run outputs")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="toy:64")
    p.add_argument("--mode", default="injected", choices=["injected", "baseline"])
    p.add_argument("--frames-per-video", type=int, default=32)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synthesize", help="write self-blended fakes plus a manifest")
    _add_common(p)
    p.add_argument("--data", default="toy:64")
    p.add_argument("--out", required=True)
    p.add_argument("--per-real", type=int, default=1)
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("visualize", help="correlation, activation, localization, PCA")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="toy:16")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, default=-1, help="-1 means the last layer")
    p.add_argument("--activation-stat", default="row", choices=["row", "col", "sym"])
    p.add_argument("--max-maps", type=int, default=8)
    p.add_argument("--out", default="viz")
    p.set_defaults(func=_cmd_visualize)

    p = sub.add_parser("report-activations", help="per-layer activation stats by class")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="toy:64")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=_cmd_report_activations)

    p = sub.add_parser("robustness", help="AUC under the degradation sweep")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="toy:64")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=_cmd_robustness)

    p = sub.add_parser("convergence-compare", help="steps-to-threshold ratio of two logs")
    _add_common(p)
    p.add_argument("--injected-log", required=True)
    p.add_argument("--full-log", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--component", default="total",
                   choices=["total", "ce", "dice", "suppression", "contrast"])
    p.set_defaults(func=_cmd_convergence_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
