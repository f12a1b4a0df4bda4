"""Command-line entry points: synth, run, train, predict, eval, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import classifier, evaluation, postproc, synth
from .config import ConfigError, load_config
from .pipeline import PipelineError, run_pipeline
from .raster import ImageStats, load_raster, save_raster
from .roadmask import save_road_network

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

_DEMO_REMOVALS = (0.62, 0.18, 0.45, 0.3, 0.55, 0.08)


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scene:
        spec = synth.load_scene_spec(args.scene)
        raster, net, truth = synth.generate_scene(spec)
        save_raster(out / "scene.tif", raster)
        save_road_network(out / "roads.geojson", net)
        synth.save_truth(out / "truth.jsonl", truth)
        print(f"wrote scene with {len(truth)} vehicles to {out}")
        return EXIT_OK

    lines = [
        "[pipeline]",
        'out = "run"',
        f"seed = {args.seed}",
        "shadow_enabled = false",
        "",
        "[train]",
        f"epochs = {args.epochs}",
        "",
        "[train.schedule]",
        "warmup_epochs = 5",
        "",
        "[train.window_schedule]",
        "start_rate = 1e-5",
        "max_rate = 1e-4",
        "warmup_epochs = 5",
        "",
    ]
    for i in range(args.cities):
        city = f"city{i:02d}"
        removal = _DEMO_REMOVALS[i % len(_DEMO_REMOVALS)]
        before_spec, after_spec = synth.before_after_pair(
            seed=args.seed + 101 * i,
            removal_frac=removal,
            width=args.size,
            height=args.size,
            n_vehicles=args.vehicles,
        )
        cdir = out / city
        cdir.mkdir(exist_ok=True)
        raster_b, net, truth_b = synth.generate_scene(before_spec)
        raster_a, _, truth_a = synth.generate_scene(after_spec)
        save_raster(cdir / "before.tif", raster_b)
        save_raster(cdir / "after.tif", raster_a)
        save_road_network(cdir / "roads.geojson", net)
        synth.save_truth(cdir / "truth_before.jsonl", truth_b)
        synth.save_truth(cdir / "truth_after.jsonl", truth_a)
        stringency = 40.0 + 50.0 * removal
        lines += [
            "[[city]]",
            f'id = "{city}"',
            f'raster_before = "{city}/before.tif"',
            f'raster_after = "{city}/after.tif"',
            f'roads = "{city}/roads.geojson"',
            f'truth_before = "{city}/truth_before.jsonl"',
            f'truth_after = "{city}/truth_after.jsonl"',
            f"stringency_index = {stringency:.1f}",
            "",
        ]
        print(f"{city}: {len(truth_b)} -> {len(truth_a)} vehicles (removal {removal:.0%})")
    (out / "pipeline.toml").write_text("\n".join(lines), encoding="utf-8")
    print(f"wrote {out / 'pipeline.toml'}; next: vehiclescan run --config {out}/pipeline.toml --train")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    stages = args.stage.split(",") if args.stage else None
    summary = run_pipeline(cfg, stages=stages, train=args.train)
    if summary:
        for city, counts in summary.get("counts", {}).items():
            b, a = counts["before"], counts["after"]
            print(f"{city}: before={b.total} after={a.total}")
    print(f"artifacts in {cfg.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    samples, _stats = classifier.load_samples(args.samples)
    if args.config:
        cfg = load_config(args.config)
        train_cfg = cfg.train
    else:
        train_cfg = classifier.TrainConfig()
    model = classifier.MultiBranchModel(seed=args.seed)
    log = classifier.train(model, samples, train_cfg, seed=args.seed)
    model.save(args.out)
    print(f"trained on {len(samples)} samples; final loss {log.stage2[-1]:.4f}; saved {args.out}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    from .pipeline import load_anchors

    model = classifier.MultiBranchModel.load(args.model)
    raster = load_raster(args.raster)
    stats = ImageStats.from_raster(raster)
    anchors = load_anchors(args.anchors)
    probs = classifier.score_anchors(model, raster, stats, anchors)
    with open(args.out, "w", encoding="utf-8") as fh:
        for a, p in zip(anchors, probs):
            fh.write(json.dumps({"anchor_id": a.id, "prob": float(p)}, sort_keys=True) + "\n")
    print(f"scored {len(anchors)} anchors -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    dets = postproc.load_detections(args.dets)
    labels = evaluation.load_labels(args.labels)
    totals = evaluation.write_region_report(args.out, dets, labels, mode=args.mode)
    print(
        "P={precision:.4f} R={recall:.4f} F1={f1:.4f} (tp={tp} fp={fp} fn={fn})".format(**totals)
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    run_pipeline(cfg, stages=["analytics"])
    print(f"report written under {Path(cfg.out) / 'report'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vehiclescan",
        description="Vehicle detection and transportation-density analytics "
        "for 0.5 m multi-band imagery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic demo dataset or one scene")
    p.add_argument("--out", required=True)
    p.add_argument("--cities", type=int, default=2)
    p.add_argument("--vehicles", type=int, default=50)
    p.add_argument("--size", type=int, default=384)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30, help="training epochs written to the config")
    p.add_argument("--scene", help="scene spec TOML; renders a single scene instead")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="run the pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", help="comma-separated stage subset (default: all)")
    p.add_argument("--train", action="store_true", help="train the model from truth labels first")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("train", help="train from a saved sample set")
    p.add_argument("--samples", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="score anchors on a raster")
    p.add_argument("--model", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--raster", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="match detections against labels")
    p.add_argument("--dets", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--mode", default="center_cover", choices=evaluation.COVER_MODES)
    p.add_argument("--out", default="eval_report.csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="recompute analytics from prior artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
