"""Command line front end for training, evaluation, and diagnostics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluation import (
    VARIANTS,
    apply_variant,
    confuser_rich_dataset_config,
    run_ablation,
    run_margin_sweep,
    split_dataset,
    structure_report,
    success_rate,
    sweep_to_csv,
    toy_precision_rate,
    track_sequence,
)
from .gradcheck import SUITES, run_all, run_suite
from .synthdata import DatasetConfig, SequenceConfig, generate_dataset, read_dataset, write_dataset
from .trainer import TrainConfig, load_models, save_models, train, write_history_csv

log = logging.getLogger("margintrack")


def _dataset_config(args) -> DatasetConfig:
    return DatasetConfig(
        n_sequences=args.sequences,
        n_pos=args.pos,
        n_neg=args.neg,
        sequence=SequenceConfig(n_frames=args.frames, confuser_count=args.confusers),
    )


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sequences", type=int, default=20, help="number of synthetic sequences")
    p.add_argument("--frames", type=int, default=50, help="frames per sequence")
    p.add_argument("--pos", type=int, default=64, help="positive proposals per frame")
    p.add_argument("--neg", type=int, default=196, help="negative proposals per frame")
    p.add_argument("--confusers", type=int, default=4, help="confuser objects per sequence")


def _load_config(args) -> TrainConfig:
    if args.config:
        config = TrainConfig.from_file(args.config)
    else:
        config = TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def cmd_gradcheck(args) -> int:
    names = [args.suite] if args.suite else list(SUITES)
    failures = 0
    for name in names:
        res = run_suite(name, seed=args.seed or 0, cases=args.cases)
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:<18} cases={res.cases:<3} max_rel_error={res.max_rel_error:.3e}  {status}")
        failures += res.failures
    if failures:
        print(f"{failures} case(s) failed")
        return 1
    print("all gradients match finite differences")
    return 0


def cmd_gen(args) -> int:
    dataset = generate_dataset(_dataset_config(args), args.seed or 0)
    write_dataset(args.out, dataset)
    n_frames = sum(len(sd.frames) for sd in dataset)
    log.info("wrote %d sequences (%d frames) to %s", len(dataset), n_frames, args.out)
    return 0


def cmd_train(args) -> int:
    config = apply_variant(_load_config(args), args.variant)
    if args.data:
        dataset = read_dataset(args.data)
    else:
        dataset = generate_dataset(_dataset_config(args), config.seed)
    train_view, _ = split_dataset(dataset, args.holdout)
    models, history = train(config, train_view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_models(out / "models.json", models, config)
    write_history_csv(out / "history.csv", history)
    config.to_file(out / "config.json")
    last = history.steps[-1]
    log.info("trained %d steps; final total loss %.6f", len(history.steps), last.total)
    log.info("artifacts in %s: models.json, history.csv, config.json", out)
    return 0


TRACK_COLUMNS = (
    "seq_index",
    "frame_index",
    "chosen_cx",
    "chosen_cy",
    "chosen_w",
    "chosen_h",
    "gt_cx",
    "gt_cy",
    "gt_w",
    "gt_h",
    "center_error",
    "overlap",
)


def cmd_track(args) -> int:
    models = load_models(args.models)
    dataset = read_dataset(args.data)
    lines = [",".join(TRACK_COLUMNS)]
    prs = []
    srs = []
    for sd in dataset:
        if args.seq is not None and sd.seq_index != args.seq:
            continue
        rep = track_sequence(models, sd.sequence, n_candidates=args.candidates, seed=args.seed or 0)
        prs.append(toy_precision_rate(rep))
        srs.append(success_rate(rep))
        for f in rep.frames:
            vals = (
                [sd.seq_index, f.frame_index]
                + f.chosen.to_list()
                + f.gt.to_list()
                + [f.center_error, f.overlap]
            )
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in vals))
    if not prs:
        log.error("no sequences matched")
        return 1
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log.info("wrote per-frame tracking CSV to %s", args.out)
    else:
        print(text, end="")
    log.info("toy_pr=%.4f toy_sr=%.4f over %d sequence(s)", np.mean(prs), np.mean(srs), len(prs))
    return 0


def cmd_report(args) -> int:
    models = load_models(args.models)
    dataset = read_dataset(args.data)
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    _, heldout = split_dataset(dataset, args.holdout)
    frames = heldout if heldout else [fd for sd in dataset for fd in sd.frames]
    rep = structure_report(models, frames, config.margin, convention=config.distance_convention)
    doc = {
        "band_occupancy_pos": rep.band_occupancy_pos,
        "band_occupancy_neg": rep.band_occupancy_neg,
        "margin_satisfaction": rep.margin_satisfaction,
        "cross_modal_satisfaction": rep.cross_modal_satisfaction,
        "n_anchors": rep.n_anchors,
        "n_mined_pos": rep.n_mined_pos,
        "n_mined_neg": rep.n_mined_neg,
        "distance_summary": rep.distance_summary,
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        log.info("wrote structure report to %s", args.out)
    else:
        print(text)
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    table = run_ablation(
        config,
        _dataset_config(args),
        variants=args.variants,
        seeds=tuple(args.seeds),
        n_candidates=args.candidates,
    )
    table.to_csv(args.out)
    for variant in args.variants:
        log.info(
            "%s: toy_pr=%.4f cross=%.4f",
            variant,
            table.mean_for(variant, "toy_pr"),
            table.mean_for(variant, "cross_modal_satisfaction"),
        )
    log.info("wrote ablation table to %s", args.out)
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    rows = run_margin_sweep(
        config,
        _dataset_config(args),
        args.param,
        args.values,
        seeds=tuple(args.seeds),
        n_candidates=args.candidates,
    )
    sweep_to_csv(rows, args.out)
    log.info("wrote %d sweep rows to %s", len(rows), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="margintrack",
        description="multi-margin metric learning on synthetic two-modality tracking data",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20, help="random configurations per suite")
    p.add_argument("--suite", choices=sorted(SUITES), help="run a single suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen", help="generate a synthetic dataset (JSONL)")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, default=0)
    _add_dataset_args(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the embedding, fusion, and classifier models")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="JSONL dataset; generated on the fly when omitted")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--holdout", type=float, default=0.2, help="held-out tail fraction per sequence")
    _add_dataset_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the toy tracker with trained models")
    p.add_argument("--models", required=True, help="models.json from train")
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--seq", type=int, default=None, help="restrict to one sequence index")
    p.add_argument("--candidates", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("report", help="embedding-space structure report")
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="training config JSON (margins, distance convention)")
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="train every variant over several seeds")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="base training config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--candidates", type=int, default=256)
    _add_dataset_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one margin parameter")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--param", required=True, choices=["m", "beta", "delta"])
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--config", help="base training config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--candidates", type=int, default=256)
    _add_dataset_args(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
