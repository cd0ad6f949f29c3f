"""Tracking evaluation, embedding-structure reports, ablations, and sweeps.

Tracking is deliberately minimal: per frame, Gaussian candidates around the
previous box are scored by the classifier's positive probability on fused
features and the argmax wins. Structure reports measure the geometry the
band losses are supposed to produce: occupancy of the positive/negative
distance bands by previously mined samples, the per-anchor margin between
the worst positive and best negative, and the cross-modality margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fusion import fuse_batch
from .losses import band_membership
from .metricspace import ContractViolation, anchor_distances
from .mining import MarginParams, mine_from_distances
from .synthdata import (
    Box,
    DatasetConfig,
    FrameData,
    Frame,
    OracleParams,
    SequenceConfig,
    SequenceData,
    SyntheticSequence,
    _draw_boxes,
    default_spread,
    features_for_boxes,
    generate_dataset,
    iou,
)
from .trainer import Models, TrainConfig, TrainHistory, train

VARIANTS = ("full", "no_cross", "no_rgbt_terms", "baseline_triplet", "no_attention_fusion")

DEFAULT_SUCCESS_THRESHOLDS = tuple(np.linspace(0.0, 1.0, 21))


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------


@dataclass
class TrackedFrame:
    frame_index: int
    chosen: Box
    gt: Box
    center_error: float
    overlap: float


@dataclass
class TrackReport:
    """Per-frame tracking outcomes for one sequence."""

    frames: list[TrackedFrame] = field(default_factory=list)


def score_candidates(models: Models, boxes: list[Box], frame: Frame, oracle: OracleParams) -> np.ndarray:
    """Positive-class probability for each candidate box."""
    if not boxes:
        raise ContractViolation("need at least one candidate box")
    x_r = features_for_boxes(boxes, frame, "rgb", oracle)
    x_t = features_for_boxes(boxes, frame, "thermal", oracle)
    x_r = models.adapted(x_r, "rgb")
    x_t = models.adapted(x_t, "thermal")
    fused, _ = fuse_batch(models.fusion, x_r, x_t)
    logits, _ = models.classifier.forward(fused, train=False)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    p = expz / expz.sum(axis=1, keepdims=True)
    return p[:, 0]


def track_frame(
    models: Models,
    previous_box: Box,
    frame: Frame,
    oracle: OracleParams,
    n_candidates: int = 256,
    seed: int = 0,
    spread: tuple[float, float, float, float] | None = None,
) -> Box:
    """Pick the best of ``n_candidates`` Gaussian draws around the previous box.

    Deterministic given the seed; ties resolve to the lowest index.
    """
    if n_candidates <= 0:
        raise ContractViolation("n_candidates must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, frame.index]))
    boxes = _draw_boxes(rng, previous_box, spread or default_spread(previous_box), n_candidates)
    scores = score_candidates(models, boxes, frame, oracle)
    return boxes[int(np.argmax(scores))]


def track_sequence(
    models: Models,
    sequence: SyntheticSequence,
    n_candidates: int = 256,
    seed: int = 0,
) -> TrackReport:
    """Run the tracker over a sequence, initialized from frame 0's ground truth."""
    report = TrackReport()
    prev = sequence.frames[0].ground_truth
    for frame in sequence.frames:
        if frame.index == sequence.frames[0].index:
            chosen = frame.ground_truth
        else:
            chosen = track_frame(models, prev, frame, sequence.oracle, n_candidates, seed)
        gt = frame.ground_truth
        report.frames.append(
            TrackedFrame(
                frame_index=frame.index,
                chosen=chosen,
                gt=gt,
                center_error=math.hypot(chosen.cx - gt.cx, chosen.cy - gt.cy),
                overlap=iou(chosen, gt),
            )
        )
        prev = chosen
    return report


def precision_rate(report: TrackReport, threshold: float) -> float:
    """Fraction of frames whose center error is within ``threshold``."""
    if not report.frames:
        raise ContractViolation("empty track report")
    hits = sum(1 for f in report.frames if f.center_error <= threshold)
    return hits / len(report.frames)


def toy_precision_rate(report: TrackReport, rel: float = 0.2) -> float:
    """Precision with a scale-free per-frame threshold: rel * gt diagonal."""
    if not report.frames:
        raise ContractViolation("empty track report")
    hits = sum(1 for f in report.frames if f.center_error <= rel * f.gt.diagonal())
    return hits / len(report.frames)


def success_rate(report: TrackReport, thresholds=None, strict: bool = True) -> float:
    """Area under the success curve over an overlap-threshold grid.

    The default grid is 21 evenly spaced thresholds on [0, 1] compared with
    a strict ``>``, so a perfect track scores 20/21; ``strict=False`` uses
    ``>=`` and makes a perfect track score 1.0.
    """
    if not report.frames:
        raise ContractViolation("empty track report")
    if thresholds is None:
        thresholds = DEFAULT_SUCCESS_THRESHOLDS
    overlaps = np.array([f.overlap for f in report.frames])
    fracs = []
    for thr in thresholds:
        if strict:
            fracs.append(float((overlaps > thr).mean()))
        else:
            fracs.append(float((overlaps >= thr).mean()))
    return float(np.mean(fracs))


# ---------------------------------------------------------------------------
# structure reports
# ---------------------------------------------------------------------------


@dataclass
class StructureReport:
    """Geometry of the learned embedding space against the margin plan."""

    band_occupancy_pos: float
    band_occupancy_neg: float
    margin_satisfaction: float
    cross_modal_satisfaction: float
    n_anchors: int
    n_mined_pos: int
    n_mined_neg: int
    distance_summary: dict[str, float] = field(default_factory=dict)


def structure_report(
    models: Models,
    frames: list[FrameData],
    params: MarginParams,
    mined_record: dict | None = None,
    convention: str = "squared",
    eps: float = 0.05,
) -> StructureReport:
    """Evaluate band occupancy and margin satisfaction on ``frames``.

    Distances are computed under each frame's own batch statistics (the
    anchor and its proposals normalized together, exactly as during
    training); nothing is mutated. Global running statistics are not used
    here because each sequence has its own feature distribution, which a
    single running average misrepresents.

    Band occupancy is the fraction of previously mined confusing samples
    whose final distance lies in the eps-padded target band.
    ``mined_record`` maps (seq_index, frame_index, modality) to the mined
    id sets recorded during training; without it the sets are mined afresh
    with the current models. Empty mined sets yield occupancy 1.0 with the
    counts exposing the vacuity. Margin satisfaction asks each anchor for
    min-negative minus max-positive of at least m - eps; cross-modal
    satisfaction asks, per frame and direction, that the worst positive of
    one modality plus delta not exceed the best negative of the other.
    """
    if not frames:
        raise ContractViolation("structure report needs at least one frame")
    in_band = {"pos": 0, "neg": 0}
    mined_n = {"pos": 0, "neg": 0}
    margin_hits = 0
    cross_hits = 0
    cross_total = 0
    sums = {"max_pos": 0.0, "min_neg": 0.0, "mean_pos": 0.0, "mean_neg": 0.0}
    n_anchors = 0
    for fd in frames:
        mask = fd.positive_mask
        per_modality = {}
        for modality, net, anchor, x in (
            ("rgb", models.net_r, fd.anchor_r, fd.x_r),
            ("thermal", models.net_t, fd.anchor_t, fd.x_t),
        ):
            xa = models.adapted(x, modality)
            aa = models.adapted(anchor[None, :], modality)[0]
            emb, _ = net.forward(
                np.vstack([aa[None, :], xa]), train=True, update_running=False
            )
            d = anchor_distances(emb[0], emb[1:], convention)
            per_modality[modality] = d
            if mined_record is not None:
                rec = mined_record.get((fd.seq_index, fd.frame_index, modality))
                pos_ids = np.array(sorted(rec[0]), dtype=int) if rec else np.array([], dtype=int)
                neg_ids = np.array(sorted(rec[1]), dtype=int) if rec else np.array([], dtype=int)
            else:
                pos_ids, neg_ids = mine_from_distances(d, mask, params)
            if len(pos_ids):
                in_band["pos"] += int(band_membership(d[pos_ids], True, params, eps).sum())
                mined_n["pos"] += len(pos_ids)
            if len(neg_ids):
                in_band["neg"] += int(band_membership(d[neg_ids], False, params, eps).sum())
                mined_n["neg"] += len(neg_ids)
            pos_d = d[mask]
            neg_d = d[~mask]
            if pos_d.size and neg_d.size:
                n_anchors += 1
                if float(neg_d.min() - pos_d.max()) >= params.m - eps:
                    margin_hits += 1
                sums["max_pos"] += float(pos_d.max())
                sums["min_neg"] += float(neg_d.min())
                sums["mean_pos"] += float(pos_d.mean())
                sums["mean_neg"] += float(neg_d.mean())
        for a, b in (("rgb", "thermal"), ("thermal", "rgb")):
            pos_d = per_modality[a][mask]
            neg_d = per_modality[b][~mask]
            if pos_d.size and neg_d.size:
                cross_total += 1
                if float(pos_d.max()) + params.delta <= float(neg_d.min()):
                    cross_hits += 1
    return StructureReport(
        band_occupancy_pos=in_band["pos"] / mined_n["pos"] if mined_n["pos"] else 1.0,
        band_occupancy_neg=in_band["neg"] / mined_n["neg"] if mined_n["neg"] else 1.0,
        margin_satisfaction=margin_hits / n_anchors if n_anchors else 0.0,
        cross_modal_satisfaction=cross_hits / cross_total if cross_total else 0.0,
        n_anchors=n_anchors,
        n_mined_pos=mined_n["pos"],
        n_mined_neg=mined_n["neg"],
        distance_summary={k: v / n_anchors if n_anchors else 0.0 for k, v in sums.items()},
    )


# ---------------------------------------------------------------------------
# fixtures, experiments, ablations
# ---------------------------------------------------------------------------


def confuser_rich_dataset_config(
    n_sequences: int = 20, n_frames: int = 50, confuser_count: int = 4
) -> DatasetConfig:
    """The stock desk-scale fixture: short sequences with traveling confusers."""
    return DatasetConfig(
        n_sequences=n_sequences,
        sequence=SequenceConfig(n_frames=n_frames, confuser_count=confuser_count),
    )


def split_dataset(
    dataset: list[SequenceData], holdout_fraction: float = 0.2
) -> tuple[list[SequenceData], list[FrameData]]:
    """Split each sequence's tail frames into a held-out evaluation set."""
    if not (0.0 <= holdout_fraction < 1.0):
        raise ContractViolation("holdout_fraction must lie in [0, 1)")
    train_view = []
    heldout = []
    for sd in dataset:
        cut = max(1, int(round(len(sd.frames) * (1.0 - holdout_fraction))))
        train_view.append(
            SequenceData(seq_index=sd.seq_index, sequence=sd.sequence, frames=sd.frames[:cut])
        )
        heldout.extend(sd.frames[cut:])
    return train_view, heldout


def apply_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """Translate an ablation variant name into config switches."""
    if variant == "full":
        return config
    if variant == "no_cross":
        return replace(config, use_cross=False)
    if variant == "no_rgbt_terms":
        return replace(config, use_rgbt_terms=False)
    if variant == "baseline_triplet":
        return replace(config, metric_variant="triplet", use_cross=False)
    if variant == "no_attention_fusion":
        return replace(config, fusion_gate_mode="off")
    raise ContractViolation(f"unknown variant {variant!r}; known: {VARIANTS}")


@dataclass
class ExperimentResult:
    """One trained run plus its evaluation metrics."""

    variant: str
    seed: int
    config: TrainConfig
    models: Models
    history: TrainHistory
    train_report: StructureReport
    heldout_report: StructureReport
    toy_pr: float
    toy_sr: float


def run_experiment(
    base_config: TrainConfig,
    dataset_config: DatasetConfig,
    variant: str,
    seed: int,
    dataset: list[SequenceData] | None = None,
    n_candidates: int = 256,
    holdout_fraction: float = 0.2,
) -> ExperimentResult:
    """Train one (variant, seed) cell and evaluate structure plus toy tracking."""
    if dataset is None:
        dataset = generate_dataset(dataset_config, seed)
    config = apply_variant(replace(base_config, seed=seed), variant)
    train_view, heldout = split_dataset(dataset, holdout_fraction)
    models, history = train(config, train_view)
    train_frames = [fd for sd in train_view for fd in sd.frames]
    train_report = structure_report(
        models,
        train_frames,
        config.margin,
        mined_record=history.mined_union,
        convention=config.distance_convention,
    )
    heldout_report = structure_report(
        models, heldout, config.margin, convention=config.distance_convention
    )
    prs = []
    srs = []
    for sd in dataset:
        rep = track_sequence(models, sd.sequence, n_candidates=n_candidates, seed=seed)
        prs.append(toy_precision_rate(rep))
        srs.append(success_rate(rep))
    return ExperimentResult(
        variant=variant,
        seed=seed,
        config=config,
        models=models,
        history=history,
        train_report=train_report,
        heldout_report=heldout_report,
        toy_pr=float(np.mean(prs)),
        toy_sr=float(np.mean(srs)),
    )


@dataclass
class AblationRow:
    variant: str
    seed: int
    toy_pr: float
    toy_sr: float
    band_occupancy_pos: float
    band_occupancy_neg: float
    margin_satisfaction: float
    cross_modal_satisfaction: float


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def mean_for(self, variant: str, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.rows if r.variant == variant]
        if not vals:
            raise ContractViolation(f"no rows for variant {variant!r}")
        return float(np.mean(vals))

    def to_csv(self, path) -> None:
        cols = (
            "variant",
            "seed",
            "toy_pr",
            "toy_sr",
            "band_occupancy_pos",
            "band_occupancy_neg",
            "margin_satisfaction",
            "cross_modal_satisfaction",
        )
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                vals = [getattr(r, c) for c in cols]
                fh.write(
                    ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals) + "\n"
                )
            for variant in dict.fromkeys(r.variant for r in self.rows):
                means = [self.mean_for(variant, c) for c in cols[2:]]
                fh.write(
                    ",".join([variant, "mean"] + [repr(v) for v in means]) + "\n"
                )


def result_to_row(res: ExperimentResult) -> AblationRow:
    return AblationRow(
        variant=res.variant,
        seed=res.seed,
        toy_pr=res.toy_pr,
        toy_sr=res.toy_sr,
        band_occupancy_pos=res.train_report.band_occupancy_pos,
        band_occupancy_neg=res.train_report.band_occupancy_neg,
        margin_satisfaction=res.heldout_report.margin_satisfaction,
        cross_modal_satisfaction=res.heldout_report.cross_modal_satisfaction,
    )


def run_ablation(
    base_config: TrainConfig,
    dataset_config: DatasetConfig,
    variants=VARIANTS,
    seeds=(0, 1, 2),
    n_candidates: int = 256,
) -> AblationTable:
    """Train and evaluate every (variant, seed) cell; datasets are shared per seed."""
    table = AblationTable()
    datasets = {s: generate_dataset(dataset_config, s) for s in seeds}
    for variant in variants:
        for seed in seeds:
            res = run_experiment(
                base_config,
                dataset_config,
                variant,
                seed,
                dataset=datasets[seed],
                n_candidates=n_candidates,
            )
            table.rows.append(result_to_row(res))
    return table


@dataclass
class SweepRow:
    param: str
    value: float
    seed: int
    toy_pr: float
    toy_sr: float
    margin_satisfaction: float
    cross_modal_satisfaction: float


def run_margin_sweep(
    base_config: TrainConfig,
    dataset_config: DatasetConfig,
    param: str,
    values,
    seeds=(0, 1, 2),
    n_candidates: int = 256,
) -> list[SweepRow]:
    """Sweep one margin parameter (m, beta, or delta) over ``values``."""
    if param not in ("m", "beta", "delta"):
        raise ContractViolation(f"sweep parameter must be m, beta, or delta, got {param!r}")
    rows = []
    datasets = {s: generate_dataset(dataset_config, s) for s in seeds}
    for value in values:
        margin = replace(base_config.margin, **{param: float(value)})
        config = replace(base_config, margin=margin)
        for seed in seeds:
            res = run_experiment(
                config,
                dataset_config,
                "full",
                seed,
                dataset=datasets[seed],
                n_candidates=n_candidates,
            )
            rows.append(
                SweepRow(
                    param=param,
                    value=float(value),
                    seed=seed,
                    toy_pr=res.toy_pr,
                    toy_sr=res.toy_sr,
                    margin_satisfaction=res.heldout_report.margin_satisfaction,
                    cross_modal_satisfaction=res.heldout_report.cross_modal_satisfaction,
                )
            )
    return rows


def sweep_to_csv(rows: list[SweepRow], path) -> None:
    cols = ("param", "value", "seed", "toy_pr", "toy_sr", "margin_satisfaction", "cross_modal_satisfaction")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            vals = [getattr(r, c) for c in cols]
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in vals) + "\n")
