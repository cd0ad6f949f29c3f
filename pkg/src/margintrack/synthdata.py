"""Synthetic tracking scenes and the deterministic feature oracle.

A scene is a short constant-velocity trajectory of one target box plus a
configurable ring of confuser regions that travel with it. Proposals are
Gaussian jitters of the ground truth, labeled by overlap (positive above
0.7, negative below 0.5, the rest discarded). The feature oracle stands in
for a learned backbone: it mixes a target base embedding with a background
embedding by overlap, adds a per-modality offset and seeded noise, and
pulls boxes that overlap a confuser region toward the target's embedding,
which is what makes low-overlap proposals genuinely confusing.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .metricspace import ContractViolation

MODALITY_CODES = {"rgb": 0, "thermal": 1}


class SamplingError(RuntimeError):
    """Rejection sampling hit its attempt cap before filling a quota."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box as center, width, height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ContractViolation("box fields must be finite")
        if self.w <= 0.0 or self.h <= 0.0:
            raise ContractViolation(f"box sides must be positive, got w={self.w} h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def diagonal(self) -> float:
        return math.hypot(self.w, self.h)

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    @classmethod
    def from_list(cls, vals) -> "Box":
        return cls(*(float(v) for v in vals))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint.

    The ratio is capped at 1: converting center-size boxes to corners and
    back can inflate the intersection by an ulp, and the true value never
    exceeds 1.
    """
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return min(inter / union, 1.0)


def _boxes_array(boxes) -> np.ndarray:
    return np.array([b.to_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


def _iou_each(arr: np.ndarray, b: Box) -> np.ndarray:
    """Vectorized iou of every row of (n, 4) center-size boxes against b.

    Mirrors the scalar implementation operation for operation so both
    paths agree bitwise on the same box pair.
    """
    ax0 = arr[:, 0] - arr[:, 2] / 2.0
    ay0 = arr[:, 1] - arr[:, 3] / 2.0
    ax1 = arr[:, 0] + arr[:, 2] / 2.0
    ay1 = arr[:, 1] + arr[:, 3] / 2.0
    bx0, by0, bx1, by1 = b.corners()
    iw = np.minimum(ax1, bx1) - np.maximum(ax0, bx0)
    ih = np.minimum(ay1, by1) - np.maximum(ay0, by0)
    inter = iw * ih
    union = arr[:, 2] * arr[:, 3] + b.w * b.h - inter
    out = np.minimum(inter / union, 1.0)
    out[(iw <= 0.0) | (ih <= 0.0)] = 0.0
    return out


@dataclass(frozen=True)
class Proposal:
    """A sampled box with its overlap, label, and per-modality features."""

    box: Box
    iou: float
    label: str
    features_r: np.ndarray | None = None
    features_t: np.ndarray | None = None


@dataclass(frozen=True)
class Frame:
    """One time step: the ground truth box and the confuser regions."""

    index: int
    ground_truth: Box
    confusers: tuple[Box, ...] = ()


POSITIVE_IOU = 0.7
NEGATIVE_IOU = 0.5
MAX_ATTEMPTS_PER_CLASS = 10_000


def default_spread(gt: Box) -> tuple[float, float, float, float]:
    """Stock jitter: position sigma 0.3 * min(w, h), log-scale sigma 0.15."""
    s = 0.3 * min(gt.w, gt.h)
    return (s, s, 0.15, 0.15)


def _draw_boxes(rng: np.random.Generator, gt: Box, spread, k: int) -> list[Box]:
    sx, sy, slw, slh = spread
    cx = gt.cx + rng.normal(0.0, sx, size=k)
    cy = gt.cy + rng.normal(0.0, sy, size=k)
    w = gt.w * np.exp(rng.normal(0.0, slw, size=k))
    h = gt.h * np.exp(rng.normal(0.0, slh, size=k))
    return [Box(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(cx, cy, w, h)]


def sample_proposals(
    gt: Box,
    n_pos: int = 64,
    n_neg: int = 196,
    spread: tuple[float, float, float, float] | None = None,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> list[Proposal]:
    """Rejection-sample proposals around ``gt`` until both quotas are met.

    Draws are Gaussian in position and log-scale. Overlap above 0.7 labels
    a draw positive, below 0.5 negative; the band between is discarded. A
    draw for an already-filled class is also discarded (sampling continues
    rather than truncating). Raises SamplingError naming the starved class
    when a quota is still unfilled after 10,000 attempts for that class.
    """
    if n_pos < 0 or n_neg < 0:
        raise ContractViolation("quotas must be non-negative")
    if spread is None:
        spread = default_spread(gt)
    if any(s <= 0.0 for s in spread):
        raise ContractViolation(f"spread entries must be positive, got {spread}")
    if rng is None:
        rng = np.random.default_rng(seed)
    positives: list[Proposal] = []
    negatives: list[Proposal] = []
    attempts = 0
    budget = MAX_ATTEMPTS_PER_CLASS * 2
    while len(positives) < n_pos or len(negatives) < n_neg:
        if attempts >= budget:
            starved = []
            if len(positives) < n_pos:
                starved.append("positive")
            if len(negatives) < n_neg:
                starved.append("negative")
            raise SamplingError(
                f"starved class {' and '.join(starved)} after {attempts} attempts "
                f"({len(positives)}/{n_pos} positives, {len(negatives)}/{n_neg} negatives)"
            )
        chunk = min(64, budget - attempts)
        attempts += chunk
        for box in _draw_boxes(rng, gt, spread, chunk):
            ov = iou(box, gt)
            if ov > POSITIVE_IOU and len(positives) < n_pos:
                positives.append(Proposal(box, ov, "positive"))
            elif ov < NEGATIVE_IOU and len(negatives) < n_neg:
                negatives.append(Proposal(box, ov, "negative"))
    return positives + negatives


# ---------------------------------------------------------------------------
# feature oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleParams:
    """Knobs of the feature oracle; all derived vectors are seed-determined."""

    feature_dim: int = 16
    seed: int = 0
    noise_rgb: float = 0.02
    noise_thermal: float = 0.12
    confusability: float = 0.7
    offset_scale: float = 0.4
    drift_rgb: float = 0.0
    drift_thermal: float = 0.0

    def __post_init__(self) -> None:
        if self.feature_dim <= 0:
            raise ContractViolation("feature_dim must be positive")
        if not (0.0 <= self.confusability < 1.0):
            raise ContractViolation("confusability must lie in [0, 1)")
        if self.noise_rgb < 0.0 or self.noise_thermal < 0.0:
            raise ContractViolation("noise scales must be non-negative")


@lru_cache(maxsize=64)
def _oracle_vectors(params: OracleParams) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(params.seed)
    d = params.feature_dim
    return {
        "target": rng.standard_normal(d),
        "background": rng.standard_normal(d),
        "offset_rgb": params.offset_scale * rng.standard_normal(d),
        "offset_thermal": params.offset_scale * rng.standard_normal(d),
        "drift_dir_rgb": rng.standard_normal(d),
        "drift_dir_thermal": rng.standard_normal(d),
    }


def _noise_block(
    params: OracleParams, frame_index: int, modality: str, boxes
) -> np.ndarray:
    """Standard normal noise of shape (len(boxes), feature_dim).

    Each row is keyed on (seed, frame, modality, box bits) through a hash
    digest, so the oracle stays a pure function of its arguments: the same
    box always receives the same noise, in any batch or on its own. The
    digest words become uniforms which a Box-Muller transform turns into
    normals; a per-box counter byte extends the stream for wide features.
    """
    dim = params.feature_dim
    n_pairs = (dim + 1) // 2
    need = 2 * n_pairs
    n_digests = (need + 7) // 8
    head = np.array(
        [params.seed & 0xFFFFFFFFFFFFFFFF, frame_index, MODALITY_CODES[modality]],
        dtype=np.uint64,
    ).tobytes()
    raw = bytearray()
    for box in boxes:
        key = head + np.array(box.to_list(), dtype=np.float64).tobytes()
        for i in range(n_digests):
            raw += hashlib.blake2b(key + bytes([i]), digest_size=64).digest()
    words = np.frombuffer(bytes(raw), dtype=np.uint64).reshape(len(boxes), n_digests * 8)
    u = (words[:, :need].astype(np.float64) + 0.5) * 2.0**-64
    r = np.sqrt(-2.0 * np.log(u[:, :n_pairs]))
    theta = (2.0 * np.pi) * u[:, n_pairs:]
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return z[:, :dim]


def target_reference(params: OracleParams, frame: Frame, modality: str) -> np.ndarray:
    """The oracle's noise-free feature for a perfectly aligned box."""
    vecs = _oracle_vectors(params)
    drift_scale = params.drift_rgb if modality == "rgb" else params.drift_thermal
    return (
        vecs["target"]
        + vecs[f"offset_{modality}"]
        + drift_scale * frame.index * vecs[f"drift_dir_{modality}"]
    )


def features_for_boxes(
    boxes, frame: Frame, modality: str, params: OracleParams
) -> np.ndarray:
    """Oracle features for a whole list of boxes at once, shape (n, dim).

    Row i equals feature_oracle(boxes[i], ...) exactly; batching only
    vectorizes the arithmetic.
    """
    if modality not in MODALITY_CODES:
        raise ContractViolation(f"unknown modality {modality!r}")
    vecs = _oracle_vectors(params)
    arr = _boxes_array(boxes)
    w = _iou_each(arr, frame.ground_truth)
    base = w[:, None] * vecs["target"] + (1.0 - w)[:, None] * vecs["background"]
    if frame.confusers:
        conf = np.max(np.stack([_iou_each(arr, c) for c in frame.confusers]), axis=0)
        pull = params.confusability * conf
    else:
        pull = np.zeros(len(arr))
    mixed = (1.0 - pull)[:, None] * base + pull[:, None] * vecs["target"]
    drift_scale = params.drift_rgb if modality == "rgb" else params.drift_thermal
    offset = (
        vecs[f"offset_{modality}"]
        + drift_scale * frame.index * vecs[f"drift_dir_{modality}"]
    )
    out = mixed + offset
    noise_scale = params.noise_rgb if modality == "rgb" else params.noise_thermal
    if noise_scale > 0.0:
        out = out + noise_scale * _noise_block(params, frame.index, modality, boxes)
    return out


def feature_oracle(box: Box, frame: Frame, modality: str, params: OracleParams) -> np.ndarray:
    """Deterministic stand-in for a backbone feature extractor.

    The base feature interpolates target and background embeddings by the
    box's overlap with the ground truth. Overlap with a confuser region
    pulls the feature toward the target embedding regardless of the true
    overlap, creating near-positive features on negative boxes.
    """
    return features_for_boxes([box], frame, modality, params)[0]


# ---------------------------------------------------------------------------
# sequences and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceConfig:
    """Scene layout for one synthetic trajectory."""

    n_frames: int = 50
    init_box: Box = Box(0.0, 0.0, 1.0, 1.0)
    velocity: tuple[float, float] = (0.05, 0.02)
    motion_jitter: float = 0.01
    confuser_count: int = 4
    confuser_distance: float = 0.9
    confuser_jitter: float = 0.05
    oracle: OracleParams = OracleParams()

    def __post_init__(self) -> None:
        if self.n_frames <= 0:
            raise ContractViolation("n_frames must be positive")
        if self.confuser_count < 0:
            raise ContractViolation("confuser_count must be non-negative")


@dataclass
class SyntheticSequence:
    """Generated frames plus the oracle that produced their features."""

    config: SequenceConfig
    seed: int
    frames: list[Frame]
    oracle: OracleParams


def gen_sequence(config: SequenceConfig, seed: int) -> SyntheticSequence:
    """Generate a constant-velocity trajectory with traveling confusers.

    Pure function of (config, seed): the ground truth drifts by the
    configured velocity plus seeded jitter, and exactly ``confuser_count``
    regions ride along at fixed bearings around the target.
    """
    rng = np.random.default_rng(seed)
    oracle = replace(config.oracle, seed=seed)
    b0 = config.init_box
    radius = config.confuser_distance * max(b0.w, b0.h)
    bearings = [
        2.0 * math.pi * k / config.confuser_count if config.confuser_count else 0.0
        for k in range(config.confuser_count)
    ]
    frames = []
    cx, cy = b0.cx, b0.cy
    for t in range(config.n_frames):
        if t > 0:
            cx += config.velocity[0] + rng.normal(0.0, config.motion_jitter)
            cy += config.velocity[1] + rng.normal(0.0, config.motion_jitter)
        gt = Box(cx, cy, b0.w, b0.h)
        confusers = []
        for ang in bearings:
            jx, jy = rng.normal(0.0, config.confuser_jitter, size=2)
            confusers.append(
                Box(
                    cx + radius * math.cos(ang) + jx,
                    cy + radius * math.sin(ang) + jy,
                    b0.w,
                    b0.h,
                )
            )
        frames.append(Frame(index=t, ground_truth=gt, confusers=tuple(confusers)))
    return SyntheticSequence(config=config, seed=seed, frames=frames, oracle=oracle)


@dataclass
class FrameData:
    """One training unit: anchor features plus labeled proposal features."""

    seq_index: int
    frame_index: int
    gt: Box
    anchor_r: np.ndarray
    anchor_t: np.ndarray
    boxes: list[Box]
    ious: np.ndarray
    positive_mask: np.ndarray
    x_r: np.ndarray
    x_t: np.ndarray


@dataclass
class SequenceData:
    """A generated sequence with per-frame proposal features attached."""

    seq_index: int
    sequence: SyntheticSequence
    frames: list[FrameData]


@dataclass(frozen=True)
class DatasetConfig:
    """Layout of a full synthetic dataset."""

    n_sequences: int = 20
    n_pos: int = 64
    n_neg: int = 196
    sequence: SequenceConfig = SequenceConfig()

    def __post_init__(self) -> None:
        if self.n_sequences <= 0:
            raise ContractViolation("n_sequences must be positive")


def build_frame_data(
    seq: SyntheticSequence, frame: Frame, seq_index: int, n_pos: int, n_neg: int, seed: int
) -> FrameData:
    """Sample proposals for one frame and attach oracle features."""
    proposals = sample_proposals(frame.ground_truth, n_pos, n_neg, seed=seed)
    boxes = [p.box for p in proposals]
    x_r = features_for_boxes(boxes, frame, "rgb", seq.oracle)
    x_t = features_for_boxes(boxes, frame, "thermal", seq.oracle)
    return FrameData(
        seq_index=seq_index,
        frame_index=frame.index,
        gt=frame.ground_truth,
        anchor_r=feature_oracle(frame.ground_truth, frame, "rgb", seq.oracle),
        anchor_t=feature_oracle(frame.ground_truth, frame, "thermal", seq.oracle),
        boxes=boxes,
        ious=np.array([p.iou for p in proposals]),
        positive_mask=np.array([p.label == "positive" for p in proposals]),
        x_r=x_r,
        x_t=x_t,
    )


def generate_dataset(config: DatasetConfig, seed: int) -> list[SequenceData]:
    """Generate ``n_sequences`` scenes with proposals; pure in (config, seed)."""
    ss = np.random.SeedSequence([seed, 0x5E0])
    seq_seeds = ss.generate_state(config.n_sequences * 2, dtype=np.uint32)
    out = []
    for i in range(config.n_sequences):
        seq = gen_sequence(config.sequence, int(seq_seeds[2 * i]))
        frames = [
            build_frame_data(
                seq, f, i, config.n_pos, config.n_neg, int(seq_seeds[2 * i + 1]) + f.index
            )
            for f in seq.frames
        ]
        out.append(SequenceData(seq_index=i, sequence=seq, frames=frames))
    return out


# ---------------------------------------------------------------------------
# JSON-lines serialization
# ---------------------------------------------------------------------------


def write_dataset(path, dataset: list[SequenceData]) -> None:
    """Write a dataset as JSON lines: a sequence header, then one frame per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for sd in dataset:
            header = {
                "type": "sequence",
                "seq": sd.seq_index,
                "seed": sd.sequence.seed,
                "oracle": _oracle_to_dict(sd.sequence.oracle),
                "config": _seq_config_to_dict(sd.sequence.config),
            }
            fh.write(json.dumps(header) + "\n")
            for fd, frame in zip(sd.frames, sd.sequence.frames):
                line = {
                    "type": "frame",
                    "seq": sd.seq_index,
                    "frame": fd.frame_index,
                    "ground_truth": fd.gt.to_list(),
                    "confusers": [c.to_list() for c in frame.confusers],
                    "anchor_r": fd.anchor_r.tolist(),
                    "anchor_t": fd.anchor_t.tolist(),
                    "proposals": [
                        {
                            "box": b.to_list(),
                            "iou": float(ov),
                            "label": "positive" if pos else "negative",
                            "features_r": fr.tolist(),
                            "features_t": ft.tolist(),
                        }
                        for b, ov, pos, fr, ft in zip(
                            fd.boxes, fd.ious, fd.positive_mask, fd.x_r, fd.x_t
                        )
                    ],
                }
                fh.write(json.dumps(line) + "\n")


def read_dataset(path) -> list[SequenceData]:
    """Inverse of ``write_dataset``; round-trips all values exactly."""
    sequences: dict[int, SequenceData] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            doc = json.loads(raw)
            if doc["type"] == "sequence":
                config = _seq_config_from_dict(doc["config"])
                oracle = _oracle_from_dict(doc["oracle"])
                seq = SyntheticSequence(
                    config=config, seed=doc["seed"], frames=[], oracle=oracle
                )
                sequences[doc["seq"]] = SequenceData(
                    seq_index=doc["seq"], sequence=seq, frames=[]
                )
            else:
                sd = sequences[doc["seq"]]
                gt = Box.from_list(doc["ground_truth"])
                frame = Frame(
                    index=doc["frame"],
                    ground_truth=gt,
                    confusers=tuple(Box.from_list(c) for c in doc["confusers"]),
                )
                sd.sequence.frames.append(frame)
                props = doc["proposals"]
                sd.frames.append(
                    FrameData(
                        seq_index=doc["seq"],
                        frame_index=doc["frame"],
                        gt=gt,
                        anchor_r=np.array(doc["anchor_r"], dtype=np.float64),
                        anchor_t=np.array(doc["anchor_t"], dtype=np.float64),
                        boxes=[Box.from_list(p["box"]) for p in props],
                        ious=np.array([p["iou"] for p in props]),
                        positive_mask=np.array([p["label"] == "positive" for p in props]),
                        x_r=np.array([p["features_r"] for p in props]),
                        x_t=np.array([p["features_t"] for p in props]),
                    )
                )
    return [sequences[k] for k in sorted(sequences)]


def _oracle_to_dict(o: OracleParams) -> dict:
    return {
        "feature_dim": o.feature_dim,
        "seed": o.seed,
        "noise_rgb": o.noise_rgb,
        "noise_thermal": o.noise_thermal,
        "confusability": o.confusability,
        "offset_scale": o.offset_scale,
        "drift_rgb": o.drift_rgb,
        "drift_thermal": o.drift_thermal,
    }


def _oracle_from_dict(doc: dict) -> OracleParams:
    return OracleParams(**doc)


def _seq_config_to_dict(c: SequenceConfig) -> dict:
    return {
        "n_frames": c.n_frames,
        "init_box": c.init_box.to_list(),
        "velocity": list(c.velocity),
        "motion_jitter": c.motion_jitter,
        "confuser_count": c.confuser_count,
        "confuser_distance": c.confuser_distance,
        "confuser_jitter": c.confuser_jitter,
        "oracle": _oracle_to_dict(c.oracle),
    }


def _seq_config_from_dict(doc: dict) -> SequenceConfig:
    return SequenceConfig(
        n_frames=doc["n_frames"],
        init_box=Box.from_list(doc["init_box"]),
        velocity=tuple(doc["velocity"]),
        motion_jitter=doc["motion_jitter"],
        confuser_count=doc["confuser_count"],
        confuser_distance=doc["confuser_distance"],
        confuser_jitter=doc["confuser_jitter"],
        oracle=_oracle_from_dict(doc["oracle"]),
    )
