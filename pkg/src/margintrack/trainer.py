"""Training loop: per-frame batches, two-tier SGD with momentum.

Each step embeds the ground-truth anchor together with that frame's
proposals (one batch per modality, so BN statistics are shared), mines the
confusing sets, applies the structured band losses plus the cross-modality
hinge, and in parallel trains the fusion head and classifier on fused
features. The metric path and the classification path share no parameters
unless the optional feature adapter is enabled, in which case both paths
feed it and it updates at the feature-tier learning rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .embedding import FeedForwardNet, default_embed_spec, init_classifier, init_net
from .fusion import FusionHead, fuse_backward, fuse_batch, init_fusion_head
from .losses import (
    band_membership,
    band_set_terms,
    cross_modality_terms,
    hardest_triplet_terms,
    softmax_ce,
)
from .metricspace import (
    ContractViolation,
    anchor_distance_grads,
    anchor_distances,
)
from .mining import MarginParams, mine_from_distances
from .synthdata import FrameData, SequenceData

BAND_EPS = 0.05
METRIC_VARIANTS = ("mmsl", "triplet")

HISTORY_COLUMNS = (
    "step",
    "epoch",
    "seq",
    "frame",
    "l_rgb",
    "l_t",
    "l_cross",
    "l_cls",
    "total",
    "mined_pos_r",
    "mined_neg_r",
    "mined_pos_t",
    "mined_neg_t",
    "band_pos_r",
    "band_neg_r",
    "band_pos_t",
    "band_neg_t",
)


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of a training run; serializable as a flat key-value file."""

    margin: MarginParams = MarginParams()
    lr_feature: float = 1e-4
    lr_fc: float = 1e-3
    momentum: float = 0.9
    epochs: int = 30
    n_pos: int = 64
    n_neg: int = 196
    seed: int = 0
    distance_convention: str = "squared"
    w_mmsl: float = 1.0
    w_cls: float = 1.0
    cross_positive_reduction: str = "max"
    metric_variant: str = "mmsl"
    use_cross: bool = True
    use_rgbt_terms: bool = True
    fusion_gate_mode: str = "learned"
    train_adapter: bool = False
    embed_hidden: tuple[int, ...] = (64,)
    embed_out: int = 32
    cls_hidden: tuple[int, ...] = (32, 16)

    def __post_init__(self) -> None:
        if self.distance_convention not in ("squared", "unsquared"):
            raise ContractViolation(
                f"unknown distance convention {self.distance_convention!r}"
            )
        if self.metric_variant not in METRIC_VARIANTS:
            raise ContractViolation(
                f"metric_variant must be one of {METRIC_VARIANTS}"
            )
        if self.epochs <= 0:
            raise ContractViolation("epochs must be positive")
        for name in ("lr_feature", "lr_fc"):
            lr = getattr(self, name)
            if not math.isfinite(lr) or lr < 0.0:
                raise ContractViolation(f"{name} must be finite and non-negative")
        if not (0.0 <= self.momentum < 1.0):
            raise ContractViolation("momentum must lie in [0, 1)")
        object.__setattr__(self, "embed_hidden", tuple(self.embed_hidden))
        object.__setattr__(self, "cls_hidden", tuple(self.cls_hidden))

    # -- flat key-value form ------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "alpha": self.margin.alpha,
            "beta": self.margin.beta,
            "m": self.margin.m,
            "delta": self.margin.delta,
            "lr_feature": self.lr_feature,
            "lr_fc": self.lr_fc,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "seed": self.seed,
            "distance_convention": self.distance_convention,
            "w_mmsl": self.w_mmsl,
            "w_cls": self.w_cls,
            "cross_positive_reduction": self.cross_positive_reduction,
            "metric_variant": self.metric_variant,
            "use_cross": self.use_cross,
            "use_rgbt_terms": self.use_rgbt_terms,
            "fusion_gate_mode": self.fusion_gate_mode,
            "train_adapter": self.train_adapter,
            "embed_hidden": list(self.embed_hidden),
            "embed_out": self.embed_out,
            "cls_hidden": list(self.cls_hidden),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        margin = MarginParams(
            alpha=doc.pop("alpha", 1.6),
            beta=doc.pop("beta", 0.1),
            m=doc.pop("m", 0.2),
            delta=doc.pop("delta", 0.2),
        )
        known = {
            "lr_feature",
            "lr_fc",
            "momentum",
            "epochs",
            "n_pos",
            "n_neg",
            "seed",
            "distance_convention",
            "w_mmsl",
            "w_cls",
            "cross_positive_reduction",
            "metric_variant",
            "use_cross",
            "use_rgbt_terms",
            "fusion_gate_mode",
            "train_adapter",
            "embed_hidden",
            "embed_out",
            "cls_hidden",
        }
        unknown = set(doc) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        if "embed_hidden" in doc:
            doc["embed_hidden"] = tuple(doc["embed_hidden"])
        if "cls_hidden" in doc:
            doc["cls_hidden"] = tuple(doc["cls_hidden"])
        return cls(margin=margin, **doc)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Models:
    """All trainable components of one run."""

    feature_dim: int
    net_r: FeedForwardNet
    net_t: FeedForwardNet
    fusion: FusionHead
    classifier: FeedForwardNet
    adapter_r: np.ndarray | None = None
    adapter_t: np.ndarray | None = None

    def adapted(self, x: np.ndarray, modality: str) -> np.ndarray:
        a = self.adapter_r if modality == "rgb" else self.adapter_t
        return x if a is None else x @ a


def _component_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def init_models(config: TrainConfig, feature_dim: int) -> Models:
    """Deterministically initialize every component from config.seed."""
    spec = default_embed_spec(feature_dim, config.embed_hidden, config.embed_out)
    adapter = np.eye(feature_dim) if config.train_adapter else None
    return Models(
        feature_dim=feature_dim,
        net_r=init_net(spec, _component_seed(config.seed, 1), modality="rgb"),
        net_t=init_net(spec, _component_seed(config.seed, 2), modality="thermal"),
        fusion=init_fusion_head(
            feature_dim, _component_seed(config.seed, 3), gate_mode=config.fusion_gate_mode
        ),
        classifier=init_classifier(
            2 * feature_dim, config.cls_hidden, _component_seed(config.seed, 4)
        ),
        adapter_r=adapter,
        adapter_t=None if adapter is None else adapter.copy(),
    )


class StepRecord(NamedTuple):
    step: int
    epoch: int
    seq: int
    frame: int
    l_rgb: float
    l_t: float
    l_cross: float
    l_cls: float
    total: float
    mined_pos_r: int
    mined_neg_r: int
    mined_pos_t: int
    mined_neg_t: int
    band_pos_r: float
    band_neg_r: float
    band_pos_t: float
    band_neg_t: float


@dataclass
class TrainHistory:
    """Per-step records plus mined-id bookkeeping.

    ``mined_union`` accumulates, over the whole run, every sample id the
    miner ever flagged as confusing, keyed (seq_index, frame_index,
    modality). The band-occupancy report judges these ids by their final
    distances.
    """

    steps: list[StepRecord] = field(default_factory=list)
    mined_union: dict = field(default_factory=dict)

    def totals_consistent(self, config: TrainConfig, tol: float = 1e-12) -> bool:
        for r in self.steps:
            expect = config.w_mmsl * (r.l_rgb + r.l_t + r.l_cross) + config.w_cls * r.l_cls
            if abs(expect - r.total) > tol:
                return False
        return True


@dataclass
class TrainerState:
    velocities: dict = field(default_factory=dict)

    def sgd(self, key: str, params: np.ndarray, grad: np.ndarray, lr: float, momentum: float) -> np.ndarray:
        """v <- momentum * v - lr * grad; params <- params + v."""
        v = self.velocities.get(key)
        if v is None:
            v = np.zeros_like(params)
            self.velocities[key] = v
        v *= momentum
        v -= lr * grad
        return params + v


def _metric_path(net, anchor_feat, x, positive_mask, config):
    """Embed one modality's batch and return everything its losses need."""
    batch = np.vstack([anchor_feat[None, :], x])
    emb, cache = net.forward(batch, train=True)
    anchor_e = emb[0]
    e = emb[1:]
    d = anchor_distances(anchor_e, e, config.distance_convention)
    pos_idx, neg_idx = mine_from_distances(d, positive_mask, config.margin)
    return {
        "cache": cache,
        "anchor_e": anchor_e,
        "e": e,
        "d": d,
        "pos_idx": pos_idx,
        "neg_idx": neg_idx,
    }


def _occupancy(d: np.ndarray, positive_mask: np.ndarray, margin: MarginParams) -> tuple[float, float]:
    pos_d = d[positive_mask]
    neg_d = d[~positive_mask]
    bp = float(band_membership(pos_d, True, margin, BAND_EPS).mean()) if pos_d.size else 0.0
    bn = float(band_membership(neg_d, False, margin, BAND_EPS).mean()) if neg_d.size else 0.0
    return bp, bn


def train_step(models: Models, frame: FrameData, config: TrainConfig, state: TrainerState) -> dict:
    """One optimization step on one frame; returns the step's scalars."""
    mask = frame.positive_mask
    xr = models.adapted(frame.x_r, "rgb")
    xt = models.adapted(frame.x_t, "thermal")
    ar = models.adapted(frame.anchor_r[None, :], "rgb")[0]
    at = models.adapted(frame.anchor_t[None, :], "thermal")[0]

    paths = {
        "rgb": _metric_path(models.net_r, ar, xr, mask, config),
        "thermal": _metric_path(models.net_t, at, xt, mask, config),
    }

    dd = {m: np.zeros_like(paths[m]["d"]) for m in paths}
    losses = {"l_rgb": 0.0, "l_t": 0.0, "l_cross": 0.0}
    if config.metric_variant == "mmsl":
        if config.use_rgbt_terms:
            for m, key in (("rgb", "l_rgb"), ("thermal", "l_t")):
                p = paths[m]
                l_p, l_n, dd_m = band_set_terms(
                    p["d"], p["pos_idx"], p["neg_idx"], config.margin
                )
                losses[key] = l_p + l_n
                dd[m] += dd_m
        if config.use_cross:
            pos_pos = np.nonzero(mask)[0]
            neg_pos = np.nonzero(~mask)[0]
            cross, (g_pr, g_nr, g_pt, g_nt) = cross_modality_terms(
                paths["rgb"]["d"][pos_pos],
                paths["rgb"]["d"][neg_pos],
                paths["thermal"]["d"][pos_pos],
                paths["thermal"]["d"][neg_pos],
                config.margin.delta,
                config.cross_positive_reduction,
            )
            losses["l_cross"] = cross
            dd["rgb"][pos_pos] += g_pr
            dd["rgb"][neg_pos] += g_nr
            dd["thermal"][pos_pos] += g_pt
            dd["thermal"][neg_pos] += g_nt
    else:  # triplet baseline: per-modality hardest-negative triplets
        pos_pos = np.nonzero(mask)[0]
        neg_pos = np.nonzero(~mask)[0]
        for m, key in (("rgb", "l_rgb"), ("thermal", "l_t")):
            d = paths[m]["d"]
            loss, ddp, ddn = hardest_triplet_terms(
                d[pos_pos], d[neg_pos], config.margin.m
            )
            losses[key] = loss
            dd[m][pos_pos] += ddp
            dd[m][neg_pos] += ddn

    # chain d(loss)/d(distance) into the embeddings and through the nets
    d_adapter_in = {}
    for m, net, key in (("rgb", models.net_r, "net_r"), ("thermal", models.net_t, "net_t")):
        p = paths[m]
        g_rows, g_anchor = anchor_distance_grads(
            p["anchor_e"], p["e"], config.distance_convention
        )
        d_e = dd[m][:, None] * g_rows
        d_anchor = (dd[m][:, None] * g_anchor).sum(axis=0)
        d_emb = np.vstack([d_anchor[None, :], d_e]) * config.w_mmsl
        d_in, grads = net.backward(p["cache"], d_emb)
        flat = net.flat_grads(grads)
        net.set_params(state.sgd(key, net.get_params(), flat, config.lr_fc, config.momentum))
        d_adapter_in[m] = d_in

    # classification path on fused (adapted) features
    fused, fcache = fuse_batch(models.fusion, xr, xt)
    logits, ccache = models.classifier.forward(fused, train=False)
    targets = np.where(mask, 0, 1)
    l_cls, dlogits = softmax_ce(logits, targets)
    d_fused, cls_grads = models.classifier.backward(ccache, dlogits * config.w_cls)
    dxr_f, dxt_f, fusion_flat = fuse_backward(models.fusion, fcache, d_fused)
    models.classifier.set_params(
        state.sgd(
            "classifier",
            models.classifier.get_params(),
            models.classifier.flat_grads(cls_grads),
            config.lr_fc,
            config.momentum,
        )
    )
    if models.fusion.gate_mode == "learned":
        models.fusion.set_params(
            state.sgd(
                "fusion", models.fusion.get_params(), fusion_flat, config.lr_fc, config.momentum
            )
        )

    if config.train_adapter and models.adapter_r is not None:
        for m, raw_x, raw_a, dxf, akey in (
            ("rgb", frame.x_r, frame.anchor_r, dxr_f, "adapter_r"),
            ("thermal", frame.x_t, frame.anchor_t, dxt_f, "adapter_t"),
        ):
            d_in = d_adapter_in[m]
            d_adapter = raw_a[:, None] @ d_in[0][None, :] + raw_x.T @ (d_in[1:] + dxf)
            adapter = getattr(models, akey)
            setattr(
                models,
                akey,
                state.sgd(akey, adapter, d_adapter, config.lr_feature, config.momentum),
            )

    bp_r, bn_r = _occupancy(paths["rgb"]["d"], mask, config.margin)
    bp_t, bn_t = _occupancy(paths["thermal"]["d"], mask, config.margin)
    total = config.w_mmsl * (losses["l_rgb"] + losses["l_t"] + losses["l_cross"])
    total += config.w_cls * l_cls
    return {
        "l_rgb": losses["l_rgb"],
        "l_t": losses["l_t"],
        "l_cross": losses["l_cross"],
        "l_cls": l_cls,
        "total": total,
        "mined": {
            "rgb": (paths["rgb"]["pos_idx"], paths["rgb"]["neg_idx"]),
            "thermal": (paths["thermal"]["pos_idx"], paths["thermal"]["neg_idx"]),
        },
        "band": (bp_r, bn_r, bp_t, bn_t),
    }


def train(config: TrainConfig, dataset: list[SequenceData]) -> tuple[Models, TrainHistory]:
    """Train on every frame of ``dataset`` for the configured epoch count.

    Frames are visited in a seeded shuffle per epoch; the run is a pure
    function of (config, dataset), bitwise reproducible.
    """
    frames = [fd for sd in dataset for fd in sd.frames]
    if not frames:
        raise ContractViolation("training needs at least one frame")
    feature_dim = frames[0].x_r.shape[1]
    models = init_models(config, feature_dim)
    state = TrainerState()
    history = TrainHistory()
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 5]))
    step = 0
    for epoch in range(config.epochs):
        for idx in order_rng.permutation(len(frames)):
            fd = frames[idx]
            out = train_step(models, fd, config, state)
            for modality in ("rgb", "thermal"):
                key = (fd.seq_index, fd.frame_index, modality)
                entry = history.mined_union.setdefault(key, (set(), set()))
                entry[0].update(int(i) for i in out["mined"][modality][0])
                entry[1].update(int(i) for i in out["mined"][modality][1])
            history.steps.append(
                StepRecord(
                    step=step,
                    epoch=epoch,
                    seq=fd.seq_index,
                    frame=fd.frame_index,
                    l_rgb=float(out["l_rgb"]),
                    l_t=float(out["l_t"]),
                    l_cross=float(out["l_cross"]),
                    l_cls=float(out["l_cls"]),
                    total=float(out["total"]),
                    mined_pos_r=len(out["mined"]["rgb"][0]),
                    mined_neg_r=len(out["mined"]["rgb"][1]),
                    mined_pos_t=len(out["mined"]["thermal"][0]),
                    mined_neg_t=len(out["mined"]["thermal"][1]),
                    band_pos_r=out["band"][0],
                    band_neg_r=out["band"][1],
                    band_pos_t=out["band"][2],
                    band_neg_t=out["band"][3],
                )
            )
            step += 1
    return models, history


# ---------------------------------------------------------------------------
# artifacts: model JSON and history CSV
# ---------------------------------------------------------------------------


def models_to_dict(models: Models, config: TrainConfig | None = None) -> dict:
    doc = {
        "feature_dim": models.feature_dim,
        "net_r": models.net_r.to_dict(),
        "net_t": models.net_t.to_dict(),
        "fusion": models.fusion.to_dict(),
        "classifier": models.classifier.to_dict(),
        "adapter_r": None if models.adapter_r is None else models.adapter_r.tolist(),
        "adapter_t": None if models.adapter_t is None else models.adapter_t.tolist(),
    }
    if config is not None:
        doc["config"] = config.to_dict()
    return doc


def models_from_dict(doc: dict) -> Models:
    return Models(
        feature_dim=doc["feature_dim"],
        net_r=FeedForwardNet.from_dict(doc["net_r"]),
        net_t=FeedForwardNet.from_dict(doc["net_t"]),
        fusion=FusionHead.from_dict(doc["fusion"]),
        classifier=FeedForwardNet.from_dict(doc["classifier"]),
        adapter_r=None if doc["adapter_r"] is None else np.array(doc["adapter_r"]),
        adapter_t=None if doc["adapter_t"] is None else np.array(doc["adapter_t"]),
    )


def save_models(path, models: Models, config: TrainConfig | None = None) -> None:
    """Write the model document as JSON; floats round-trip losslessly."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(models_to_dict(models, config), fh, sort_keys=True)
        fh.write("\n")


def load_models(path) -> Models:
    with open(path, "r", encoding="utf-8") as fh:
        return models_from_dict(json.load(fh))


def write_history_csv(path, history: TrainHistory) -> None:
    """Fixed-column CSV; floats are written with full round-trip precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in history.steps:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in r) + "\n")


def read_history_csv(path) -> list[StepRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != HISTORY_COLUMNS:
            raise ContractViolation(f"unexpected history columns: {header}")
        rows = []
        for line in fh:
            vals = line.strip().split(",")
            rows.append(
                StepRecord(
                    *(
                        int(v) if i in (0, 1, 2, 3, 9, 10, 11, 12) else float(v)
                        for i, v in enumerate(vals)
                    )
                )
            )
    return rows
