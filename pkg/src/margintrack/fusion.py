"""Attention-gated fusion of two modality feature vectors.

Each modality gets its own gate transform; gates are sigmoid(relu(W d + b))
applied elementwise before concatenation, so the fused vector is twice as
wide as each input. ``gate_mode`` degrades the head to the parameterless
sigmoid(d) gating or to plain concatenation for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metricspace import ContractViolation

GATE_MODES = ("learned", "sigmoid_only", "off")


@dataclass
class FusionHead:
    """Per-modality gate transforms (weight matrix + bias each)."""

    w_r: np.ndarray
    b_r: np.ndarray
    w_t: np.ndarray
    b_t: np.ndarray
    gate_mode: str = "learned"

    def __post_init__(self) -> None:
        if self.gate_mode not in GATE_MODES:
            raise ContractViolation(
                f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}"
            )
        d = self.w_r.shape[0]
        if self.w_r.shape != (d, d) or self.w_t.shape != (d, d):
            raise ContractViolation("gate transforms must be square matrices")
        if self.b_r.shape != (d,) or self.b_t.shape != (d,):
            raise ContractViolation("gate biases must match the feature dim")

    @property
    def dim(self) -> int:
        return self.w_r.shape[0]

    def get_params(self) -> np.ndarray:
        return np.concatenate(
            [self.w_r.ravel(), self.b_r, self.w_t.ravel(), self.b_t]
        )

    def set_params(self, theta: np.ndarray) -> None:
        d = self.dim
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != 2 * d * d + 2 * d:
            raise ContractViolation("parameter vector does not match head size")
        pos = 0
        self.w_r = theta[pos : pos + d * d].reshape(d, d).copy()
        pos += d * d
        self.b_r = theta[pos : pos + d].copy()
        pos += d
        self.w_t = theta[pos : pos + d * d].reshape(d, d).copy()
        pos += d * d
        self.b_t = theta[pos : pos + d].copy()

    def to_dict(self) -> dict:
        return {
            "gate_mode": self.gate_mode,
            "w_r": self.w_r.tolist(),
            "b_r": self.b_r.tolist(),
            "w_t": self.w_t.tolist(),
            "b_t": self.b_t.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FusionHead":
        return cls(
            w_r=np.array(doc["w_r"], dtype=np.float64),
            b_r=np.array(doc["b_r"], dtype=np.float64),
            w_t=np.array(doc["w_t"], dtype=np.float64),
            b_t=np.array(doc["b_t"], dtype=np.float64),
            gate_mode=doc["gate_mode"],
        )


@dataclass
class FusedFeature:
    """Concatenated gated features plus the applied gates."""

    components: np.ndarray
    gates_r: np.ndarray
    gates_t: np.ndarray


def init_fusion_head(feature_dim: int, seed: int, gate_mode: str = "learned") -> FusionHead:
    if feature_dim <= 0:
        raise ContractViolation(f"feature_dim must be positive, got {feature_dim}")
    rng = np.random.default_rng(seed)
    return FusionHead(
        w_r=rng.standard_normal((feature_dim, feature_dim)) / np.sqrt(feature_dim),
        b_r=np.zeros(feature_dim),
        w_t=rng.standard_normal((feature_dim, feature_dim)) / np.sqrt(feature_dim),
        b_t=np.zeros(feature_dim),
        gate_mode=gate_mode,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid clamped into the open interval (0, 1).

    The clamp matters for extreme inputs where the quotient rounds to
    exactly 0.0 or 1.0: a gate of exactly 1 would pass a feature through
    untouched and a gate of exactly 0 would erase it, both outside the
    gate contract. One ulp inside the interval preserves the contract and
    is indistinguishable in value.
    """
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def fuse_batch(head: FusionHead, x_r: np.ndarray, x_t: np.ndarray):
    """Fuse two (n, d) batches; returns ((n, 2d) output, cache)."""
    x_r = np.asarray(x_r, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_r.shape != x_t.shape or x_r.ndim != 2:
        raise ContractViolation("modality batches must be matching 2-D arrays")
    if x_r.shape[1] != head.dim:
        raise ContractViolation(
            f"feature dim {x_r.shape[1]} does not match head dim {head.dim}"
        )
    cache = {"x_r": x_r, "x_t": x_t}
    gates = []
    for x, w, b, key in ((x_r, head.w_r, head.b_r, "r"), (x_t, head.w_t, head.b_t, "t")):
        if head.gate_mode == "learned":
            z = x @ w + b
            a = np.maximum(z, 0.0)
            g = _sigmoid(a)
            cache[f"z_{key}"] = z
            cache[f"g_{key}"] = g
        elif head.gate_mode == "sigmoid_only":
            g = _sigmoid(x)
            cache[f"g_{key}"] = g
        else:  # off: plain concatenation
            g = np.ones_like(x)
            cache[f"g_{key}"] = g
        gates.append(g)
    fused = np.concatenate([gates[0] * x_r, gates[1] * x_t], axis=1)
    return fused, cache


def fuse_backward(head: FusionHead, cache, d_fused: np.ndarray):
    """Backprop through ``fuse_batch``; returns (d_x_r, d_x_t, head_grads).

    ``head_grads`` is the flat gradient aligned with ``head.get_params()``
    (zeros when the gate mode has no parameters).
    """
    d = head.dim
    d_fused = np.asarray(d_fused, dtype=np.float64)
    d_or = d_fused[:, :d]
    d_ot = d_fused[:, d:]
    grads = {}
    d_inputs = []
    for x, d_o, key, w in (
        (cache["x_r"], d_or, "r", head.w_r),
        (cache["x_t"], d_ot, "t", head.w_t),
    ):
        g = cache[f"g_{key}"]
        dx = d_o * g
        dg = d_o * x
        if head.gate_mode == "learned":
            z = cache[f"z_{key}"]
            da = dg * g * (1.0 - g)
            dz = da * (z > 0.0)
            grads[f"w_{key}"] = x.T @ dz
            grads[f"b_{key}"] = dz.sum(axis=0)
            dx = dx + dz @ w.T
        elif head.gate_mode == "sigmoid_only":
            dx = dx + dg * g * (1.0 - g)
            grads[f"w_{key}"] = np.zeros((d, d))
            grads[f"b_{key}"] = np.zeros(d)
        else:
            grads[f"w_{key}"] = np.zeros((d, d))
            grads[f"b_{key}"] = np.zeros(d)
        d_inputs.append(dx)
    flat = np.concatenate(
        [grads["w_r"].ravel(), grads["b_r"], grads["w_t"].ravel(), grads["b_t"]]
    )
    return d_inputs[0], d_inputs[1], flat


def fuse(head: FusionHead, d_r, d_t) -> FusedFeature:
    """Fuse a single pair of modality vectors into a FusedFeature."""
    d_r = np.asarray(d_r, dtype=np.float64)
    d_t = np.asarray(d_t, dtype=np.float64)
    if d_r.ndim != 1 or d_t.ndim != 1:
        raise ContractViolation("fuse expects 1-D feature vectors")
    if d_r.shape[0] != d_t.shape[0]:
        raise ContractViolation(
            f"modality dims differ: {d_r.shape[0]} vs {d_t.shape[0]}"
        )
    fused, cache = fuse_batch(head, d_r[None, :], d_t[None, :])
    return FusedFeature(
        components=fused[0],
        gates_r=cache["g_r"][0],
        gates_t=cache["g_t"][0],
    )
