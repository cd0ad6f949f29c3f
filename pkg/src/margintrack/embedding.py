"""Small fully connected embedding networks with batch normalization.

The networks are plain numpy with hand-written backward passes; every
gradient here is validated against ``metricspace.finite_diff_check``. One
class covers both the per-modality embedding nets (FC + BN) and the
classification head (FC only, ``use_bn=False``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .metricspace import ContractViolation

MODALITIES = ("rgb", "thermal")


@dataclass(frozen=True)
class NetSpec:
    """Architecture description for a feed-forward net.

    ``layer_dims`` lists the input dimension followed by each layer's output
    dimension. ``activations`` holds one entry per layer ("relu" or "none");
    the default is relu everywhere except the last layer.
    """

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...] | None = None
    use_bn: bool = True
    bn_epsilon: float = 1e-8
    bn_momentum: float = 0.1

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ContractViolation("layer_dims needs an input and an output dim")
        if any(d <= 0 for d in dims):
            raise ContractViolation(f"layer_dims must be positive, got {dims}")
        acts = self.activations
        if acts is None:
            acts = tuple("relu" for _ in dims[1:-1]) + ("none",)
        else:
            acts = tuple(acts)
        if len(acts) != len(dims) - 1:
            raise ContractViolation(
                f"need {len(dims) - 1} activations, got {len(acts)}"
            )
        if any(a not in ("relu", "none") for a in acts):
            raise ContractViolation(f"unknown activation in {acts}")
        object.__setattr__(self, "activations", acts)
        if not (self.bn_epsilon > 0.0):
            raise ContractViolation("bn_epsilon must be positive")
        if not (0.0 < self.bn_momentum < 1.0):
            raise ContractViolation("bn_momentum must lie in (0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class FeedForwardNet:
    """FC(+BN) network with explicit forward/backward passes."""

    spec: NetSpec
    tag: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray]
    bn_shift: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]

    # ---- construction -------------------------------------------------

    @classmethod
    def init(cls, spec: NetSpec, seed: int, tag: str = "net") -> "FeedForwardNet":
        rng = np.random.default_rng(seed)
        weights, biases, scales, shifts, rmeans, rvars = [], [], [], [], [], []
        for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
            weights.append(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
            biases.append(np.zeros(d_out))
            scales.append(np.ones(d_out))
            shifts.append(np.zeros(d_out))
            rmeans.append(np.zeros(d_out))
            rvars.append(np.ones(d_out))
        return cls(spec, tag, weights, biases, scales, shifts, rmeans, rvars)

    def copy(self) -> "FeedForwardNet":
        return copy.deepcopy(self)

    # ---- forward / backward -------------------------------------------

    def forward(self, x: np.ndarray, train: bool, update_running: bool = True):
        """Run a batch through the net; returns (output, cache).

        In train mode BN uses batch statistics (which requires >= 2 rows)
        and, unless ``update_running`` is cleared, folds them into the
        running statistics with the momentum rule. In infer mode the
        running statistics are used and nothing is mutated.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ContractViolation(f"expected a 2-D batch, got shape {x.shape}")
        if x.shape[1] != self.spec.layer_dims[0]:
            raise ContractViolation(
                f"input dim {x.shape[1]} does not match net input "
                f"{self.spec.layer_dims[0]}"
            )
        if train and self.spec.use_bn and x.shape[0] < 2:
            raise ContractViolation(
                "train-mode batch normalization needs a batch of at least 2"
            )
        cache = []
        a = x
        mom = self.spec.bn_momentum
        for k in range(self.spec.n_layers):
            z = a @ self.weights[k] + self.biases[k]
            if self.spec.use_bn:
                if train:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_running:
                        self.running_mean[k] = (1.0 - mom) * self.running_mean[k] + mom * mu
                        self.running_var[k] = (1.0 - mom) * self.running_var[k] + mom * var
                else:
                    mu = self.running_mean[k]
                    var = self.running_var[k]
                inv = 1.0 / np.sqrt(var + self.spec.bn_epsilon)
                xhat = (z - mu) * inv
                h = self.bn_scale[k] * xhat + self.bn_shift[k]
            else:
                inv = None
                xhat = None
                h = z
            if self.spec.activations[k] == "relu":
                out = np.maximum(h, 0.0)
            else:
                out = h
            cache.append({"x": a, "z": z, "inv": inv, "xhat": xhat, "h": h})
            a = out
        return a, {"layers": cache, "train": train}

    def backward(self, cache, d_out: np.ndarray):
        """Backprop ``d_out`` through a cached forward; returns (d_x, grads).

        ``grads`` mirrors the trainable parameters: per layer d_weight,
        d_bias and, when BN is enabled, d_scale and d_shift. Train-mode
        BN backward accounts for the batch statistics.
        """
        grads = []
        da = np.asarray(d_out, dtype=np.float64)
        train = cache["train"]
        for k in reversed(range(self.spec.n_layers)):
            c = cache["layers"][k]
            if self.spec.activations[k] == "relu":
                dh = da * (c["h"] > 0.0)
            else:
                dh = da
            if self.spec.use_bn:
                d_scale = np.sum(dh * c["xhat"], axis=0)
                d_shift = np.sum(dh, axis=0)
                dxhat = dh * self.bn_scale[k]
                if train:
                    n = c["z"].shape[0]
                    dz = (c["inv"] / n) * (
                        n * dxhat
                        - np.sum(dxhat, axis=0)
                        - c["xhat"] * np.sum(dxhat * c["xhat"], axis=0)
                    )
                else:
                    dz = dxhat * c["inv"]
            else:
                d_scale = None
                d_shift = None
                dz = dh
            d_w = c["x"].T @ dz
            d_b = np.sum(dz, axis=0)
            da = dz @ self.weights[k].T
            grads.append({"weight": d_w, "bias": d_b, "scale": d_scale, "shift": d_shift})
        grads.reverse()
        return da, grads

    # ---- flat parameter view ------------------------------------------

    def get_params(self) -> np.ndarray:
        parts = []
        for k in range(self.spec.n_layers):
            parts.append(self.weights[k].ravel())
            parts.append(self.biases[k])
            if self.spec.use_bn:
                parts.append(self.bn_scale[k])
                parts.append(self.bn_shift[k])
        return np.concatenate(parts)

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        pos = 0
        for k in range(self.spec.n_layers):
            w = self.weights[k]
            self.weights[k] = theta[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            b = self.biases[k]
            self.biases[k] = theta[pos : pos + b.size].copy()
            pos += b.size
            if self.spec.use_bn:
                s = self.bn_scale[k]
                self.bn_scale[k] = theta[pos : pos + s.size].copy()
                pos += s.size
                t = self.bn_shift[k]
                self.bn_shift[k] = theta[pos : pos + t.size].copy()
                pos += t.size
        if pos != theta.size:
            raise ContractViolation(
                f"parameter vector has {theta.size} entries, net needs {pos}"
            )

    def flat_grads(self, grads) -> np.ndarray:
        parts = []
        for k in range(self.spec.n_layers):
            parts.append(grads[k]["weight"].ravel())
            parts.append(grads[k]["bias"])
            if self.spec.use_bn:
                parts.append(grads[k]["scale"])
                parts.append(grads[k]["shift"])
        return np.concatenate(parts)

    @property
    def n_params(self) -> int:
        return self.get_params().size

    # ---- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "spec": {
                "layer_dims": list(self.spec.layer_dims),
                "activations": list(self.spec.activations),
                "use_bn": self.spec.use_bn,
                "bn_epsilon": self.spec.bn_epsilon,
                "bn_momentum": self.spec.bn_momentum,
            },
            "layers": [
                {
                    "weight": self.weights[k].tolist(),
                    "bias": self.biases[k].tolist(),
                    "bn_scale": self.bn_scale[k].tolist(),
                    "bn_shift": self.bn_shift[k].tolist(),
                    "running_mean": self.running_mean[k].tolist(),
                    "running_var": self.running_var[k].tolist(),
                }
                for k in range(self.spec.n_layers)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeedForwardNet":
        spec = NetSpec(
            layer_dims=tuple(doc["spec"]["layer_dims"]),
            activations=tuple(doc["spec"]["activations"]),
            use_bn=doc["spec"]["use_bn"],
            bn_epsilon=doc["spec"]["bn_epsilon"],
            bn_momentum=doc["spec"]["bn_momentum"],
        )
        layers = doc["layers"]
        return cls(
            spec=spec,
            tag=doc["tag"],
            weights=[np.array(l["weight"], dtype=np.float64) for l in layers],
            biases=[np.array(l["bias"], dtype=np.float64) for l in layers],
            bn_scale=[np.array(l["bn_scale"], dtype=np.float64) for l in layers],
            bn_shift=[np.array(l["bn_shift"], dtype=np.float64) for l in layers],
            running_mean=[np.array(l["running_mean"], dtype=np.float64) for l in layers],
            running_var=[np.array(l["running_var"], dtype=np.float64) for l in layers],
        )


def default_embed_spec(feature_dim: int, hidden: tuple[int, ...] = (64,), out_dim: int = 32) -> NetSpec:
    """The stock embedding architecture: feature_dim -> hidden -> out_dim."""
    return NetSpec(layer_dims=(feature_dim, *hidden, out_dim))


def init_net(spec: NetSpec, seed: int, modality: str = "rgb") -> FeedForwardNet:
    """Initialize a per-modality embedding net.

    Weights are zero-mean scaled by 1/sqrt(in_dim), biases zero, BN scale 1,
    shift 0, running mean 0, running variance 1. Deterministic given seed.
    """
    if modality not in MODALITIES:
        raise ContractViolation(f"modality must be one of {MODALITIES}, got {modality!r}")
    return FeedForwardNet.init(spec, seed, tag=modality)


def init_classifier(in_dim: int, hidden: tuple[int, ...] = (32, 16), seed: int = 0) -> FeedForwardNet:
    """Binary classification head: FC layers with relu, two output logits."""
    spec = NetSpec(layer_dims=(in_dim, *hidden, 2), use_bn=False)
    return FeedForwardNet.init(spec, seed, tag="classifier")


def embed(net: FeedForwardNet, features, mode: str = "infer", batch: np.ndarray | None = None) -> np.ndarray:
    """Embed one feature vector.

    Infer mode is a pure function of the net (running statistics, no
    mutation). Train mode requires ``batch`` (>= 2 rows): BN statistics are
    computed per layer from the batch, applied to ``features``, and folded
    into the running statistics.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1:
        raise ContractViolation(f"expected a 1-D feature vector, got shape {f.shape}")
    if mode == "infer":
        out, _ = net.forward(f[None, :], train=False)
        return out[0]
    if mode != "train":
        raise ContractViolation(f"mode must be 'train' or 'infer', got {mode!r}")
    if batch is None:
        raise ContractViolation("train-mode embed requires a statistics batch")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ContractViolation("statistics batch must have at least 2 rows")
    _, cache = net.forward(batch, train=True)
    a = f[None, :]
    for k in range(net.spec.n_layers):
        z = a @ net.weights[k] + net.biases[k]
        if net.spec.use_bn:
            c = cache["layers"][k]
            mu = c["z"].mean(axis=0)
            h = net.bn_scale[k] * (z - mu) * c["inv"] + net.bn_shift[k]
        else:
            h = z
        a = np.maximum(h, 0.0) if net.spec.activations[k] == "relu" else h
    return a[0]
