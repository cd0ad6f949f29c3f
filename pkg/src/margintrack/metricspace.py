"""Distance functions, gradient tapes, and finite-difference verification.

Everything downstream (losses, networks, the trainer) builds on the two
distance functions defined here and on ``finite_diff_check``, the numerical
oracle used to validate every analytic gradient in the package. All
arithmetic is float64; the default check tolerance of 1e-5 is not reachable
in single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContractViolation",
    "EvaluationError",
    "GradTape",
    "CheckReport",
    "as_vector",
    "euclidean_sq",
    "euclidean_sq_grad",
    "euclidean",
    "euclidean_grad",
    "metric_for",
    "anchor_distances",
    "anchor_distance_grads",
    "finite_diff_check",
]


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class EvaluationError(RuntimeError):
    """A function evaluation produced a non-finite value."""


def as_vector(x) -> np.ndarray:
    """Validate and return ``x`` as a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"expected a 1-D vector, got shape {v.shape}")
    if v.size == 0:
        raise ContractViolation("expected a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("vector contains non-finite entries")
    return v


def euclidean_sq(u, v) -> float:
    """Squared Euclidean distance sum_k (u_k - v_k)^2."""
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ContractViolation(
            f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}"
        )
    diff = u - v
    return float(diff @ diff)


def euclidean_sq_grad(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``euclidean_sq`` w.r.t. u and v: (2(u-v), -2(u-v))."""
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ContractViolation(
            f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}"
        )
    g = 2.0 * (u - v)
    return g, -g


def euclidean(u, v) -> float:
    """Euclidean distance, the square root of ``euclidean_sq``."""
    return math.sqrt(euclidean_sq(u, v))


def euclidean_grad(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``euclidean``; undefined at u == v."""
    d = euclidean(u, v)
    if d == 0.0:
        raise ContractViolation("euclidean gradient undefined at u == v")
    g = (as_vector(u) - as_vector(v)) / d
    return g, -g


def metric_for(convention: str):
    """Map a distance-convention flag to its metric callable."""
    if convention == "squared":
        return euclidean_sq
    if convention == "unsquared":
        return euclidean
    raise ContractViolation(f"unknown distance convention {convention!r}")


def anchor_distances(anchor: np.ndarray, rows: np.ndarray, convention: str = "squared") -> np.ndarray:
    """Distances from ``anchor`` to every row of ``rows`` under one convention.

    Vectorized batch companion of the scalar metrics; used by mining, the
    MMSL terms, and the structure reports so all of them share one flag.
    """
    diff = rows - anchor[None, :]
    d = np.einsum("ij,ij->i", diff, diff)
    if convention == "squared":
        return d
    if convention == "unsquared":
        return np.sqrt(d)
    raise ContractViolation(f"unknown distance convention {convention!r}")


def anchor_distance_grads(
    anchor: np.ndarray, rows: np.ndarray, convention: str = "squared"
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradients of ``anchor_distances``.

    Returns ``(d_rows, d_anchor)`` where ``d_rows[i]`` is the gradient of
    distance i w.r.t. ``rows[i]`` and ``d_anchor[i]`` the gradient w.r.t.
    the anchor. For the unsquared convention the subgradient at a
    coincident pair is taken as zero.
    """
    diff = rows - anchor[None, :]
    if convention == "squared":
        g = 2.0 * diff
        return g, -g
    if convention == "unsquared":
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        scale = np.zeros_like(d)
        nz = d > 0.0
        scale[nz] = 1.0 / d[nz]
        g = diff * scale[:, None]
        return g, -g
    raise ContractViolation(f"unknown distance convention {convention!r}")


@dataclass
class GradTape:
    """A flat parameter vector paired with an accumulated gradient."""

    params: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.params = np.asarray(self.params, dtype=np.float64).ravel()
        if self.grad is None:
            self.grad = np.zeros_like(self.params)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64).ravel()
        if self.grad.shape != self.params.shape:
            raise ContractViolation(
                f"gradient shape {self.grad.shape} does not match "
                f"parameter shape {self.params.shape}"
            )

    def accumulate(self, g) -> None:
        g = np.asarray(g, dtype=np.float64).ravel()
        if g.shape != self.params.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match "
                f"parameter shape {self.params.shape}"
            )
        self.grad += g

    def zero(self) -> None:
        self.grad[:] = 0.0


@dataclass
class CheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    failing_indices: list[int]
    n_params: int
    step: float
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failing_indices


def finite_diff_check(lossfn, tape: GradTape, step: float = 1e-4, tol: float = 1e-5) -> CheckReport:
    """Compare ``tape.grad`` against central finite differences of ``lossfn``.

    ``lossfn`` must be a pure scalar function of a flat parameter vector and
    ``tape.grad`` must already hold the analytic gradient at ``tape.params``.
    The relative error per coordinate uses a denominator floored at 1.0 so
    near-zero gradients are compared absolutely; this keeps the check
    meaningful at the default tolerance without spurious failures from
    truncation noise.
    """
    if step <= 0.0:
        raise ContractViolation(f"step must be positive, got {step}")
    if tol <= 0.0:
        raise ContractViolation(f"tol must be positive, got {tol}")
    theta = tape.params.astype(np.float64, copy=True)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        f_plus = float(lossfn(theta))
        theta[i] = orig - step
        f_minus = float(lossfn(theta))
        theta[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise EvaluationError(
                f"non-finite loss while perturbing parameter {i}"
            )
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(tape.grad)), 1.0)
    rel = np.abs(numeric - tape.grad) / denom
    failing = np.nonzero(rel > tol)[0].tolist()
    max_err = float(rel.max()) if rel.size else 0.0
    return CheckReport(
        max_rel_error=max_err,
        failing_indices=failing,
        n_params=int(theta.size),
        step=step,
        tol=tol,
    )
