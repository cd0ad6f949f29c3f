"""Finite-difference verification suites for every analytic gradient.

Each suite draws random non-kink configurations (hinge arguments, band
edges, relu pre-activations, and argmax gaps are kept away from their
switching points, where the subgradient convention makes the comparison
meaningless) and checks the hand-written gradient against central
differences at the package-wide tolerance.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .embedding import FeedForwardNet, NetSpec
from .fusion import FusionHead, fuse_backward, fuse_batch, init_fusion_head
from .losses import (
    band_loss_slopes,
    band_loss_values,
    band_set_terms,
    cross_modality_terms,
    lifted_struct_loss_grads,
    npair_loss_grads,
    softmax_ce,
    triplet_loss_grads,
)
from .metricspace import (
    CheckReport,
    GradTape,
    anchor_distance_grads,
    anchor_distances,
    euclidean,
    euclidean_grad,
    euclidean_sq,
    euclidean_sq_grad,
    finite_diff_check,
)
from .mining import LabeledEmbedding, MarginParams, mine_from_distances

EDGE_GUARD = 0.03
RELU_GUARD = 1e-2
MAX_RESAMPLE = 200


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_rel_error: float
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def _resample(build, rng):
    for _ in range(MAX_RESAMPLE):
        out = build(rng)
        if out is not None:
            return out
    raise RuntimeError("could not draw a non-kink configuration")


# ---- individual case builders: return (lossfn, tape) or None to resample --


def _case_euclidean_sq(rng):
    d = int(rng.integers(2, 8))
    u = rng.normal(size=d)
    v = rng.normal(size=d)
    gu, gv = euclidean_sq_grad(u, v)

    def lossfn(th):
        return euclidean_sq(th[:d], th[d:])

    return lossfn, GradTape(np.concatenate([u, v]), np.concatenate([gu, gv]))


def _case_euclidean(rng):
    d = int(rng.integers(2, 8))
    u = rng.normal(size=d)
    v = rng.normal(size=d)
    if euclidean(u, v) < 0.5:
        return None
    gu, gv = euclidean_grad(u, v)

    def lossfn(th):
        return euclidean(th[:d], th[d:])

    return lossfn, GradTape(np.concatenate([u, v]), np.concatenate([gu, gv]))


def _case_triplet(rng):
    k = int(rng.integers(1, 5))
    d = int(rng.integers(3, 7))
    m = float(rng.uniform(0.1, 0.5))
    triplets = [
        (rng.normal(size=d), rng.normal(size=d), rng.normal(size=d)) for _ in range(k)
    ]
    for a, p, n in triplets:
        arg = euclidean_sq(a, p) + m - euclidean_sq(a, n)
        if abs(arg) < EDGE_GUARD:
            return None
    loss0, grads = triplet_loss_grads(triplets, m)
    theta = np.concatenate([np.concatenate([a, p, n]) for a, p, n in triplets])
    grad = np.concatenate([np.concatenate(g) for g in grads])

    def lossfn(th):
        trips = []
        for i in range(k):
            base = i * 3 * d
            trips.append(
                (th[base : base + d], th[base + d : base + 2 * d], th[base + 2 * d : base + 3 * d])
            )
        return triplet_loss_grads(trips, m)[0].value

    return lossfn, GradTape(theta, grad)


def _case_npair(rng):
    n = int(rng.integers(2, 6))
    d = int(rng.integers(2, 6))
    a = rng.normal(size=(n, d))
    p = rng.normal(size=(n, d))
    _, da, dp = npair_loss_grads(a, p)

    def lossfn(th):
        aa = th[: n * d].reshape(n, d)
        pp = th[n * d :].reshape(n, d)
        return npair_loss_grads(aa, pp)[0].value

    return lossfn, GradTape(
        np.concatenate([a.ravel(), p.ravel()]), np.concatenate([da.ravel(), dp.ravel()])
    )


def _lifted_batch(embs, labels):
    return [
        LabeledEmbedding(embedding=e, label=("positive" if l else "negative"), modality="rgb", sample_id=i)
        for i, (e, l) in enumerate(zip(embs, labels))
    ]


def _case_lifted(rng):
    n = int(rng.integers(4, 8))
    d = int(rng.integers(3, 6))
    beta = float(rng.uniform(0.5, 2.0))
    embs = rng.normal(size=(n, d))
    labels = rng.random(n) < 0.5
    if labels.sum() < 2 or (~labels).sum() < 1:
        return None
    batch = _lifted_batch(embs, labels)
    # keep every pair's hinge argument away from zero
    import math as _math

    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] != labels[j]:
                continue
            links_i = np.nonzero(labels != labels[i])[0]
            links_j = np.nonzero(labels != labels[j])[0]
            s = sum(_math.exp(beta - euclidean_sq(embs[i], embs[k])) for k in links_i)
            s += sum(_math.exp(beta - euclidean_sq(embs[j], embs[k])) for k in links_j)
            arg = euclidean_sq(embs[i], embs[j]) + _math.log(s)
            if abs(arg) < EDGE_GUARD:
                return None
    _, de = lifted_struct_loss_grads(batch, beta)

    def lossfn(th):
        e = th.reshape(n, d)
        return lifted_struct_loss_grads(_lifted_batch(e, labels), beta)[0].value

    return lossfn, GradTape(embs.ravel(), de.ravel())


def _margin_params(rng) -> MarginParams:
    alpha = float(rng.uniform(1.0, 2.0))
    beta = float(rng.uniform(0.05, 0.3))
    return MarginParams(
        alpha=alpha, beta=beta, m=float(rng.uniform(0.0, 0.4)), delta=float(rng.uniform(0.0, 0.4))
    )


def _edges_ok(d, positive, p):
    if positive:
        edges = (p.alpha - p.beta, p.alpha)
    else:
        edges = (p.alpha + p.m, p.alpha + p.m + p.beta)
    return all(abs(float(x) - e) > EDGE_GUARD for e in edges for x in np.atleast_1d(d))


def _case_band_pair(rng):
    d_dim = int(rng.integers(3, 6))
    p = _margin_params(rng)
    positive = bool(rng.integers(0, 2))
    anchor = rng.normal(size=d_dim)
    sample = anchor + rng.normal(size=d_dim) * rng.uniform(0.3, 1.2)
    dist = euclidean_sq(anchor, sample)
    if not _edges_ok(dist, positive, p):
        return None
    slope = float(band_loss_slopes(dist, positive, p))
    ga, gs = euclidean_sq_grad(anchor, sample)

    def lossfn(th):
        return float(band_loss_values(euclidean_sq(th[:d_dim], th[d_dim:]), positive, p))

    return lossfn, GradTape(
        np.concatenate([anchor, sample]), slope * np.concatenate([ga, gs])
    )


def _band_case_geometry(rng, d_dim, n):
    p = _margin_params(rng)
    anchor = rng.normal(size=d_dim)
    dirs = rng.normal(size=(n, d_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.sqrt(rng.uniform(0.2, 4.0, size=n))
    e = anchor[None, :] + dirs * radii[:, None]
    mask = rng.random(n) < 0.5
    return p, anchor, e, mask


def _case_band_sets(rng):
    d_dim = int(rng.integers(3, 6))
    n = int(rng.integers(6, 12))
    p, anchor, e, mask = _band_case_geometry(rng, d_dim, n)
    d = anchor_distances(anchor, e, "squared")
    pos_idx, neg_idx = mine_from_distances(d, mask, p)
    if not len(pos_idx) and not len(neg_idx):
        return None
    if len(pos_idx) and not _edges_ok(d[pos_idx], True, p):
        return None
    if len(neg_idx) and not _edges_ok(d[neg_idx], False, p):
        return None
    l_p, l_n, dd = band_set_terms(d, pos_idx, neg_idx, p)
    g_rows, g_anchor = anchor_distance_grads(anchor, e, "squared")
    grad_e = dd[:, None] * g_rows
    grad_a = (dd[:, None] * g_anchor).sum(axis=0)

    def lossfn(th):
        a = th[:d_dim]
        ee = th[d_dim:].reshape(n, d_dim)
        dists = anchor_distances(a, ee, "squared")
        lp, ln, _ = band_set_terms(dists, pos_idx, neg_idx, p)
        return lp + ln

    return lossfn, GradTape(
        np.concatenate([anchor, e.ravel()]), np.concatenate([grad_a, grad_e.ravel()])
    )


def _cross_guards_ok(pos, neg_other, delta):
    spos = np.sort(pos)
    gap_ok = pos.size == 1 or (spos[-1] - spos[-2]) > EDGE_GUARD
    sneg = np.sort(neg_other)
    neg_ok = neg_other.size == 1 or (sneg[1] - sneg[0]) > EDGE_GUARD
    hinge = abs(float(pos.max()) - float(neg_other.min()) + delta) > EDGE_GUARD
    return gap_ok and neg_ok and hinge


def _case_cross(rng):
    d_dim = int(rng.integers(3, 6))
    n = int(rng.integers(8, 14))
    p, anchor_r, e_r, mask = _band_case_geometry(rng, d_dim, n)
    anchor_t = rng.normal(size=d_dim)
    dirs = rng.normal(size=(n, d_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    e_t = anchor_t[None, :] + dirs * np.sqrt(rng.uniform(0.2, 4.0, size=n))[:, None]
    if mask.sum() < 1 or (~mask).sum() < 1:
        return None
    d_r = anchor_distances(anchor_r, e_r, "squared")
    d_t = anchor_distances(anchor_t, e_t, "squared")
    if not _cross_guards_ok(d_r[mask], d_t[~mask], p.delta):
        return None
    if not _cross_guards_ok(d_t[mask], d_r[~mask], p.delta):
        return None
    pos_pos = np.nonzero(mask)[0]
    neg_pos = np.nonzero(~mask)[0]
    _, (g_pr, g_nr, g_pt, g_nt) = cross_modality_terms(
        d_r[pos_pos], d_r[neg_pos], d_t[pos_pos], d_t[neg_pos], p.delta
    )
    dd_r = np.zeros_like(d_r)
    dd_t = np.zeros_like(d_t)
    dd_r[pos_pos] += g_pr
    dd_r[neg_pos] += g_nr
    dd_t[pos_pos] += g_pt
    dd_t[neg_pos] += g_nt
    grads = []
    for anchor, e, dd in ((anchor_r, e_r, dd_r), (anchor_t, e_t, dd_t)):
        g_rows, g_anchor = anchor_distance_grads(anchor, e, "squared")
        grads.append((dd[:, None] * g_anchor).sum(axis=0))
        grads.append((dd[:, None] * g_rows).ravel())

    def lossfn(th):
        off = 0
        ar = th[off : off + d_dim]
        off += d_dim
        er = th[off : off + n * d_dim].reshape(n, d_dim)
        off += n * d_dim
        at = th[off : off + d_dim]
        off += d_dim
        et = th[off :].reshape(n, d_dim)
        dr = anchor_distances(ar, er, "squared")
        dt = anchor_distances(at, et, "squared")
        loss, _ = cross_modality_terms(
            dr[pos_pos], dr[neg_pos], dt[pos_pos], dt[neg_pos], p.delta
        )
        return loss

    theta = np.concatenate([anchor_r, e_r.ravel(), anchor_t, e_t.ravel()])
    return lossfn, GradTape(theta, np.concatenate(grads))


def _case_total(rng):
    d_dim = int(rng.integers(3, 6))
    n = int(rng.integers(8, 14))
    p, anchor_r, e_r, mask = _band_case_geometry(rng, d_dim, n)
    anchor_t = rng.normal(size=d_dim)
    dirs = rng.normal(size=(n, d_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    e_t = anchor_t[None, :] + dirs * np.sqrt(rng.uniform(0.2, 4.0, size=n))[:, None]
    if mask.sum() < 1 or (~mask).sum() < 1:
        return None
    d_r = anchor_distances(anchor_r, e_r, "squared")
    d_t = anchor_distances(anchor_t, e_t, "squared")
    mined = {}
    for key, d in (("r", d_r), ("t", d_t)):
        pos_idx, neg_idx = mine_from_distances(d, mask, p)
        if len(pos_idx) and not _edges_ok(d[pos_idx], True, p):
            return None
        if len(neg_idx) and not _edges_ok(d[neg_idx], False, p):
            return None
        mined[key] = (pos_idx, neg_idx)
    if not _cross_guards_ok(d_r[mask], d_t[~mask], p.delta):
        return None
    if not _cross_guards_ok(d_t[mask], d_r[~mask], p.delta):
        return None
    pos_pos = np.nonzero(mask)[0]
    neg_pos = np.nonzero(~mask)[0]

    def full_terms(dr, dt):
        lp_r, ln_r, dd_r = band_set_terms(dr, *mined["r"], p)
        lp_t, ln_t, dd_t = band_set_terms(dt, *mined["t"], p)
        cross, (g_pr, g_nr, g_pt, g_nt) = cross_modality_terms(
            dr[pos_pos], dr[neg_pos], dt[pos_pos], dt[neg_pos], p.delta
        )
        dd_r = dd_r.copy()
        dd_t = dd_t.copy()
        dd_r[pos_pos] += g_pr
        dd_r[neg_pos] += g_nr
        dd_t[pos_pos] += g_pt
        dd_t[neg_pos] += g_nt
        return (lp_r + ln_r) + (lp_t + ln_t) + cross, dd_r, dd_t

    loss0, dd_r, dd_t = full_terms(d_r, d_t)
    grads = []
    for anchor, e, dd in ((anchor_r, e_r, dd_r), (anchor_t, e_t, dd_t)):
        g_rows, g_anchor = anchor_distance_grads(anchor, e, "squared")
        grads.append((dd[:, None] * g_anchor).sum(axis=0))
        grads.append((dd[:, None] * g_rows).ravel())

    def lossfn(th):
        off = 0
        ar = th[off : off + d_dim]
        off += d_dim
        er = th[off : off + n * d_dim].reshape(n, d_dim)
        off += n * d_dim
        at = th[off : off + d_dim]
        off += d_dim
        et = th[off :].reshape(n, d_dim)
        loss, _, _ = full_terms(
            anchor_distances(ar, er, "squared"), anchor_distances(at, et, "squared")
        )
        return loss

    theta = np.concatenate([anchor_r, e_r.ravel(), anchor_t, e_t.ravel()])
    return lossfn, GradTape(theta, np.concatenate(grads))


def _case_classification(rng):
    n = int(rng.integers(3, 9))
    logits = rng.normal(size=(n, 2)) * 2.0
    targets = rng.integers(0, 2, size=n)
    _, dlogits = softmax_ce(logits, targets)

    def lossfn(th):
        return softmax_ce(th.reshape(n, 2), targets)[0]

    return lossfn, GradTape(logits.ravel(), dlogits.ravel())


def _relu_preacts_ok(net: FeedForwardNet, cache) -> bool:
    for k in range(net.spec.n_layers):
        if net.spec.activations[k] == "relu":
            if np.min(np.abs(cache["layers"][k]["h"])) < RELU_GUARD:
                return False
    return True


def _case_embedding(rng, train: bool):
    dims = (int(rng.integers(3, 6)), int(rng.integers(4, 8)), int(rng.integers(2, 5)))
    spec = NetSpec(layer_dims=dims)
    net = FeedForwardNet.init(spec, int(rng.integers(0, 2**31)))
    if not train:
        for k in range(net.spec.n_layers):
            net.running_mean[k] = rng.normal(size=net.spec.layer_dims[k + 1]) * 0.3
            net.running_var[k] = rng.uniform(0.5, 2.0, size=net.spec.layer_dims[k + 1])
    x = rng.normal(size=(int(rng.integers(4, 7)), dims[0]))
    out, cache = net.forward(x, train=train, update_running=False)
    if not _relu_preacts_ok(net, cache):
        return None
    d_out = np.zeros_like(out)
    ga, gb = euclidean_sq_grad(out[0], out[1])
    d_out[0] = ga
    d_out[1] = gb
    _, grads = net.backward(cache, d_out)
    scratch = net.copy()

    def lossfn(th):
        scratch.set_params(th)
        o, _ = scratch.forward(x, train=train, update_running=False)
        return euclidean_sq(o[0], o[1])

    return lossfn, GradTape(net.get_params(), net.flat_grads(grads))


def _case_fusion(rng):
    d = int(rng.integers(3, 6))
    n = int(rng.integers(2, 5))
    mode = "learned" if rng.random() < 0.7 else "sigmoid_only"
    head = init_fusion_head(d, int(rng.integers(0, 2**31)), gate_mode=mode)
    head.b_r = rng.normal(size=d) * 0.3
    head.b_t = rng.normal(size=d) * 0.3
    x_r = rng.normal(size=(n, d))
    x_t = rng.normal(size=(n, d))
    fused, cache = fuse_batch(head, x_r, x_t)
    if mode == "learned":
        if min(np.min(np.abs(cache["z_r"])), np.min(np.abs(cache["z_t"]))) < RELU_GUARD:
            return None
    w = rng.normal(size=fused.shape)
    dxr, dxt, head_flat = fuse_backward(head, cache, w)
    scratch = FusionHead(
        w_r=head.w_r.copy(), b_r=head.b_r.copy(), w_t=head.w_t.copy(), b_t=head.b_t.copy(),
        gate_mode=mode,
    )
    hp = head.get_params().size

    def lossfn(th):
        scratch.set_params(th[:hp])
        xr = th[hp : hp + n * d].reshape(n, d)
        xt = th[hp + n * d :].reshape(n, d)
        f, _ = fuse_batch(scratch, xr, xt)
        return float(np.sum(w * f))

    theta = np.concatenate([head.get_params(), x_r.ravel(), x_t.ravel()])
    grad = np.concatenate([head_flat, dxr.ravel(), dxt.ravel()])
    return lossfn, GradTape(theta, grad)


def _case_fused_classifier(rng):
    d = int(rng.integers(3, 5))
    n = int(rng.integers(3, 6))
    head = init_fusion_head(d, int(rng.integers(0, 2**31)))
    head.b_r = rng.normal(size=d) * 0.3
    head.b_t = rng.normal(size=d) * 0.3
    cls_spec = NetSpec(layer_dims=(2 * d, int(rng.integers(3, 6)), 2), use_bn=False)
    cls = FeedForwardNet.init(cls_spec, int(rng.integers(0, 2**31)), tag="classifier")
    x_r = rng.normal(size=(n, d))
    x_t = rng.normal(size=(n, d))
    targets = rng.integers(0, 2, size=n)
    fused, fcache = fuse_batch(head, x_r, x_t)
    if min(np.min(np.abs(fcache["z_r"])), np.min(np.abs(fcache["z_t"]))) < RELU_GUARD:
        return None
    logits, ccache = cls.forward(fused, train=False)
    if not _relu_preacts_ok(cls, ccache):
        return None
    _, dlogits = softmax_ce(logits, targets)
    d_fused, cls_grads = cls.backward(ccache, dlogits)
    _, _, head_flat = fuse_backward(head, fcache, d_fused)
    hp = head.get_params().size
    scratch_head = FusionHead(
        w_r=head.w_r.copy(), b_r=head.b_r.copy(), w_t=head.w_t.copy(), b_t=head.b_t.copy(),
    )
    scratch_cls = cls.copy()

    def lossfn(th):
        scratch_head.set_params(th[:hp])
        scratch_cls.set_params(th[hp:])
        f, _ = fuse_batch(scratch_head, x_r, x_t)
        z, _ = scratch_cls.forward(f, train=False)
        return softmax_ce(z, targets)[0]

    theta = np.concatenate([head.get_params(), cls.get_params()])
    grad = np.concatenate([head_flat, cls.flat_grads(cls_grads)])
    return lossfn, GradTape(theta, grad)


SUITES = {
    "euclidean_sq": _case_euclidean_sq,
    "euclidean": _case_euclidean,
    "triplet": _case_triplet,
    "npair": _case_npair,
    "lifted_struct": _case_lifted,
    "band_pair": _case_band_pair,
    "band_sets": _case_band_sets,
    "cross_modality": _case_cross,
    "mmsl_total": _case_total,
    "classification": _case_classification,
    "embedding_train": lambda rng: _case_embedding(rng, train=True),
    "embedding_infer": lambda rng: _case_embedding(rng, train=False),
    "fusion": _case_fusion,
    "fused_classifier": _case_fused_classifier,
}


def run_suite(name: str, seed: int = 0, cases: int = 20, step: float = 1e-4, tol: float = 1e-5) -> SuiteResult:
    builder = SUITES[name]
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
    worst = 0.0
    failures = 0
    for _ in range(cases):
        lossfn, tape = _resample(builder, rng)
        report: CheckReport = finite_diff_check(lossfn, tape, step=step, tol=tol)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures += 1
    return SuiteResult(name=name, cases=cases, max_rel_error=worst, failures=failures)


def run_all(seed: int = 0, cases: int = 20) -> list[SuiteResult]:
    return [run_suite(name, seed=seed, cases=cases) for name in SUITES]
