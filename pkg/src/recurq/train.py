"""Training: distortion losses and their analytic gradients, metric-learning
losses for the optional feature-refinement head, k-means initialization, Adam,
and the three-stage training schedule with ablation flags.

Gradient conventions: hard argmin selections and the residual inputs they
produce are treated as stop-gradient constants. Gradients reach the codebook
through the selected codewords on the hard path and through the softmax
weights and convex combination on the soft path; the scale factor w picks up
gradient through the per-level powers w^(m-1).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .core import DomainError, FeatureMatrix, RqModel, _as_matrix

_EPS = 1e-30

DISTORTION_FLAGS = ("hard_distortion", "soft_distortion", "joint_central")
HEAD_FLAGS = ("triplet", "adaptive_margin")
ALL_FLAGS = DISTORTION_FLAGS + HEAD_FLAGS

DEFAULT_FLAGS = frozenset(ALL_FLAGS)


@dataclass(frozen=True)
class TrainConfig:
    k: int
    m: int
    gamma: float = 20.0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256
    epochs_stage1: int = 20
    epochs_stage2: int = 20
    epochs_stage3: int = 50
    enable_stage1: bool = False
    loss_flags: frozenset[str] = DEFAULT_FLAGS
    triplet_margin: float = 1.0
    seed: int = 0
    init: str = "random"  # codebook init: "random" | "kmeans"
    w_init: str = "random"  # "random" (uniform [0.1, 0.9]) | "residual"
    head_widths: tuple[int, int] | None = None
    gamma_final: float | None = None  # linear anneal target over stage 3

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("beta1/beta2 must be in [0, 1)")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        unknown = set(self.loss_flags) - set(ALL_FLAGS)
        if unknown:
            raise DomainError(f"unknown loss flags: {sorted(unknown)}")
        if self.init not in ("random", "kmeans"):
            raise DomainError(f"unknown init '{self.init}'")
        if self.w_init not in ("random", "residual"):
            raise DomainError(f"unknown w_init '{self.w_init}'")


@dataclass
class LabelEmbeddings:
    """Fixed per-label embedding vectors, row i for label id i."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = _as_matrix(self.vectors, "embeddings")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0):
            raise DomainError("embedding rows must be nonzero")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


@dataclass
class DistortionReport:
    e_hard: float
    e_soft: float
    e_joint: float
    per_level_hard: np.ndarray
    per_level_soft: np.ndarray


class _Forward(NamedTuple):
    codes: np.ndarray  # (N, M)
    residuals: list[np.ndarray]  # level inputs h^0..h^{M-1}, each (N, D)
    probs: list[np.ndarray]  # (N, K) per level
    dists: list[np.ndarray]  # (N, K) per level
    hard_sums: np.ndarray  # (M, N, D) cumulative hard reconstructions
    soft_sums: np.ndarray  # (M, N, D) cumulative soft reconstructions


def _batch_data(batch) -> np.ndarray:
    x = batch.data if isinstance(batch, FeatureMatrix) else np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise DomainError("batch must be nonempty")
    return x


def _forward(x: np.ndarray, model: RqModel) -> _Forward:
    n, d = x.shape
    m_levels = model.levels
    codes = np.empty((n, m_levels), dtype=np.int64)
    residuals, probs_l, dists_l = [], [], []
    hard_sums = np.empty((m_levels, n, d))
    soft_sums = np.empty((m_levels, n, d))
    h = x.copy()
    hard_acc = np.zeros((n, d))
    soft_acc = np.zeros((n, d))
    for m in range(1, m_levels + 1):
        scaled = model.scaled_codebook(m)
        d2 = (
            np.einsum("nd,nd->n", h, h)[:, None]
            - 2.0 * h @ scaled.T
            + np.einsum("kd,kd->k", scaled, scaled)[None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        dist = np.sqrt(d2)
        logits = -model.gamma * dist
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        idx = np.argmin(d2, axis=1)

        residuals.append(h.copy())
        probs_l.append(p)
        dists_l.append(dist)
        codes[:, m - 1] = idx
        hard_acc = hard_acc + scaled[idx]
        soft_acc = soft_acc + p @ scaled
        hard_sums[m - 1] = hard_acc
        soft_sums[m - 1] = soft_acc
        h = h - scaled[idx]
    return _Forward(codes, residuals, probs_l, dists_l, hard_sums, soft_sums)


def distortion_losses(batch, model: RqModel) -> DistortionReport:
    """Per-level and total distortion errors, batch-averaged.

    E_h^m and E_s^m are Euclidean errors of the level-m partial hard/soft
    reconstructions against the original inputs; totals sum over levels and
    the joint term is the absolute difference of the two totals.
    """
    x = _batch_data(batch)
    fw = _forward(x, model)
    hard_per = np.linalg.norm(fw.hard_sums - x, axis=2).mean(axis=1)
    soft_per = np.linalg.norm(fw.soft_sums - x, axis=2).mean(axis=1)
    e_hard = float(hard_per.sum())
    e_soft = float(soft_per.sum())
    return DistortionReport(
        e_hard=e_hard,
        e_soft=e_soft,
        e_joint=abs(e_hard - e_soft),
        per_level_hard=hard_per,
        per_level_soft=soft_per,
    )


def _unit_residual_grads(sums: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-level gradients of mean ||sum_m - x|| w.r.t. each cumulative sum,
    already accumulated over downstream levels: G[i] = sum_{m>=i} unit(sum_m - x)/N."""
    n = x.shape[0]
    diffs = sums - x
    norms = np.linalg.norm(diffs, axis=2, keepdims=True)
    units = np.where(norms > _EPS, diffs / np.maximum(norms, _EPS), 0.0)
    return np.cumsum(units[::-1], axis=0)[::-1] / n


def soft_distortion_value(batch, model: RqModel, residuals=None) -> float:
    """Batch-mean soft distortion E_s.

    When ``residuals`` is given (per-level inputs from a base forward pass),
    the soft path is re-evaluated against those frozen inputs; this is the
    function the analytic gradient differentiates.
    """
    x = _batch_data(batch)
    if residuals is None:
        residuals = _forward(x, model).residuals
    soft_acc = np.zeros_like(x)
    total = 0.0
    for m in range(1, model.levels + 1):
        scaled = model.scaled_codebook(m)
        h = residuals[m - 1]
        dist = np.linalg.norm(h[:, None, :] - scaled[None, :, :], axis=2)
        logits = -model.gamma * dist
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        soft_acc = soft_acc + p @ scaled
        total += np.linalg.norm(soft_acc - x, axis=1).mean()
    return float(total)


def hard_distortion_value(batch, model: RqModel, codes: np.ndarray) -> float:
    """Batch-mean hard distortion E_h with the given fixed assignments."""
    x = _batch_data(batch)
    total = 0.0
    acc = np.zeros_like(x)
    for m in range(1, model.levels + 1):
        acc = acc + model.scaled_codebook(m)[codes[:, m - 1]]
        total += np.linalg.norm(acc - x, axis=1).mean()
    return float(total)


def grad_soft_distortion(batch, model: RqModel, fw: _Forward | None = None):
    """Analytic gradient of batch-mean E_s w.r.t. the codebook and scale."""
    x = _batch_data(batch)
    if fw is None:
        fw = _forward(x, model)
    c = model.codebook
    w = model.scale
    gamma = model.gamma
    d_c = np.zeros_like(c)
    d_w = 0.0
    grads = _unit_residual_grads(fw.soft_sums, x)
    for i in range(1, model.levels + 1):
        g = grads[i - 1]  # (N, D): dL/d q~^i
        scaled = w ** (i - 1) * c
        p = fw.probs[i - 1]
        dist = fw.dists[i - 1]
        r = fw.residuals[i - 1]
        q_soft = p @ scaled
        s_hat = np.einsum("nd,nd->n", g, q_soft)
        s_b = g @ scaled.T  # (N, K)
        coef = gamma * p * (s_hat[:, None] - s_b)
        a = np.where(dist > _EPS, coef / np.maximum(dist, _EPS), 0.0)
        d_scaled = p.T @ g + scaled * a.sum(axis=0)[:, None] - a.T @ r
        d_c += w ** (i - 1) * d_scaled
        if i >= 2:
            d_w += (i - 1) * w ** (i - 2) * float(np.sum(d_scaled * c))
    return d_c, d_w


def grad_hard_distortion(batch, model: RqModel, fw: _Forward | None = None):
    """Subgradient of batch-mean E_h with argmin assignments held fixed."""
    x = _batch_data(batch)
    if fw is None:
        fw = _forward(x, model)
    c = model.codebook
    w = model.scale
    d_c = np.zeros_like(c)
    d_w = 0.0
    grads = _unit_residual_grads(fw.hard_sums, x)
    for i in range(1, model.levels + 1):
        g = grads[i - 1]
        idx = fw.codes[:, i - 1]
        np.add.at(d_c, idx, w ** (i - 1) * g)
        if i >= 2:
            d_w += (i - 1) * w ** (i - 2) * float(np.einsum("nd,nd->", g, c[idx]))
    return d_c, d_w


def triplet_loss(anchor, pos, neg, margin: float):
    """Hinge triplet loss with its gradients; gradients are zero when the
    hinge is inactive."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(pos, dtype=np.float64)
    n = np.asarray(neg, dtype=np.float64)
    if margin < 0:
        raise DomainError("margin must be >= 0")
    dp = a - p
    dn = a - n
    ndp = np.linalg.norm(dp)
    ndn = np.linalg.norm(dn)
    value = ndp - ndn + margin
    zeros = np.zeros_like(a)
    if value <= 0:
        return 0.0, (zeros, zeros.copy(), zeros.copy())
    up = dp / ndp if ndp > _EPS else zeros
    un = dn / ndn if ndn > _EPS else zeros
    return float(value), (up - un, -up, un)


def adaptive_margin_loss(z, label_set, embeddings: LabelEmbeddings):
    """Hinge loss on cosine similarities to fixed label embeddings, with the
    margin for a (positive, negative) label pair set by embedding
    dissimilarity. Returns the loss and its gradient w.r.t. z."""
    z = np.asarray(z, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz == 0:
        raise DomainError("feature vector must be nonzero")
    if not label_set:
        raise DomainError("label set must be nonempty")
    v = embeddings.vectors
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    z_hat = z / nz
    cos_vz = vn @ z_hat
    labels = set(int(i) for i in label_set)
    pos = sorted(labels)
    negs = [j for j in range(v.shape[0]) if j not in labels]
    loss = 0.0
    dz = np.zeros_like(z)

    def dcos(j):
        # d cos(v_j, z) / dz
        return (vn[j] - cos_vz[j] * z_hat) / nz

    for i in pos:
        for j in negs:
            delta = 1.0 - float(vn[i] @ vn[j])
            term = delta - cos_vz[i] + cos_vz[j]
            if term > 0:
                loss += term
                dz += -dcos(i) + dcos(j)
    return float(loss), dz


def kmeans_init(features, k: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; empty clusters are reseeded
    to the point farthest from its assigned centroid."""
    x = _batch_data(features)
    n = x.shape[0]
    if n < k:
        raise DomainError(f"need at least {k} points for {k} centroids")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", x - centroids[0], x - centroids[0])
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = x[rng.integers(n)]
        else:
            centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", x - centroids[i], x - centroids[i]))

    for _ in range(iters):
        d2 = (
            np.einsum("nd,nd->n", x, x)[:, None]
            - 2.0 * x @ centroids.T
            + np.einsum("kd,kd->k", centroids, centroids)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        nearest = np.maximum(d2[np.arange(n), assign], 0.0)
        new_centroids = centroids.copy()
        for i in range(k):
            members = assign == i
            if members.any():
                new_centroids[i] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                new_centroids[i] = x[far]
                nearest[far] = 0.0
        if np.allclose(new_centroids, centroids, rtol=0, atol=1e-12):
            centroids = new_centroids
            break
        centroids = new_centroids
    return centroids


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One Adam update with bias correction, applied in place to ``params``."""
    state.t += 1
    t = state.t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if np.shape(p) != np.shape(g):
            raise DomainError(f"shape mismatch for '{name}': {np.shape(p)} vs {np.shape(g)}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        state.m[name] = config.beta1 * state.m[name] + (1 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] + (1 - config.beta2) * g * g
        m_hat = state.m[name] / (1 - config.beta1 ** t)
        v_hat = state.v[name] / (1 - config.beta2 ** t)
        params[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params, state


def sample_triplets(label_sets, rng: np.random.Generator, anchors) -> TripletBatch:
    """Draw one (positive, negative) pair per anchor; anchors with no valid
    positive or negative are skipped."""
    n = len(label_sets)
    a_out, p_out, n_out = [], [], []
    for a in anchors:
        la = label_sets[a]
        pos_pool = [i for i in range(n) if i != a and label_sets[i] & la]
        neg_pool = [i for i in range(n) if not (label_sets[i] & la)]
        if not pos_pool or not neg_pool:
            continue
        a_out.append(a)
        p_out.append(pos_pool[rng.integers(len(pos_pool))])
        n_out.append(neg_pool[rng.integers(len(neg_pool))])
    return TripletBatch(
        np.array(a_out, dtype=np.int64),
        np.array(p_out, dtype=np.int64),
        np.array(n_out, dtype=np.int64),
    )


class _Head:
    """Two-layer linear refinement head; output is concat(h1, h2)."""

    def __init__(self, d_in: int, widths: tuple[int, int], rng: np.random.Generator):
        d1, d2 = widths
        s1 = 1.0 / np.sqrt(d_in)
        s2 = 1.0 / np.sqrt(d1)
        self.params = {
            "W1": rng.normal(0, s1, size=(d_in, d1)),
            "b1": np.zeros(d1),
            "W2": rng.normal(0, s2, size=(d1, d2)),
            "b2": np.zeros(d2),
        }

    def forward(self, x: np.ndarray):
        h1 = x @ self.params["W1"] + self.params["b1"]
        h2 = h1 @ self.params["W2"] + self.params["b2"]
        return h1, h2, np.concatenate([h1, h2], axis=1)

    def backward(self, x, h1, dh1_direct, dh2):
        dh1 = dh1_direct + dh2 @ self.params["W2"].T
        return {
            "W1": x.T @ dh1,
            "b1": dh1.sum(axis=0),
            "W2": h1.T @ dh2,
            "b2": dh2.sum(axis=0),
        }


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, _EPS)


def _norm_backward(x: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    # chain dL/d x_hat back through x_hat = x / ||x||
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _EPS)
    x_hat = x / norms
    return (d_hat - np.einsum("nd,nd->n", d_hat, x_hat)[:, None] * x_hat) / norms


def _head_losses(head, x, triplets, label_sets, embeddings, config, flags):
    """Triplet + adaptive-margin losses on head outputs with parameter grads."""
    rows = np.unique(np.concatenate([triplets.anchors, triplets.positives, triplets.negatives]))
    pos_of = {int(r): i for i, r in enumerate(rows)}
    xb = x[rows]
    h1, h2, z = head.forward(xb)
    dz = np.zeros_like(z)
    dh2 = np.zeros_like(h2)
    loss_t = loss_s = 0.0
    count = max(len(triplets.anchors), 1)

    if "triplet" in flags and len(triplets.anchors):
        z_hat = _normalize_rows(z)
        d_hat = np.zeros_like(z_hat)
        for a, p, ng in zip(triplets.anchors, triplets.positives, triplets.negatives):
            ia, ip, ing = pos_of[int(a)], pos_of[int(p)], pos_of[int(ng)]
            val, (ga, gp, gn) = triplet_loss(
                z_hat[ia], z_hat[ip], z_hat[ing], config.triplet_margin
            )
            loss_t += val
            d_hat[ia] += ga
            d_hat[ip] += gp
            d_hat[ing] += gn
        loss_t /= count
        dz += _norm_backward(z, d_hat / count)

    if "adaptive_margin" in flags and embeddings is not None and len(triplets.anchors):
        for a in triplets.anchors:
            ia = pos_of[int(a)]
            val, g = adaptive_margin_loss(h2[ia], label_sets[int(a)], embeddings)
            loss_s += val
            dh2[ia] += g
        loss_s /= count
        dh2 /= count

    d1 = h1.shape[1]
    grads = head.backward(xb, h1, dz[:, :d1], dz[:, d1:] + dh2)
    return loss_t, loss_s, grads


def train(features: FeatureMatrix, config: TrainConfig, embeddings: LabelEmbeddings | None = None):
    """Three-stage schedule: optional metric-learning refinement of the
    features, then codebook training at one level, then at the full level
    count. Returns the trained model and a per-epoch log (list of dicts).
    """
    x = features.data
    rng = np.random.default_rng(np.uint64(config.seed))
    flags = config.loss_flags
    log: list[dict] = []

    head = None
    label_sets = None
    head_flags = [f for f in HEAD_FLAGS if f in flags]
    if config.enable_stage1:
        if features.labels is None and features.multi_labels is None:
            raise DomainError("stage 1 requires labels")
        if "adaptive_margin" in flags and embeddings is None:
            raise DomainError("adaptive_margin loss requires label embeddings")
        if not head_flags:
            raise DomainError("stage 1 enabled but no triplet/adaptive_margin loss flag set")
        label_sets = features.label_sets()
        widths = config.head_widths
        if widths is None:
            d2 = embeddings.dim if embeddings is not None else 64
            widths = (max(x.shape[1] // 2, 1), d2)
        if embeddings is not None and widths[1] != embeddings.dim:
            raise DomainError("second head width must match embedding dimension")
        head = _Head(x.shape[1], widths, rng)
        _train_stage1(head, x, label_sets, embeddings, config, rng, log)

    refined = head.forward(x)[2] if head is not None else x

    # codebook init at M=1
    init_seed = int(rng.integers(2 ** 32))
    if config.init == "kmeans":
        codebook = kmeans_init(refined, config.k, seed=init_seed)
    else:
        codebook = np.random.default_rng(init_seed).normal(size=(config.k, refined.shape[1]))
    if config.w_init == "residual":
        codes = np.argmin(
            np.linalg.norm(refined[:, None, :] - codebook[None, :, :], axis=2), axis=1
        )
        resid = refined - codebook[codes]
        num = np.linalg.norm(resid, axis=1).mean()
        den = np.linalg.norm(refined, axis=1).mean()
        w = float(np.clip(num / max(den, _EPS), 0.05, 1.0))
    else:
        w = float(rng.uniform(0.1, 0.9))

    model = RqModel(codebook, w, config.gamma, 1)
    model = _train_quant_stage(
        2, model, x, head, label_sets, embeddings, config, rng, log, config.epochs_stage2
    )
    model = model.with_levels(config.m)
    model = _train_quant_stage(
        3, model, x, head, label_sets, embeddings, config, rng, log, config.epochs_stage3
    )
    return model, log


def _train_stage1(head, x, label_sets, embeddings, config, rng, log):
    state = AdamState()
    n = x.shape[0]
    flags = config.loss_flags
    for epoch in range(config.epochs_stage1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        tot_t = tot_s = 0.0
        nb = 0
        for start in range(0, n, config.batch_size):
            anchors = order[start : start + config.batch_size]
            triplets = sample_triplets(label_sets, rng, anchors)
            if len(triplets.anchors) == 0:
                continue
            lt, ls, grads = _head_losses(
                head, x, triplets, label_sets, embeddings, config, flags
            )
            adam_step(head.params, grads, state, config)
            tot_t += lt
            tot_s += ls
            nb += 1
        record = {"stage": 1, "epoch": epoch, "wall_time": time.perf_counter() - t0}
        if "triplet" in flags:
            record["l_triplet"] = tot_t / max(nb, 1)
        if "adaptive_margin" in flags:
            record["l_margin"] = tot_s / max(nb, 1)
        log.append(record)


def _enabled_distortion_grads(xb, model, flags):
    fw = _forward(xb, model)
    d_c = np.zeros_like(model.codebook)
    d_w = 0.0
    need_hard = "hard_distortion" in flags or "joint_central" in flags
    need_soft = "soft_distortion" in flags or "joint_central" in flags
    hc = hw = sc = sw = None
    if need_hard:
        hc, hw = grad_hard_distortion(xb, model, fw)
    if need_soft:
        sc, sw = grad_soft_distortion(xb, model, fw)
    if "hard_distortion" in flags:
        d_c += hc
        d_w += hw
    if "soft_distortion" in flags:
        d_c += sc
        d_w += sw
    if "joint_central" in flags:
        x = xb if xb.ndim == 2 else xb[None]
        e_h = np.linalg.norm(fw.hard_sums - x, axis=2).mean(axis=1).sum()
        e_s = np.linalg.norm(fw.soft_sums - x, axis=2).mean(axis=1).sum()
        sgn = np.sign(e_h - e_s)
        d_c += sgn * (hc - sc)
        d_w += sgn * (hw - sw)
    return d_c, d_w


def _monitored_loss(report: DistortionReport, flags) -> float:
    total = 0.0
    if "hard_distortion" in flags:
        total += report.e_hard
    if "soft_distortion" in flags:
        total += report.e_soft
    if "joint_central" in flags:
        total += report.e_joint
    return total


def _train_quant_stage(stage, model, x, head, label_sets, embeddings, config, rng, log, epochs):
    flags = config.loss_flags
    if not any(f in flags for f in DISTORTION_FLAGS):
        return model
    n = x.shape[0]
    params = {"C": model.codebook.copy(), "w": np.float64(model.scale)}
    state = AdamState()
    head_state = AdamState() if head is not None else None
    head_flags = [f for f in HEAD_FLAGS if f in flags] if head is not None else []

    def current_model(gamma=None):
        return RqModel(
            params["C"].copy(),
            float(params["w"]),
            model.gamma if gamma is None else gamma,
            model.levels,
        )

    def full_report(mdl):
        feats = head.forward(x)[2] if head is not None else x
        return distortion_losses(feats, mdl), feats

    report, _ = full_report(current_model())
    best_loss = _monitored_loss(report, flags)
    best = (params["C"].copy(), float(params["w"]))
    recent: list[float] = []

    for epoch in range(epochs):
        t0 = time.perf_counter()
        gamma = model.gamma
        if stage == 3 and config.gamma_final is not None and epochs > 1:
            frac = epoch / (epochs - 1)
            gamma = model.gamma + frac * (config.gamma_final - model.gamma)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            mdl = current_model(gamma)
            feats = head.forward(x[batch_idx])[2] if head is not None else x[batch_idx]
            d_c, d_w = _enabled_distortion_grads(feats, mdl, flags)
            adam_step(params, {"C": d_c, "w": np.float64(d_w)}, state, config)
            params["w"] = np.float64(max(float(params["w"]), 1e-3))
            if head is not None and head_flags and label_sets is not None:
                triplets = sample_triplets(label_sets, rng, batch_idx)
                if len(triplets.anchors):
                    _, _, hgrads = _head_losses(
                        head, x, triplets, label_sets, embeddings, config, flags
                    )
                    adam_step(head.params, hgrads, head_state, config)

        mdl = current_model(gamma)
        report, _ = full_report(mdl)
        monitored = _monitored_loss(report, flags)
        record = {
            "stage": stage,
            "epoch": epoch,
            "wall_time": time.perf_counter() - t0,
        }
        if "hard_distortion" in flags:
            record["e_hard"] = report.e_hard
        if "soft_distortion" in flags:
            record["e_soft"] = report.e_soft
        if "joint_central" in flags:
            record["e_joint"] = report.e_joint
        record["monitored"] = monitored
        log.append(record)

        if monitored < best_loss:
            best_loss = monitored
            best = (params["C"].copy(), float(params["w"]))
        recent.append(monitored)
        if len(recent) > 5:
            recent.pop(0)
            lo, hi = min(recent), max(recent)
            if hi - lo < 1e-6 * max(abs(hi), 1.0):
                break

    return RqModel(best[0], best[1], model.gamma, model.levels)
