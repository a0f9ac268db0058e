"""Database encoding, asymmetric-distance search over codes, and
retrieval-quality evaluation (mAP@R, precision-recall, precision@R).

Search ranks raw queries against quantized database items: the distance to
item i is ||q||^2 - 2 * sum_m table[m, code_im] + ||recon_i||^2, which equals
the squared Euclidean distance to the item's reconstruction. Ties break by
ascending id. All accumulation is in float64 so rankings agree exactly with
a brute-force reconstruction scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, FeatureMatrix, RqModel, _as_matrix, _as_vector, encode_batch


@dataclass
class EncodedDatabase:
    codes: np.ndarray  # (N, M) sub-indices
    recon_sq_norms: np.ndarray  # (N,) squared reconstruction norms at full length
    model: RqModel
    ids: np.ndarray  # (N,) external item identifiers
    prefix_sq_norms: np.ndarray | None = None  # optional (N, M) per-prefix norms

    @property
    def n(self) -> int:
        return self.codes.shape[0]


@dataclass
class AdcTable:
    dot_table: np.ndarray  # (M, K): w^(m-1) * <query, C_k>
    query_sq_norm: float


@dataclass
class EvalReport:
    map_at_r: float
    pr_curve: list[tuple[float, float]]  # (recall, precision) per rank
    precision_at_r: list[tuple[int, float]]


def _prefix_reconstructions(codes: np.ndarray, model: RqModel, m: int) -> np.ndarray:
    weights = model.scale ** np.arange(m)
    recon = np.zeros((codes.shape[0], model.dim))
    for i in range(m):
        recon += weights[i] * model.codebook[codes[:, i]]
    return recon


def encode_database(features, model: RqModel, ids=None, cache_prefix_norms: bool = False) -> EncodedDatabase:
    """Encode every row and cache squared reconstruction norms."""
    x = features.data if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if x.size == 0:
        n = 0
        codes = np.empty((0, model.levels), dtype=np.int64)
    else:
        x = _as_matrix(x, "features")
        if x.shape[1] != model.dim:
            raise DomainError("feature dimension does not match model")
        n = x.shape[0]
        codes = encode_batch(x, model)
    if ids is None:
        ids = np.arange(n, dtype=np.int64)
    else:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (n,):
            raise DomainError("ids length must match number of rows")
    prefix = None
    if cache_prefix_norms:
        prefix = np.empty((n, model.levels))
        recon = np.zeros((n, model.dim))
        for m in range(1, model.levels + 1):
            recon += model.scale ** (m - 1) * model.codebook[codes[:, m - 1]]
            prefix[:, m - 1] = np.einsum("nd,nd->n", recon, recon)
        norms = prefix[:, -1].copy() if n else np.empty(0)
    else:
        recon = _prefix_reconstructions(codes, model, model.levels)
        norms = np.einsum("nd,nd->n", recon, recon)
    return EncodedDatabase(codes, norms, model, ids, prefix)


def build_adc_table(query, model: RqModel) -> AdcTable:
    """Per-level query-codeword dot products; row m is row 1 scaled by w^(m-1)."""
    q = _as_vector(query, "query")
    if q.shape[0] != model.dim:
        raise DomainError("query dimension does not match model")
    base = model.codebook @ q
    weights = model.scale ** np.arange(model.levels)
    return AdcTable(dot_table=np.outer(weights, base), query_sq_norm=float(q @ q))


def adc_distances(query, db: EncodedDatabase, prefix_m: int | None = None) -> np.ndarray:
    """Squared reconstruction distances from one query to every item."""
    model = db.model
    m = model.levels if prefix_m is None else prefix_m
    if not 1 <= m <= model.levels:
        raise DomainError(f"prefix level {m} out of range")
    table = build_adc_table(query, model)
    if db.n == 0:
        return np.empty(0)
    cross = np.zeros(db.n)
    for i in range(m):
        cross += table.dot_table[i, db.codes[:, i]]
    if m == model.levels:
        norms = db.recon_sq_norms
    elif db.prefix_sq_norms is not None:
        norms = db.prefix_sq_norms[:, m - 1]
    else:
        recon = _prefix_reconstructions(db.codes, model, m)
        norms = np.einsum("nd,nd->n", recon, recon)
    return table.query_sq_norm - 2.0 * cross + norms


def search(query, db: EncodedDatabase, top_k: int, prefix_m: int | None = None):
    """Ranked (ids, distances) for the top_k closest items by ADC distance."""
    if top_k < 1:
        raise DomainError("top_k must be >= 1")
    if db.n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    dists = adc_distances(query, db, prefix_m)
    order = np.lexsort((db.ids, dists))
    order = order[: min(top_k, db.n)]
    return db.ids[order], dists[order]


def average_precision(relevant: np.ndarray, total_relevant: int, r_cutoff: int) -> float:
    """AP truncated at r_cutoff, normalized by min(r_cutoff, total_relevant);
    zero relevant items gives 0."""
    if total_relevant == 0:
        return 0.0
    rel = np.asarray(relevant[:r_cutoff], dtype=np.float64)
    hits = np.cumsum(rel)
    precisions = hits / np.arange(1, rel.shape[0] + 1)
    return float(np.sum(precisions * rel) / min(r_cutoff, total_relevant))


def evaluate(
    queries: FeatureMatrix,
    db: EncodedDatabase,
    db_labels: list[frozenset[int]],
    r_cutoff: int,
    precision_at: tuple[int, ...] = (),
    prefix_m: int | None = None,
) -> EvalReport:
    """Retrieval quality over a labeled query set; an item is relevant to a
    query when they share at least one label."""
    if queries.labels is None and queries.multi_labels is None:
        raise DomainError("queries must carry labels for evaluation")
    if len(db_labels) != db.n:
        raise DomainError("db_labels length must match database size")
    q_sets = queries.label_sets()
    n = db.n
    ap_values = []
    prec_sums = np.zeros(n)
    rec_sums = np.zeros(n)
    db_sets = [frozenset(s) for s in db_labels]
    for qi in range(queries.n):
        dists = adc_distances(queries.data[qi], db, prefix_m)
        order = np.lexsort((db.ids, dists))
        rel = np.fromiter((1.0 if db_sets[j] & q_sets[qi] else 0.0 for j in order), dtype=np.float64, count=n)
        total_rel = int(rel.sum())
        ap_values.append(average_precision(rel, total_rel, r_cutoff))
        hits = np.cumsum(rel)
        prec_sums += hits / np.arange(1, n + 1)
        rec_sums += hits / total_rel if total_rel else 0.0
    nq = queries.n
    mean_prec = prec_sums / nq
    mean_rec = rec_sums / nq
    pr_curve = [(float(mean_rec[r]), float(mean_prec[r])) for r in range(n)]
    precision_points = [
        (int(r), float(mean_prec[min(r, n) - 1])) for r in precision_at if r >= 1
    ]
    return EvalReport(
        map_at_r=float(np.mean(ap_values)) if ap_values else 0.0,
        pr_curve=pr_curve,
        precision_at_r=precision_points,
    )
