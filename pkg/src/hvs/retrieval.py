"""Embedding indexes, retrieval and verification metrics, the compatibility
rule and the amortized embedding-cost model.

Similarity is the dot product of unit embeddings.  Rankings break ties by
the lower gallery row index.  Open-set thresholds are picked from the
observed scores (plus ``+inf``): the smallest candidate ``t`` such that the
fraction of non-mated / impostor scores ``>= t`` does not exceed the target.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledDataset
from .nn import FLOAT, NORM_EPS, ShapeError, count_flops, l2_normalize

METRICS = ("top1", "top5", "top10", "tpir", "tar")


def model_fingerprint(model) -> str:
    h = hashlib.sha256()
    for name, value in model.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray  # (m, K) unit rows
    labels: np.ndarray
    producer: str = ""

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def embed_set(model, data: LabeledDataset, producer: str | None = None,
              zero_degenerate: bool = False) -> EmbeddingIndex:
    """Embed every sample of ``data`` in order.

    A zero model output cannot be normalized.  By default that raises; with
    ``zero_degenerate`` the row stays zero, so it scores 0 against everything.
    """
    if len(data) == 0:
        return EmbeddingIndex(np.zeros((0, model.embedding_dim), dtype=FLOAT), data.labels.copy(),
                              producer or "")
    if data.dim != model.input_dim:
        raise ShapeError(f"data width {data.dim} != model input width {model.input_dim}")
    out = model.forward(data.features)
    if zero_degenerate:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        emb = np.where(norms > NORM_EPS, out / np.where(norms > NORM_EPS, norms, 1.0), 0.0).astype(FLOAT)
    else:
        emb = l2_normalize(out).astype(FLOAT)
    return EmbeddingIndex(emb, data.labels.copy(), producer if producer is not None else model_fingerprint(model))


def similarity(probe: EmbeddingIndex, gallery: EmbeddingIndex) -> np.ndarray:
    return probe.embeddings @ gallery.embeddings.T


def rank_gallery(scores: np.ndarray) -> np.ndarray:
    """Per-probe gallery order: descending score, ties by lower row index."""
    return np.argsort(-scores, axis=1, kind="stable")


def topk_from_scores(scores, probe_labels, gallery_labels, k: int) -> float:
    scores = np.asarray(scores)
    if k < 1:
        raise ValueError("k must be at least 1")
    if scores.shape[1] == 0:
        raise ValueError("gallery is empty")
    if scores.shape[0] == 0:
        return 0.0
    k = min(k, scores.shape[1])  # documented clamp
    top = rank_gallery(scores)[:, :k]
    hits = np.asarray(gallery_labels)[top] == np.asarray(probe_labels)[:, None]
    return float(hits.any(axis=1).mean())


def topk_accuracy(probe: EmbeddingIndex, gallery: EmbeddingIndex, k: int) -> float:
    """Fraction of probes with a same-label row among their ``k`` nearest gallery rows."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    return topk_from_scores(similarity(probe, gallery), probe.labels, gallery.labels, k)


def select_threshold(negative_scores: np.ndarray, candidates: np.ndarray, target: float) -> float:
    """Smallest candidate ``t`` with ``mean(negative >= t) <= target``."""
    neg = np.sort(np.asarray(negative_scores, dtype=np.float64))
    cand = np.unique(np.append(np.asarray(candidates, dtype=np.float64), np.inf))
    # count of negatives >= t for each candidate
    above = neg.size - np.searchsorted(neg, cand, side="left")
    ok = above / neg.size <= target
    return float(cand[np.argmax(ok)])  # ok is monotone and true at +inf


def _check_target(target):
    if not 0 < target <= 1:
        raise ValueError("operating-point target must lie in (0, 1]")


def tpir_from_scores(mated_scores, mated_labels, nonmated_scores, gallery_labels, fpir_target: float) -> float:
    """TPIR at FPIR from full probe-by-gallery score matrices."""
    _check_target(fpir_target)
    mated_scores = np.asarray(mated_scores)
    nonmated_scores = np.asarray(nonmated_scores)
    if mated_scores.shape[0] == 0 or nonmated_scores.shape[0] == 0 or mated_scores.shape[1] == 0:
        raise ValueError("TPIR needs mated probes, non-mated probes and a gallery")
    best_mated = mated_scores.max(axis=1).astype(np.float64)
    best_nonmated = nonmated_scores.max(axis=1).astype(np.float64)
    t = select_threshold(best_nonmated, np.concatenate([best_mated, best_nonmated]), fpir_target)
    rank1 = np.asarray(gallery_labels)[rank_gallery(mated_scores)[:, 0]] == np.asarray(mated_labels)
    return float(np.mean((best_mated >= t) & rank1))


def tpir_at_fpir(mated: EmbeddingIndex, nonmated: EmbeddingIndex, gallery: EmbeddingIndex,
                 fpir_target: float) -> float:
    return tpir_from_scores(similarity(mated, gallery), mated.labels, similarity(nonmated, gallery),
                            gallery.labels, fpir_target)


def tar_at_far(genuine_scores, impostor_scores, far_target: float) -> float:
    """Fraction of genuine scores at or above the FAR-calibrated threshold."""
    _check_target(far_target)
    gen = np.asarray(genuine_scores, dtype=np.float64).ravel()
    imp = np.asarray(impostor_scores, dtype=np.float64).ravel()
    if gen.size == 0 or imp.size == 0:
        raise ValueError("TAR needs genuine and impostor scores")
    t = select_threshold(imp, np.concatenate([gen, imp]), far_target)
    return float(np.mean(gen >= t))


def verification_scores(probe: EmbeddingIndex, gallery: EmbeddingIndex):
    """Split all probe-gallery pair scores into (genuine, impostor)."""
    scores = similarity(probe, gallery)
    same = probe.labels[:, None] == gallery.labels[None, :]
    return scores[same], scores[~same]


def check_compatibility(m_qg: float, m_qq: float) -> bool:
    """Heterogeneous accuracy must strictly beat the query model's homogeneous accuracy."""
    return bool(m_qg > m_qq)


def amortized_cost(gallery_flops: float, query_flops: float, ratio: float) -> float:
    """Per-image embedding cost when ``ratio`` queries arrive per indexed image."""
    if ratio < 0 or math.isnan(ratio):
        raise ValueError("ratio must be non-negative")
    if math.isinf(ratio):
        return float(query_flops)
    return (gallery_flops + ratio * query_flops) / (1.0 + ratio)


def cost_curve(gallery_flops: float, query_flops: float, ratios) -> list[tuple[float, float]]:
    return [(float(r), amortized_cost(gallery_flops, query_flops, float(r))) for r in ratios]


# -- evaluation of one (query, gallery) pair ---------------------------------

@dataclass
class EvalReport:
    metric_name: str
    M_qq: float
    M_qg: float
    M_gg: float
    compatible: bool
    query_flops: int
    gallery_flops: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    CSV_HEADER = "metric_name,M_qq,M_qg,M_gg,compatible,query_flops,gallery_flops"

    def to_csv_row(self) -> str:
        return (f"{self.metric_name},{self.M_qq:.6f},{self.M_qg:.6f},{self.M_gg:.6f},"
                f"{str(self.compatible).lower()},{self.query_flops},{self.gallery_flops}")


def metric_value(metric: str, probe: EmbeddingIndex, gallery: EmbeddingIndex,
                 nonmated: EmbeddingIndex | None = None, target: float = 0.1) -> float:
    """Evaluate one named metric; probes on the query side, gallery on the enrolled side."""
    if metric.startswith("top"):
        return topk_accuracy(probe, gallery, int(metric[3:]))
    if metric == "tpir":
        if nonmated is None:
            raise ValueError("tpir needs non-mated probes")
        return tpir_at_fpir(probe, nonmated, gallery, target)
    if metric == "tar":
        gen, imp = verification_scores(probe, gallery)
        if nonmated is not None and len(nonmated):
            imp = np.concatenate([imp, similarity(nonmated, gallery).ravel()])
        return tar_at_far(gen, imp, target)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def evaluate_pair(query_model, gallery_model, split, metric: str = "top1", target: float = 0.1) -> EvalReport:
    """Homogeneous and heterogeneous accuracy of a (query, gallery) pair on the test split.

    Zero model outputs score 0 against everything rather than aborting, so a
    collapsed model is reported with its (poor) accuracy.
    """
    def emb(model, data):
        return embed_set(model, data, zero_degenerate=True)

    q_gal, g_gal = emb(query_model, split.test_gallery), emb(gallery_model, split.test_gallery)
    q_probe, g_probe = emb(query_model, split.test_probe_mated), emb(gallery_model, split.test_probe_mated)
    nonmated = split.test_probe_nonmated
    q_non = emb(query_model, nonmated) if len(nonmated) else None
    g_non = emb(gallery_model, nonmated) if len(nonmated) else None
    m_qq = metric_value(metric, q_probe, q_gal, q_non, target)
    m_qg = metric_value(metric, q_probe, g_gal, q_non, target)
    m_gg = metric_value(metric, g_probe, g_gal, g_non, target)
    name = metric if metric.startswith("top") else f"{metric}@{target:g}"
    return EvalReport(name, m_qq, m_qg, m_gg, check_compatibility(m_qg, m_qq),
                      count_flops(query_model), count_flops(gallery_model))
