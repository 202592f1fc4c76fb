"""Retrieval evaluation and selection diagnostics.

Recall@K counts a query as a hit when any of its ground-truth gallery
indices ranks inside the top K, with score ties broken toward the lower
gallery index.  rSum adds the six recalls (both directions, K in 1/5/10).
Selection quality scores the sparse-branch ranking against the synthetic
relevance masks as an ROC AUC.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import alignment, selection
from .bank import FeatureBank, Sample
from .errors import BankInvariantError, ConfigError

K_VALUES = (1, 5, 10)


@dataclass(frozen=True)
class GroundTruth:
    """Correct gallery indices per query; every query needs at least one."""

    positives: tuple[frozenset[int], ...]

    def __post_init__(self) -> None:
        if any(len(p) == 0 for p in self.positives):
            raise ConfigError("ground truth empty for some query")

    @staticmethod
    def identity(n: int) -> "GroundTruth":
        return GroundTruth(tuple(frozenset((i,)) for i in range(n)))


@dataclass(frozen=True)
class RetrievalReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    rsum: float
    n_queries_i2t: int
    n_queries_t2i: int

    def machine_line(self) -> str:
        fields = (self.i2t_r1, self.i2t_r5, self.i2t_r10,
                  self.t2i_r1, self.t2i_r5, self.t2i_r10, self.rsum)
        return ",".join(f"{v:.4f}" for v in fields)

    def table(self) -> str:
        rows = [
            f"{'':>14}  {'R@1':>7}  {'R@5':>7}  {'R@10':>7}",
            f"{'image-to-text':>14}  {self.i2t_r1:7.2f}  {self.i2t_r5:7.2f}  {self.i2t_r10:7.2f}",
            f"{'text-to-image':>14}  {self.t2i_r1:7.2f}  {self.t2i_r5:7.2f}  {self.t2i_r10:7.2f}",
            f"{'rSum':>14}  {self.rsum:7.2f}",
        ]
        return "\n".join(rows)


def recall_at_k(scores: np.ndarray, gt: GroundTruth, k: int) -> float:
    """Percentage of queries whose ground truth appears in the top-k list."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ConfigError("scores must be a Q x G matrix")
    queries, gallery = scores.shape
    if len(gt.positives) != queries:
        raise ConfigError("ground truth size does not match query count")
    if k < 1 or k > gallery:
        raise ConfigError(f"k={k} outside gallery size {gallery}")
    hits = 0
    indices = np.arange(gallery)
    for q in range(queries):
        # lexsort: descending score, then ascending index for ties
        order = np.lexsort((indices, -scores[q]))
        if not gt.positives[q].isdisjoint(order[:k].tolist()):
            hits += 1
    return 100.0 * hits / queries


def rsum(recalls: Sequence[float]) -> float:
    """Exact left-to-right sum of the six recall percentages."""
    if len(recalls) != 6:
        raise ConfigError("rsum expects exactly six recalls")
    total = 0.0
    for value in recalls:
        total += float(value)
    return total


def _worker_count() -> int:
    raw = os.environ.get("SEPS_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def _aggregated_vectors(bank: FeatureBank, params) -> list[np.ndarray]:
    def one(sample: Sample) -> np.ndarray:
        agg, _, _ = selection.select_and_aggregate(sample, params.selection, "eval")
        return agg.vectors.data

    workers = _worker_count()
    with ad.no_grad():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(one, bank.samples))
        return [one(s) for s in bank.samples]


def pairwise_scores(bank: FeatureBank, params) -> np.ndarray:
    """S[i, j] = alignment score of image i against caption j, eval mode."""
    if bank.dim != params.selection.dim:
        raise ConfigError("dimension mismatch between bank and checkpoint")
    vectors = _aggregated_vectors(bank, params)
    n = len(bank.samples)
    scores = np.zeros((n, n))

    def fill_row(i: int) -> None:
        for j, other in enumerate(bank.samples):
            scores[i, j] = alignment.align_score(
                vectors[i], other.sparse_tokens, params.alignment).total.item()

    workers = _worker_count()
    with ad.no_grad():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(fill_row, range(n)))
        else:
            for i in range(n):
                fill_row(i)
    return scores


def _six_recalls(scores: np.ndarray, gt_i2t: GroundTruth, gt_t2i: GroundTruth) -> list[float]:
    # K is clamped to the gallery size so small banks stay evaluable
    gallery = scores.shape[1]
    i2t = [recall_at_k(scores, gt_i2t, min(k, gallery)) for k in K_VALUES]
    gallery_t = scores.shape[0]
    t2i = [recall_at_k(scores.T, gt_t2i, min(k, gallery_t)) for k in K_VALUES]
    return i2t + t2i


def retrieval_eval(bank: FeatureBank, params, folds: int = 1,
                   gt_i2t: GroundTruth | None = None,
                   gt_t2i: GroundTruth | None = None) -> RetrievalReport:
    """Evaluate retrieval in both directions over all pairs in the bank.

    `folds > 1` splits the bank into contiguous folds, evaluates each
    in isolation, and averages the six recalls over folds.
    """
    if len(bank.samples) < 2:
        raise ConfigError("retrieval needs at least two samples")
    scores = pairwise_scores(bank, params)
    n = scores.shape[0]
    if folds < 1 or n % folds != 0:
        raise ConfigError("fold count must divide the sample count")
    if folds == 1:
        recalls = _six_recalls(scores,
                               gt_i2t or GroundTruth.identity(n),
                               gt_t2i or GroundTruth.identity(n))
    else:
        if gt_i2t is not None or gt_t2i is not None:
            raise ConfigError("custom ground truth is not supported with folds")
        size = n // folds
        per_fold = []
        for f in range(folds):
            block = scores[f * size:(f + 1) * size, f * size:(f + 1) * size]
            ident = GroundTruth.identity(size)
            per_fold.append(_six_recalls(block, ident, ident))
        recalls = [float(np.mean([fold[i] for fold in per_fold])) for i in range(6)]
    return RetrievalReport(
        i2t_r1=recalls[0], i2t_r5=recalls[1], i2t_r10=recalls[2],
        t2i_r1=recalls[3], t2i_r5=recalls[4], t2i_r10=recalls[5],
        rsum=rsum(recalls),
        n_queries_i2t=n, n_queries_t2i=n,
    )


# ---------------------------------------------------------------------------
# selection diagnostics


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based ROC AUC with midrank handling of ties."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise BankInvariantError("AUC needs both classes")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sparse_branch_scores(sample: Sample, params) -> np.ndarray:
    """Eval-mode sparse-branch decision scores for one sample."""
    with ad.no_grad():
        _, bundle, _ = selection.select_and_aggregate(sample, params.selection, "eval")
        score, _ = selection.branch_scores(bundle, params.selection.beta)
        return score.data


def selection_quality(bank: FeatureBank, params) -> float:
    """Mean per-sample AUC of the sparse-branch ranking vs the ground-truth
    relevance mask; samples without a two-class mask are skipped."""
    if bank.dim != params.selection.dim:
        raise ConfigError("dimension mismatch between bank and checkpoint")
    aucs = []
    for sample in bank.samples:
        mask = sample.relevance_mask
        if mask is None:
            continue
        labels = np.asarray(mask)
        if labels.min() == labels.max():
            continue
        aucs.append(_auc(sparse_branch_scores(sample, params), labels))
    if not aucs:
        raise BankInvariantError("no masks")
    return float(np.mean(aucs))
