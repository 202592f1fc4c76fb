"""Batch similarity assembly and the training objective.

The alignment term is a bidirectional triplet loss with in-batch hardest
negatives; the ratio term penalizes squared deviation of the weighted keep
fractions from the target ratio.  Sample i is paired with caption i as the
positive.  Triplet terms accumulate in row order (text hinge, then image
hinge) so the result is bit-reproducible against a plain double loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import selection
from .alignment import AlignmentParams, score_from_similarity, similarity_matrix
from .autodiff import Tensor
from .bank import Sample
from .errors import ConfigError, ShapeError
from .selection import SelectionParams


@dataclass(frozen=True)
class ObjectiveConfig:
    margin: float = 0.2
    rho: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self) -> None:
        if self.margin <= 0.0:
            raise ConfigError("margin must be > 0")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must lie in (0, 1]")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ConfigError("lambda coefficients must be >= 0")


@dataclass
class BatchScores:
    """Pairwise alignment scores S[i][j] = score(image i, caption j) plus
    per-sample keep statistics for the ratio loss."""

    scores: Tensor                    # B x B
    keep_sparse: list[Tensor]         # per-sample mean gate, sparse branch
    keep_dense: list[Tensor]
    details: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.scores.shape[0]

    def keep_fractions(self) -> tuple[float, float]:
        """Batch-mean forward keep fraction per branch."""
        ks = float(np.mean([t.item() for t in self.keep_sparse]))
        kd = float(np.mean([t.item() for t in self.keep_dense]))
        return ks, kd


def batch_similarity(
    samples: Sequence[Sample],
    sel_params: SelectionParams,
    align_params: AlignmentParams,
    mode: str = "train",
    seed: int = 0,
    step: int = 0,
    collect: bool = False,
) -> BatchScores:
    """One selection pass per image, then alignment against every caption.

    Decision noise is keyed by (seed, sample id, step) so distinct samples
    and steps draw independent, reproducible streams.  `collect` stashes
    forward arrays (aggregated vectors, similarity matrices, branch scores)
    for diagnostics.
    """
    if not samples:
        raise ShapeError("empty batch")
    cells: list[Tensor] = []
    keep_s: list[Tensor] = []
    keep_d: list[Tensor] = []
    details: dict = {"vectors": [], "similarity": {}, "branch_scores": []} if collect else {}
    for i, sample in enumerate(samples):
        rng = selection.decision_rng(seed, sample.sample_id, step) if mode == "train" else None
        agg, bundle, (mask_s, mask_d) = selection.select_and_aggregate(
            sample, sel_params, mode, rng)
        keep_s.append(ad.mean_all(mask_s.gate(mode)))
        keep_d.append(ad.mean_all(mask_d.gate(mode)))
        if collect:
            s_sp, s_dn = selection.branch_scores(bundle, sel_params.beta)
            details["vectors"].append(agg.vectors.data.copy())
            details["branch_scores"].append((s_sp.data.copy(), s_dn.data.copy()))
        for j, other in enumerate(samples):
            sim = similarity_matrix(agg.vectors, other.sparse_tokens)
            if collect:
                details["similarity"][(i, j)] = sim.values.data.copy()
            cells.append(score_from_similarity(sim, align_params).total)
    b = len(samples)
    return BatchScores(
        scores=ad.stack(cells, (b, b)),
        keep_sparse=keep_s,
        keep_dense=keep_d,
        details=details,
    )


def decision_keep_stats(
    samples: Sequence[Sample],
    sel_params: SelectionParams,
    mode: str = "train",
    seed: int = 0,
    step: int = 0,
) -> tuple[list[Tensor], list[Tensor]]:
    """Per-sample keep fractions from the decision stage alone.

    Runs scoring and the Gumbel decisions without aggregating patches, so a
    ratio-only objective can be optimized even when a noisy draw empties
    both branches of a sample.
    """
    keep_s: list[Tensor] = []
    keep_d: list[Tensor] = []
    for sample in samples:
        rng = selection.decision_rng(seed, sample.sample_id, step) if mode == "train" else None
        _, mask_s, mask_d = selection.score_and_decide(sample, sel_params, mode, rng)
        keep_s.append(ad.mean_all(mask_s.gate(mode)))
        keep_d.append(ad.mean_all(mask_d.gate(mode)))
    return keep_s, keep_d


def triplet_loss(scores: Tensor, margin: float) -> Tensor:
    """Bidirectional hinge over the hardest in-batch negatives.

    For each row i, the hardest caption is the off-diagonal row maximum and
    the hardest image the off-diagonal column maximum (first occurrence on
    ties); gradient flows only through the selected entries.
    """
    data = scores.data
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ShapeError(f"scores must be square, got {data.shape}")
    b = data.shape[0]
    if b < 2:
        raise ConfigError("no negatives available")

    masked = data.copy()
    np.fill_diagonal(masked, -np.inf)
    hardest_caption = np.argmax(masked, axis=1)
    hardest_image = np.argmax(masked, axis=0)

    total: Tensor | None = None
    for i in range(b):
        pos = ad.element(scores, i, i)
        text_hinge = ad.relu(ad.add_scalar(
            ad.add(ad.element(scores, i, int(hardest_caption[i])), ad.neg(pos)), margin))
        image_hinge = ad.relu(ad.add_scalar(
            ad.add(ad.element(scores, int(hardest_image[i]), i), ad.neg(pos)), margin))
        term = ad.add(text_hinge, image_hinge)
        total = term if total is None else ad.add(total, term)
    return total


def ratio_loss(keep_stats: tuple[Sequence[Tensor], Sequence[Tensor]],
               cfg: ObjectiveConfig) -> Tensor:
    """Mean over images of (rho - l1*keep_sparse - l2*keep_dense)^2.

    Forward values use the straight-through keep means, so the printed
    value matches the hard decisions while gradient flows through the soft
    keep probabilities.
    """
    keep_s, keep_d = keep_stats
    if len(keep_s) != len(keep_d) or not keep_s:
        raise ShapeError("keep statistics missing for a branch")
    total: Tensor | None = None
    for ps, pd in zip(keep_s, keep_d):
        gap = ad.add_scalar(
            ad.add(ad.scale(ps, -cfg.lambda1), ad.scale(pd, -cfg.lambda2)), cfg.rho)
        term = ad.mul(gap, gap)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(keep_s))


def total_loss(scores: Tensor,
               keep_stats: tuple[Sequence[Tensor], Sequence[Tensor]],
               cfg: ObjectiveConfig) -> Tensor:
    """Unweighted sum of the alignment and ratio terms."""
    return ad.add(triplet_loss(scores, cfg.margin), ratio_loss(keep_stats, cfg))


def batch_loss(batch: BatchScores, cfg: ObjectiveConfig) -> Tensor:
    return total_loss(batch.scores, (batch.keep_sparse, batch.keep_dense), cfg)
