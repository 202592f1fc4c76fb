"""Text-aware patch selection: semantic scoring, decisions, aggregation.

Stage 1 scores every patch from four views: a learned prediction head plus
attention against the sparse-text, dense-text, and image global embeddings.
Stage 2 converts per-branch scores into stochastic keep/drop decisions
(two-logit Gumbel softmax with a straight-through estimator) and fuses the
survivors of both branches into a fixed number of aggregated vectors via
masked column softmax weights.

Modes: "train" samples Gumbel noise and uses hard decisions with soft
backward; "eval" is deterministic and hard; "soft" disables noise and keeps
the smooth relaxation end to end, which is what finite-difference audits
run against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import CONSTANTS, Tensor
from .bank import Sample, global_embedding, stable_id_hash
from .errors import ConfigError, NoPatchesSelectedError, ShapeError

MODES = ("train", "eval", "soft")

# branch scores are clipped here before entering the log-domain logits
CLIP_HI = 1.0 - 1e-6


@dataclass
class SelectionParams:
    """Weights and knobs for the selection stage.

    The prediction head is a two-layer perceptron (d -> d -> 1) with a tanh
    hidden activation and sigmoid output; each aggregation branch maps a
    patch to its column logits (d -> n_keep).
    """

    pred_w1: Tensor
    pred_b1: Tensor
    pred_w2: Tensor
    pred_b2: Tensor
    agg_sparse_w: Tensor
    agg_sparse_b: Tensor
    agg_dense_w: Tensor
    agg_dense_b: Tensor
    beta: float = 0.2
    tau: float = 1.0
    n_keep: int = 8
    rho: float = 0.5
    zero_dense_attention: bool = False  # ablation switch: s_dt forced to 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 0.5:
            raise ConfigError("beta must lie in [0, 0.5]")
        if self.tau <= 0.0:
            raise ConfigError("tau must be > 0")
        if self.n_keep < 1:
            raise ConfigError("n_keep must be >= 1")

    @property
    def dim(self) -> int:
        return self.pred_w1.shape[0]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "pred.w1", self.pred_w1
        yield "pred.b1", self.pred_b1
        yield "pred.w2", self.pred_w2
        yield "pred.b2", self.pred_b2
        yield "agg_sparse.w", self.agg_sparse_w
        yield "agg_sparse.b", self.agg_sparse_b
        yield "agg_dense.w", self.agg_dense_w
        yield "agg_dense.b", self.agg_dense_b


@dataclass
class ScoreBundle:
    """Per-patch significance components and their combined score.

    `predicted` and `combined` carry gradients; the three attention scores
    are pure functions of the input features and stay plain arrays.
    """

    predicted: Tensor
    sparse_text: np.ndarray
    dense_text: np.ndarray
    image_self: np.ndarray
    combined: Tensor | None


@dataclass
class DecisionMask:
    """Keep/drop decision for each patch in one branch.

    `hard` is the 0/1 forward decision, `soft` the keep probability, and
    `logit` the temperature-scaled log-odds that produced it.
    """

    hard: np.ndarray
    soft: Tensor
    logit: Tensor

    def gate(self, mode: str) -> Tensor:
        """Per-patch multiplier used downstream: hard forward in train/eval,
        with the straight-through backward in train mode only."""
        if mode == "train":
            return ad.straight_through(self.soft, self.hard)
        if mode == "eval":
            return ad.constant(self.hard)
        if mode == "soft":
            return self.soft
        raise ConfigError(f"unknown mode: {mode}")

    @property
    def kept(self) -> np.ndarray:
        return self.hard.astype(bool)


@dataclass
class AggregatedPatches:
    """Fused patch vectors plus the aggregation weights that built them."""

    vectors: Tensor                    # n_keep x d
    weights_sparse: Tensor | None      # None when the branch kept nothing
    weights_dense: Tensor | None
    empty_sparse: bool
    empty_dense: bool


def predict_scores(patches: np.ndarray, params: SelectionParams) -> Tensor:
    """Learned significance in (0,1) for every patch."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != params.dim:
        raise ShapeError(f"patches shape {patches.shape} does not match dim {params.dim}")
    v = ad.constant(patches)
    hidden = ad.tanh(ad.add_rowvec(ad.matmul(v, params.pred_w1), params.pred_b1))
    logits = ad.add(ad.matmul(hidden, params.pred_w2), params.pred_b2)
    return ad.sigmoid(logits)


def attention_scores(patches: np.ndarray, embedding: np.ndarray, dim: int) -> np.ndarray:
    """Scaled dot-product attention of patches against a global embedding,
    min-max normalized to [0,1].

    The raw score divides by the embedding dimension; a degenerate range
    (below eps_norm) maps every patch to 0.5.
    """
    raw = np.asarray(patches, dtype=np.float64) @ np.asarray(embedding, dtype=np.float64) / dim
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < CONSTANTS.eps_norm:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo + CONSTANTS.eps_norm)


def combine_scores(bundle: ScoreBundle, beta: float) -> Tensor:
    """Total significance: (1-2b)*pred + b*(sparse + dense + 2*image)."""
    fixed = beta * (bundle.sparse_text + bundle.dense_text + 2.0 * bundle.image_self)
    return ad.add(ad.scale(bundle.predicted, 1.0 - 2.0 * beta), ad.constant(fixed))


def branch_scores(bundle: ScoreBundle, beta: float) -> tuple[Tensor, Tensor]:
    """Per-branch decision scores, clipped to [0, 1) for the log domain.

    Each branch fills the missing modality's slot with its own attention
    score, so sparse and dense branches see the same total weight mass.
    """
    coeff = 1.0 - 2.0 * beta
    sparse_fixed = beta * (2.0 * bundle.sparse_text + 2.0 * bundle.image_self)
    dense_fixed = beta * (2.0 * bundle.dense_text + 2.0 * bundle.image_self)
    pred = ad.scale(bundle.predicted, coeff)
    s_sparse = ad.clip(ad.add(pred, ad.constant(sparse_fixed)), 0.0, CLIP_HI)
    s_dense = ad.clip(ad.add(pred, ad.constant(dense_fixed)), 0.0, CLIP_HI)
    return s_sparse, s_dense


def gumbel_decision(scores: Tensor, tau: float, noise_enabled: bool,
                    rng: np.random.Generator | None = None) -> DecisionMask:
    """Two-logit Gumbel decision per patch.

    keep = log(s + eps), drop = log(1 - s + eps); i.i.d. Gumbel noise is
    added to both logits when enabled; the keep probability is the softmax
    of the pair at temperature tau.  A patch is kept iff that probability
    strictly exceeds 0.5, so an exactly ambivalent score drops.
    """
    if tau <= 0.0:
        raise ConfigError("tau must be > 0")
    keep = ad.log(ad.add_scalar(scores, CONSTANTS.eps_log))
    # 1-s formed as -(s-1) so an exact 0.5 yields bitwise-equal logits
    one_minus = ad.neg(ad.add_scalar(scores, -1.0))
    drop = ad.log(ad.add_scalar(one_minus, CONSTANTS.eps_log))
    diff = ad.add(keep, ad.neg(drop))
    if noise_enabled:
        if rng is None:
            raise ConfigError("noise requires an rng")
        g_keep = rng.gumbel(size=scores.shape)
        g_drop = rng.gumbel(size=scores.shape)
        diff = ad.add(diff, ad.constant(g_keep - g_drop))
    logit = ad.scale(diff, 1.0 / tau)
    soft = ad.sigmoid(logit)
    hard = (soft.data > 0.5).astype(np.float64)
    return DecisionMask(hard=hard, soft=soft, logit=logit)


def _branch_weights(logits: Tensor, mask: DecisionMask, mode: str) -> Tensor | None:
    """Column-softmax aggregation weights for one branch, or None if empty."""
    if mode == "soft":
        log_gate = ad.log_sigmoid(mask.logit)
        return ad.softmax_columns(ad.add_colvec(logits, log_gate))
    support = mask.kept
    if not support.any():
        return None
    return ad.softmax_columns(logits, support)


def aggregate(patches: np.ndarray, mask_s: DecisionMask, mask_d: DecisionMask,
              params: SelectionParams, mode: str = "train") -> AggregatedPatches:
    """Fuse surviving patches of both branches into n_keep vectors.

    Weight columns are softmax-normalized over each branch's survivors, so
    every used column sums to one; a branch that kept nothing contributes
    the zero vector and is flagged.  Raises when both branches are empty.
    """
    patches = np.asarray(patches, dtype=np.float64)
    n = patches.shape[0]
    if mask_s.hard.shape != (n,) or mask_d.hard.shape != (n,):
        raise ShapeError("mask length does not match patch count")
    v = ad.constant(patches)
    logits_s = ad.add_rowvec(ad.matmul(v, params.agg_sparse_w), params.agg_sparse_b)
    logits_d = ad.add_rowvec(ad.matmul(v, params.agg_dense_w), params.agg_dense_b)

    w_s = _branch_weights(logits_s, mask_s, mode)
    w_d = _branch_weights(logits_d, mask_d, mode)
    if w_s is None and w_d is None:
        raise NoPatchesSelectedError("no patches selected")

    def contribution(weights: Tensor | None, mask: DecisionMask) -> Tensor:
        if weights is None:
            return ad.constant(np.zeros((params.n_keep, params.dim)))
        gated = ad.scale_rows(weights, mask.gate(mode))
        return ad.matmul(ad.transpose(gated), v)

    vectors = ad.add(contribution(w_s, mask_s), contribution(w_d, mask_d))
    return AggregatedPatches(
        vectors=vectors,
        weights_sparse=w_s,
        weights_dense=w_d,
        empty_sparse=w_s is None,
        empty_dense=w_d is None,
    )


def decision_rng(seed: int, sample_id: str, step: int = 0) -> np.random.Generator:
    """Noise stream reproducibly keyed by (run seed, sample, step)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, stable_id_hash(sample_id), step]))


def score_and_decide(
    sample: Sample,
    params: SelectionParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[ScoreBundle, DecisionMask, DecisionMask]:
    """Stage 1 plus the per-branch decisions, without aggregation.

    Gumbel noise is sampled only in train mode; the sparse branch draws
    first so the noise stream is reproducible.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode: {mode}")
    patches = sample.patches
    dim = patches.shape[1]

    e_sparse, _ = global_embedding(sample.sparse_tokens)
    e_dense, _ = global_embedding(sample.dense_tokens)
    e_image, _ = global_embedding(patches)

    s_st = attention_scores(patches, e_sparse, dim)
    if params.zero_dense_attention:
        s_dt = np.zeros(patches.shape[0])
    else:
        s_dt = attention_scores(patches, e_dense, dim)
    s_im = attention_scores(patches, e_image, dim)

    predicted = predict_scores(patches, params)
    bundle = ScoreBundle(
        predicted=predicted,
        sparse_text=s_st,
        dense_text=s_dt,
        image_self=s_im,
        combined=None,  # filled below once components exist
    )
    bundle.combined = combine_scores(bundle, params.beta)

    score_s, score_d = branch_scores(bundle, params.beta)
    noise = mode == "train"
    mask_s = gumbel_decision(score_s, params.tau, noise, rng)
    mask_d = gumbel_decision(score_d, params.tau, noise, rng)
    return bundle, mask_s, mask_d


def select_and_aggregate(
    sample: Sample,
    params: SelectionParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[AggregatedPatches, ScoreBundle, tuple[DecisionMask, DecisionMask]]:
    """Full selection pass for one sample: scoring, decisions, aggregation."""
    bundle, mask_s, mask_d = score_and_decide(sample, params, mode, rng)
    agg = aggregate(sample.patches, mask_s, mask_d, params, mode)
    return agg, bundle, (mask_s, mask_d)
