"""Shared builders for tests: parameter sets and hand-constructed samples."""

import numpy as np
import pytest

from seps.bank import Sample
from seps.trainer import ModelParams, TrainConfig, init_params


def make_params(dim: int, n_patches: int = 4, n_keep: int = 2, k_top: int = 2,
                beta: float = 0.2, tau: float = 1.0, seed: int = 0,
                head_hidden: int = 0) -> ModelParams:
    cfg = TrainConfig(dim=dim, n_patches=n_patches, n_keep=n_keep, k_top=k_top,
                      beta=beta, tau=tau, seed=seed, head_hidden=head_hidden)
    return init_params(cfg)


def zero_params(params: ModelParams) -> ModelParams:
    for _, t in params.named():
        t.data = np.zeros_like(t.data)
    return params


def basis_sample(dim: int = 8, relevant=(0, 1), distractor=(4, 5),
                 sample_id: str = "basis") -> Sample:
    """Patches and tokens drawn from the standard basis.

    Relevant patches equal the caption tokens exactly; distractors are
    basis vectors orthogonal to every token, so attention separates the
    two groups with no noise anywhere.
    """
    eye = np.eye(dim)
    patch_idx = list(relevant) + list(distractor)
    mask = np.array([1] * len(relevant) + [0] * len(distractor), dtype=np.int8)
    return Sample(
        sample_id=sample_id,
        patches=eye[patch_idx].copy(),
        sparse_tokens=eye[list(relevant)].copy(),
        dense_tokens=eye[list(relevant)].copy(),
        relevance_mask=mask,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
