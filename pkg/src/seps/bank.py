"""Feature banks: on-disk format, global embeddings, synthetic generation.

A bank holds per-sample patch features, sparse-text token features,
dense-text token features, and an optional ground-truth relevance mask.
Features are stored float32 on disk ("SEPB" v1, little-endian) and widened
to float64 in memory; the generator emits float32-representable values so
write->read roundtrips are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import CONSTANTS
from .errors import BankFormatError, BankInvariantError, ConfigError

MAGIC = b"SEPB"
VERSION = 1

MASK_UNKNOWN = None  # relevance mask is either an int8 {0,1} vector or None


@dataclass
class Sample:
    """One image with its co-indexed captions, as precomputed features."""

    sample_id: str
    patches: np.ndarray        # N x d
    sparse_tokens: np.ndarray  # M x d
    dense_tokens: np.ndarray   # M_d x d
    relevance_mask: np.ndarray | None = None  # length N, values in {0,1}

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    def validate(self, dim: int) -> None:
        for name, arr in (("patches", self.patches),
                          ("sparse_tokens", self.sparse_tokens),
                          ("dense_tokens", self.dense_tokens)):
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise BankInvariantError(f"{self.sample_id}: N >= 1 violated for {name}")
            if arr.shape[1] != dim:
                raise BankInvariantError(f"{self.sample_id}: {name} dim {arr.shape[1]} != {dim}")
            if not np.all(np.isfinite(arr)):
                raise BankInvariantError(f"{self.sample_id}: non-finite {name}")
        if self.relevance_mask is not None:
            mask = np.asarray(self.relevance_mask)
            if mask.shape != (self.patches.shape[0],):
                raise BankInvariantError(f"{self.sample_id}: mask length != N")
            if not np.isin(mask, (0, 1)).all():
                raise BankInvariantError(f"{self.sample_id}: mask values outside {{0,1}}")


@dataclass
class FeatureBank:
    dim: int
    samples: list[Sample] = field(default_factory=list)

    def validate(self) -> None:
        if self.dim < 1:
            raise BankInvariantError("dim must be >= 1")
        if not self.samples:
            raise BankInvariantError("bank has no samples")
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise BankInvariantError("duplicate sample ids")
        for sample in self.samples:
            sample.validate(self.dim)

    def by_id(self, sample_id: str) -> Sample:
        for sample in self.samples:
            if sample.sample_id == sample_id:
                return sample
        raise BankInvariantError(f"unknown sample id: {sample_id}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 64
    dim: int = 32
    n_patches: int = 16
    n_relevant_patches: int = 4
    n_sparse_words: int = 2
    n_dense_words: int = 4
    concept_count: int = 256
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1 or self.dim < 1 or self.n_patches < 1:
            raise ConfigError("n_samples, dim, n_patches must be >= 1")
        if not (0 <= self.n_relevant_patches <= self.n_patches):
            raise ConfigError("n_relevant_patches <= n_patches violated")
        if self.n_sparse_words < 1 or self.n_dense_words < self.n_sparse_words:
            raise ConfigError("need 1 <= n_sparse_words <= n_dense_words")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.concept_count < max(self.n_sparse_words, self.n_dense_words):
            raise ConfigError("concept_count < max words per sample")


# ---------------------------------------------------------------------------
# binary io


def write_bank(bank: FeatureBank, path) -> None:
    bank.validate()
    chunks = [MAGIC, struct.pack("<III", VERSION, bank.dim, len(bank.samples))]
    for sample in bank.samples:
        sid = sample.sample_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(sid)))
        chunks.append(sid)
        for arr in (sample.patches, sample.sparse_tokens, sample.dense_tokens):
            chunks.append(struct.pack("<I", arr.shape[0]))
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if sample.relevance_mask is None:
            chunks.append(struct.pack("<B", 0))
        else:
            chunks.append(struct.pack("<B", 1))
            chunks.append(np.asarray(sample.relevance_mask, dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise BankFormatError("corrupt bank")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def done(self) -> bool:
        return self.pos == len(self.blob)


def read_bank(path) -> FeatureBank:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise BankFormatError("not a feature bank")
    version = reader.u32()
    if version != VERSION:
        raise BankFormatError("unsupported version")
    dim = reader.u32()
    n_samples = reader.u32()
    samples = []
    for _ in range(n_samples):
        sid = reader.take(reader.u32()).decode("utf-8")
        mats = []
        for _ in range(3):
            rows = reader.u32()
            raw = reader.take(rows * dim * 4)
            mats.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, dim))
        mask = None
        if reader.u8() == 1:
            mask = np.frombuffer(reader.take(mats[0].shape[0]), dtype=np.uint8).astype(np.int8)
            if not np.isin(mask, (0, 1)).all():
                raise BankFormatError("corrupt bank")
        samples.append(Sample(sid, mats[0], mats[1], mats[2], mask))
    if not reader.done():
        raise BankFormatError("corrupt bank")
    bank = FeatureBank(dim=dim, samples=samples)
    bank.validate()
    return bank


# ---------------------------------------------------------------------------
# embeddings and synthesis


def global_embedding(tokens: np.ndarray) -> tuple[np.ndarray, bool]:
    """L2-normalized mean of the token rows.

    Returns (vector, degenerate).  A (near-)zero mean is returned as the
    exact zero vector with the degenerate flag set, never normalized.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise BankInvariantError("global_embedding expects K x d with K >= 1")
    mean = tokens.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < CONSTANTS.eps_norm:
        return np.zeros(tokens.shape[1]), True
    return mean / norm, False


def _f32_exact(arr: np.ndarray) -> np.ndarray:
    # round-trip through float32 so the disk format preserves every bit
    return arr.astype(np.float32).astype(np.float64)


# distractors sit at half the concept amplitude: present, but less salient
# than concept-bearing patches, like background clutter
DISTRACTOR_SCALE = 0.5

_SUBSET_RETRIES = 200


def generate_synthetic(cfg: SynthConfig) -> FeatureBank:
    """Latent-concept bank with known patch relevance.

    Unit concept vectors are drawn once; each sample picks a dense concept
    subset whose first `n_sparse_words` entries form the sparse caption.
    Sparse words are kept globally distinct across samples while the pool
    allows it, so captions stay discriminative.  Relevant patches are noisy
    copies of sample concepts, distractors are isotropic noise at half the
    concept amplitude, and the mask marks the concept-bearing patches.
    Fully deterministic under the seed.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    concepts = rng.normal(size=(cfg.concept_count, cfg.dim))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)

    root = 1.0 / np.sqrt(cfg.dim)
    samples = []
    used_words: set[int] = set()
    for index in range(cfg.n_samples):
        chosen = rng.choice(cfg.concept_count, size=cfg.n_dense_words, replace=False)
        for _ in range(_SUBSET_RETRIES):
            if not used_words.intersection(chosen[:cfg.n_sparse_words].tolist()):
                break
            chosen = rng.choice(cfg.concept_count, size=cfg.n_dense_words, replace=False)
        used_words.update(chosen[:cfg.n_sparse_words].tolist())
        dense = concepts[chosen]
        sparse = concepts[chosen[:cfg.n_sparse_words]]

        patches = np.empty((cfg.n_patches, cfg.dim))
        mask = np.zeros(cfg.n_patches, dtype=np.int8)
        for k in range(cfg.n_relevant_patches):
            noise = rng.normal(size=cfg.dim) * root * cfg.noise_sigma
            patches[k] = dense[k % cfg.n_dense_words] + noise
        for k in range(cfg.n_relevant_patches, cfg.n_patches):
            patches[k] = rng.normal(size=cfg.dim) * root * DISTRACTOR_SCALE
        mask[:cfg.n_relevant_patches] = 1

        order = rng.permutation(cfg.n_patches)
        samples.append(Sample(
            sample_id=f"s{index:05d}",
            patches=_f32_exact(patches[order]),
            sparse_tokens=_f32_exact(sparse),
            dense_tokens=_f32_exact(dense),
            relevance_mask=mask[order],
        ))
    return FeatureBank(dim=cfg.dim, samples=samples)


def stable_id_hash(sample_id: str) -> int:
    """Deterministic across processes, unlike Python's salted hash()."""
    return zlib.crc32(sample_id.encode("utf-8"))
