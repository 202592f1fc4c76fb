"""Parameter initialization, decoupled-weight-decay optimizer, epoch loop.

Training is single-threaded and fully seeded: two runs with the same
config produce bitwise-identical histories and checkpoints.  Checkpoints
are "SEPC" containers of named float32 tensors (little-endian) plus the
scalar hyperparameters needed to rebuild the model for evaluation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import evaluator, objective
from .alignment import AlignmentParams, RelevanceHead
from .autodiff import Tensor
from .bank import FeatureBank
from .errors import BankFormatError, ConfigError, DivergenceError, NumericalError
from .objective import ObjectiveConfig
from .selection import SelectionParams

CKPT_MAGIC = b"SEPC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 32
    n_patches: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 20
    margin: float = 0.2
    rho: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    beta: float = 0.2
    tau: float = 1.0
    k_top: int = 8
    n_keep: int = 0          # 0 -> ceil(rho * n_patches)
    head_hidden: int = 0     # 0 -> linear relevance heads
    seed: int = 0
    grad_check_every: int = 0  # steps between sampled finite-difference audits

    def __post_init__(self) -> None:
        if self.lr < 0.0 or self.weight_decay < 0.0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.dim < 1 or self.n_patches < 1:
            raise ConfigError("dim and n_patches must be >= 1")
        if not 0.0 <= self.beta <= 0.5:
            raise ConfigError("beta must lie in [0, 0.5]")
        if self.tau <= 0.0:
            raise ConfigError("tau must be > 0")
        if self.margin <= 0.0:
            raise ConfigError("margin must be > 0")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must lie in (0, 1]")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ConfigError("lambda coefficients must be >= 0")
        if self.k_top < 1:
            raise ConfigError("k_top must be >= 1")

    @property
    def keep_count(self) -> int:
        return self.n_keep if self.n_keep > 0 else max(1, math.ceil(self.rho * self.n_patches))

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(margin=self.margin, rho=self.rho,
                               lambda1=self.lambda1, lambda2=self.lambda2)


@dataclass
class ModelParams:
    selection: SelectionParams
    alignment: AlignmentParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.selection.named()
        yield from self.alignment.named()

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(data, name: str) -> Tensor:
    return ad.tensor(data, requires_grad=True, name=name)


def init_params(cfg: TrainConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Fresh parameters: perceptron weights ~ U(+-1/sqrt(fan_in)), biases
    zero, relevance heads zero so scoring starts at the mean baseline."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    d, h, nc, k = cfg.dim, cfg.dim, cfg.keep_count, cfg.k_top
    sel = SelectionParams(
        pred_w1=_param(_uniform(rng, (d, h), d), "pred.w1"),
        pred_b1=_param(np.zeros(h), "pred.b1"),
        pred_w2=_param(_uniform(rng, (h,), h), "pred.w2"),
        pred_b2=_param(0.0, "pred.b2"),
        agg_sparse_w=_param(_uniform(rng, (d, nc), d), "agg_sparse.w"),
        agg_sparse_b=_param(np.zeros(nc), "agg_sparse.b"),
        agg_dense_w=_param(_uniform(rng, (d, nc), d), "agg_dense.w"),
        agg_dense_b=_param(np.zeros(nc), "agg_dense.b"),
        beta=cfg.beta,
        tau=cfg.tau,
        n_keep=nc,
        rho=cfg.rho,
    )

    def head(prefix: str) -> RelevanceHead:
        if cfg.head_hidden > 0:
            # hidden layer gets a live init; the output layer stays zero so
            # the head still starts as a no-op
            return RelevanceHead(
                hid_w=_param(_uniform(rng, (k, cfg.head_hidden), k), f"{prefix}.hid_w"),
                hid_b=_param(np.zeros(cfg.head_hidden), f"{prefix}.hid_b"),
                out_w=_param(np.zeros(cfg.head_hidden), f"{prefix}.w"),
                out_b=_param(0.0, f"{prefix}.b"),
            )
        return RelevanceHead(out_w=_param(np.zeros(k), f"{prefix}.w"),
                             out_b=_param(0.0, f"{prefix}.b"))

    align = AlignmentParams(k_top=k, p2w=head("head_p2w"), w2p=head("head_w2p"))
    return ModelParams(selection=sel, alignment=align)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, grads: dict[Tensor, Tensor],
                   state: OptimizerState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay update, in place.

    theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * theta)
    """
    state.step += 1
    t = state.step
    for name, param in params.named():
        grad = grads.get(param)
        g = grad.data if grad is not None else np.zeros(param.shape)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("divergence detected")
        m = state.m.get(name)
        if m is None:
            m = np.zeros(param.shape)
            state.v[name] = np.zeros(param.shape)
        v = state.v[name]
        with np.errstate(over="ignore"):
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
        if not np.all(np.isfinite(v)):  # g*g overflowed
            raise DivergenceError("divergence detected")
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + state.eps) + cfg.weight_decay * param.data
        fresh = param.data - cfg.lr * update
        if not np.all(np.isfinite(fresh)):
            raise DivergenceError("divergence detected")
        param.data = fresh


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    loss: float
    keep_sparse: float
    keep_dense: float
    val_r1: float | None = None


AUDIT_STEP = 1e-6


def _audit_gradients(samples, params: ModelParams, cfg: TrainConfig,
                     rng: np.random.Generator) -> None:
    """Spot-check backprop against central differences on the smooth
    relaxation of the current batch loss, at 10 random coordinates."""
    obj = cfg.objective()

    def loss_value() -> float:
        with ad.no_grad():
            batch = objective.batch_similarity(samples, params.selection,
                                               params.alignment, "soft", cfg.seed)
            return objective.batch_loss(batch, obj).item()

    batch = objective.batch_similarity(samples, params.selection, params.alignment,
                                       "soft", cfg.seed)
    loss = objective.batch_loss(batch, obj)
    grads = ad.gradient(loss, params.tensors())

    tensors = params.tensors()
    flat = [(ti, ci) for ti, t in enumerate(tensors) for ci in range(t.size)]
    picks = rng.choice(len(flat), size=min(10, len(flat)), replace=False)
    step = AUDIT_STEP
    for pick in picks:
        ti, ci = flat[int(pick)]
        tensor = tensors[ti]
        analytic = float(grads[tensor].data.reshape(-1)[ci])
        original = tensor.data.copy()
        bumped = original.reshape(-1).copy()
        bumped[ci] += step
        tensor.data = bumped.reshape(original.shape)
        hi = loss_value()
        bumped[ci] -= 2.0 * step
        tensor.data = bumped.reshape(original.shape)
        lo = loss_value()
        tensor.data = original
        numeric = (hi - lo) / (2.0 * step)
        rel = abs(analytic - numeric) / max(1.0, abs(analytic))
        if rel >= 1e-3:
            raise NumericalError(
                f"gradient audit failed at coordinate {ci}: rel error {rel:.2e}")


def fit(
    bank: FeatureBank,
    cfg: TrainConfig,
    val_bank: FeatureBank | None = None,
    checkpoint_path=None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Seeded epoch loop over shuffled mini-batches.

    Records loss and keep rates per epoch (plus validation R@1 when a
    validation bank is given) and rewrites the checkpoint after each epoch,
    so a divergent run keeps the last completed epoch on disk.
    """
    if len(bank.samples) < cfg.batch_size:
        raise ConfigError("bank smaller than batch size")
    if params is None:
        params = init_params(cfg)
    obj = cfg.objective()
    state = OptimizerState()
    history: list[EpochStats] = []
    global_step = 0
    n = len(bank.samples)

    for epoch in range(cfg.epochs):
        shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7, epoch]))
        order = shuffle.permutation(n)
        losses: list[float] = []
        keeps_s: list[float] = []
        keeps_d: list[float] = []
        for start in range(0, n, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            if chunk.size < 2:
                continue  # a lone sample has no in-batch negative
            samples = [bank.samples[int(i)] for i in chunk]
            batch = objective.batch_similarity(
                samples, params.selection, params.alignment, "train",
                seed=cfg.seed, step=global_step)
            loss = objective.batch_loss(batch, obj)
            grads = ad.gradient(loss, params.tensors())
            if cfg.grad_check_every > 0 and global_step % cfg.grad_check_every == 0:
                audit_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 13, global_step]))
                _audit_gradients(samples, params, cfg, audit_rng)
            optimizer_step(params, grads, state, cfg)
            losses.append(loss.item())
            ks, kd = batch.keep_fractions()
            keeps_s.append(ks)
            keeps_d.append(kd)
            global_step += 1

        val_r1 = None
        if val_bank is not None:
            report = evaluator.retrieval_eval(val_bank, params)
            val_r1 = 0.5 * (report.i2t_r1 + report.t2i_r1)
        history.append(EpochStats(
            epoch=epoch,
            loss=float(np.mean(losses)) if losses else float("nan"),
            keep_sparse=float(np.mean(keeps_s)) if keeps_s else 0.0,
            keep_dense=float(np.mean(keeps_d)) if keeps_d else 0.0,
            val_r1=val_r1,
        ))
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, cfg)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints


def _hyper_entries(cfg_like: SelectionParams, k_top: int, head_hidden: int,
                   dim: int) -> list[tuple[str, np.ndarray]]:
    return [
        ("hyper.dim", np.float64(dim)),
        ("hyper.beta", np.float64(cfg_like.beta)),
        ("hyper.tau", np.float64(cfg_like.tau)),
        ("hyper.rho", np.float64(cfg_like.rho)),
        ("hyper.n_keep", np.float64(cfg_like.n_keep)),
        ("hyper.k_top", np.float64(k_top)),
        ("hyper.head_hidden", np.float64(head_hidden)),
    ]


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig | None = None) -> None:
    head_hidden = 0
    if params.alignment.p2w.hid_w is not None:
        head_hidden = params.alignment.p2w.hid_w.shape[1]
    entries: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.named()]
    entries += [(n, np.asarray(v)) for n, v in _hyper_entries(
        params.selection, params.alignment.k_top, head_hidden, params.selection.dim)]
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, data in entries:
        arr = np.asarray(data, dtype=np.float64)
        with np.errstate(over="ignore"):
            narrowed = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(narrowed)):
            # refuse to replace a good checkpoint with an overflowed one
            raise DivergenceError("divergence detected")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(narrowed.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise BankFormatError("corrupt checkpoint")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise BankFormatError("not a checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise BankFormatError("unsupported version")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
        rank = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(size * 4), dtype="<f4").astype(np.float64).reshape(shape)
        tensors[name] = data
    if pos != len(blob):
        raise BankFormatError("corrupt checkpoint")

    try:
        hyper = {k.split(".", 1)[1]: float(tensors[k])
                 for k in list(tensors) if k.startswith("hyper.")}
        sel = SelectionParams(
            pred_w1=_param(tensors["pred.w1"], "pred.w1"),
            pred_b1=_param(tensors["pred.b1"], "pred.b1"),
            pred_w2=_param(tensors["pred.w2"], "pred.w2"),
            pred_b2=_param(tensors["pred.b2"], "pred.b2"),
            agg_sparse_w=_param(tensors["agg_sparse.w"], "agg_sparse.w"),
            agg_sparse_b=_param(tensors["agg_sparse.b"], "agg_sparse.b"),
            agg_dense_w=_param(tensors["agg_dense.w"], "agg_dense.w"),
            agg_dense_b=_param(tensors["agg_dense.b"], "agg_dense.b"),
            beta=hyper["beta"],
            tau=hyper["tau"],
            n_keep=int(hyper["n_keep"]),
            rho=hyper["rho"],
        )

        def head(prefix: str) -> RelevanceHead:
            hid_w = tensors.get(f"{prefix}.hid_w")
            return RelevanceHead(
                out_w=_param(tensors[f"{prefix}.w"], f"{prefix}.w"),
                out_b=_param(tensors[f"{prefix}.b"], f"{prefix}.b"),
                hid_w=_param(hid_w, f"{prefix}.hid_w") if hid_w is not None else None,
                hid_b=_param(tensors[f"{prefix}.hid_b"], f"{prefix}.hid_b")
                if hid_w is not None else None,
            )

        align = AlignmentParams(k_top=int(hyper["k_top"]),
                                p2w=head("head_p2w"), w2p=head("head_w2p"))
    except KeyError as exc:
        raise BankFormatError(f"checkpoint missing tensor {exc}") from exc
    return ModelParams(selection=sel, alignment=align)


def with_dense_ablation(params: ModelParams) -> ModelParams:
    """Copy of the params with the dense attention channel zeroed."""
    return ModelParams(selection=replace(params.selection, zero_dense_attention=True),
                       alignment=params.alignment)
