"""Command-line entry point.

Commands: gen (synthetic bank), train, eval, score (one pair), inspect
(per-patch selection dump).  Options come from a flat key=value config file
(`#` starts a comment) with command-line flags taking precedence; unknown
keys are rejected and the whole config is validated before any output file
is touched.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields

from . import alignment, autodiff as ad, evaluator, selection, trainer
from .bank import FeatureBank, SynthConfig, generate_synthetic, read_bank
from .errors import ConfigError, NumericalError, SepsError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


@dataclass
class RunConfig:
    dim: int = 32
    n_patches: int = 16
    n_keep: int = 0
    rho: float = 0.5
    beta: float = 0.2
    tau: float = 1.0
    k_top: int = 8
    lambda1: float = 1.0
    lambda2: float = 1.0
    margin: float = 0.2
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    samples: int = 64
    n_relevant: int = 4
    n_sparse_words: int = 2
    n_dense_words: int = 4
    concepts: int = 256
    noise_sigma: float = 0.1
    head_hidden: int = 0
    grad_check_every: int = 0
    folds: int = 1
    bank: str = ""
    val_bank: str = ""
    checkpoint: str = ""
    out: str = ""
    history: str = ""


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PATH_KEYS = ("bank", "val_bank", "checkpoint", "out", "history")


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key: {key}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_file(path: str) -> dict:
    values: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, raw = (part.strip() for part in text.split("=", 1))
                values[key] = _parse_value(key, raw)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults <- config file <- explicit flags, validated as a whole."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    cfg = RunConfig(**merged)
    # surface invalid numeric settings before any command runs
    _train_config(cfg)
    if cfg.folds < 1:
        raise ConfigError("folds must be >= 1")
    return cfg


def _train_config(cfg: RunConfig) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        dim=cfg.dim, n_patches=cfg.n_patches, lr=cfg.lr,
        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        epochs=cfg.epochs, margin=cfg.margin, rho=cfg.rho,
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, beta=cfg.beta, tau=cfg.tau,
        k_top=cfg.k_top, n_keep=cfg.n_keep, head_hidden=cfg.head_hidden,
        seed=cfg.seed, grad_check_every=cfg.grad_check_every)


def _synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(
        n_samples=cfg.samples, dim=cfg.dim, n_patches=cfg.n_patches,
        n_relevant_patches=cfg.n_relevant, n_sparse_words=cfg.n_sparse_words,
        n_dense_words=cfg.n_dense_words, concept_count=cfg.concepts,
        noise_sigma=cfg.noise_sigma, seed=cfg.seed)


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _load_bank(path: str) -> FeatureBank:
    try:
        return read_bank(path)
    except OSError as exc:
        raise ConfigError(f"cannot read bank {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig) -> int:
    _require(cfg, "out")
    synth = _synth_config(cfg)
    synth.validate()
    bank = generate_synthetic(synth)
    try:
        from .bank import write_bank
        write_bank(bank, cfg.out)
    except OSError as exc:
        raise ConfigError(f"cannot write bank {cfg.out}: {exc}") from exc
    print(f"wrote {cfg.out}: {len(bank.samples)} samples, dim {bank.dim}, "
          f"{synth.n_relevant_patches} relevant of {synth.n_patches} patches")
    return EXIT_OK


def _history_line(stats: trainer.EpochStats) -> str:
    line = (f"{stats.epoch},{stats.loss:.6f},"
            f"{stats.keep_sparse:.4f},{stats.keep_dense:.4f}")
    if stats.val_r1 is not None:
        line += f",{stats.val_r1:.4f}"
    return line


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "bank", "out")
    bank = _load_bank(cfg.bank)
    val_bank = _load_bank(cfg.val_bank) if cfg.val_bank else None
    tcfg = _train_config(cfg)
    if tcfg.dim != bank.dim or tcfg.n_patches != bank.samples[0].n_patches:
        tcfg = trainer.TrainConfig(**{
            **{f.name: getattr(tcfg, f.name) for f in fields(trainer.TrainConfig)},
            "dim": bank.dim, "n_patches": bank.samples[0].n_patches})
    _, history = trainer.fit(bank, tcfg, val_bank=val_bank, checkpoint_path=cfg.out)
    lines = [_history_line(h) for h in history]
    for line in lines:
        print(line)
    if cfg.history:
        try:
            with open(cfg.history, "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise ConfigError(f"cannot write history {cfg.history}: {exc}") from exc
    print(f"checkpoint written to {cfg.out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "bank", "checkpoint")
    bank = _load_bank(cfg.bank)
    params = trainer.load_checkpoint(cfg.checkpoint)
    report = evaluator.retrieval_eval(bank, params, folds=cfg.folds)
    print(report.table())
    print(report.machine_line())
    return EXIT_OK


def cmd_score(cfg: RunConfig, image_id: str, caption_id: str) -> int:
    _require(cfg, "bank", "checkpoint")
    bank = _load_bank(cfg.bank)
    params = trainer.load_checkpoint(cfg.checkpoint)
    if bank.dim != params.selection.dim:
        raise ConfigError("dimension mismatch between bank and checkpoint")
    image = bank.by_id(image_id)
    caption = bank.by_id(caption_id)
    with ad.no_grad():
        agg, _, _ = selection.select_and_aggregate(image, params.selection, "eval")
        score = alignment.align_score(agg.vectors, caption.sparse_tokens,
                                      params.alignment)
    mean_p2w, head_p2w, mean_w2p, head_w2p = score.components()
    print(f"S({image_id},{caption_id}) = {score.total.item():.6f}")
    print(f"mean_p2w = {mean_p2w:.6f}")
    print(f"topk_p2w = {head_p2w:.6f}")
    print(f"mean_w2p = {mean_w2p:.6f}")
    print(f"topk_w2p = {head_w2p:.6f}")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, sample_id: str) -> int:
    _require(cfg, "bank", "checkpoint")
    bank = _load_bank(cfg.bank)
    params = trainer.load_checkpoint(cfg.checkpoint)
    if bank.dim != params.selection.dim:
        raise ConfigError("dimension mismatch between bank and checkpoint")
    try:
        sample = bank.by_id(sample_id)
    except SepsError:
        raise ConfigError(f"unknown sample id: {sample_id}") from None
    with ad.no_grad():
        _, bundle, (mask_s, mask_d) = selection.select_and_aggregate(
            sample, params.selection, "eval")
        br_s, br_d = selection.branch_scores(bundle, params.selection.beta)
    pred = bundle.predicted.data
    print(f"# sample {sample_id}: {sample.n_patches} patches")
    print("# idx s_p s_st s_dt s_im s_sparse s_dense keep(sd) gt")
    for i in range(sample.n_patches):
        gt = "?" if sample.relevance_mask is None else str(int(sample.relevance_mask[i]))
        keep = f"{int(mask_s.hard[i])}{int(mask_d.hard[i])}"
        print(f"{i} {pred[i]:.4f} {bundle.sparse_text[i]:.4f} "
              f"{bundle.dense_text[i]:.4f} {bundle.image_self[i]:.4f} "
              f"{br_s.data[i]:.4f} {br_d.data[i]:.4f} {keep} {gt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for name, kind in _FIELD_TYPES.items():
        flag = "--" + name.replace("_", "-")
        if kind == "int":
            parser.add_argument(flag, dest=name, type=int)
        elif kind == "float":
            parser.add_argument(flag, dest=name, type=float)
        else:
            parser.add_argument(flag, dest=name)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seps",
        description="patch selection and patch-word alignment on feature banks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen", "generate a synthetic feature bank"),
        ("train", "train on a bank and write a checkpoint"),
        ("eval", "retrieval metrics for a checkpoint on a bank"),
        ("score", "score one image-caption pair"),
        ("inspect", "per-patch selection dump for one sample"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_config_flags(cmd)
        if name == "score":
            cmd.add_argument("--image", required=True)
            cmd.add_argument("--caption", required=True)
        if name == "inspect":
            cmd.add_argument("--sample", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "score":
            return cmd_score(cfg, args.image, args.caption)
        if args.command == "inspect":
            return cmd_inspect(cfg, args.sample)
        raise ConfigError(f"unknown command {args.command}")
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SepsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
