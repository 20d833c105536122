"""Command-line pipeline: train-base, profile, compress, finetune, eval, spectrum, ablate.

Every command reads one JSON or TOML config (``--config``), applies flag
overrides, and writes its artifacts under ``--out-dir``. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis
from .ablation import SUITES, AblationRunner, AblationSettings
from .autodiff import TrainConfig, train_loop
from .checkpoint import load_model, save_model
from .compress import build_calr_model, finetune_calr, profile_transformation
from .corpus import bundled_corpus_path, load_corpus
from .exceptions import CALRError
from .model import ModelConfig, evaluate_loss, forward, init_model
from .reports import retention

log = logging.getLogger("calr")


class ConfigError(CALRError):
    pass


@dataclass
class CalrParams:
    n_target: int = 4
    r: int = 8
    r_c: int = 8
    strategy: str = "lowest"
    corrective_kind: str = "dense"
    include_qkv: bool = False
    mode: str = "calr"
    n_samples: int = 100
    train_all: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: str | None = None
    base_train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=3000, batch_size=4, lr=3e-3))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, batch_size=4, lr=3e-4))
    calr: CalrParams = field(default_factory=CalrParams)
    spectrum_ranks: list[int] = field(default_factory=lambda: [4, 8, 16])
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    valid_limit: int | None = None
    bench_batch: list[int] | None = None  # defaults to [4, model.max_seq_len]
    bench_iters: int = 20
    bench_warmup: int = 3
    seed: int = 0
    out_dir: str = "runs"
    threads: int = 1

    def corpus_path(self) -> Path:
        return bundled_corpus_path() if self.corpus is None else Path(self.corpus)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["corpus"] = str(self.corpus_path())
        return d


_SECTIONS = {"model": ModelConfig, "base_train": TrainConfig, "finetune": TrainConfig, "calr": CalrParams}


def _build_section(cls, values: dict, where: str):
    unknown = set(values) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}] section: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    defaults = RunConfig()
    kwargs = {}
    unknown = set(raw) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            base = dataclasses.asdict(getattr(defaults, key))
            base.update(value)
            kwargs[key] = _build_section(_SECTIONS[key], base, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    try:
        if p.suffix == ".toml":
            import tomli

            raw = tomli.loads(text)
        else:
            raw = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            seed=seed,
            model=dataclasses.replace(cfg.model, seed=seed),
            base_train=dataclasses.replace(cfg.base_train, seed=seed),
            finetune=dataclasses.replace(cfg.finetune, seed=seed),
        )
    if getattr(args, "corpus", None) is not None:
        cfg = dataclasses.replace(cfg, corpus=args.corpus)
    if getattr(args, "out_dir", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out_dir)
    if getattr(args, "threads", None) is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return cfg


def validate(cfg: RunConfig) -> None:
    corpus = cfg.corpus_path()
    if not corpus.is_file():
        raise ConfigError(f"corpus not found: {corpus}")
    c = cfg.calr
    if not 0 <= c.n_target <= cfg.model.n_layers:
        raise ConfigError(f"calr.n_target must be in [0, {cfg.model.n_layers}]")
    if not 1 <= c.r <= min(cfg.model.d_model, cfg.model.d_ff):
        raise ConfigError(f"calr.r must be in [1, {min(cfg.model.d_model, cfg.model.d_ff)}]")
    if not 1 <= c.r_c <= cfg.model.d_model:
        raise ConfigError(f"calr.r_c must be in [1, {cfg.model.d_model}]")
    if cfg.bench_batch is not None and (len(cfg.bench_batch) != 2 or cfg.bench_batch[1] > cfg.model.max_seq_len):
        raise ConfigError("bench_batch must be [batch, seq] with seq <= model.max_seq_len")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")


def _model_arg(args, cfg: RunConfig, name: str, default: str) -> Path:
    value = getattr(args, name, None)
    path = Path(value) if value else Path(cfg.out_dir) / default
    if not path.is_file():
        raise ConfigError(f"model file not found: {path}")
    return path


def _corpus(cfg: RunConfig):
    return load_corpus(cfg.corpus_path(), cfg.model.max_seq_len, cfg.seed)


def _print_table(header, rows) -> None:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h)) for i, h in enumerate(header)]
    print("  ".join(str(h).rjust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))


def _fmt(x, digits=4):
    return "-" if x is None else f"{x:.{digits}f}"


# -- commands --------------------------------------------------------------


def cmd_train_base(cfg: RunConfig, args) -> dict:
    corpus = _corpus(cfg)
    model = init_model(cfg.model)
    valid = corpus.valid_batches(limit=cfg.valid_limit)
    history = train_loop(
        model,
        corpus.train_batches(cfg.base_train.batch_size, cfg.base_train.seed),
        cfg.base_train,
        evaluate=lambda: evaluate_loss(model, valid),
        log=lambda s, l: log.info("step %d loss %.4f", s, l) if s % 100 == 0 else None,
    )
    out = Path(cfg.out_dir)
    save_model(model, out / "base.calr")
    val_loss = history.validation[-1][1]
    payload = {
        "history": history.to_dict(),
        "val_loss": val_loss,
        "val_perplexity": float(np.exp(val_loss)),
        "config": cfg.to_dict(),
    }
    analysis.write_json(payload, out / "base_train.json")
    print(f"trained {cfg.base_train.steps} steps: val loss {val_loss:.4f}, perplexity {np.exp(val_loss):.3f}")
    return payload


def cmd_profile(cfg: RunConfig, args) -> dict:
    model = load_model(_model_arg(args, cfg, "model", "base.calr"))
    corpus = _corpus(cfg)
    n = args.n_samples if args.n_samples is not None else cfg.calr.n_samples
    samples = corpus.sample_windows(n)[:, :-1]
    profile = profile_transformation(model, samples, len(samples))
    payload = {**profile.to_dict(), "config": cfg.to_dict()}
    analysis.write_json(payload, Path(cfg.out_dir) / "profile.json")
    _print_table(
        ["layer", "block_score", "ffn_score"],
        [[i, _fmt(b, 6), _fmt(f, 6)] for i, (b, f) in enumerate(zip(profile.block_scores, profile.ffn_scores))],
    )
    return payload


def _build(cfg: RunConfig, model, corpus, mode: str):
    c = cfg.calr
    calib = corpus.sample_windows(c.n_samples)[:, :-1]
    return build_calr_model(
        model, calib, c.n_target, c.r, c.r_c, c.strategy, c.corrective_kind, c.include_qkv, mode,
        seed=cfg.seed, n_samples=len(calib),
    )


def cmd_compress(cfg: RunConfig, args) -> dict:
    model = load_model(_model_arg(args, cfg, "model", "base.calr"))
    corpus = _corpus(cfg)
    compressed, report = _build(cfg, model, corpus, cfg.calr.mode)
    if cfg.calr.mode == "calr" and cfg.calr.n_target > 0:
        reference, _ = _build(cfg, model, corpus, "svd_only")
        check = corpus.valid[:4, :-1]
        if not np.array_equal(forward(compressed, check), forward(reference, check)):
            raise CALRError("self-check failed: CALR logits differ from the SVD-only construction")
    valid = corpus.valid_batches(limit=cfg.valid_limit)
    report.retention_pct = retention(analysis.perplexity(model, valid), analysis.perplexity(compressed, valid))
    report.retention_metric = "val_perplexity"
    out = Path(cfg.out_dir)
    save_model(compressed, out / "compressed.calr")
    report.config["run"] = cfg.to_dict()
    analysis.emit_report(report, out / "compress_report.json", "json")
    analysis.emit_report(report, out / "compress_report.csv", "csv")
    _print_table(
        ["layer", "selected", "score", "params_before", "params_after"],
        [[r.layer, "*" if r.selected else "", _fmt(r.transformation_score, 6), r.original_params, r.compressed_params]
         for r in report.layers],
    )
    print(f"total params {report.params_before} -> {report.params_after} ({report.reduction_pct:.2f}% reduction)")
    print(f"perplexity retention {report.retention_pct:.2f}%")
    return report.to_dict()


def cmd_finetune(cfg: RunConfig, args) -> dict:
    model = load_model(_model_arg(args, cfg, "model", "compressed.calr"))
    corpus = _corpus(cfg)
    tuned, result = finetune_calr(
        model, corpus, cfg.finetune, train_all=cfg.calr.train_all,
        valid_batches=corpus.valid_batches(limit=cfg.valid_limit),
        log=lambda s, l: log.info("step %d loss %.4f", s, l) if s % 100 == 0 else None,
    )
    out = Path(cfg.out_dir)
    save_model(tuned, out / "finetuned.calr")
    payload = {**result.to_dict(), "config": cfg.to_dict()}
    analysis.write_json(payload, out / "finetune_metrics.json")
    print(f"val loss {result.val_loss_before:.4f} -> {result.val_loss_after:.4f} ({result.steps_run} steps)")
    return payload


def cmd_eval(cfg: RunConfig, args) -> dict:
    path = _model_arg(args, cfg, "model", "finetuned.calr")
    model = load_model(path)
    corpus = _corpus(cfg)
    loss = evaluate_loss(model, corpus.valid_batches(limit=cfg.valid_limit))
    counts = analysis.count_params(model)
    payload = {
        "model": str(path),
        "val_loss": loss,
        "val_perplexity": float(np.exp(loss)),
        "params": {k: v for k, v in counts.to_dict().items() if k != "per_tensor"},
        "config": cfg.to_dict(),
    }
    out = Path(cfg.out_dir)
    analysis.write_json(payload, out / "eval.json")
    print(f"val loss {loss:.4f}  perplexity {np.exp(loss):.3f}  params {counts.total}")
    if not args.no_bench:
        bench = analysis.throughput_bench(
            model, tuple(cfg.bench_batch or (4, cfg.model.max_seq_len)), cfg.bench_warmup, cfg.bench_iters, threads=cfg.threads, seed=cfg.seed
        )
        analysis.write_json({**bench.to_dict(), "config": cfg.to_dict()}, out / "throughput.json")
        print(f"throughput {bench.tokens_per_sec:.1f} tok/s  {bench.ms_per_token:.4f} ms/token")
        payload["throughput"] = bench.to_dict()
    return payload


def cmd_spectrum(cfg: RunConfig, args) -> dict:
    base = load_model(_model_arg(args, cfg, "base", "base.calr"))
    compressed = load_model(_model_arg(args, cfg, "compressed", "compressed.calr"))
    corpus = _corpus(cfg)
    ranks = args.ranks if args.ranks else cfg.spectrum_ranks
    calib = corpus.sample_windows(cfg.calr.n_samples)[:, :-1]
    reports = analysis.model_spectra(base, compressed, calib, ranks)
    out = Path(cfg.out_dir)
    rows = []
    for rep in reports:
        analysis.write_json({**rep.to_dict(), "config": cfg.to_dict()}, out / f"spectrum_layer{rep.layer}.json")
        analysis.emit_report(rep, out / f"spectrum_layer{rep.layer}.csv", "csv")
        rows.append([rep.layer, rep.rank, _fmt(rep.singular_values[0], 6), _fmt(rep.top_energy.get(str(cfg.calr.r_c)), 4)])
    _print_table(["layer", "rank", "sigma_1", f"energy_top{cfg.calr.r_c}"], rows)
    return {"layers": [r.to_dict() for r in reports]}


def cmd_ablate(cfg: RunConfig, args) -> dict:
    base = load_model(_model_arg(args, cfg, "model", "base.calr"))
    corpus = _corpus(cfg)
    c = cfg.calr
    settings = AblationSettings(
        n_target=c.n_target, r=c.r, r_c=c.r_c, strategy=c.strategy, corrective_kind=c.corrective_kind,
        include_qkv=c.include_qkv, mode=c.mode, n_samples=c.n_samples, finetune=cfg.finetune,
        valid_limit=cfg.valid_limit,
    )
    runner = AblationRunner(base, corpus, settings, seeds=cfg.ablation_seeds, log=log.info)
    table = runner.run_suite(args.suite)
    out = Path(cfg.out_dir)
    analysis.write_json({**table.to_dict(), "config": cfg.to_dict()}, out / f"ablate_{args.suite}.json")
    analysis.emit_report(table, out / f"ablate_{args.suite}.csv", "csv")
    _print_table(
        ["variant", "mean_val_loss", "perplexity", "params"],
        [[r.variant, _fmt(r.mean_val_loss), _fmt(r.mean_val_perplexity, 3), r.params_after] for r in table.rows],
    )
    return table.to_dict()


COMMANDS = {
    "train-base": cmd_train_base,
    "profile": cmd_profile,
    "compress": cmd_compress,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "spectrum": cmd_spectrum,
    "ablate": cmd_ablate,
}


def _global_flags(parser: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS
    parser.add_argument("--config", default=s, help="JSON or TOML run config")
    parser.add_argument("--seed", type=int, default=s, help="global seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=s, help="BLAS thread count")
    parser.add_argument("--corpus", default=s, help="corpus text file (defaults to the bundled corpus)")
    parser.add_argument("--out-dir", dest="out_dir", default=s, help="directory for all artifacts")
    parser.add_argument("-v", "--verbose", action="store_true", default=s)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calr", description=__doc__.splitlines()[0])
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    sub_parsers = {name: sub.add_parser(name) for name in COMMANDS}
    for p in sub_parsers.values():
        _global_flags(p)
    sub_parsers["profile"].add_argument("--model")
    sub_parsers["profile"].add_argument("--n-samples", dest="n_samples", type=int)
    sub_parsers["compress"].add_argument("--model")
    sub_parsers["finetune"].add_argument("--model")
    sub_parsers["eval"].add_argument("--model")
    sub_parsers["eval"].add_argument("--no-bench", dest="no_bench", action="store_true")
    sub_parsers["spectrum"].add_argument("--base")
    sub_parsers["spectrum"].add_argument("--compressed")
    sub_parsers["spectrum"].add_argument("--ranks", type=int, nargs="+")
    sub_parsers["ablate"].add_argument("--model")
    sub_parsers["ablate"].add_argument("--suite", choices=sorted(SUITES), required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = apply_overrides(load_config(getattr(args, "config", None)), args)
        validate(cfg)
    except ConfigError as exc:
        print(f"calr: error: {exc}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=cfg.threads):
            COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"calr: error: {exc}", file=sys.stderr)
        return 2
    except (CALRError, OSError, ValueError) as exc:
        print(f"calr: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
