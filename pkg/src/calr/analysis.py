"""Parameter accounting, residual spectra, throughput, and report files."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import linalg
from .compress import CompressedFfn, LowRankLinear, compress_ffn, ffn_inputs, functional_residual
from .exceptions import BenchmarkError, CALRError
from .model import GatedFfn, TransformerModel, evaluate_loss, forward
from .reports import LAYER_COLUMNS, SPECTRUM_COLUMNS, CompressionReport, SpectrumReport


@dataclass
class ParamCount:
    per_tensor: dict[str, int]
    total: int
    ffn: int
    attention: int
    embedding: int
    norms: int

    def to_dict(self) -> dict:
        return {
            "per_tensor": self.per_tensor,
            "total": self.total,
            "ffn": self.ffn,
            "attention": self.attention,
            "embedding": self.embedding,
            "norms": self.norms,
        }


def count_params(model: TransformerModel) -> ParamCount:
    """Exact parameter counts; a sparse corrective counts only its mask entries."""
    per = {name: p.n_effective for name, p in model.named_parameters().items()}
    groups = {"ffn": 0, "attention": 0, "embedding": 0, "norms": 0}
    for name, n in per.items():
        if ".ffn." in name:
            groups["ffn"] += n
        elif ".attn." in name:
            groups["attention"] += n
        elif name == "embed":
            groups["embedding"] += n
        else:
            groups["norms"] += n
    return ParamCount(per_tensor=per, total=sum(per.values()), **groups)


def perplexity(model: TransformerModel, batches) -> float:
    return float(np.exp(evaluate_loss(model, batches)))


def stacked_residual(orig: GatedFfn, comp: CompressedFfn, x: np.ndarray) -> np.ndarray:
    return functional_residual(orig, comp, np.asarray(x).reshape(-1, orig.d_model))


def residual_spectrum(
    orig: GatedFfn,
    comp: CompressedFfn,
    x: np.ndarray,
    ranks=(4, 8, 16),
    layer: int = -1,
    top: int = 16,
) -> SpectrumReport:
    """Singular values of the stacked functional residual (tokens x d_model).

    ``x`` holds the post-norm FFN inputs. Besides the spectrum of ``comp`` the
    report carries the top ``top`` residual singular values of a fresh
    SVD-only compression of ``orig`` at each rank in ``ranks``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, orig.d_model)
    values = linalg.svd(stacked_residual(orig, comp, x)).s
    by_rank = {}
    for r in ranks:
        fresh = compress_ffn(orig, int(r), mode="svd_only")
        by_rank[int(r)] = linalg.svd(stacked_residual(orig, fresh, x)).s[:top]
    energy_ranks = sorted({1, 2, 4, 8, 16, comp.corrective_rank or comp.rank})
    return SpectrumReport.from_values(layer, comp.rank, values, x.shape[0], by_rank, energy_ranks)


def model_spectra(base: TransformerModel, compressed: TransformerModel, calib, ranks=(4, 8, 16)) -> list[SpectrumReport]:
    """One spectrum per compressed FFN, using the base model's FFN inputs."""
    if base.config != compressed.config:
        raise CALRError("base and compressed models have different configs")
    layers = [i for i, b in enumerate(compressed.blocks) if isinstance(b.ffn, CompressedFfn)]
    if not layers:
        return []
    inputs = ffn_inputs(base, base.check_tokens(calib), layers)
    reports = []
    for i in layers:
        orig = base.blocks[i].ffn
        if not isinstance(orig, GatedFfn):
            raise CALRError(f"layer {i} of the base model is not an uncompressed FFN")
        reports.append(residual_spectrum(orig, compressed.blocks[i].ffn, inputs[i], ranks, layer=i))
    return reports


@dataclass
class Throughput:
    tokens_per_sec: float
    ms_per_token: float
    median_seconds: float
    batch_shape: tuple[int, int]
    iters: int
    warmup: int
    threads: int

    def to_dict(self) -> dict:
        return {
            "tokens_per_sec": self.tokens_per_sec,
            "ms_per_token": self.ms_per_token,
            "median_seconds": self.median_seconds,
            "batch_shape": list(self.batch_shape),
            "iters": self.iters,
            "warmup": self.warmup,
            "threads": self.threads,
        }


def throughput_bench(
    model: TransformerModel,
    batch_shape=(4, 128),
    warmup: int = 3,
    iters: int = 20,
    threads: int = 1,
    seed: int = 0,
) -> Throughput:
    """Median wall time of a full forward pass over a random token batch."""
    if iters < 1:
        raise BenchmarkError(f"iters must be >= 1, got {iters}")
    tokens = np.random.default_rng(seed).integers(0, model.config.vocab_size, size=batch_shape)
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            forward(model, tokens)
        for _ in range(iters):
            start = time.perf_counter()
            forward(model, tokens)
            times.append(time.perf_counter() - start)
    median = statistics.median(times)
    n_tokens = batch_shape[0] * batch_shape[1]
    return Throughput(
        tokens_per_sec=n_tokens / median,
        ms_per_token=1000.0 * median / n_tokens,
        median_seconds=median,
        batch_shape=tuple(batch_shape),
        iters=iters,
        warmup=warmup,
        threads=threads,
    )


def compressed_layers(model: TransformerModel) -> list[int]:
    return [
        i for i, b in enumerate(model.blocks)
        if isinstance(b.ffn, CompressedFfn) or any(isinstance(getattr(b.attn, p), LowRankLinear) for p in "qkv")
    ]


# -- report files --------------------------------------------------------------


def to_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(to_json(obj))
    except OSError as exc:
        raise CALRError(f"cannot write {path}: {exc}") from exc
    return path


def write_csv(columns, rows, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
    except OSError as exc:
        raise CALRError(f"cannot write {path}: {exc}") from exc
    return path


def emit_report(report, path, format: str = "json") -> Path:
    """Write a CompressionReport, SpectrumReport or AblationTable.

    CSV column order is fixed: ``reports.LAYER_COLUMNS`` for compression
    reports, ``reports.SPECTRUM_COLUMNS`` for spectra, and
    ``AblationTable.columns()`` for ablation tables.
    """
    if format == "json":
        return write_json(report.to_dict(), path)
    if format != "csv":
        raise ValueError(f"format must be 'json' or 'csv', got {format!r}")
    if isinstance(report, CompressionReport):
        columns = LAYER_COLUMNS
    elif isinstance(report, SpectrumReport):
        columns = SPECTRUM_COLUMNS
    else:
        columns = report.columns()
    return write_csv(columns, report.csv_rows(), path)


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise CALRError(f"cannot read {path}: {exc}") from exc
