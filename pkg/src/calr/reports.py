"""Report records shared by the compression, analysis, and CLI layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

LAYER_COLUMNS = (
    "layer",
    "selected",
    "original_params",
    "compressed_params",
    "rank",
    "corrective_rank",
    "transformation_score",
    "reduction_pct",
)

SPECTRUM_COLUMNS = ("index", "singular_value", "cumulative_energy")


@dataclass
class LayerRow:
    layer: int
    selected: bool
    original_params: int
    compressed_params: int
    rank: int | None
    corrective_rank: int | None
    transformation_score: float
    reduction_pct: float  # share of the whole-model reduction, in percent


@dataclass
class CompressionReport:
    """Parameter accounting for one compressed model.

    ``retention_pct`` compares validation metrics of the compressed model with
    its uncompressed base. For loss-like metrics (perplexity, loss) it is
    ``100 * base / compressed``; for accuracy-like metrics it is
    ``100 * compressed / base``. Higher is better in both cases.
    """

    params_before: int
    params_after: int
    reduction_pct: float
    layers: list[LayerRow]
    selected: list[int]
    strategy: str
    ffn_scores: list[float]
    block_scores: list[float]
    config: dict = field(default_factory=dict)
    retention_pct: float | None = None
    retention_metric: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionReport":
        d = dict(d)
        d["layers"] = [LayerRow(**row) for row in d["layers"]]
        return cls(**d)

    def csv_rows(self) -> list[list]:
        return [[getattr(row, c) for c in LAYER_COLUMNS] for row in self.layers]


def retention(baseline: float, compressed: float, kind: str = "loss") -> float:
    """Percent of baseline performance kept; ``kind`` is 'loss' or 'accuracy'."""
    if kind == "loss":
        return 100.0 * baseline / compressed
    if kind == "accuracy":
        return 100.0 * compressed / baseline
    raise ValueError(f"kind must be 'loss' or 'accuracy', got {kind!r}")


@dataclass
class SpectrumReport:
    layer: int
    rank: int
    singular_values: list[float]
    cumulative_energy: list[float]
    top_energy: dict[str, float]  # energy fraction captured by the top k values
    top16_by_rank: dict[str, list[float]]
    n_rows: int

    @classmethod
    def from_values(cls, layer: int, rank: int, values: np.ndarray, n_rows: int,
                    top16_by_rank: dict, energy_ranks=(1, 2, 4, 8, 16)) -> "SpectrumReport":
        values = np.asarray(values, dtype=np.float64)
        energy = values**2
        total = energy.sum()
        cumulative = np.cumsum(energy) / total if total > 0 else np.ones_like(energy)
        if cumulative.size:
            cumulative = np.minimum(cumulative, 1.0)
            cumulative[-1] = 1.0
        top = {str(k): float(cumulative[min(k, len(values)) - 1]) for k in energy_ranks if len(values)}
        return cls(
            layer=layer,
            rank=rank,
            singular_values=values.tolist(),
            cumulative_energy=cumulative.tolist(),
            top_energy=top,
            top16_by_rank={str(k): list(map(float, v)) for k, v in top16_by_rank.items()},
            n_rows=n_rows,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpectrumReport":
        return cls(**d)

    def csv_rows(self) -> list[list]:
        return [
            [i, s, c] for i, (s, c) in enumerate(zip(self.singular_values, self.cumulative_energy))
        ]
