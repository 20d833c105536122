"""Matched-budget ablation suites over one base model.

Every variant in a suite is built from the same base model, the same
calibration windows and transformation profile, and is fine-tuned for the same
number of steps with the same per-seed data order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .autodiff import TrainConfig
from .compress import build_calr_model, finetune_calr, profile_transformation
from .corpus import Corpus
from .model import TransformerModel, evaluate_loss

SUITES: dict[str, list[tuple[str, dict]]] = {
    "modes": [
        ("calr", {"mode": "calr"}),
        ("svd_only", {"mode": "svd_only"}),
        ("svd_fixed", {"mode": "svd_fixed"}),
    ],
    "ranks": [(f"r_c={k}", {"r_c": k}) for k in (2, 4, 8, 16)],
    "strategy": [
        ("lowest", {"strategy": "lowest"}),
        ("highest", {"strategy": "highest"}),
        ("random", {"strategy": "random"}),
    ],
    "qkv": [
        ("ffn_only", {"include_qkv": False}),
        ("ffn_qkv", {"include_qkv": True}),
    ],
    "sparse": [
        ("dense", {"corrective_kind": "dense"}),
        ("sparse", {"corrective_kind": "sparse"}),
    ],
}

TABLE_COLUMNS = ("variant", "mean_val_loss", "mean_val_perplexity", "params_after", "reduction_pct")


@dataclass
class AblationSettings:
    n_target: int = 4
    r: int = 8
    r_c: int = 8
    strategy: str = "lowest"
    corrective_kind: str = "dense"
    include_qkv: bool = False
    mode: str = "calr"
    n_samples: int = 100
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000))
    valid_limit: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class VariantResult:
    variant: str
    seed: int
    val_loss: float
    val_loss_before: float
    params_after: int
    reduction_pct: float
    selected: list[int]


@dataclass
class AblationRow:
    variant: str
    overrides: dict
    val_loss: list[float]
    val_loss_before: list[float]
    mean_val_loss: float
    mean_val_perplexity: float
    params_after: int
    reduction_pct: float
    selected: list[list[int]]


@dataclass
class AblationTable:
    suite: str
    seeds: list[int]
    settings: dict
    rows: list[AblationRow]

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def wins(self, better: str, worse: str) -> int:
        """Seeds where ``better`` has validation loss <= ``worse``."""
        a, b = self.row(better).val_loss, self.row(worse).val_loss
        return sum(x <= y for x, y in zip(a, b))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationTable":
        d = dict(d)
        d["rows"] = [AblationRow(**r) for r in d["rows"]]
        return cls(**d)

    def columns(self) -> list[str]:
        return list(TABLE_COLUMNS) + [f"val_loss_seed_{s}" for s in self.seeds]

    def csv_rows(self) -> list[list]:
        return [[getattr(r, c) for c in TABLE_COLUMNS] + list(r.val_loss) for r in self.rows]


class AblationRunner:
    """Runs variants against one base model, memoizing identical runs."""

    def __init__(self, base: TransformerModel, corpus: Corpus, settings: AblationSettings | None = None,
                 seeds=(0, 1, 2), log=None):
        self.base = base
        self.corpus = corpus
        self.settings = settings or AblationSettings()
        self.seeds = list(seeds)
        self.log = log
        self.calib = corpus.sample_windows(self.settings.n_samples)[:, :-1]
        self.profile = profile_transformation(base, self.calib)
        self.valid = corpus.valid_batches(limit=self.settings.valid_limit)
        self._cache: dict = {}
        self.base_val_loss = evaluate_loss(base, self.valid)

    def run_variant(self, overrides: dict, seed: int, name: str = "") -> VariantResult:
        s = dataclasses.replace(self.settings, **overrides)
        key = (s.n_target, s.r, s.r_c, s.strategy, s.corrective_kind, s.include_qkv, s.mode, seed)
        if key in self._cache:
            return dataclasses.replace(self._cache[key], variant=name)
        model, report = build_calr_model(
            self.base, self.calib, s.n_target, s.r, s.r_c, s.strategy, s.corrective_kind,
            s.include_qkv, s.mode, seed=seed, profile=self.profile,
        )
        train = dataclasses.replace(s.finetune, seed=seed)
        _, result = finetune_calr(model, self.corpus, train, valid_batches=self.valid)
        out = VariantResult(
            variant=name,
            seed=seed,
            val_loss=result.val_loss_after,
            val_loss_before=result.val_loss_before,
            params_after=report.params_after,
            reduction_pct=report.reduction_pct,
            selected=report.selected,
        )
        self._cache[key] = out
        if self.log is not None:
            self.log(f"{name or key} seed={seed}: val_loss {out.val_loss_before:.4f} -> {out.val_loss:.4f}")
        return out

    def run_suite(self, suite: str) -> AblationTable:
        if suite not in SUITES:
            raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
        rows = []
        for name, overrides in SUITES[suite]:
            results = [self.run_variant(overrides, seed, name) for seed in self.seeds]
            losses = [r.val_loss for r in results]
            mean = float(np.mean(losses))
            rows.append(
                AblationRow(
                    variant=name,
                    overrides=overrides,
                    val_loss=losses,
                    val_loss_before=[r.val_loss_before for r in results],
                    mean_val_loss=mean,
                    mean_val_perplexity=float(np.exp(mean)),
                    params_after=results[0].params_after,
                    reduction_pct=results[0].reduction_pct,
                    selected=[r.selected for r in results],
                )
            )
        return AblationTable(suite=suite, seeds=self.seeds, settings=self.settings.to_dict(), rows=rows)
