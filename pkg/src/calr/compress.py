"""Corrective adaptive low-rank compression of transformer FFNs.

A selected gated FFN has each of its three projections replaced by a
truncated-SVD factor pair, and a trainable low-rank corrective path
``x @ A_corr @ B_corr`` is added in parallel, fed by the same input. B_corr
starts at zero, so a freshly compressed FFN computes exactly what the plain
SVD-compressed FFN computes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Parameter, Tensor, TrainConfig
from .corpus import Corpus
from .exceptions import RankError, ShapeError
from .model import GatedFfn, Linear, TransformerModel, evaluate_loss, ffn_forward, forward
from .reports import CompressionReport, LayerRow

MODES = ("calr", "svd_only", "svd_fixed")
CORRECTIVE_KINDS = ("dense", "sparse")
STRATEGIES = ("lowest", "highest", "random")


class FactorPair:
    """``x @ a @ b`` with a of shape (m, r) and b of shape (r, n)."""

    def __init__(self, a, b):
        self.a = a if isinstance(a, Parameter) else Parameter(a)
        self.b = b if isinstance(b, Parameter) else Parameter(b)
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"factor shapes {self.a.shape} and {self.b.shape} do not chain")

    @classmethod
    def from_pair(cls, pair: linalg.LowRankPair) -> "FactorPair":
        return cls(pair.a, pair.b)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape[0], self.b.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(ad.matmul(x, self.a), self.b)

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.a": self.a, f"{prefix}.b": self.b}

    def product(self) -> np.ndarray:
        return self.a.data @ self.b.data


class CorrectiveModule(FactorPair):
    kind = "dense"

    @classmethod
    def initialize(cls, d_model: int, rank: int, rng: np.random.Generator) -> "CorrectiveModule":
        bound = np.sqrt(6.0 / d_model)
        return cls(rng.uniform(-bound, bound, size=(d_model, rank)), np.zeros((rank, d_model)))

    def layout(self) -> dict:
        return {"kind": self.kind, "rank": self.rank}


class SparseCorrective:
    """``x @ s`` where only entries under a fixed boolean mask may be nonzero."""

    kind = "sparse"

    def __init__(self, s, mask):
        mask = np.asarray(mask, dtype=bool)
        if isinstance(s, Parameter):
            s.mask = mask
            self.s = s
        else:
            self.s = Parameter(np.where(mask, s, 0.0), mask=mask)
        self._mask_tensor = Tensor(mask.astype(np.float64))

    @property
    def mask(self) -> np.ndarray:
        return self.s.mask

    @property
    def density(self) -> float:
        return float(self.mask.mean())

    @property
    def rank(self) -> None:
        return None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, ad.mul(self.s, self._mask_tensor))

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.s": self.s}

    def layout(self) -> dict:
        return {"kind": self.kind, "nnz": int(self.mask.sum())}


def make_sparse_corrective(x: np.ndarray, residual: np.ndarray, nnz: int) -> SparseCorrective:
    """Mask = the ``nnz`` largest-magnitude entries of the least-squares fit
    ``x @ S ~ residual``; S itself starts at zero."""
    fit = np.linalg.lstsq(x, residual, rcond=None)[0]
    d = fit.shape[0]
    nnz = min(nnz, fit.size)
    order = np.argsort(-np.abs(fit).ravel(), kind="stable")[:nnz]
    mask = np.zeros(fit.size, dtype=bool)
    mask[order] = True
    return SparseCorrective(np.zeros((d, d)), mask.reshape(fit.shape))


class LowRankLinear:
    """Factorized projection with an optional parallel corrective path."""

    kind = "low_rank"

    def __init__(self, factors: FactorPair, corrective: CorrectiveModule | None = None):
        self.factors = factors
        self.corrective = corrective

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors.shape

    def __call__(self, x: Tensor) -> Tensor:
        out = self.factors(x)
        if self.corrective is not None:
            out = ad.add(out, self.corrective(x))
        return out

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        out = self.factors.named_parameters(prefix)
        if self.corrective is not None:
            out.update(self.corrective.named_parameters(f"{prefix}.corr"))
        return out

    def layout(self) -> dict:
        return {
            "kind": self.kind,
            "rank": self.factors.rank,
            "corrective": None if self.corrective is None else self.corrective.layout(),
        }

    def dense_weight(self) -> np.ndarray:
        w = self.factors.product()
        if self.corrective is not None:
            w = w + self.corrective.product()
        return w


class CompressedFfn:
    kind = "compressed"

    def __init__(self, g: FactorPair, u: FactorPair, d: FactorPair, corrective=None, mode: str = "calr"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if g.shape != u.shape or d.shape != (g.shape[1], g.shape[0]):
            raise ShapeError(f"factor shapes do not form an FFN: g {g.shape}, u {u.shape}, d {d.shape}")
        if mode != "calr" and corrective is not None:
            raise ValueError(f"mode {mode!r} has no corrective path")
        self.g, self.u, self.d = g, u, d
        self.corrective = corrective
        self.mode = mode

    @property
    def d_model(self) -> int:
        return self.g.shape[0]

    @property
    def d_ff(self) -> int:
        return self.g.shape[1]

    @property
    def rank(self) -> int:
        return self.g.rank

    @property
    def corrective_rank(self) -> int | None:
        return None if self.corrective is None else self.corrective.rank

    def primary(self, x: Tensor) -> Tensor:
        """The SVD path alone (no corrective term)."""
        return self.d(ad.mul(self.g(x), ad.silu(self.u(x))))

    def __call__(self, x: Tensor) -> Tensor:
        out = self.primary(x)
        if self.corrective is not None:
            out = ad.add(out, self.corrective(x))
        return out

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        out = {}
        for name in ("g", "u", "d"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        if self.corrective is not None:
            out.update(self.corrective.named_parameters(f"{prefix}.corr"))
        return out

    def layout(self) -> dict:
        return {
            "kind": self.kind,
            "mode": self.mode,
            "rank": self.rank,
            "corrective": None if self.corrective is None else self.corrective.layout(),
        }


def _check_rank(r: int, limit: int, what: str) -> None:
    if not isinstance(r, (int, np.integer)) or r < 1 or r > limit:
        raise RankError(f"{what} must be in [1, {limit}], got {r}")


def compress_ffn(
    ffn: GatedFfn,
    r: int,
    r_c: int | None = None,
    corrective_kind: str = "dense",
    mode: str = "calr",
    rng: np.random.Generator | None = None,
    calib_inputs: np.ndarray | None = None,
) -> CompressedFfn:
    """Replace W_g, W_u, W_d by rank-r SVD factors and attach a corrective path.

    ``calib_inputs`` (post-norm FFN inputs, tokens x d_model) are required only
    for the sparse corrective, whose mask comes from a residual fit.
    """
    r_c = r if r_c is None else r_c
    _check_rank(r, min(ffn.d_model, ffn.d_ff), "rank r")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    g, u, d = (
        FactorPair.from_pair(linalg.low_rank_approx(w.data, r)) for w in (ffn.w_g, ffn.w_u, ffn.w_d)
    )
    corrective = None
    if mode == "calr":
        _check_rank(r_c, ffn.d_model, "corrective rank r_c")
        if corrective_kind == "dense":
            rng = np.random.default_rng(0) if rng is None else rng
            corrective = CorrectiveModule.initialize(ffn.d_model, r_c, rng)
        elif corrective_kind == "sparse":
            if calib_inputs is None:
                raise ValueError("the sparse corrective needs calibration inputs for its mask")
            svd_only = CompressedFfn(g, u, d, None, "svd_only")
            residual = functional_residual(ffn, svd_only, calib_inputs)
            corrective = make_sparse_corrective(calib_inputs, residual, 2 * ffn.d_model * r_c)
        else:
            raise ValueError(f"corrective_kind must be one of {CORRECTIVE_KINDS}, got {corrective_kind!r}")
    return CompressedFfn(g, u, d, corrective, mode)


def compress_linear(
    layer: Linear, r: int, r_c: int | None, mode: str, rng: np.random.Generator
) -> LowRankLinear:
    r_c = r if r_c is None else r_c
    d_in, d_out = layer.shape
    _check_rank(r, min(d_in, d_out), "rank r")
    factors = FactorPair.from_pair(linalg.low_rank_approx(layer.weight.data, r))
    corrective = None
    if mode == "calr":
        _check_rank(r_c, min(d_in, d_out), "corrective rank r_c")
        bound = np.sqrt(6.0 / d_in)
        corrective = CorrectiveModule(rng.uniform(-bound, bound, size=(d_in, r_c)), np.zeros((r_c, d_out)))
    return LowRankLinear(factors, corrective)


def calr_forward(ffn: CompressedFfn, x) -> np.ndarray:
    return ffn_forward(ffn, x)


def functional_residual(orig: GatedFfn, comp: CompressedFfn, x) -> np.ndarray:
    """``F_orig(x) - F_svd(x)``; the corrective path is not part of it."""
    x = np.asarray(x, dtype=np.float64)
    if orig.d_model != comp.d_model or orig.d_ff != comp.d_ff:
        raise ShapeError("original and compressed FFN shapes differ")
    return ffn_forward(orig, x) - comp.primary(Tensor(x)).data


def functional_objective_tensor(orig_out: np.ndarray, comp: CompressedFfn, x: np.ndarray) -> Tensor:
    xt = Tensor(x)
    pred = comp.primary(xt)
    if comp.corrective is not None:
        pred = ad.add(pred, comp.corrective(xt))
    return ad.mean_squares(ad.sub(Tensor(orig_out), pred))


def functional_objective(orig: GatedFfn, comp: CompressedFfn, x) -> float:
    """Mean squared error between the original FFN and the compressed FFN plus
    its corrective path, over all output entries."""
    if comp.corrective is None:
        raise ValueError("functional objective needs a compressed FFN with a corrective module")
    x = np.asarray(x, dtype=np.float64)
    return float(functional_objective_tensor(ffn_forward(orig, x), comp, x).data)


def fit_corrective(orig: GatedFfn, comp: CompressedFfn, x, steps: int = 100, lr: float = 1e-2) -> list[float]:
    """Train only the corrective factors on the functional objective.

    A diagnostic; the main fine-tuning uses the LM loss.
    """
    x = np.asarray(x, dtype=np.float64)
    target = ffn_forward(orig, x)
    params = comp.corrective.named_parameters("corr")
    for p in params.values():
        p.set_trainable(True)
    opt = ad.AdamW(params, lr=lr, weight_decay=0.0, total_steps=steps)
    history = []
    for _ in range(steps):
        loss, _ = ad.value_and_grad(lambda: functional_objective_tensor(target, comp, x), list(params.values()))
        history.append(loss)
        opt.step()
    return history


# -- profiling and selection -------------------------------------------------


@dataclass
class TransformationProfile:
    block_scores: np.ndarray
    ffn_scores: np.ndarray
    n_samples: int
    n_positions: int
    skipped_block: np.ndarray
    skipped_ffn: np.ndarray

    def to_dict(self) -> dict:
        return {
            "block_scores": self.block_scores.tolist(),
            "ffn_scores": self.ffn_scores.tolist(),
            "n_samples": self.n_samples,
            "n_positions": self.n_positions,
            "skipped_block": self.skipped_block.tolist(),
            "skipped_ffn": self.skipped_ffn.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformationProfile":
        return cls(
            block_scores=np.asarray(d["block_scores"], dtype=np.float64),
            ffn_scores=np.asarray(d["ffn_scores"], dtype=np.float64),
            n_samples=int(d["n_samples"]),
            n_positions=int(d["n_positions"]),
            skipped_block=np.asarray(d["skipped_block"], dtype=np.int64),
            skipped_ffn=np.asarray(d["skipped_ffn"], dtype=np.int64),
        )


def profile_transformation(
    model: TransformerModel, samples, n_samples: int | None = None, chunk: int = 8
) -> TransformationProfile:
    """Mean per-token cosine distance between input and output of every block
    and every FFN sub-block (residual stream on both sides).

    ``samples`` is a (n, seq) array of token ids; the first ``n_samples`` rows
    are used. Positions where either vector has zero norm are skipped and
    counted.
    """
    samples = model.check_tokens(samples)
    n = len(samples) if n_samples is None else n_samples
    if n < 1 or n > len(samples):
        raise ValueError(f"n_samples must be in [1, {len(samples)}], got {n}")
    n_layers = model.config.n_layers
    sums = np.zeros((2, n_layers))
    counts = np.zeros((2, n_layers), dtype=np.int64)
    skipped = np.zeros((2, n_layers), dtype=np.int64)
    for start in range(0, n, chunk):
        _, taps = forward(model, samples[start : min(start + chunk, n)], taps=True)
        for i, tap in enumerate(taps):
            for row, (a, b) in enumerate(((tap["block_in"], tap["block_out"]), (tap["ffn_in"], tap["ffn_out"]))):
                dist, valid = linalg.rowwise_cosine_distance(a, b)
                sums[row, i] += dist[valid].sum()
                counts[row, i] += valid.sum()
                skipped[row, i] += (~valid).sum()
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return TransformationProfile(
        block_scores=means[0],
        ffn_scores=means[1],
        n_samples=n,
        n_positions=int(n * samples.shape[1]),
        skipped_block=skipped[0],
        skipped_ffn=skipped[1],
    )


def select_targets(scores, n_target: int, strategy: str = "lowest", seed: int = 0) -> list[int]:
    """Indices of the layers to compress, sorted ascending.

    ``scores`` may be a :class:`TransformationProfile` (its FFN scores are
    used) or a plain sequence. Ties go to the shallower layer.
    """
    if isinstance(scores, TransformationProfile):
        scores = scores.ffn_scores
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if not isinstance(n_target, (int, np.integer)) or not 1 <= n_target <= n:
        raise ValueError(f"n_target must be in [1, {n}], got {n_target}")
    idx = np.arange(n)
    if strategy == "lowest":
        order = np.lexsort((idx, scores))
    elif strategy == "highest":
        order = np.lexsort((idx, -scores))
    elif strategy == "random":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    return sorted(int(i) for i in order[:n_target])


# -- model-level construction and fine-tuning ------------------------------


def compressed_param_names(model: TransformerModel) -> list[str]:
    names = []
    for i, block in enumerate(model.blocks):
        if isinstance(block.ffn, CompressedFfn):
            names.extend(block.ffn.named_parameters(f"blocks.{i}.ffn"))
        for proj in ("q", "k", "v", "o"):
            layer = getattr(block.attn, proj)
            if isinstance(layer, LowRankLinear):
                names.extend(layer.named_parameters(f"blocks.{i}.attn.{proj}"))
    return names


def compression_mode(model: TransformerModel) -> str | None:
    modes = {b.ffn.mode for b in model.blocks if isinstance(b.ffn, CompressedFfn)}
    if not modes:
        return None
    if len(modes) > 1:
        raise ValueError(f"model mixes compression modes {sorted(modes)}")
    return modes.pop()


def set_trainable(model: TransformerModel, train_all: bool = False) -> list[str]:
    """Freeze everything except the compressed factors and corrective paths.

    In ``svd_fixed`` mode nothing is trainable. ``train_all`` instead makes
    every parameter trainable.
    """
    if compression_mode(model) == "svd_fixed":
        model.set_trainable(False)
        return []
    if train_all:
        model.set_trainable(True)
        return model.trainable_names()
    keep = set(compressed_param_names(model))
    for name, p in model.named_parameters().items():
        p.set_trainable(name in keep)
    return [n for n in model.named_parameters() if n in keep]


def _layer_params(block, include_qkv: bool) -> int:
    total = sum(p.n_effective for p in block.ffn.named_parameters("f").values())
    if include_qkv:
        for proj in ("q", "k", "v"):
            total += sum(p.n_effective for p in getattr(block.attn, proj).named_parameters("p").values())
    return total


def ffn_inputs(model: TransformerModel, samples: np.ndarray, layers, chunk: int = 8) -> dict[int, np.ndarray]:
    """Post-norm FFN inputs of the given layers, stacked over all tokens."""
    layers = list(layers)
    out = {i: [] for i in layers}
    for start in range(0, len(samples), chunk):
        _, taps = forward(model, samples[start : start + chunk], taps=True)
        for i in layers:
            x = taps[i]["ffn_input"]
            out[i].append(x.reshape(-1, x.shape[-1]))
    return {i: np.concatenate(v) for i, v in out.items()}


def build_calr_model(
    model: TransformerModel,
    calib,
    n_target: int,
    r: int,
    r_c: int | None = None,
    strategy: str = "lowest",
    corrective_kind: str = "dense",
    include_qkv: bool = False,
    mode: str = "calr",
    seed: int = 0,
    n_samples: int | None = 100,
    profile: TransformationProfile | None = None,
) -> tuple[TransformerModel, CompressionReport]:
    """Profile, select ``n_target`` FFNs, and compress them.

    Returns a new model (the input is left untouched) with only the
    compressed parameters trainable, plus a parameter report.
    """
    r_c = r if r_c is None else r_c
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    calib = model.check_tokens(calib)
    n_layers = model.config.n_layers
    if not 0 <= n_target <= n_layers:
        raise ValueError(f"n_target must be in [0, {n_layers}], got {n_target}")
    n_samples = len(calib) if n_samples is None else min(n_samples, len(calib))
    if profile is None:
        profile = profile_transformation(model, calib, n_samples)
    selected = select_targets(profile, n_target, strategy, seed) if n_target else []

    new = model.copy()
    rng = np.random.default_rng(seed)
    sparse_inputs = {}
    if selected and mode == "calr" and corrective_kind == "sparse":
        sparse_inputs = ffn_inputs(model, calib[:n_samples], selected)
    before = [_layer_params(b, include_qkv) for b in model.blocks]
    for i in selected:
        block = new.blocks[i]
        block.ffn = compress_ffn(
            block.ffn, r, r_c, corrective_kind, mode, rng, calib_inputs=sparse_inputs.get(i)
        )
        if include_qkv:
            for proj in ("q", "k", "v"):
                setattr(block.attn, proj, compress_linear(getattr(block.attn, proj), r, r_c, mode, rng))
    if selected:
        set_trainable(new)
    after = [_layer_params(b, include_qkv) for b in new.blocks]

    params_before = model.n_params()
    params_after = new.n_params()
    rows = []
    for i in range(n_layers):
        is_sel = i in selected
        ffn = new.blocks[i].ffn
        rows.append(
            LayerRow(
                layer=i,
                selected=is_sel,
                original_params=before[i],
                compressed_params=after[i],
                rank=ffn.rank if is_sel else None,
                corrective_rank=ffn.corrective_rank if is_sel else None,
                transformation_score=float(profile.ffn_scores[i]),
                reduction_pct=100.0 * (before[i] - after[i]) / params_before,
            )
        )
    report = CompressionReport(
        params_before=params_before,
        params_after=params_after,
        reduction_pct=100.0 * (params_before - params_after) / params_before,
        layers=rows,
        selected=selected,
        strategy=strategy,
        ffn_scores=profile.ffn_scores.tolist(),
        block_scores=profile.block_scores.tolist(),
        config={
            "n_target": n_target,
            "r": r,
            "r_c": r_c,
            "strategy": strategy,
            "corrective_kind": corrective_kind,
            "include_qkv": include_qkv,
            "mode": mode,
            "seed": seed,
            "n_samples": n_samples,
            "model": model.config.to_dict(),
        },
    )
    return new, report


@dataclass
class FinetuneResult:
    history: ad.LossHistory
    val_loss_before: float
    val_loss_after: float
    trainable: list[str] = field(default_factory=list)
    steps_run: int = 0

    def to_dict(self) -> dict:
        return {
            "history": self.history.to_dict(),
            "val_loss_before": self.val_loss_before,
            "val_loss_after": self.val_loss_after,
            "val_perplexity_before": float(np.exp(self.val_loss_before)),
            "val_perplexity_after": float(np.exp(self.val_loss_after)),
            "trainable": self.trainable,
            "steps_run": self.steps_run,
        }


def finetune_calr(
    model: TransformerModel,
    data: Corpus,
    config: TrainConfig,
    train_all: bool = False,
    valid_batches=None,
    log=None,
) -> tuple[TransformerModel, FinetuneResult]:
    """LM-loss fine-tuning of the compressed parameters (a copy is trained).

    With ``svd_fixed`` mode nothing trains and the copy is returned unchanged.
    """
    if compression_mode(model) is None:
        raise ValueError("finetune_calr needs a model with at least one compressed FFN")
    tuned = model.copy()
    trainable = set_trainable(tuned, train_all)
    if valid_batches is None:
        valid_batches = data.valid_batches()
    before = evaluate_loss(tuned, valid_batches)
    if not trainable or config.steps == 0:
        return tuned, FinetuneResult(ad.LossHistory(), before, before, trainable, 0)
    history = ad.train_loop(
        tuned,
        data.train_batches(config.batch_size, config.seed),
        config,
        evaluate=lambda: evaluate_loss(tuned, valid_batches),
        log=log,
    )
    after = history.validation[-1][1]
    return tuned, FinetuneResult(history, before, after, trainable, config.steps)
