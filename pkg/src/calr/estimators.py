"""Scikit-learn style wrappers over the library functions.

``X`` is always a 2-D integer array of byte token windows. Each estimator
delegates to the functional API, so results are identical to calling
:func:`calr.model.init_model` / :func:`calr.autodiff.train_loop`,
:func:`calr.compress.profile_transformation` and
:func:`calr.compress.build_calr_model` directly.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import TrainConfig, train_loop
from .compress import build_calr_model, profile_transformation
from .corpus import Corpus
from .exceptions import ShapeError, TokenRangeError
from .model import ModelConfig, forward, init_model, lm_loss


def check_windows(X, vocab_size: int = 256, max_len: int | None = None) -> np.ndarray:
    """Validate a (n_windows, length) array of token ids and return it as int64."""
    X = check_array(X, dtype=None, ensure_2d=True, ensure_min_features=2)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.mod(X, 1) == 0):
            raise TokenRangeError("token windows must hold integer ids")
    X = X.astype(np.int64)
    if X.min() < 0 or X.max() >= vocab_size:
        raise TokenRangeError(f"token ids must lie in [0, {vocab_size}), got [{X.min()}, {X.max()}]")
    if max_len is not None and X.shape[1] > max_len:
        raise ShapeError(f"window length {X.shape[1]} exceeds {max_len}")
    return X


class ByteLanguageModel(BaseEstimator):
    """Decoder-only byte LM trained on token windows.

    ``fit`` takes windows of ``seq_len + 1`` tokens (inputs plus shifted
    targets). ``predict`` returns the greedy next-token id at every position
    and ``score`` the negative mean cross-entropy.
    """

    def __init__(self, d_model=64, n_heads=4, d_ff=256, n_layers=8, max_seq_len=128,
                 steps=3000, batch_size=4, lr=3e-3, weight_decay=0.01, warmup_frac=0.05, seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.max_seq_len = max_seq_len
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_frac = warmup_frac
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
                           n_layers=self.n_layers, max_seq_len=self.max_seq_len, seed=self.seed)

    def fit(self, X, y=None):
        X = check_windows(X, max_len=self.max_seq_len + 1)
        self.model_ = init_model(self._model_config())
        config = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                             weight_decay=self.weight_decay, warmup_frac=self.warmup_frac, seed=self.seed)
        data = Corpus(X, X[:0], np.arange(len(X)), np.arange(0), X.shape[1] - 1, self.seed)
        self.history_ = train_loop(self.model_, data.train_batches(config.batch_size, config.seed), config)
        return self

    def predict_log_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_windows(X, max_len=self.max_seq_len)
        logits = forward(self.model_, X)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def predict(self, X) -> np.ndarray:
        return self.predict_log_proba(X).argmax(axis=-1)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "model_")
        X = check_windows(X, max_len=self.max_seq_len + 1)
        return -lm_loss(forward(self.model_, X[:, :-1]), X[:, 1:])


class TransformationProfiler(TransformerMixin, BaseEstimator):
    """Per-layer transformation scores of a fixed model.

    ``fit`` stores the profile over all windows in ``profile_``;
    ``transform`` returns per-window FFN scores, shape (n_windows, n_layers).
    """

    def __init__(self, model=None, chunk=8):
        self.model = model
        self.chunk = chunk

    def fit(self, X, y=None):
        X = check_windows(X, self.model.config.vocab_size, self.model.config.max_seq_len)
        self.profile_ = profile_transformation(self.model, X, chunk=self.chunk)
        self.ffn_scores_ = self.profile_.ffn_scores
        self.block_scores_ = self.profile_.block_scores
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "profile_")
        X = check_windows(X, self.model.config.vocab_size, self.model.config.max_seq_len)
        return np.stack([profile_transformation(self.model, X[i : i + 1]).ffn_scores for i in range(len(X))])


class CALRCompressor(TransformerMixin, BaseEstimator):
    """Selects and compresses FFNs of ``model`` using ``X`` as calibration data.

    After ``fit``, ``compressed_model_`` and ``report_`` hold the result;
    ``transform`` returns the compressed model's logits for ``X``.
    """

    def __init__(self, model=None, n_target=4, r=8, r_c=None, strategy="lowest", corrective_kind="dense",
                 include_qkv=False, mode="calr", seed=0, n_samples=100):
        self.model = model
        self.n_target = n_target
        self.r = r
        self.r_c = r_c
        self.strategy = strategy
        self.corrective_kind = corrective_kind
        self.include_qkv = include_qkv
        self.mode = mode
        self.seed = seed
        self.n_samples = n_samples

    def fit(self, X, y=None):
        X = check_windows(X, self.model.config.vocab_size, self.model.config.max_seq_len)
        self.compressed_model_, self.report_ = build_calr_model(
            self.model, X, self.n_target, self.r, self.r_c, self.strategy, self.corrective_kind,
            self.include_qkv, self.mode, seed=self.seed, n_samples=self.n_samples,
        )
        self.selected_ = self.report_.selected
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "compressed_model_")
        X = check_windows(X, self.model.config.vocab_size, self.model.config.max_seq_len)
        return forward(self.compressed_model_, X)
