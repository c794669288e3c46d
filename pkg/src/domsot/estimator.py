"""scikit-learn style front end for the toy SOT recognizer."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .analysis import encoder_scores
from .core import ExperimentConfig
from .metrics import score_corpus
from .trainer import evaluate, train
from .validation import check_mixtures, common_vocabulary


class SOTRecognizer(BaseEstimator):
    """Multi-talker recognizer trained with FIFO, PIT or DOM serialization.

    ``fit`` takes a list of :class:`~domsot.data.MixtureSample` (the
    transcripts are the targets, so ``y`` is ignored); ``predict`` returns
    one serialized hypothesis per mixture.

    Parameters mirror :class:`~domsot.core.ExperimentConfig`.
    """

    def __init__(self, strategy="dom", alpha=0.1, learning_rate=1e-3, epochs=40, warmup_epochs=4,
                 batch_size=8, seed=0, checkpoint_average_last=5, subsample_factor=10,
                 hidden_size=32, decode_max_len=None):
        self.strategy = strategy
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.checkpoint_average_last = checkpoint_average_last
        self.subsample_factor = subsample_factor
        self.hidden_size = hidden_size
        self.decode_max_len = decode_max_len

    def to_config(self) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(ExperimentConfig)}
        return ExperimentConfig(**{k: v for k, v in self.get_params().items() if k in names})

    @classmethod
    def from_config(cls, config: ExperimentConfig, **extra) -> "SOTRecognizer":
        return cls(**dataclasses.asdict(config), **extra)

    def fit(self, X, y=None, init=None):
        config = self.to_config()
        X = check_mixtures(X, min_frames=config.subsample_factor)
        self.vocab_ = common_vocabulary(X)
        self.n_features_in_ = X[0].features.shape[1]
        result = train(config, X, self.vocab_, init=init)
        self.params_ = result.params
        self.training_log_ = result.log
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_mixtures(X, self.n_features_in_, self.subsample_factor, require_transcripts=False)
        return [h for _, h in evaluate(self.params_, X, self.vocab_, self.decode_max_len)]

    def dominance_scores(self, X):
        """Encoder CTC loss of every component transcript (lower = more dominant)."""
        check_is_fitted(self, "params_")
        X = check_mixtures(X, self.n_features_in_, self.subsample_factor)
        return encoder_scores(self.params_, X)

    def score(self, X, y=None):
        """``1 - speaker-aware WER`` pooled over ``X`` (higher is better)."""
        X = check_mixtures(X, getattr(self, "n_features_in_", None))
        hyps = dict(zip((s.id for s in X), self.predict(X)))
        report = score_corpus(hyps, {s.id: s.transcripts for s in X}, self.vocab_)
        return 1.0 - report["speaker_aware_wer"]

    def __sklearn_is_fitted__(self):
        return hasattr(self, "params_")

    @property
    def final_loss_(self) -> float:
        check_is_fitted(self, "params_")
        return float(np.asarray(self.training_log_[-1]["mean_loss"]))
