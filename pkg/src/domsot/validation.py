"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Vocabulary
from .data import MixtureSample


def check_features(features, n_features: int | None = None, min_frames: int = 1,
                   name: str = "features") -> np.ndarray:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D frames x dims array, got shape {arr.shape}")
    if arr.shape[0] < min_frames:
        raise ValueError(f"{name}: {arr.shape[0]} frames, need at least {min_frames}")
    if n_features is not None and arr.shape[1] != n_features:
        raise ValueError(f"{name}: {arr.shape[1]} feature dims, estimator was fit with {n_features}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    return arr


def check_mixtures(X, n_features: int | None = None, min_frames: int = 1,
                   require_transcripts: bool = True) -> list[MixtureSample]:
    if isinstance(X, MixtureSample):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("empty list of mixtures")
    vocab = None
    for s in X:
        if not isinstance(s, MixtureSample):
            raise TypeError(f"expected MixtureSample, got {type(s).__name__}")
        check_features(s.features, n_features, min_frames, name=s.id)
        if n_features is None:
            n_features = s.features.shape[1]
        if require_transcripts:
            if not s.components:
                raise ValueError(f"{s.id}: no components")
            for t in s.transcripts:
                if vocab is None:
                    vocab = t.vocab
                elif t.vocab != vocab:
                    raise ValueError(f"{s.id}: transcripts use a different vocabulary")
                if not t.is_plain:
                    raise ValueError(f"{s.id}: transcript contains reserved tokens")
    return X


def common_vocabulary(X: Sequence[MixtureSample]) -> Vocabulary:
    return X[0].transcripts[0].vocab
