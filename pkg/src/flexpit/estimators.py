"""scikit-learn style wrappers around the separator, the embedding and the constrained clustering."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ShapeMismatch
from .labels import EMBED_BANDS, EMBED_FRAME_LEN, constrained_2means, speaker_embedding
from .separator import SeparatorConfig, forward_batch
from .signal import Dataset, Mixture, Waveform
from .trainer import preset_schedule, run_schedule, validate


def _to_dataset(X, y) -> Dataset:
    X = check_array(X, dtype=np.float64)
    y = check_array(y, dtype=np.float64, allow_nd=True)
    if y.ndim != 3 or y.shape[0] != X.shape[0] or y.shape[2] != X.shape[1]:
        raise ShapeMismatch(f"sources must have shape (n_mixtures, n_sources, {X.shape[1]}), got {y.shape}")
    mixtures = [
        Mixture(i, Waveform(X[i]), tuple(Waveform(s) for s in y[i]), tuple(range(y.shape[1])))
        for i in range(X.shape[0])
    ]
    return Dataset(mixtures)


class MaskSeparator(BaseEstimator, TransformerMixin):
    """Mask-inference separator trained with one of the preset label schedules.

    ``fit(X, y)`` takes mixtures ``X`` of shape (n, samples) and references
    ``y`` of shape (n, 2, samples); ``transform`` returns estimates of shape
    (n, 2, samples) and ``score`` the mean SDR improvement in dB.
    """

    def __init__(
        self,
        preset="pit",
        L=15,
        epochs=15,
        frame_len=16,
        latent_dim=16,
        hidden_dim=32,
        init_scale=0.05,
        batch_size=8,
        lr=3e-3,
        seed=0,
    ):
        self.preset = preset
        self.L = L
        self.epochs = epochs
        self.frame_len = frame_len
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.init_scale = init_scale
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y, X_valid=None, y_valid=None):
        train = _to_dataset(X, y)
        valid = train if X_valid is None else _to_dataset(X_valid, y_valid)
        config = SeparatorConfig(self.frame_len, self.latent_dim, self.hidden_dim, train.num_sources, self.init_scale, self.seed)
        schedule = preset_schedule(
            self.preset,
            L=self.L,
            epochs=self.epochs,
            separator=config,
            batch_size=self.batch_size,
            shuffle_seed=self.seed,
            lr=self.lr,
            cluster_seed=self.seed,
        )
        self.report_ = run_schedule(schedule, train, valid)
        self.params_ = self.report_.params
        self.labels_ = self.report_.final_labels.perms.copy()
        self.n_features_in_ = train.mix_array.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        est, _ = forward_batch(self.params_, X, fingerprint=False)
        return est

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        check_is_fitted(self, "params_")
        return validate(self.params_, _to_dataset(X, y))


class SpeakerEmbedder(BaseEstimator, TransformerMixin):
    """Stateless transform from utterances (n, samples) to unit-norm band-energy embeddings."""

    def __init__(self, n_bands=EMBED_BANDS, frame_len=EMBED_FRAME_LEN):
        self.n_bands = n_bands
        self.frame_len = frame_len

    def fit(self, X, y=None):
        check_array(X, dtype=np.float64)
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        return np.array([speaker_embedding(x, self.n_bands, self.frame_len) for x in X])


class ConstrainedTwoMeans(BaseEstimator, ClusterMixin):
    """Two-cluster k-means over embedding pairs (n, 2, K); the two members of a pair never share a cluster.

    ``labels_`` holds cluster ids (1 or 2) per utterance, ``perms_`` the
    channel permutation that routes each cluster-1 utterance to channel 0.
    """

    def __init__(self, max_iter=100, seed=0):
        self.max_iter = max_iter
        self.seed = seed

    def _check(self, X):
        X = check_array(X, dtype=np.float64, allow_nd=True)
        if X.ndim != 3 or X.shape[1] != 2:
            raise ShapeMismatch(f"expected pairs of shape (n, 2, K), got {X.shape}")
        return X

    def fit(self, X, y=None):
        X = self._check(X)
        state, table = constrained_2means(X, seed=self.seed, max_iter=self.max_iter)
        self.cluster_centers_ = state.means
        self.labels_ = state.assignments
        self.perms_ = table.perms.copy()
        self.inertia_ = state.objective
        self.n_iter_ = state.n_iter
        self.converged_ = state.converged
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = self._check(X)
        m = self.cluster_centers_
        keep = np.sum((X[:, 0] - m[0]) ** 2, axis=1) + np.sum((X[:, 1] - m[1]) ** 2, axis=1)
        cross = np.sum((X[:, 0] - m[1]) ** 2, axis=1) + np.sum((X[:, 1] - m[0]) ** 2, axis=1)
        return np.where((cross < keep)[:, None], [[2, 1]], [[1, 2]])

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


__all__ = ["MaskSeparator", "SpeakerEmbedder", "ConstrainedTwoMeans"]
