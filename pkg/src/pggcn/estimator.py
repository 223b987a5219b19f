"""scikit-learn compatible wrappers.

Samples are passed as one array ``X`` of shape ``[n, T, N, 5, M]`` (or
``[n, T, N, 5]`` for a single body) whose channels are the 3D skeleton
coordinates followed by the 2D pose coordinates; :func:`pack_inputs` and
:func:`unpack_inputs` convert between that layout and separate arrays.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Sample, view_align
from .exceptions import DimensionError
from .model import PGGCNConfig, PGGCNModel
from .train import TrainConfig, predict_logits, train_loop


def pack_inputs(skeleton, pose):
    skeleton = np.asarray(skeleton, dtype=np.float64)
    pose = np.asarray(pose, dtype=np.float64)
    if skeleton.shape[3] != 3 or pose.shape[3] != 2:
        raise DimensionError("skeleton needs 3 channels and pose 2 on axis 3")
    if skeleton.shape[:3] != pose.shape[:3] or skeleton.shape[4:] != pose.shape[4:]:
        raise DimensionError(f"skeleton {skeleton.shape} and pose {pose.shape} disagree")
    return np.concatenate([skeleton, pose], axis=3)


def unpack_inputs(X):
    return X[:, :, :, :3], X[:, :, :, 3:5]


def check_inputs(X, num_joints=None):
    """Validate a packed batch and return it as float64 ``[n, T, N, 5, M]``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        X = X[..., None]
    if X.ndim != 5 or X.shape[3] != 5:
        raise DimensionError(f"expected X of shape [n, T, N, 5(, M)], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X has no samples")
    if num_joints is not None and X.shape[2] != num_joints:
        raise DimensionError(f"X has {X.shape[2]} joints, estimator was fit on {num_joints}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or infinity")
    return X


class PGGCNClassifier(ClassifierMixin, BaseEstimator):
    """Pose-guided GCN action classifier.

    ``attention`` is one of ``none``, ``vanilla`` or ``dynamic`` and
    ``streams`` one of ``pose``, ``skeleton`` or ``both``.  Fitting uses SGD
    with cross-entropy; every other hyperparameter maps onto
    :class:`~pggcn.model.PGGCNConfig` or :class:`~pggcn.train.TrainConfig`.
    """

    def __init__(self, attention="dynamic", streams="both", embed_channels=(64, 64, 64),
                 classifier_channels=(128, 256), temporal_kernel=9, partitions=3,
                 center_joint=None, graph_edges=None, learning_rate=0.1, batch_size=16,
                 weight_decay=1e-4, epochs=200, schedule="step", momentum=0.0,
                 random_state=0):
        self.attention = attention
        self.streams = streams
        self.embed_channels = embed_channels
        self.classifier_channels = classifier_channels
        self.temporal_kernel = temporal_kernel
        self.partitions = partitions
        self.center_joint = center_joint
        self.graph_edges = graph_edges
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.schedule = schedule
        self.momentum = momentum
        self.random_state = random_state

    def _dataset(self, X, y_idx):
        skel, pose = unpack_inputs(X)
        return Dataset(skel, pose, y_idx, [str(i) for i in range(len(X))], len(self.classes_))

    def fit(self, X, y):
        X = check_inputs(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y).astype(np.int64)
        seed = 0 if self.random_state is None else int(self.random_state)
        config = PGGCNConfig(
            num_classes=len(self.classes_), num_joints=X.shape[2], max_frames=X.shape[1],
            embed_channels=self.embed_channels, classifier_channels=self.classifier_channels,
            temporal_kernel=self.temporal_kernel, attention=self.attention,
            streams=self.streams, partitions=self.partitions, center_joint=self.center_joint,
            graph_edges=self.graph_edges, seed=seed)
        self.model_ = PGGCNModel(config)
        self.train_config_ = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            weight_decay=self.weight_decay, epochs=self.epochs, schedule=self.schedule,
            momentum=self.momentum, seed=seed)
        result = train_loop(self.model_, self._dataset(X, y_idx), self.train_config_)
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_inputs(X, self.model_.config.num_joints)
        skel, pose = unpack_inputs(X)
        ds = Dataset(skel, pose, np.zeros(len(X), dtype=np.int64), [""] * len(X),
                     len(self.classes_))
        return predict_logits(self.model_, ds)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ViewAligner(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one rigid view alignment per clip to
    the skeleton channels of a packed batch (pose channels pass through)."""

    def __init__(self, hip=0, spine=1, left_shoulder=4, right_shoulder=8):
        self.hip = hip
        self.spine = spine
        self.left_shoulder = left_shoulder
        self.right_shoulder = right_shoulder

    def fit(self, X, y=None):
        check_inputs(X)
        return self

    def transform(self, X):
        X = check_inputs(X).copy()
        joints = dict(hip=self.hip, spine=self.spine, left_shoulder=self.left_shoulder,
                      right_shoulder=self.right_shoulder)
        for i in range(len(X)):
            s = view_align(Sample(X[i, :, :, :3], X[i, :, :, 3:5], 0), **joints)
            X[i, :, :, :3] = s.skeleton
        return X
