"""scikit-learn compatible wrapper around the training drivers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import schemes
from .config import DataConfig, RunConfig
from .data import ChannelNormalizer, Dataset
from .deploy import predict_logits
from .distill import DistillConfig
from .models import ModelSpec, Network
from .quant import QuantSpec
from .tensor import Tensor, softmax


def _as_images(X: np.ndarray, shape) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        if X.shape[1] != int(np.prod(shape)):
            raise ValueError(f"flat samples have {X.shape[1]} features, the model expects {shape}")
        X = X.reshape((-1,) + tuple(shape))
    if X.shape[1:] != tuple(shape):
        raise ValueError(f"samples have shape {X.shape[1:]}, the model expects {shape}")
    return X


class ApprenticeClassifier(ClassifierMixin, BaseEstimator):
    """Low-precision image classifier, optionally distilled from a teacher.

    ``scheme`` selects the driver: ``"baseline"`` trains on labels only,
    ``"A"`` trains a fresh ``teacher_spec`` jointly with the student, ``"B"``
    distills from the fitted ``teacher`` network (kept frozen).

    Samples are ``[N, C, H, W]`` arrays or their flattened rows.
    """

    def __init__(self, family="mnist_convnet", widths=(16, 32, 128), n=3, quant="8A,2W",
                 exempt_first_last=True, scheme="baseline", teacher=None, teacher_spec=None,
                 alpha=1.0, beta=0.5, gamma=0.5, tau=1.0, epochs=10, lr=0.05, batch_size=64,
                 momentum=0.9, weight_decay=1e-4, augment=False, seed=0):
        self.family = family
        self.widths = widths
        self.n = n
        self.quant = quant
        self.exempt_first_last = exempt_first_last
        self.scheme = scheme
        self.teacher = teacher
        self.teacher_spec = teacher_spec
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.tau = tau
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.seed = seed

    def _config(self, num_classes: int) -> RunConfig:
        widths = tuple(self.widths or ())
        if self.family == "mnist_mlp" and widths and widths[-1] != num_classes:
            widths = widths[:-1] + (num_classes,)
        spec = ModelSpec(self.family, self.n, widths, num_classes)
        teacher_spec = self.teacher_spec or spec
        return RunConfig(
            scheme=str(self.scheme).upper(), student_spec=spec, teacher_spec=teacher_spec,
            student_quant=QuantSpec.parse(self.quant, self.exempt_first_last),
            distill=DistillConfig(self.alpha, self.beta, self.gamma, self.tau),
            lr_schedule=((float(self.lr), int(self.epochs)),), batch_size=self.batch_size, seed=self.seed,
            momentum=self.momentum, weight_decay=self.weight_decay,
            data=DataConfig("in-memory", augment=self.augment),
        )

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; ``(X_val, y_val)`` feeds the per-epoch test records."""
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = self._config(len(self.classes_))
        if cfg.scheme not in ("BASELINE", "A", "B"):
            raise ValueError(f"scheme must be 'baseline', 'A' or 'B', got {self.scheme!r}")
        if cfg.scheme == "B" and not isinstance(self.teacher, Network):
            raise ValueError("scheme B needs a trained teacher Network")
        images = _as_images(X, cfg.student_spec.input_shape)
        train = Dataset(images, codes, num_classes=len(self.classes_))
        if X_val is not None:
            Xv = _as_images(check_array(X_val, allow_nd=True, dtype=np.float32), cfg.student_spec.input_shape)
            yv = np.searchsorted(self.classes_, np.asarray(y_val))
            test = Dataset(Xv, yv, num_classes=len(self.classes_))
        else:
            test = train
        normalizer = ChannelNormalizer().fit(train)
        data = (train, test, normalizer)
        if cfg.scheme == "B":
            result = schemes.run_scheme_b(cfg, data, teacher=self.teacher)
        else:
            result = schemes.run(cfg, data)
        self.model_ = result.student
        self.teacher_ = result.teacher
        self.normalizer_ = normalizer
        self.records_ = result.records
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _as_images(check_array(X, allow_nd=True, dtype=np.float32), self.model_.spec.input_shape)
        return predict_logits(self.model_, self.normalizer_.transform(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(Tensor(self.decision_function(X))).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
