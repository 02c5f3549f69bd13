"""scikit-learn compatible wrappers around the model family."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import UnsupportedOperationError
from .models import build_model, parse_variant
from .trainer import TrainConfig, predict_features, predict_logits, train
from .validation import check_images, check_labels, check_positive_int


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SCNNClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier backed by a baseline CNN or an SCNN variant.

    Parameters
    ----------
    variant : str
        ``'baseline-K'`` or ``'{S|P}-{GS|RS}-K'`` with K in 3, 5, 7.
    epochs, batch_size, lr0, lr_decay, decay_every :
        Training schedule; learning rate is
        ``lr0 * lr_decay ** (epoch // decay_every)``.
    random_state : int
        Seeds both weight initialisation and batch shuffling.
    dtype : str
        ``'float32'`` (fast) or ``'float64'``.
    phase : float
        Angular phase of polar sampling, in radians.

    Attributes
    ----------
    classes_ : ndarray
        Sorted unique labels seen in ``fit``.
    model_ : Model
        The trained network.
    history_ : list of EpochRecord
    """

    def __init__(self, variant="P-RS-3", epochs=100, batch_size=100, lr0=1e-4,
                 lr_decay=0.8, decay_every=10, random_state=0, dtype="float32", phase=0.0):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.random_state = random_state
        self.dtype = dtype
        self.phase = phase

    def _config(self):
        return TrainConfig(
            epochs=check_positive_int(self.epochs, "epochs"),
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            lr0=self.lr0, lr_decay=self.lr_decay,
            decay_every=check_positive_int(self.decay_every, "decay_every"),
            seed=self.random_state)

    def fit(self, X, y, validation_data=None):
        """Train on images ``X`` with labels ``y``.

        ``validation_data`` is an optional ``(X_valid, y_valid)`` pair used
        to keep the best-validation weights.
        """
        X = check_images(X, self.dtype)
        y = check_labels(y, len(X))
        self.classes_, codes = np.unique(y, return_inverse=True)
        spec = parse_variant(self.variant, num_classes=len(self.classes_))
        self.model_ = build_model(spec, seed=self.random_state, dtype=self.dtype,
                                  phase=self.phase)
        valid = None
        if validation_data is not None:
            Xv = check_images(validation_data[0], self.dtype)
            yv = check_labels(validation_data[1], len(Xv))
            valid = (Xv, np.searchsorted(self.classes_, yv))
        result = train(self.model_, (X, codes), valid, self._config())
        if valid is not None:
            self.model_.load_state_dict(result.best_state)
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_images(X, self.dtype))

    def predict_proba(self, X):
        return _softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """Pooled 128-d features ahead of the linear head."""
        check_is_fitted(self, "model_")
        return predict_features(self.model_, check_images(X, self.dtype))


class InvariantFeatureExtractor(TransformerMixin, BaseEstimator):
    """Rotation-invariant 128-d descriptors from a random-weight SCNN.

    Invariance is a property of the architecture, so ``fit`` only builds
    the network; it does not look at the data beyond its shape.
    """

    def __init__(self, variant="P-RS-3", random_state=0, dtype="float64", phase=0.0):
        self.variant = variant
        self.random_state = random_state
        self.dtype = dtype
        self.phase = phase

    def fit(self, X, y=None):
        X = check_images(X, self.dtype)
        spec = parse_variant(self.variant)
        if spec.kind != "scnn":
            raise UnsupportedOperationError(
                f"{spec.name} is not rotation invariant; choose an SCNN variant")
        self.model_ = build_model(spec, seed=self.random_state, dtype=self.dtype,
                                  phase=self.phase)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return predict_features(self.model_, check_images(X, self.dtype))
