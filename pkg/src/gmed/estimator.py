"""scikit-learn style wrapper around the online replay trainer."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .editing import EditConfig
from .metrics import prediction_change_rate
from .trainer import EDIT_VARIANTS, VARIANTS, new_state, train_step


class ContinualClassifier(ClassifierMixin, BaseEstimator):
    """Online MLP classifier trained one mini-batch at a time with replay.

    ``fit`` treats the rows of ``X`` as a stream in the given order and
    visits each row once. ``partial_fit`` continues an existing stream,
    so calling it task by task reproduces a single ``fit`` on the
    concatenation.

    Parameters
    ----------
    variant : str
        One of ``finetune, er, er_gmed, mir, mir_gmed, er_aug, er_aug_gmed, agem``.
    hidden_layer_sizes : tuple of int
    mem_size : int
        Replay memory capacity.
    lr : float
    batch_size : int
        Stream batch size; the replay batch has the same size.
    alpha, beta, gamma, edit_steps, edit_kind, writeback, n_extra_edit
        Editing knobs, used only by the editing variants.
    track_originals : bool
        Keep unedited copies of stored examples for ``prediction_change_rate_``.
    random_state : int
    """

    def __init__(self, variant="er", hidden_layer_sizes=(400, 400), mem_size=500, lr=0.05,
                 batch_size=10, alpha=5.0, beta=0.01, gamma=1.0, edit_steps=1, edit_kind="gmed",
                 writeback=True, n_extra_edit=0, track_originals=False, random_state=0):
        self.variant = variant
        self.hidden_layer_sizes = hidden_layer_sizes
        self.mem_size = mem_size
        self.lr = lr
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.edit_steps = edit_steps
        self.edit_kind = edit_kind
        self.writeback = writeback
        self.n_extra_edit = n_extra_edit
        self.track_originals = track_originals
        self.random_state = random_state

    def _edit_config(self):
        if self.variant not in EDIT_VARIANTS:
            return EditConfig(kind="none")
        return EditConfig(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                          steps=self.edit_steps, kind=self.edit_kind, writeback=self.writeback,
                          n_extra_edit=self.n_extra_edit)

    def _initialize(self, n_features, classes):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        self.classes_ = np.asarray(classes)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        sizes = (n_features, *self.hidden_layer_sizes, len(self.classes_))
        self.state_ = new_state(sizes, self.random_state, variant=self.variant,
                                mem_size=self.mem_size, lr=self.lr, replay_size=self.batch_size,
                                track_originals=self.track_originals)
        self.edit_config_ = self._edit_config()
        self.n_features_in_ = n_features

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if np.any(self.classes_[idx] != y):
            unseen = np.setdiff1d(np.unique(y), self.classes_)
            raise ValueError(f"labels {unseen.tolist()} were not declared in classes")
        return idx

    def _consume(self, X, y):
        X = X.astype(np.float32, copy=False)
        codes = self._encode(y)
        b = self.batch_size
        for start in range(0, len(X), b):
            train_step(self.state_, X[start:start + b], codes[start:start + b], self.edit_config_)
        return self

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self._initialize(X.shape[1], np.unique(y))
        return self._consume(X, y)

    def partial_fit(self, X, y, classes=None):
        """Continue the stream; ``classes`` is required on the first call."""
        X, y = check_X_y(X, y, dtype=np.float32)
        if not hasattr(self, "state_"):
            if classes is None:
                raise ValueError("classes must be passed on the first call to partial_fit")
            self._initialize(X.shape[1], np.unique(classes))
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self._consume(X, y)

    def _check_input(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        X = self._check_input(X)
        return nn.softmax(nn.predict_logits(self.state_.params, X))

    def predict(self, X):
        X = self._check_input(X)
        return self.classes_[nn.predict(self.state_.params, X)]

    @property
    def params_(self):
        check_is_fitted(self, "state_")
        return self.state_.params

    @property
    def memory_(self):
        check_is_fitted(self, "state_")
        return self.state_.memory

    @property
    def prediction_change_rate_(self):
        return prediction_change_rate(self.params_, self.memory_)
