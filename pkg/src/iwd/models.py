"""Trained classifiers: a network plus the image shape it reads and its provenance."""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (NetworkSpec, backward, cross_entropy_batch, cross_entropy_head, forward,
                       params_from_bytes, params_to_bytes)
from .errors import DimensionError, NumericError, PathError


@dataclass
class TrainedModel:
    spec: NetworkSpec
    params: np.ndarray
    input_shape: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if int(np.prod(self.input_shape)) != self.spec.layer_widths[0]:
            raise DimensionError(f"input shape {self.input_shape} does not match network width")
        if not np.all(np.isfinite(self.params)):
            raise NumericError("model parameters are not finite")

    @property
    def n_classes(self):
        return self.spec.layer_widths[-1]

    def _flat(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape == self.input_shape:
            X = X[None]
        return X.reshape(len(X), -1)

    def logits(self, X):
        return forward(self.spec, self.params, self._flat(X))

    def predict(self, X):
        # argmax returns the lowest index on ties
        return np.argmax(self.logits(X), axis=1)

    def loss(self, X, y):
        return cross_entropy_batch(self.logits(X), np.atleast_1d(y))

    def loss_input_grad(self, X, y, weights=None):
        """Weighted CE sum and its gradient w.r.t. the images (same shape as X).

        Default weights are all ones, so each image's gradient is that of its
        own loss.
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.shape == self.input_shape
        Xb = X[None] if single else X
        y = np.atleast_1d(y)
        w = np.ones(len(Xb)) if weights is None else np.asarray(weights, dtype=np.float64)
        g = backward(self.spec, self.params, Xb.reshape(len(Xb), -1), cross_entropy_head(y, w))
        gx = g.grad_input.reshape(Xb.shape)
        return g.loss, (gx[0] if single else gx)

    def config_hash(self):
        h = hashlib.sha256(params_to_bytes(self.spec, self.params))
        return h.hexdigest()[:16]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(params_to_bytes(self.spec, self.params))
        meta = {"activation": self.spec.activation, "output": self.spec.output,
                "input_shape": list(self.input_shape), "provenance": self.provenance}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise PathError(f"no such model: {path}")
        with open(path, "rb") as fh:
            blob = fh.read()
        meta_path = str(path) + ".json"
        meta = {}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
        spec, params = params_from_bytes(blob, meta.get("activation", "relu"), meta.get("output", "logits"))
        shape = meta.get("input_shape", [spec.layer_widths[0]])
        return cls(spec, params, tuple(shape), meta.get("provenance", {}))
