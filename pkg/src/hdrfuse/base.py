"""Estimator plumbing: parameter introspection and input validation helpers.

The trainable components follow the scikit-learn estimator convention:
``__init__`` stores constructor arguments verbatim, ``fit`` returns ``self``,
and ``get_params``/``set_params`` expose the constructor arguments so the
estimators compose with the wider ecosystem (grid search, cloning).
"""

from __future__ import annotations

import inspect

import numpy as np

from .errors import ConfigError, ValidationError


class ParamMixin:
    """get_params/set_params backed by the ``__init__`` signature."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ConfigError(
                    f"invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, key, value)
        return self


def check_array(data, name: str, *, ndim=None, nonneg=False, finite=True) -> np.ndarray:
    arr = np.asarray(data)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim} dims, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        idx = np.unravel_index(int(np.argmin(np.isfinite(arr))), arr.shape)
        raise ValidationError(f"{name}: non-finite value at index {tuple(idx)}")
    if nonneg and arr.size and float(arr.min()) < 0:
        idx = np.unravel_index(int(np.argmin(arr)), arr.shape)
        raise ValidationError(f"{name}: negative value at index {tuple(idx)}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
