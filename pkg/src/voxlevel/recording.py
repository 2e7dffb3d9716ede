"""Recording-factor losses and calibration.

A recording's frame power ``p`` is modelled as a recording factor times the
voice level.  Two training losses avoid knowing that factor:

* :func:`learned_factor_loss` fits one factor per group of recordings,
  trained jointly with the network (factors kept as log-values).
* :func:`scalar_product_loss` substitutes the closed-form best factor
  (:func:`adaptive_factor`) into the squared error and normalises by
  ``||p||**2``, which leaves ``1 - cos^2`` of the angle between ``p`` and ``q``.

``p`` is a plain array; ``q`` may be an array or an autodiff tensor.  A
leading batch axis is supported everywhere (the time axis is last).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


class DegenerateContourError(ValueError):
    """A contour has zero norm, so no factor or direction exists."""


class UnknownGroupError(KeyError):
    def __init__(self, group, known):
        super().__init__(f"unknown group {group!r}; known groups: {sorted(known)}")
        self.group = group

    def __str__(self):
        return self.args[0]


def _check_lengths(p: np.ndarray, q_shape) -> None:
    if p.shape != tuple(q_shape):
        raise ValueError(f"contour shapes differ: p {p.shape} vs q {tuple(q_shape)}")


def learned_factor_loss(p, q, log_factor) -> ad.Tensor:
    """Squared error ``sum_t (p_t - a * q_t)**2`` with ``a = exp(log_factor)``.

    With batched inputs ``log_factor`` carries one entry per row and one loss
    per row is returned.
    """
    p = np.asarray(p, dtype=np.float64)
    q = ad.as_tensor(q)
    _check_lengths(p, q.shape)
    a = ad.exp(ad.as_tensor(log_factor))
    if p.ndim > 1:
        a = ad.reshape(a, (*a.shape, 1))
    return ad.sum_(ad.square(ad.sub(p, ad.mul(a, q))), axis=-1)


def squared_error(p, q, a) -> np.ndarray:
    """``e_a = ||p - a q||**2`` for a plain factor ``a``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if p.ndim > 1:
        a = a[..., None]
    return np.sum((p - a * q) ** 2, axis=-1)


def adaptive_factor(p, q):
    """Least-squares factor ``(p . q) / ||q||**2``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q.data if isinstance(q, ad.Tensor) else q, dtype=np.float64)
    _check_lengths(p, q.shape)
    qq = np.einsum("...t,...t->...", q, q)
    if np.any(qq <= 0.0):
        raise DegenerateContourError("network output has zero norm; recording factor undefined")
    a = np.einsum("...t,...t->...", p, q) / qq
    return float(a) if np.ndim(a) == 0 else a


def scalar_product_loss(p, q) -> ad.Tensor:
    """``1 - (p_hat . q_hat)**2`` in [0, 1]; differentiable w.r.t. ``q``."""
    p = np.asarray(p, dtype=np.float64)
    q = ad.as_tensor(q)
    _check_lengths(p, q.shape)
    pp = np.einsum("...t,...t->...", p, p)
    if np.any(pp <= 0.0):
        raise DegenerateContourError("power contour has zero norm")
    qq = ad.dot(q, q)
    if np.any(qq.data <= 0.0):
        raise DegenerateContourError("network output has zero norm")
    pq = ad.dot(p, q)
    # guards against 1 - cos^2 dipping below 0 by rounding
    return ad.clip(ad.sub(1.0, ad.div(ad.square(pq), ad.mul(pp, qq))), 0.0, 1.0)


class FactorTable:
    """Per-group recording factors, stored as trainable log-values."""

    def __init__(self, groups=()):
        self._params: dict[str, ad.Parameter] = {}
        for g in groups:
            self.add(g)

    def add(self, group: str, log_value: float = 0.0) -> ad.Parameter:
        param = ad.Parameter(np.array(float(log_value)), name=f"factor/{group}")
        self._params[str(group)] = param
        return param

    def __contains__(self, group) -> bool:
        return str(group) in self._params

    def __len__(self) -> int:
        return len(self._params)

    @property
    def groups(self) -> list[str]:
        return list(self._params)

    def param(self, group) -> ad.Parameter:
        try:
            return self._params[str(group)]
        except KeyError:
            raise UnknownGroupError(group, self._params) from None

    def factor(self, group) -> float:
        return math.exp(float(self.param(group).data))

    def set_log(self, group, value: float) -> None:
        self.param(group).data = np.array(float(value))

    def parameters(self) -> list[ad.Parameter]:
        return list(self._params.values())

    def log_values(self) -> dict[str, float]:
        return {g: float(p.data) for g, p in self._params.items()}


def calibrate(model, mel, p=None, group=None, variant=None):
    """Express the estimator output in the units of one recording.

    ``Ad``: the factor is :func:`adaptive_factor` of the recording's power
    contour ``p``.  ``Le``: the factor is the stored entry for ``group``.
    Returns ``(calibrated_contour, factor)``.
    """
    variant = (variant or model.variant or "ad").lower()
    q = model.predict(mel)
    if variant == "ad":
        if p is None:
            raise ValueError("Ad calibration needs the recording's power contour")
        factor = adaptive_factor(np.asarray(p, dtype=np.float64) / model.power_ref, q)
    elif variant == "le":
        if model.factors is None:
            raise ValueError("model has no factor table; it was not trained with the Le variant")
        factor = model.factors.factor(group)
    else:
        raise ValueError(f"unknown variant {variant!r}; expected 'le' or 'ad'")
    # contour back in the recording's own power units
    factor *= model.power_ref
    return factor * q, factor
