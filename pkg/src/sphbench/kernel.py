r"""Quintic spline smoothing kernel.

.. math::

    W(q) = \sigma_d \left[(3-q)^5_+ - 6(2-q)^5_+ + 15(1-q)^5_+\right],
    \qquad q = r / h,

with :math:`(x)_+ = \max(x, 0)`, support radius :math:`3h` and

.. math::

    \sigma_2 = \frac{7}{478 \pi h^2}, \qquad \sigma_3 = \frac{1}{120 \pi h^3}.

The solver uses ``h = dx`` so the support covers three particle spacings,
which is why walls carry three dummy layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractError

H_OVER_DX = 1.0
SUPPORT_FACTOR = 3.0

_NORMALIZATION = {
    1: 1.0 / 120.0,
    2: 7.0 / (478.0 * np.pi),
    3: 1.0 / (120.0 * np.pi),
}


@dataclass(frozen=True)
class KernelSpec:
    h: float
    dim: int

    def __post_init__(self):
        if not self.h > 0:
            raise ContractError("smoothing length must be positive")
        if self.dim not in _NORMALIZATION:
            raise ContractError(f"unsupported dimension {self.dim}")

    @property
    def support_radius(self) -> float:
        return SUPPORT_FACTOR * self.h

    @property
    def normalization(self) -> float:
        return _NORMALIZATION[self.dim] / self.h**self.dim

    @classmethod
    def from_dx(cls, dx: float, dim: int) -> "KernelSpec":
        return cls(h=H_OVER_DX * dx, dim=dim)


def _pow4(t):
    t2 = t * t
    return t2 * t2


def _shape_and_derivative(q):
    t3 = np.maximum(3.0 - q, 0.0)
    t2 = np.maximum(2.0 - q, 0.0)
    t1 = np.maximum(1.0 - q, 0.0)
    p3, p2, p1 = _pow4(t3), _pow4(t2), _pow4(t1)
    w = p3 * t3 - 6.0 * p2 * t2 + 15.0 * p1 * t1
    dw = -5.0 * (p3 - 6.0 * p2 + 15.0 * p1)
    return w, dw


def _shape(q):
    return _shape_and_derivative(q)[0]


def _shape_derivative(q):
    return _shape_and_derivative(q)[1]


def kernel_value(r, spec: KernelSpec):
    """Kernel weight ``W(r)``; zero at and beyond ``3h``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ContractError("kernel_value requires non-negative distances")
    return spec.normalization * _shape(r / spec.h)


def kernel_derivative(r, spec: KernelSpec):
    """Radial derivative ``dW/dr``."""
    r = np.asarray(r, dtype=np.float64)
    return spec.normalization / spec.h * _shape_derivative(r / spec.h)


def kernel_gradient(displacement, spec: KernelSpec):
    """Gradient of ``W(|d|)`` with respect to the first point, ``dW/dr * d/|d|``.

    Zero for a zero displacement and outside the support.
    """
    d = np.asarray(displacement, dtype=np.float64)
    r = np.sqrt(np.sum(d * d, axis=-1))
    return grad_from_distance(d, r, spec)


def kernel_value_and_derivative(r, spec: KernelSpec):
    """``(W(r), dW/dr)`` in one pass."""
    r = np.asarray(r, dtype=np.float64)
    w, dw = _shape_and_derivative(r / spec.h)
    return spec.normalization * w, spec.normalization / spec.h * dw


def grad_from_distance(d, r, spec: KernelSpec):
    """Same as :func:`kernel_gradient` for precomputed distances."""
    safe_r = np.where(r > 0, r, 1.0)
    coef = np.where(r > 0, kernel_derivative(r, spec) / safe_r, 0.0)
    return coef[..., None] * d
